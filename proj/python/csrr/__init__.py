"""Python bindings for the CSRR dialogue model core."""

from ._csrr import (  # noqa: F401
    CsrrError,
    Mode,
    Model,
    ModelConfig,
    TrainConfig,
    Vocabulary,
    anneal_weight,
    count_parameters,
    distinct_n,
    embedding_average,
    embedding_extrema,
    embedding_greedy,
    gaussian_kl,
    generate,
    load_checkpoint,
    save_checkpoint,
    softplus,
    split_sizes,
    tokenize,
    train_steps,
)
