#include "csrr/checkpoint.hpp"
#include "csrr/corpus.hpp"
#include "csrr/error.hpp"
#include "csrr/inference.hpp"
#include "csrr/layers.hpp"
#include "csrr/metrics.hpp"
#include "csrr/model.hpp"
#include "csrr/training.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <map>

namespace py = pybind11;
using namespace csrr;

namespace {

metrics::EmbeddingTable make_table(const std::map<std::string, Eigen::VectorXd>& vectors) {
  if (vectors.empty()) throw Error("embeddings.empty", "no vectors");
  metrics::EmbeddingTable table(static_cast<std::size_t>(vectors.begin()->second.size()));
  for (const auto& [w, v] : vectors) table.add(w, v);
  return table;
}

corpus::Conversation encode_texts(const std::vector<std::string>& texts, const corpus::Vocabulary& vocab,
                                  std::size_t pad_length) {
  corpus::Conversation c;
  for (const auto& t : texts) c.utterances.push_back(corpus::encode_utterance(t, vocab, pad_length));
  return c;
}

py::dict breakdown_dict(const model::ElboBreakdown& b) {
  py::dict d;
  d["loss"] = b.loss();
  d["recon_nll"] = b.recon_nll;
  d["kl_c"] = b.kl_c;
  d["kl_p"] = b.kl_p;
  d["kl_q"] = b.kl_q;
  d["kl_r"] = b.kl_r;
  d["kl_terms"] = b.kl_terms;
  d["anneal_weight"] = b.anneal_weight;
  d["token_count"] = b.token_count;
  d["correct_tokens"] = b.correct_tokens;
  return d;
}

std::vector<corpus::Conversation> from_texts(const std::vector<std::vector<std::string>>& convs) {
  std::vector<corpus::Conversation> out;
  for (const auto& conv : convs) {
    corpus::Conversation c;
    for (const auto& t : conv) c.utterances.push_back(corpus::Utterance{t, {}, 0});
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_csrr, m) {
  m.doc() = "CSRR dialogue model core";

  static py::exception<Error> csrr_error(m, "CsrrError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(csrr_error, (e.code() + ": " + e.what()).c_str());
    }
  });

  m.def("tokenize", &corpus::tokenize);
  m.def("anneal_weight", &training::anneal_weight, py::arg("step"), py::arg("kl_anneal_steps"));
  m.def("softplus", py::overload_cast<double>(&nn::softplus));
  m.def(
      "gaussian_kl",
      [](const Eigen::VectorXd& qmu, const Eigen::VectorXd& qs, const Eigen::VectorXd& pmu, const Eigen::VectorXd& ps) {
        return nn::gaussian_kl({qmu, qs}, {pmu, ps});
      },
      py::arg("q_mu"), py::arg("q_sigma"), py::arg("p_mu"), py::arg("p_sigma"));

  m.def(
      "split_sizes",
      [](const std::vector<std::vector<std::string>>& convs, std::uint64_t seed) {
        const auto s = corpus::split_corpus(from_texts(convs), {}, seed);
        return py::make_tuple(s.train.size(), s.valid.size(), s.test.size());
      },
      py::arg("conversations"), py::arg("seed") = 0);

  py::class_<corpus::Vocabulary>(m, "Vocabulary")
      .def_static(
          "build",
          [](const std::vector<std::vector<std::string>>& convs, std::size_t max_size) {
            return corpus::Vocabulary::build(from_texts(convs), max_size);
          },
          py::arg("conversations"), py::arg("max_size") = corpus::Vocabulary::kDefaultMaxSize)
      .def_static("load", &corpus::Vocabulary::load)
      .def("__len__", &corpus::Vocabulary::size)
      .def("id", &corpus::Vocabulary::id)
      .def("token", &corpus::Vocabulary::token)
      .def("tokens", &corpus::Vocabulary::tokens)
      .def("encode", &corpus::Vocabulary::encode)
      .def("decode", [](const corpus::Vocabulary& v, const std::vector<int>& ids) { return v.decode(ids); })
      .def("fingerprint", &corpus::Vocabulary::fingerprint);

  py::enum_<model::Mode>(m, "Mode").value("csrr", model::Mode::csrr).value("hred", model::Mode::hred);

  py::class_<model::ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("hidden_dim", &model::ModelConfig::hidden_dim)
      .def_readwrite("embed_dim", &model::ModelConfig::embed_dim)
      .def_readwrite("latent_dim", &model::ModelConfig::latent_dim)
      .def_readwrite("pad_length", &model::ModelConfig::pad_length)
      .def_readwrite("max_conv_length", &model::ModelConfig::max_conv_length)
      .def_readwrite("vocab_size", &model::ModelConfig::vocab_size)
      .def_readwrite("mode", &model::ModelConfig::mode);
  m.def("count_parameters", &model::count_parameters);

  py::class_<model::Model>(m, "Model")
      .def(py::init<model::ModelConfig, std::uint64_t>(), py::arg("config"), py::arg("seed") = 0)
      .def_property_readonly("config", &model::Model::config)
      .def("parameter_count", [](const model::Model& net) { return net.params().total_size(); })
      .def(
          "elbo",
          [](model::Model& net, const std::vector<std::string>& texts, const corpus::Vocabulary& vocab,
             double lambda) {
            model::ZeroNoise noise;
            return breakdown_dict(net.forward_train(encode_texts(texts, vocab, net.config().pad_length), noise, lambda));
          },
          py::arg("utterances"), py::arg("vocab"), py::arg("anneal_weight") = 1.0);

  py::class_<training::TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("learning_rate", &training::TrainConfig::learning_rate)
      .def_readwrite("clip_norm", &training::TrainConfig::clip_norm)
      .def_readwrite("batch_size", &training::TrainConfig::batch_size)
      .def_readwrite("kl_anneal_steps", &training::TrainConfig::kl_anneal_steps)
      .def_readwrite("max_steps", &training::TrainConfig::max_steps)
      .def_readwrite("seed", &training::TrainConfig::seed);

  m.def(
      "train_steps",
      [](model::Model& net, const std::vector<std::vector<std::string>>& convs, const corpus::Vocabulary& vocab,
         const training::TrainConfig& config, std::size_t steps) {
        const auto encoded = corpus::encode_all(from_texts(convs), vocab, net.config().pad_length);
        training::Trainer trainer(net, config);
        std::vector<double> losses;
        for (std::size_t i = 0; i < steps; ++i) losses.push_back(trainer.step(encoded).loss);
        return losses;
      },
      py::arg("model"), py::arg("conversations"), py::arg("vocab"), py::arg("config"), py::arg("steps"));

  m.def(
      "generate",
      [](model::Model& net, const corpus::Vocabulary& vocab, const std::vector<std::string>& history,
         const std::string& strategy, double temperature, const std::string& latent_mode, std::size_t num_candidates,
         std::uint64_t seed) {
        inference::GenerationOptions opts;
        opts.strategy = inference::parse_strategy(strategy);
        opts.temperature = temperature;
        opts.latent_mode = inference::parse_latent_mode(latent_mode);
        opts.num_candidates = num_candidates;
        opts.seed = seed;
        opts.max_tokens = net.config().pad_length;
        const auto conv = encode_texts(history, vocab, net.config().pad_length);
        std::vector<std::string> out;
        for (const auto& c : inference::generate_response(net, conv.utterances, opts)) out.push_back(vocab.decode(c.tokens));
        return out;
      },
      py::arg("model"), py::arg("vocab"), py::arg("history"), py::arg("strategy") = "greedy",
      py::arg("temperature") = 1.0, py::arg("latent_mode") = "sample", py::arg("num_candidates") = 1,
      py::arg("seed") = 0);

  m.def(
      "save_checkpoint",
      [](const std::filesystem::path& path, const model::Model& net, const corpus::Vocabulary& vocab) {
        training::save_checkpoint(path, net, {}, vocab);
      },
      py::arg("path"), py::arg("model"), py::arg("vocab"));
  m.def("load_checkpoint", [](const std::filesystem::path& path) {
    auto loaded = training::load_checkpoint(path);
    return py::make_tuple(std::move(loaded.model), std::move(loaded.vocab), loaded.state.global_step);
  });

  m.def("distinct_n", [](const std::vector<std::vector<std::string>>& responses, std::size_t n) {
    return metrics::distinct_n(responses, n);
  });
  auto pair_metric = [&m](const char* name, auto fn) {
    m.def(name, [fn](const std::vector<std::string>& resp, const std::vector<std::string>& ref,
                     const std::map<std::string, Eigen::VectorXd>& vectors) -> std::optional<double> {
      return fn(resp, ref, make_table(vectors));
    });
  };
  pair_metric("embedding_average", [](auto& a, auto& b, const auto& t) { return metrics::embedding_average(a, b, t); });
  pair_metric("embedding_extrema", [](auto& a, auto& b, const auto& t) { return metrics::embedding_extrema(a, b, t); });
  pair_metric("embedding_greedy", [](auto& a, auto& b, const auto& t) { return metrics::embedding_greedy(a, b, t); });
}
