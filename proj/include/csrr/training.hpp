#pragma once

#include "csrr/corpus.hpp"
#include "csrr/model.hpp"
#include "csrr/tape.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace csrr::training {

struct TrainConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 1.0;
  std::size_t batch_size = 32;
  // 15000 suits small corpora, 250000 large ones.
  std::size_t kl_anneal_steps = 15000;
  std::size_t max_steps = 100000;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 1000;

  void validate() const;
};

// Flat `key = value` text; '#' starts a comment. Keys are the TrainConfig
// field names; hidden_dim, embed_dim and latent_dim are also accepted and
// land in `model`.
struct ConfigFile {
  TrainConfig train;
  std::map<std::string, std::size_t> model_dims;
};
ConfigFile parse_config(std::istream& in);
ConfigFile load_config(const std::filesystem::path& path);

// Linear warm-up of the KL weight: min(1, step / kl_anneal_steps).
double anneal_weight(std::size_t step, std::size_t kl_anneal_steps);

struct ClipResult {
  double pre_norm = 0.0;
  double post_norm = 0.0;
};

// Rescales all gradients so the global L2 norm is at most clip_norm.
// Throws (naming the parameter) on a non-finite gradient.
ClipResult clip_gradients(nn::ParamStore& params, double clip_norm);

struct AdamState {
  std::size_t t = 0;
  std::vector<nn::Mat> m;
  std::vector<nn::Mat> v;
};

// Bias-corrected Adam on every parameter of the store, in store order.
void adam_step(nn::ParamStore& params, AdamState& state, double lr, double beta1, double beta2, double epsilon);

struct TrainState {
  std::size_t global_step = 0;
  double best_valid_loss = std::numeric_limits<double>::infinity();
  AdamState adam;
};

struct StepLog {
  std::size_t step = 0;
  double loss = 0.0;
  double recon_nll = 0.0;
  double kl_c = 0.0;
  double kl_p = 0.0;
  double kl_q = 0.0;
  double kl_r = 0.0;
  double lambda = 0.0;
  double grad_norm = 0.0;
  double token_accuracy = 0.0;
};

inline constexpr const char* kMetricsHeader = "step,loss,recon_nll,kl_c,kl_p,kl_q,kl_r,lambda";
std::string metrics_row(const StepLog& log);

// Mean per-conversation ElboBreakdown fields over a set of conversations.
struct EvalSummary {
  double loss = 0.0;
  double recon_nll = 0.0;
  double kl_total = 0.0;
  double token_accuracy = 0.0;
  std::size_t conversations = 0;
};

// Teacher-forced, lambda = 1, latents at their posterior means. Uses the
// same forward pass as training, without gradients.
EvalSummary evaluate_loss(model::Model& model, std::span<const corpus::Conversation> conversations);

class Trainer {
 public:
  Trainer(model::Model& model, TrainConfig config, TrainState state = {});

  // One optimizer step on the batch scheduled for state().global_step.
  StepLog step(std::span<const corpus::Conversation> train);

  const TrainState& state() const { return state_; }
  TrainState& state() { return state_; }
  const TrainConfig& config() const { return config_; }

 private:
  const corpus::Batch& batch_for(std::span<const corpus::Conversation> train, std::size_t step);

  model::Model& model_;
  TrainConfig config_;
  TrainState state_;
  std::size_t cached_epoch_ = std::numeric_limits<std::size_t>::max();
  const void* cached_source_ = nullptr;
  std::vector<corpus::Batch> epoch_batches_;
};

struct RunOptions {
  std::filesystem::path output_dir;
  const corpus::Vocabulary* vocab = nullptr;
  // Stop after this many steps in this invocation (0: run to max_steps).
  std::size_t step_budget = 0;
  std::function<void(const StepLog&)> on_step;
};

struct RunResult {
  TrainState state;
  std::vector<StepLog> log;
  std::optional<double> last_valid_loss;
};

// Full loop: logs every step to metrics.csv, validates and writes last.ckpt
// every checkpoint_every steps and at the end, best.ckpt on improvement.
// A non-finite loss aborts with the previous checkpoints left untouched.
RunResult run_training(model::Model& model, std::span<const corpus::Conversation> train,
                       std::span<const corpus::Conversation> valid, const TrainConfig& config,
                       const RunOptions& options, TrainState state = {});

}  // namespace csrr::training
