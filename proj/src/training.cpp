#include "csrr/training.hpp"

#include "csrr/checkpoint.hpp"
#include "csrr/error.hpp"
#include "csrr/seed.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace csrr::training {

namespace {

constexpr std::uint64_t kNoiseStream = 0x6e6f697365ULL;
constexpr std::uint64_t kBatchStream = 0x6261746368ULL;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw Error("config.value", "config key " + key + ": not a number: " + value);
  }
}

std::uint64_t parse_uint(const std::string& key, const std::string& value) {
  if (value.empty() || value.find_first_not_of("0123456789") != std::string::npos)
    throw Error("config.value", "config key " + key + ": not a non-negative integer: " + value);
  try {
    return std::stoull(value);
  } catch (const std::exception&) {
    throw Error("config.value", "config key " + key + ": out of range: " + value);
  }
}

}  // namespace

void TrainConfig::validate() const {
  auto positive = [](double v) { return v > 0.0 && std::isfinite(v); };
  if (!positive(learning_rate) || !positive(beta1) || !positive(beta2) || !positive(epsilon) ||
      !positive(clip_norm))
    throw Error("config.value", "learning_rate, betas, epsilon and clip_norm must be positive");
  if (beta1 >= 1.0 || beta2 >= 1.0) throw Error("config.value", "adam betas must be below 1");
  if (batch_size < 1 || kl_anneal_steps < 1 || max_steps < 1 || checkpoint_every < 1)
    throw Error("config.value", "batch_size, kl_anneal_steps, max_steps and checkpoint_every must be >= 1");
}

ConfigFile parse_config(std::istream& in) {
  ConfigFile out;
  TrainConfig& c = out.train;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw Error("config.syntax", "config line " + std::to_string(line_no) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "learning_rate") c.learning_rate = parse_double(key, value);
    else if (key == "beta1") c.beta1 = parse_double(key, value);
    else if (key == "beta2") c.beta2 = parse_double(key, value);
    else if (key == "epsilon") c.epsilon = parse_double(key, value);
    else if (key == "clip_norm") c.clip_norm = parse_double(key, value);
    else if (key == "batch_size") c.batch_size = parse_uint(key, value);
    else if (key == "kl_anneal_steps") c.kl_anneal_steps = parse_uint(key, value);
    else if (key == "max_steps") c.max_steps = parse_uint(key, value);
    else if (key == "seed") c.seed = parse_uint(key, value);
    else if (key == "checkpoint_every") c.checkpoint_every = parse_uint(key, value);
    else if (key == "hidden_dim" || key == "embed_dim" || key == "latent_dim")
      out.model_dims[key] = parse_uint(key, value);
    else
      throw Error("config.key", "config line " + std::to_string(line_no) + ": unknown key " + key);
  }
  c.validate();
  return out;
}

ConfigFile load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("config.io", "cannot open config " + path.string());
  return parse_config(in);
}

double anneal_weight(std::size_t step, std::size_t kl_anneal_steps) {
  if (kl_anneal_steps == 0 || step >= kl_anneal_steps) return 1.0;
  return static_cast<double>(step) / static_cast<double>(kl_anneal_steps);
}

ClipResult clip_gradients(nn::ParamStore& params, double clip_norm) {
  double sq = 0.0;
  for (const auto& p : params.all()) {
    if (!p->grad.allFinite()) throw Error("train.nonfinite_grad", "non-finite gradient in parameter " + p->name);
    sq += p->grad.squaredNorm();
  }
  ClipResult result;
  result.pre_norm = std::sqrt(sq);
  result.post_norm = result.pre_norm;
  if (result.pre_norm > clip_norm) {
    const double factor = clip_norm / result.pre_norm;
    for (const auto& p : params.all()) p->grad *= factor;
    result.post_norm = clip_norm;
  }
  return result;
}

void adam_step(nn::ParamStore& params, AdamState& state, double lr, double beta1, double beta2, double epsilon) {
  const auto all = params.all();
  if (state.m.empty()) {
    for (const auto& p : all) {
      state.m.push_back(nn::Mat::Zero(p->value.rows(), p->value.cols()));
      state.v.push_back(nn::Mat::Zero(p->value.rows(), p->value.cols()));
    }
  }
  if (state.m.size() != all.size() || state.v.size() != all.size())
    throw Error("adam.shape", "optimizer state does not match the parameter set");
  ++state.t;
  const double correction1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double correction2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < all.size(); ++i) {
    nn::Param& p = *all[i];
    nn::Mat& m = state.m[i];
    nn::Mat& v = state.v[i];
    if (m.rows() != p.grad.rows() || m.cols() != p.grad.cols())
      throw Error("adam.shape", "optimizer state shape mismatch for " + p.name);
    m = beta1 * m + (1.0 - beta1) * p.grad;
    v = beta2 * v + (1.0 - beta2) * p.grad.cwiseProduct(p.grad);
    p.value.array() -= lr * (m.array() / correction1) / ((v.array() / correction2).sqrt() + epsilon);
  }
}

std::string metrics_row(const StepLog& log) {
  return fmt::format("{},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g}", log.step, log.loss,
                     log.recon_nll, log.kl_c, log.kl_p, log.kl_q, log.kl_r, log.lambda);
}

EvalSummary evaluate_loss(model::Model& model, std::span<const corpus::Conversation> conversations) {
  EvalSummary s;
  std::size_t tokens = 0, correct = 0;
  for (const auto& conv : conversations) {
    model::ZeroNoise noise;
    const auto e = model.forward_train(conv, noise, 1.0);
    s.loss += e.loss();
    s.recon_nll += e.recon_nll;
    s.kl_total += e.kl_total();
    tokens += e.token_count;
    correct += e.correct_tokens;
  }
  s.conversations = conversations.size();
  if (s.conversations > 0) {
    const double n = static_cast<double>(s.conversations);
    s.loss /= n;
    s.recon_nll /= n;
    s.kl_total /= n;
  }
  s.token_accuracy = tokens > 0 ? static_cast<double>(correct) / static_cast<double>(tokens) : 0.0;
  return s;
}

Trainer::Trainer(model::Model& model, TrainConfig config, TrainState state)
    : model_(model), config_(config), state_(std::move(state)) {
  config_.validate();
}

const corpus::Batch& Trainer::batch_for(std::span<const corpus::Conversation> train, std::size_t step) {
  const std::size_t per_epoch = (train.size() + config_.batch_size - 1) / config_.batch_size;
  const std::size_t epoch = step / per_epoch;
  if (epoch != cached_epoch_ || cached_source_ != train.data()) {
    epoch_batches_ = corpus::make_batches(train, config_.batch_size, mix_seed(mix_seed(config_.seed, kBatchStream), epoch),
                                          model_.config().pad_length);
    cached_epoch_ = epoch;
    cached_source_ = train.data();
  }
  return epoch_batches_[step % per_epoch];
}

StepLog Trainer::step(std::span<const corpus::Conversation> train) {
  if (train.empty()) throw Error("train.empty", "training split is empty");
  const std::size_t step = state_.global_step;
  const corpus::Batch& batch = batch_for(train, step);
  const double lambda = anneal_weight(step, config_.kl_anneal_steps);

  model_.params().zero_grad();
  model::GaussianNoise noise(mix_seed(mix_seed(config_.seed, kNoiseStream), step));
  const double scale = 1.0 / static_cast<double>(batch.batch_size);
  StepLog log;
  log.step = step;
  log.lambda = lambda;
  std::size_t tokens = 0, correct = 0;
  for (std::size_t b = 0; b < batch.batch_size; ++b) {
    const auto e = model_.forward_train(batch.conversation(b), noise, lambda, scale);
    log.loss += scale * e.loss();
    log.recon_nll += scale * e.recon_nll;
    log.kl_c += scale * e.kl_c;
    log.kl_p += scale * e.kl_p;
    log.kl_q += scale * e.kl_q;
    log.kl_r += scale * e.kl_r;
    tokens += e.token_count;
    correct += e.correct_tokens;
  }
  log.token_accuracy = tokens ? static_cast<double>(correct) / static_cast<double>(tokens) : 0.0;
  if (!std::isfinite(log.loss))
    throw Error("train.nonfinite_loss", "non-finite training loss at step " + std::to_string(step));

  log.grad_norm = clip_gradients(model_.params(), config_.clip_norm).pre_norm;
  adam_step(model_.params(), state_.adam, config_.learning_rate, config_.beta1, config_.beta2, config_.epsilon);
  ++state_.global_step;
  return log;
}

RunResult run_training(model::Model& model, std::span<const corpus::Conversation> train,
                       std::span<const corpus::Conversation> valid, const TrainConfig& config,
                       const RunOptions& options, TrainState state) {
  if (train.empty()) throw Error("train.empty", "training split is empty");
  if (options.vocab == nullptr) throw Error("train.vocab", "run_training needs the vocabulary");
  std::filesystem::create_directories(options.output_dir);
  const auto metrics_path = options.output_dir / "metrics.csv";
  const auto last_path = options.output_dir / "last.ckpt";
  const auto best_path = options.output_dir / "best.ckpt";

  const bool resuming = state.global_step > 0;
  std::ofstream metrics(metrics_path, resuming ? std::ios::app : std::ios::trunc);
  if (!metrics) throw Error("train.io", "cannot open " + metrics_path.string());
  if (!resuming) metrics << kMetricsHeader << '\n';

  Trainer trainer(model, config, std::move(state));
  RunResult result;
  std::size_t ran = 0;

  auto checkpoint = [&] {
    TrainState& st = trainer.state();
    if (!valid.empty()) {
      const double loss = evaluate_loss(model, valid).loss;
      result.last_valid_loss = loss;
      spdlog::info("step {} validation loss {:.4f}", st.global_step, loss);
      if (loss < st.best_valid_loss) {
        st.best_valid_loss = loss;
        save_checkpoint(best_path, model, st, *options.vocab);
      }
    } else {
      save_checkpoint(best_path, model, st, *options.vocab);
    }
    save_checkpoint(last_path, model, st, *options.vocab);
  };

  while (trainer.state().global_step < config.max_steps &&
         (options.step_budget == 0 || ran < options.step_budget)) {
    StepLog log = trainer.step(train);
    ++ran;
    metrics << metrics_row(log) << '\n';
    metrics.flush();
    if (options.on_step) options.on_step(log);
    if (log.step % 100 == 0)
      spdlog::debug("step {} loss {:.4f} recon {:.4f} lambda {:.4f}", log.step, log.loss, log.recon_nll, log.lambda);
    result.log.push_back(log);
    if (trainer.state().global_step % config.checkpoint_every == 0) checkpoint();
  }
  if (ran == 0 || trainer.state().global_step % config.checkpoint_every != 0) checkpoint();
  result.state = trainer.state();
  return result;
}

}  // namespace csrr::training
