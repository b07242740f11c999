#include "csrr/inference.hpp"

#include "csrr/error.hpp"
#include "csrr/seed.hpp"

#include <cmath>
#include <fstream>
#include <limits>

namespace csrr::inference {

namespace {

using model::LatentSource;
using nn::Var;
using nn::Vec;

constexpr std::uint64_t kLatentStream = 0x6c6174656e74ULL;
constexpr std::uint64_t kTokenStream = 0x746f6b656eULL;

std::span<const corpus::Utterance> recent(const model::Model& model, std::span<const corpus::Utterance> history) {
  if (history.empty()) throw Error("inference.empty_history", "history needs at least the query utterance");
  const std::size_t keep = model.config().max_conv_length - 1;
  return history.size() > keep ? history.subspan(history.size() - keep) : history;
}

Vec take(const nn::Tape& tape, nn::GaussianVars g, LatentMode mode, model::NoiseSource& noise) {
  const Vec eps = mode == LatentMode::mean ? Vec::Zero(tape.value(g.mu).size()) : noise.next(tape.value(g.mu).size());
  return nn::gaussian_sample(nn::gaussian_values(tape, g), eps);
}

}  // namespace

std::string_view to_string(Strategy s) { return s == Strategy::greedy ? "greedy" : "sample"; }
std::string_view to_string(LatentMode m) { return m == LatentMode::sample ? "sample" : "mean"; }
std::string_view to_string(Speaker s) { return s == Speaker::user ? "user" : "model"; }

Strategy parse_strategy(std::string_view text) {
  if (text == "greedy") return Strategy::greedy;
  if (text == "sample") return Strategy::sample;
  throw Error("options.strategy", "unknown strategy: " + std::string(text));
}

LatentMode parse_latent_mode(std::string_view text) {
  if (text == "sample") return LatentMode::sample;
  if (text == "mean") return LatentMode::mean;
  throw Error("options.latent_mode", "unknown latent mode: " + std::string(text));
}

void GenerationOptions::validate(const model::ModelConfig& config) const {
  if (!(temperature > 0.0) || !std::isfinite(temperature))
    throw Error("options.temperature", "temperature must be positive");
  if (max_tokens < 1 || max_tokens > config.pad_length)
    throw Error("options.max_tokens", "max_tokens must be in [1, " + std::to_string(config.pad_length) + "]");
  if (num_candidates < 1) throw Error("options.num_candidates", "num_candidates must be at least 1");
}

model::LatentBundle infer_latents(model::Model& model, std::span<const corpus::Utterance> history,
                                  LatentMode latent_mode, model::NoiseSource& noise) {
  history = recent(model, history);
  model::LatentBundle bundle;
  if (!model.config().has_latents()) return bundle;

  const bool mean = latent_mode == LatentMode::mean;
  nn::Tape tape;
  std::vector<Var> vs;
  for (const auto& u : history) vs.push_back(model.encode_utterance(tape, u));

  // Only v_0 .. v_(n-1) exist at test time.
  bundle.z_c = take(tape, model.posterior_z_c(tape, vs), latent_mode, noise);
  bundle.z_c_source = mean ? LatentSource::posterior_mean : LatentSource::posterior_sample;
  Var z_c = tape.input(bundle.z_c);

  const auto states = model.context_roll(tape, vs, z_c);
  const std::size_t n = vs.size();
  bundle.z_p = take(tape, model.prior_z_p(tape, states[n - 1], z_c), latent_mode, noise);
  bundle.z_p_source = mean ? LatentSource::prior_mean : LatentSource::prior_sample;
  Var z_p = tape.input(bundle.z_p);

  bundle.z_r = take(tape, model.prior_z_i(tape, states[n], z_c, z_p), latent_mode, noise);
  bundle.z_r_source = bundle.z_p_source;
  return bundle;
}

Candidate decode_response(model::Model& model, std::span<const corpus::Utterance> history,
                          const model::LatentBundle& latents, Strategy strategy, double temperature,
                          std::size_t max_tokens, std::mt19937_64& rng) {
  history = recent(model, history);
  nn::Tape tape;
  std::vector<Var> vs;
  for (const auto& u : history) vs.push_back(model.encode_utterance(tape, u));

  model::DecoderLatents z;
  if (model.config().has_latents()) {
    const auto d = static_cast<Eigen::Index>(model.config().latent_dim);
    if (latents.z_c.size() != d || latents.z_p.size() != d || latents.z_r.size() != d)
      throw Error("inference.latents", "latent bundle does not match the model");
    z = {tape.input(latents.z_c), tape.input(latents.z_p), tape.input(latents.z_r)};
  }
  const auto states = model.context_roll(tape, vs, z.z_c);
  Var condition = model.decoder_condition(tape, z);
  Var h = model.decoder_init(tape, states.back(), condition);

  Candidate out;
  out.latents = latents;
  int prev = corpus::kSos;
  for (std::size_t step = 0; step < max_tokens; ++step) {
    auto [next, logits_var] = model.decoder_step(tape, h, prev, condition);
    h = next;
    Vec logits = tape.value(logits_var);
    // PAD and SOS never appear as outputs.
    logits(corpus::kPad) = -std::numeric_limits<double>::infinity();
    logits(corpus::kSos) = -std::numeric_limits<double>::infinity();
    const double m = logits.maxCoeff();
    const double lse = m + std::log((logits.array() - m).exp().sum());

    Eigen::Index choice = 0;
    if (strategy == Strategy::greedy) {
      logits.maxCoeff(&choice);
    } else {
      const Vec scaled = (logits.array() - m) / temperature;
      const Vec weights = scaled.array().exp();
      double u = std::generate_canonical<double, 64>(rng) * weights.sum();
      choice = weights.size() - 1;
      for (Eigen::Index i = 0; i < weights.size(); ++i) {
        u -= weights(i);
        if (u < 0.0 && weights(i) > 0.0) {
          choice = i;
          break;
        }
      }
      while (weights(choice) == 0.0) --choice;
    }
    const int token = static_cast<int>(choice);
    if (token == corpus::kEos) {
      out.ended = true;
      break;
    }
    out.tokens.push_back(token);
    out.token_logprobs.push_back(logits(choice) - lse);
    prev = token;
  }
  return out;
}

std::vector<Candidate> generate_response(model::Model& model, std::span<const corpus::Utterance> history,
                                         const GenerationOptions& options) {
  options.validate(model.config());
  std::mt19937_64 token_rng(mix_seed(options.seed, kTokenStream));
  const std::uint64_t latent_seed = mix_seed(mix_seed(options.seed, kLatentStream), options.latent_draw);
  std::vector<Candidate> out;
  for (std::size_t c = 0; c < options.num_candidates; ++c) {
    model::GaussianNoise noise(mix_seed(latent_seed, c));
    const auto bundle = infer_latents(model, history, options.latent_mode, noise);
    out.push_back(decode_response(model, history, bundle, options.strategy, options.temperature,
                                  options.max_tokens, token_rng));
  }
  return out;
}

Session::Session(std::string id, const corpus::Vocabulary& vocab, std::size_t capacity, std::size_t pad_length)
    : id_(std::move(id)),
      vocab_(&vocab),
      capacity_(capacity),
      pad_length_(pad_length),
      created_(Clock::now()),
      updated_(created_) {
  if (capacity_ < 1) throw Error("session.capacity", "session capacity must be at least 1");
}

void Session::append(Speaker speaker, std::string_view text) {
  append(speaker, corpus::encode_utterance(text, *vocab_, pad_length_));
}

void Session::append(Speaker speaker, corpus::Utterance utterance) {
  turns_.push_back(Turn{speaker, std::move(utterance)});
  while (turns_.size() > capacity_) turns_.pop_front();
  updated_ = Clock::now();
}

void Session::replace_last_model_turn(std::string_view text) {
  replace_last_model_turn(corpus::encode_utterance(text, *vocab_, pad_length_));
}

void Session::replace_last_model_turn(corpus::Utterance utterance) {
  if (!last_is_model()) throw Error("session.no_model_turn", "the last turn is not a model turn");
  turns_.back().utterance = std::move(utterance);
  updated_ = Clock::now();
}

void Session::clear() {
  turns_.clear();
  updated_ = Clock::now();
}

std::vector<corpus::Utterance> Session::utterances() const {
  std::vector<corpus::Utterance> out;
  out.reserve(turns_.size());
  for (const auto& t : turns_) out.push_back(t.utterance);
  return out;
}

GeneratedCorpus batch_generate(model::Model& model, const corpus::Vocabulary& vocab,
                               std::span<const corpus::Conversation> conversations, const GenerationOptions& options) {
  GeneratedCorpus out;
  for (std::size_t i = 0; i < conversations.size(); ++i) {
    const auto& conv = conversations[i];
    if (conv.size() < 2) throw Error("inference.short", "conversation " + std::to_string(i) + " has no context");
    const std::span<const corpus::Utterance> context(conv.utterances.data(), conv.size() - 1);
    GenerationOptions opts = options;
    opts.num_candidates = 1;
    opts.seed = mix_seed(options.seed, i);
    const auto candidates = generate_response(model, context, opts);
    out.responses.push_back(vocab.decode(candidates.front().tokens));

    std::string reference;
    for (const auto& tok : corpus::tokenize(conv.utterances.back().raw_text)) {
      if (!reference.empty()) reference.push_back(' ');
      reference += tok;
    }
    out.references.push_back(std::move(reference));
  }
  return out;
}

void write_lines(const std::filesystem::path& path, std::span<const std::string> lines) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("io.write", "cannot write " + path.string());
  for (const auto& l : lines) out << l << '\n';
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io.read", "cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

}  // namespace csrr::inference
