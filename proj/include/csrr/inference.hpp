#pragma once

#include "csrr/corpus.hpp"
#include "csrr/model.hpp"

#include <chrono>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace csrr::inference {

enum class Strategy { greedy, sample };
enum class LatentMode { sample, mean };

std::string_view to_string(Strategy s);
std::string_view to_string(LatentMode m);
Strategy parse_strategy(std::string_view text);
LatentMode parse_latent_mode(std::string_view text);

struct GenerationOptions {
  Strategy strategy = Strategy::greedy;
  double temperature = 1.0;  // ignored by greedy decoding
  std::size_t max_tokens = corpus::kDefaultPadLength;
  LatentMode latent_mode = LatentMode::sample;
  std::size_t num_candidates = 1;
  std::uint64_t seed = 0;
  // Selects a fresh latent stream for the same seed (used by resampling);
  // token sampling is unaffected.
  std::uint64_t latent_draw = 0;

  void validate(const model::ModelConfig& config) const;
};

// Latents for generating the response to `history` (query last). z_c comes
// from its posterior over the observed utterances; z_p and z_r fall back to
// their priors because their posteriors need the unseen response. Only the
// most recent max_conv_length - 1 utterances are used.
model::LatentBundle infer_latents(model::Model& model, std::span<const corpus::Utterance> history,
                                  LatentMode latent_mode, model::NoiseSource& noise);

struct Candidate {
  std::vector<int> tokens;            // EOS excluded
  std::vector<double> token_logprobs; // log p(token) under the decoder, aligned with tokens
  bool ended = false;                 // stopped on EOS rather than max_tokens
  model::LatentBundle latents;
};

// Autoregressive decoding from SOS with fixed latents. Greedy decoding is a
// pure function of (parameters, history, latents); sampling draws from
// softmax(logits / temperature) using `rng`.
Candidate decode_response(model::Model& model, std::span<const corpus::Utterance> history,
                          const model::LatentBundle& latents, Strategy strategy, double temperature,
                          std::size_t max_tokens, std::mt19937_64& rng);

// num_candidates draws; each gets fresh latents when latent_mode is sample.
std::vector<Candidate> generate_response(model::Model& model, std::span<const corpus::Utterance> history,
                                         const GenerationOptions& options);

enum class Speaker { user, model };
std::string_view to_string(Speaker s);

struct Turn {
  Speaker speaker = Speaker::user;
  corpus::Utterance utterance;
};

// Alternating-speaker history capped at `capacity` turns, oldest evicted first.
class Session {
 public:
  using Clock = std::chrono::system_clock;

  Session(std::string id, const corpus::Vocabulary& vocab, std::size_t capacity,
          std::size_t pad_length = corpus::kDefaultPadLength);

  const std::string& id() const { return id_; }
  const std::deque<Turn>& turns() const { return turns_; }
  std::size_t capacity() const { return capacity_; }
  Clock::time_point created() const { return created_; }
  Clock::time_point updated() const { return updated_; }

  void append(Speaker speaker, std::string_view text);
  void append(Speaker speaker, corpus::Utterance utterance);
  // Replaces the final turn, which must be a model turn.
  void replace_last_model_turn(std::string_view text);
  void replace_last_model_turn(corpus::Utterance utterance);
  bool last_is_model() const { return !turns_.empty() && turns_.back().speaker == Speaker::model; }
  void clear();
  std::vector<corpus::Utterance> utterances() const;

 private:
  std::string id_;
  const corpus::Vocabulary* vocab_;
  std::size_t capacity_;
  std::size_t pad_length_;
  std::deque<Turn> turns_;
  Clock::time_point created_;
  Clock::time_point updated_;
};

struct GeneratedCorpus {
  std::vector<std::string> responses;
  std::vector<std::string> references;
};

// One response per conversation: context = all but the last utterance,
// reference = the last utterance (tokenized text, never shown to the model).
// Conversation i decodes with seed mix(options.seed, i).
GeneratedCorpus batch_generate(model::Model& model, const corpus::Vocabulary& vocab,
                               std::span<const corpus::Conversation> conversations, const GenerationOptions& options);

void write_lines(const std::filesystem::path& path, std::span<const std::string> lines);
std::vector<std::string> read_lines(const std::filesystem::path& path);

}  // namespace csrr::inference
