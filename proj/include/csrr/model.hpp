#pragma once

// The three-level latent hierarchical recurrent dialogue model.
//
//   v_t        = BiGRU_utt(u_t)
//   h_c0       = MLP(z_c)                      (HRED: 0)
//   h_ct       = GRU_ctx(h_c(t-1), [v_(t-1); z_c])
//   z_c        ~ q(z_c | v_0..v_n)   prior N(0, I)
//   z_p        ~ q(z_p | v_q, v_r, h_c(n-1), z_c)   prior p(z_p | h_c(n-1), z_c)
//   z_i        ~ q(z_i | v_i, h_ci, z_c, z_p)       prior p(z_i | h_ci, z_c, z_p), i in {q, r}
//   u_i        ~ Dec(h_ci, z_c, z_p, z_i)
//
// with q = n-1 (query) and r = n (response). HRED mode drops every latent.

#include "csrr/corpus.hpp"
#include "csrr/layers.hpp"
#include "csrr/tape.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace csrr::model {

using nn::Var;
using nn::Vec;

enum class Mode { csrr, hred };

std::string_view to_string(Mode mode);
Mode parse_mode(std::string_view text);

struct ModelConfig {
  std::size_t hidden_dim = 1000;
  std::size_t embed_dim = 500;
  std::size_t latent_dim = 100;
  std::size_t pad_length = corpus::kDefaultPadLength;
  std::size_t max_conv_length = corpus::kDefaultMaxConversationLength;
  std::size_t vocab_size = 0;
  Mode mode = Mode::csrr;

  // Utterance vectors are [forward; backward] of a hidden_dim-wide BiGRU.
  std::size_t utterance_dim() const { return 2 * hidden_dim; }
  bool has_latents() const { return mode == Mode::csrr; }
  void validate() const;
};

enum class LatentSource { posterior_sample, posterior_mean, prior_sample, prior_mean, absent };

std::string_view to_string(LatentSource source);

struct LatentBundle {
  Vec z_c, z_p, z_q, z_r;
  LatentSource z_c_source = LatentSource::absent;
  LatentSource z_p_source = LatentSource::absent;
  LatentSource z_q_source = LatentSource::absent;
  LatentSource z_r_source = LatentSource::absent;
};

struct ElboBreakdown {
  double recon_nll = 0.0;
  double kl_c = 0.0;
  double kl_p = 0.0;
  double kl_q = 0.0;
  double kl_r = 0.0;
  double anneal_weight = 0.0;
  std::size_t token_count = 0;
  // Teacher-forced argmax hits over the reconstructed utterances.
  std::size_t correct_tokens = 0;
  // KL divergences that entered the objective: 4 for CSRR, 0 for HRED.
  std::size_t kl_terms = 0;

  double kl_total() const { return kl_c + kl_p + kl_q + kl_r; }
  double loss() const { return recon_nll + anneal_weight * kl_total(); }
};

// Supplies the standard-normal vectors consumed by reparameterised sampling,
// in the order z_c, z_p, z_q, z_r.
class NoiseSource {
 public:
  virtual ~NoiseSource() = default;
  virtual Vec next(Eigen::Index dim) = 0;
};

class GaussianNoise final : public NoiseSource {
 public:
  explicit GaussianNoise(std::uint64_t seed) : rng_(seed) {}
  Vec next(Eigen::Index dim) override;

 private:
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

// All-zero noise: every latent takes its distribution mean.
class ZeroNoise final : public NoiseSource {
 public:
  Vec next(Eigen::Index dim) override { return Vec::Zero(dim); }
};

// Replays a fixed list of vectors, cycling when exhausted.
class FixedNoise final : public NoiseSource {
 public:
  explicit FixedNoise(std::vector<Vec> values) : values_(std::move(values)) {}
  Vec next(Eigen::Index dim) override;

 private:
  std::vector<Vec> values_;
  std::size_t cursor_ = 0;
};

struct ContextState {
  Var h;
  std::size_t t = 0;
};

// Latents conditioning one decoded utterance; all invalid in HRED mode.
struct DecoderLatents {
  Var z_c;
  Var z_p;
  Var z_i;
};

struct DecodeResult {
  Var nll;
  std::size_t tokens = 0;
  std::size_t correct = 0;
};

class Model {
 public:
  explicit Model(ModelConfig config, std::uint64_t init_seed = 0);

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelConfig& config() const { return config_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

  Var encode_utterance(nn::Tape& tape, const corpus::Utterance& u) const;

  ContextState context_init(nn::Tape& tape, Var z_c) const;
  ContextState context_step(nn::Tape& tape, const ContextState& prev, Var v_prev, Var z_c) const;
  // Runs init plus one step per utterance vector; returns h_c0..h_ck.
  std::vector<ContextState> context_roll(nn::Tape& tape, std::span<const Var> vs, Var z_c) const;

  nn::GaussianVars prior_z_c(nn::Tape& tape) const;
  nn::GaussianVars posterior_z_c(nn::Tape& tape, std::span<const Var> vs) const;
  nn::GaussianVars prior_z_p(nn::Tape& tape, const ContextState& query_state, Var z_c) const;
  nn::GaussianVars prior_z_i(nn::Tape& tape, const ContextState& state_i, Var z_c, Var z_p) const;
  nn::GaussianVars posterior_z_p(nn::Tape& tape, Var v_q, Var v_r, const ContextState& query_state,
                                 Var z_c) const;
  nn::GaussianVars posterior_z_i(nn::Tape& tape, Var v_i, const ContextState& state_i, Var z_c,
                                 Var z_p) const;

  // Decoder pieces, shared by teacher forcing and generation.
  Var decoder_condition(nn::Tape& tape, const DecoderLatents& z) const;
  Var decoder_init(nn::Tape& tape, const ContextState& state_i, Var condition) const;
  // One step consuming prev_token; returns the new state and the logits.
  std::pair<Var, Var> decoder_step(nn::Tape& tape, Var h, int prev_token, Var condition) const;

  DecodeResult decode_nll(nn::Tape& tape, const corpus::Utterance& u, const ContextState& state_i,
                          const DecoderLatents& z) const;

  // Single-sample ELBO for one conversation u_0..u_n. With grad_scale != 0
  // the gradient of grad_scale * loss is added into the parameter grads.
  ElboBreakdown forward_train(const corpus::Conversation& conversation, NoiseSource& noise, double lambda,
                              double grad_scale = 0.0);

 private:
  struct ShapeOnly {};
  Model(ModelConfig config, ShapeOnly);
  void declare();
  friend std::size_t count_parameters(const ModelConfig& config);

  ModelConfig config_;
  nn::ParamStore params_;

  nn::Param* embedding_ = nullptr;
  nn::GruParams utt_fwd_, utt_bwd_;
  nn::Mlp ctx_init_;
  nn::GruParams ctx_gru_;
  nn::GruParams post_c_fwd_, post_c_bwd_;
  nn::GaussianHead post_c_head_;
  nn::GaussianHead prior_p_head_;
  nn::GaussianHead prior_i_head_;
  nn::GaussianHead post_p_head_;
  nn::GaussianHead post_i_head_;
  nn::Mlp dec_init_;
  nn::GruParams dec_gru_;
  nn::Param* out_weight_ = nullptr;
  nn::Param* out_bias_ = nullptr;
};

// Number of scalar parameters a model with this config owns.
std::size_t count_parameters(const ModelConfig& config);

}  // namespace csrr::model
