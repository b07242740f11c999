#include "csrr/model.hpp"

#include "csrr/error.hpp"

#include <cmath>

namespace csrr::model {

namespace {

using Index = Eigen::Index;

Index idx(std::size_t v) { return static_cast<Index>(v); }

void require(bool ok, const char* code, const std::string& message) {
  if (!ok) throw Error(code, message);
}

}  // namespace

std::string_view to_string(Mode mode) { return mode == Mode::csrr ? "csrr" : "hred"; }

Mode parse_mode(std::string_view text) {
  if (text == "csrr") return Mode::csrr;
  if (text == "hred") return Mode::hred;
  throw Error("config.mode", "unknown model mode: " + std::string(text));
}

std::string_view to_string(LatentSource source) {
  switch (source) {
    case LatentSource::posterior_sample: return "posterior_sample";
    case LatentSource::posterior_mean: return "posterior_mean";
    case LatentSource::prior_sample: return "prior_sample";
    case LatentSource::prior_mean: return "prior_mean";
    case LatentSource::absent: return "absent";
  }
  return "absent";
}

void ModelConfig::validate() const {
  require(hidden_dim >= 1 && embed_dim >= 1 && latent_dim >= 1, "config.dims", "model dimensions must be >= 1");
  require(pad_length >= 2, "config.pad_length", "pad_length must be >= 2");
  require(max_conv_length > corpus::kMinUtterancesExclusive, "config.max_conv_length",
          "max_conv_length must exceed 3");
  require(vocab_size > corpus::kNumSpecials, "config.vocab_size", "vocab_size must exceed the 4 special tokens");
}

Vec GaussianNoise::next(Index dim) {
  Vec v(dim);
  for (Index i = 0; i < dim; ++i) v(i) = normal_(rng_);
  return v;
}

Vec FixedNoise::next(Index dim) {
  require(!values_.empty(), "noise.empty", "FixedNoise has no vectors");
  const Vec& v = values_[cursor_ % values_.size()];
  ++cursor_;
  require(v.size() == dim, "noise.shape", "FixedNoise vector has the wrong dimension");
  return v;
}

Model::Model(ModelConfig config, std::uint64_t init_seed) : config_(config) {
  config_.validate();
  declare();
  std::mt19937_64 rng(init_seed);
  for (const auto& p : params_.all()) nn::glorot_init(*p, rng);
}

Model::Model(ModelConfig config, ShapeOnly) : config_(config), params_(false) {
  config_.validate();
  declare();
}

void Model::declare() {
  const Index h = idx(config_.hidden_dim);
  const Index e = idx(config_.embed_dim);
  const Index z = idx(config_.latent_dim);
  const Index v = idx(config_.utterance_dim());
  const Index vocab = idx(config_.vocab_size);
  const bool latent = config_.has_latents();

  embedding_ = &params_.add("embedding", e, vocab);
  utt_fwd_ = nn::make_gru(params_, "utterance.fwd", e, h);
  utt_bwd_ = nn::make_gru(params_, "utterance.bwd", e, h);
  if (latent) ctx_init_ = nn::make_mlp(params_, "context.init", z, h);
  ctx_gru_ = nn::make_gru(params_, "context.gru", latent ? v + z : v, h);
  if (latent) {
    post_c_fwd_ = nn::make_gru(params_, "posterior_c.fwd", v, h);
    post_c_bwd_ = nn::make_gru(params_, "posterior_c.bwd", v, h);
    post_c_head_ = nn::make_gaussian_head(params_, "posterior_c.head", 2 * h, z);
    prior_p_head_ = nn::make_gaussian_head(params_, "prior_p", h + z, z);
    prior_i_head_ = nn::make_gaussian_head(params_, "prior_i", h + 2 * z, z);
    post_p_head_ = nn::make_gaussian_head(params_, "posterior_p", 2 * v + h + z, z);
    post_i_head_ = nn::make_gaussian_head(params_, "posterior_i", v + h + 2 * z, z);
  }
  dec_init_ = nn::make_mlp(params_, "decoder.init", latent ? h + 3 * z : h, h);
  dec_gru_ = nn::make_gru(params_, "decoder.gru", latent ? e + 3 * z : e, h);
  out_weight_ = &params_.add("output.weight", vocab, h);
  out_bias_ = &params_.add("output.bias", vocab, 1);
}

Var Model::encode_utterance(nn::Tape& tape, const corpus::Utterance& u) const {
  require(u.length >= 1 && u.length <= u.token_ids.size(), "model.utterance",
          "encode_utterance: utterance has no tokens");
  std::vector<Var> embedded;
  std::vector<unsigned char> mask;
  embedded.reserve(u.token_ids.size());
  mask.reserve(u.token_ids.size());
  for (std::size_t k = 0; k < u.token_ids.size(); ++k) {
    const bool live = k < u.length;
    mask.push_back(live ? 1 : 0);
    // The masked BiGRU never reads padding entries, so they need no lookup.
    embedded.push_back(live ? tape.lookup(*embedding_, u.token_ids[k]) : Var{});
  }
  return nn::bigru_encode(tape, embedded, mask, utt_fwd_, utt_bwd_);
}

ContextState Model::context_init(nn::Tape& tape, Var z_c) const {
  if (!config_.has_latents()) return {tape.input(Vec::Zero(idx(config_.hidden_dim))), 0};
  require(z_c.valid(), "model.latent", "context_init: z_c required in CSRR mode");
  return {nn::mlp_apply(tape, z_c, ctx_init_), 0};
}

ContextState Model::context_step(nn::Tape& tape, const ContextState& prev, Var v_prev, Var z_c) const {
  Var input = v_prev;
  if (config_.has_latents()) {
    require(z_c.valid(), "model.latent", "context_step: z_c required in CSRR mode");
    input = tape.concat({v_prev, z_c});
  }
  return {nn::gru_step(tape, input, prev.h, ctx_gru_), prev.t + 1};
}

std::vector<ContextState> Model::context_roll(nn::Tape& tape, std::span<const Var> vs, Var z_c) const {
  std::vector<ContextState> states;
  states.reserve(vs.size() + 1);
  states.push_back(context_init(tape, z_c));
  for (Var v : vs) states.push_back(context_step(tape, states.back(), v, z_c));
  return states;
}

nn::GaussianVars Model::prior_z_c(nn::Tape& tape) const {
  const Index z = idx(config_.latent_dim);
  return {tape.input(Vec::Zero(z)), tape.input(Vec::Ones(z))};
}

nn::GaussianVars Model::posterior_z_c(nn::Tape& tape, std::span<const Var> vs) const {
  require(config_.has_latents(), "model.mode", "posterior_z_c: HRED mode has no latents");
  require(!vs.empty(), "model.empty", "posterior_z_c: no utterance vectors");
  Var summary = nn::bigru_encode(tape, vs, post_c_fwd_, post_c_bwd_);
  return nn::gaussian_head_apply(tape, summary, post_c_head_);
}

nn::GaussianVars Model::prior_z_p(nn::Tape& tape, const ContextState& query_state, Var z_c) const {
  require(config_.has_latents(), "model.mode", "prior_z_p: HRED mode has no latents");
  return nn::gaussian_head_apply(tape, tape.concat({query_state.h, z_c}), prior_p_head_);
}

nn::GaussianVars Model::prior_z_i(nn::Tape& tape, const ContextState& state_i, Var z_c, Var z_p) const {
  require(config_.has_latents(), "model.mode", "prior_z_i: HRED mode has no latents");
  return nn::gaussian_head_apply(tape, tape.concat({state_i.h, z_c, z_p}), prior_i_head_);
}

nn::GaussianVars Model::posterior_z_p(nn::Tape& tape, Var v_q, Var v_r, const ContextState& query_state,
                                      Var z_c) const {
  require(config_.has_latents(), "model.mode", "posterior_z_p: HRED mode has no latents");
  return nn::gaussian_head_apply(tape, tape.concat({v_q, v_r, query_state.h, z_c}), post_p_head_);
}

nn::GaussianVars Model::posterior_z_i(nn::Tape& tape, Var v_i, const ContextState& state_i, Var z_c,
                                      Var z_p) const {
  require(config_.has_latents(), "model.mode", "posterior_z_i: HRED mode has no latents");
  return nn::gaussian_head_apply(tape, tape.concat({v_i, state_i.h, z_c, z_p}), post_i_head_);
}

Var Model::decoder_condition(nn::Tape& tape, const DecoderLatents& z) const {
  if (!config_.has_latents()) return Var{};
  require(z.z_c.valid() && z.z_p.valid() && z.z_i.valid(), "model.latent",
          "decoder needs z_c, z_p and z_i in CSRR mode");
  return tape.concat({z.z_c, z.z_p, z.z_i});
}

Var Model::decoder_init(nn::Tape& tape, const ContextState& state_i, Var condition) const {
  Var input = config_.has_latents() ? tape.concat({state_i.h, condition}) : state_i.h;
  return nn::mlp_apply(tape, input, dec_init_);
}

std::pair<Var, Var> Model::decoder_step(nn::Tape& tape, Var h, int prev_token, Var condition) const {
  Var input = tape.lookup(*embedding_, prev_token);
  if (config_.has_latents()) input = tape.concat({input, condition});
  Var next = nn::gru_step(tape, input, h, dec_gru_);
  return {next, tape.affine(*out_weight_, *out_bias_, next)};
}

DecodeResult Model::decode_nll(nn::Tape& tape, const corpus::Utterance& u, const ContextState& state_i,
                               const DecoderLatents& z) const {
  require(u.length >= 1 && u.length <= u.token_ids.size(), "model.utterance", "decode_nll: empty utterance");
  Var condition = decoder_condition(tape, z);
  Var h = decoder_init(tape, state_i, condition);
  std::vector<Var> terms;
  DecodeResult result;
  int prev = corpus::kSos;
  for (std::size_t k = 0; k < u.length; ++k) {
    auto [next, logits] = decoder_step(tape, h, prev, condition);
    const int target = u.token_ids[k];
    terms.push_back(tape.softmax_nll(logits, target));
    Eigen::Index best = 0;
    tape.value(logits).maxCoeff(&best);
    if (best == target) ++result.correct;
    h = next;
    prev = target;
  }
  result.tokens = u.length;
  result.nll = tape.add_all(terms);
  return result;
}

ElboBreakdown Model::forward_train(const corpus::Conversation& conversation, NoiseSource& noise, double lambda,
                                   double grad_scale) {
  const std::size_t count = conversation.size();
  require(count > corpus::kMinUtterancesExclusive, "model.too_short",
          "forward_train: conversation needs at least 4 utterances, got " + std::to_string(count));
  const std::size_t n = count - 1;  // index of the response
  const std::size_t q = n - 1;      // index of the query

  nn::Tape tape;
  std::vector<Var> vs;
  vs.reserve(count);
  for (const auto& u : conversation.utterances) vs.push_back(encode_utterance(tape, u));

  ElboBreakdown out;
  out.anneal_weight = lambda;
  std::vector<Var> kl_vars;
  DecoderLatents zq, zr;
  Var z_c;

  if (config_.has_latents()) {
    const Index d = idx(config_.latent_dim);
    auto post_c = posterior_z_c(tape, vs);
    auto prior_c = prior_z_c(tape);
    z_c = nn::gaussian_sample(tape, post_c, noise.next(d));
    kl_vars.push_back(tape.gaussian_kl(post_c.mu, post_c.sigma, prior_c.mu, prior_c.sigma));
  }

  // h_c0 .. h_cn; h_ct summarises u_0 .. u_(t-1).
  auto states = context_roll(tape, std::span<const Var>(vs.data(), n), z_c);
  const ContextState& h_q = states[q];
  const ContextState& h_r = states[n];

  if (config_.has_latents()) {
    const Index d = idx(config_.latent_dim);
    auto prior_p = prior_z_p(tape, h_q, z_c);
    auto post_p = posterior_z_p(tape, vs[q], vs[n], h_q, z_c);
    Var z_p = nn::gaussian_sample(tape, post_p, noise.next(d));
    kl_vars.push_back(tape.gaussian_kl(post_p.mu, post_p.sigma, prior_p.mu, prior_p.sigma));

    auto prior_q = prior_z_i(tape, h_q, z_c, z_p);
    auto post_q = posterior_z_i(tape, vs[q], h_q, z_c, z_p);
    Var z_q = nn::gaussian_sample(tape, post_q, noise.next(d));
    kl_vars.push_back(tape.gaussian_kl(post_q.mu, post_q.sigma, prior_q.mu, prior_q.sigma));

    auto prior_r = prior_z_i(tape, h_r, z_c, z_p);
    auto post_r = posterior_z_i(tape, vs[n], h_r, z_c, z_p);
    Var z_r = nn::gaussian_sample(tape, post_r, noise.next(d));
    kl_vars.push_back(tape.gaussian_kl(post_r.mu, post_r.sigma, prior_r.mu, prior_r.sigma));

    zq = {z_c, z_p, z_q};
    zr = {z_c, z_p, z_r};
  }

  DecodeResult dq = decode_nll(tape, conversation.utterances[q], h_q, zq);
  DecodeResult dr = decode_nll(tape, conversation.utterances[n], h_r, zr);
  Var recon = tape.add_all(std::vector<Var>{dq.nll, dr.nll});

  out.recon_nll = tape.scalar(recon);
  out.token_count = dq.tokens + dr.tokens;
  out.correct_tokens = dq.correct + dr.correct;
  out.kl_terms = kl_vars.size();
  if (!kl_vars.empty()) {
    out.kl_c = tape.scalar(kl_vars[0]);
    out.kl_p = tape.scalar(kl_vars[1]);
    out.kl_q = tape.scalar(kl_vars[2]);
    out.kl_r = tape.scalar(kl_vars[3]);
  }

  if (grad_scale != 0.0) {
    Var loss = recon;
    if (!kl_vars.empty()) loss = tape.add(recon, tape.scale(tape.add_all(kl_vars), lambda));
    tape.backward(loss, grad_scale);
  }
  return out;
}

std::size_t count_parameters(const ModelConfig& config) {
  return Model(config, Model::ShapeOnly{}).params().total_size();
}

}  // namespace csrr::model
