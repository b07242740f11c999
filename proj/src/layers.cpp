#include "csrr/layers.hpp"

#include "csrr/error.hpp"

#include <cmath>

namespace csrr::nn {

GruParams make_gru(ParamStore& store, const std::string& prefix, Eigen::Index input_dim,
                   Eigen::Index hidden_dim) {
  GruParams p;
  p.wz = &store.add(prefix + ".w_z", hidden_dim, input_dim);
  p.uz = &store.add(prefix + ".u_z", hidden_dim, hidden_dim);
  p.bz = &store.add(prefix + ".b_z", hidden_dim, 1);
  p.wr = &store.add(prefix + ".w_r", hidden_dim, input_dim);
  p.ur = &store.add(prefix + ".u_r", hidden_dim, hidden_dim);
  p.br = &store.add(prefix + ".b_r", hidden_dim, 1);
  p.wh = &store.add(prefix + ".w_h", hidden_dim, input_dim);
  p.uh = &store.add(prefix + ".u_h", hidden_dim, hidden_dim);
  p.bh = &store.add(prefix + ".b_h", hidden_dim, 1);
  return p;
}

Var gru_step(Tape& tape, Var x, Var h, const GruParams& p) {
  if (tape.value(x).size() != p.input_dim() || tape.value(h).size() != p.hidden_dim())
    throw Error("gru.shape", "gru_step: expected input " + std::to_string(p.input_dim()) +
                                 " and hidden " + std::to_string(p.hidden_dim()) + ", got " +
                                 std::to_string(tape.value(x).size()) + " and " +
                                 std::to_string(tape.value(h).size()));
  Var z = tape.sigmoid(tape.add(tape.affine(*p.wz, *p.bz, x), tape.matvec(*p.uz, h)));
  Var r = tape.sigmoid(tape.add(tape.affine(*p.wr, *p.br, x), tape.matvec(*p.ur, h)));
  Var cand =
      tape.tanh(tape.add(tape.affine(*p.wh, *p.bh, x), tape.matvec(*p.uh, tape.mul(r, h))));
  // (1 - z) . h + z . h~  ==  h + z . (h~ - h)
  return tape.add(h, tape.mul(z, tape.sub(cand, h)));
}

Var bigru_encode(Tape& tape, std::span<const Var> seq, std::span<const unsigned char> mask,
                 const GruParams& fwd, const GruParams& bwd) {
  if (mask.size() != seq.size()) throw Error("gru.shape", "bigru_encode: mask/sequence length mismatch");
  bool any = false;
  for (unsigned char m : mask) any = any || m != 0;
  if (!any) throw Error("gru.empty", "bigru_encode: sequence is fully masked");

  Var hf = tape.input(Vec::Zero(fwd.hidden_dim()));
  for (std::size_t k = 0; k < seq.size(); ++k)
    if (mask[k]) hf = gru_step(tape, seq[k], hf, fwd);
  Var hb = tape.input(Vec::Zero(bwd.hidden_dim()));
  for (std::size_t k = seq.size(); k-- > 0;)
    if (mask[k]) hb = gru_step(tape, seq[k], hb, bwd);
  return tape.concat({hf, hb});
}

Var bigru_encode(Tape& tape, std::span<const Var> seq, const GruParams& fwd, const GruParams& bwd) {
  std::vector<unsigned char> mask(seq.size(), 1);
  return bigru_encode(tape, seq, mask, fwd, bwd);
}

Mlp make_mlp(ParamStore& store, const std::string& prefix, Eigen::Index input_dim,
             Eigen::Index output_dim) {
  Mlp mlp;
  mlp.layers.push_back({&store.add(prefix + ".0.weight", output_dim, input_dim),
                        &store.add(prefix + ".0.bias", output_dim, 1)});
  mlp.layers.push_back({&store.add(prefix + ".1.weight", output_dim, output_dim),
                        &store.add(prefix + ".1.bias", output_dim, 1)});
  return mlp;
}

Var mlp_apply(Tape& tape, Var x, const Mlp& mlp) {
  if (mlp.layers.empty()) throw Error("mlp.shape", "mlp_apply: empty stack");
  for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
    const DenseLayer& layer = mlp.layers[i];
    if (tape.value(x).size() != layer.weight->value.cols())
      throw Error("mlp.shape", "mlp_apply: layer " + layer.weight->name + " expects " +
                                   std::to_string(layer.weight->value.cols()) + " inputs, got " +
                                   std::to_string(tape.value(x).size()));
    x = tape.affine(*layer.weight, *layer.bias, x);
    if (i + 1 < mlp.layers.size()) x = tape.tanh(x);
  }
  return x;
}

GaussianHead make_gaussian_head(ParamStore& store, const std::string& prefix,
                                Eigen::Index input_dim, Eigen::Index latent_dim) {
  return {make_mlp(store, prefix + ".mu", input_dim, latent_dim),
          make_mlp(store, prefix + ".sigma", input_dim, latent_dim)};
}

GaussianVars gaussian_head_apply(Tape& tape, Var x, const GaussianHead& head) {
  Var mu = mlp_apply(tape, x, head.mean);
  Var sigma = tape.add_scalar(tape.softplus(mlp_apply(tape, x, head.scale)), kSigmaFloor);
  return {mu, sigma};
}

Var gaussian_sample(Tape& tape, GaussianVars g, const Vec& noise) {
  if (noise.size() != tape.value(g.mu).size())
    throw Error("gaussian.shape", "gaussian_sample: noise dimension mismatch");
  return tape.add(g.mu, tape.mul(g.sigma, tape.input(noise)));
}

double softplus(double x) {
  Tape t;
  return t.scalar(t.softplus(t.input(Vec::Constant(1, x))));
}

Vec softplus(const Vec& x) {
  Tape t;
  return t.value(t.softplus(t.input(x)));
}

Vec gaussian_sample(const GaussianParams& g, const Vec& noise) {
  if (noise.size() != g.dim()) throw Error("gaussian.shape", "gaussian_sample: noise dimension mismatch");
  return g.mu + g.sigma.cwiseProduct(noise);
}

double gaussian_kl(const GaussianParams& q, const GaussianParams& p) {
  Tape t;
  return t.scalar(t.gaussian_kl(t.input(q.mu), t.input(q.sigma), t.input(p.mu), t.input(p.sigma)));
}

GaussianParams gaussian_values(const Tape& tape, GaussianVars g) {
  return {tape.value(g.mu), tape.value(g.sigma)};
}

void glorot_init(Param& p, std::mt19937_64& rng) {
  if (p.value.cols() == 1) {
    p.value.setZero();
    return;
  }
  const double limit = std::sqrt(6.0 / static_cast<double>(p.value.rows() + p.value.cols()));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (Eigen::Index j = 0; j < p.value.cols(); ++j)
    for (Eigen::Index i = 0; i < p.value.rows(); ++i) p.value(i, j) = dist(rng);
}

}  // namespace csrr::nn
