#pragma once

#include "csrr/tape.hpp"

#include <random>
#include <span>
#include <string>
#include <vector>

namespace csrr::nn {

// Added to every softplus-produced standard deviation.
inline constexpr double kSigmaFloor = 1e-6;

// One direction of a GRU:
//   z  = sigmoid(Wz x + Uz h + bz)
//   r  = sigmoid(Wr x + Ur h + br)
//   h~ = tanh(Wh x + Uh (r . h) + bh)
//   h' = (1 - z) . h + z . h~
struct GruParams {
  Param* wz = nullptr;
  Param* uz = nullptr;
  Param* bz = nullptr;
  Param* wr = nullptr;
  Param* ur = nullptr;
  Param* br = nullptr;
  Param* wh = nullptr;
  Param* uh = nullptr;
  Param* bh = nullptr;

  Eigen::Index input_dim() const { return wz->value.cols(); }
  Eigen::Index hidden_dim() const { return uz->value.rows(); }
};

GruParams make_gru(ParamStore& store, const std::string& prefix, Eigen::Index input_dim,
                   Eigen::Index hidden_dim);

Var gru_step(Tape& tape, Var x, Var h, const GruParams& p);

// Runs forward and backward GRUs over the positions where mask is nonzero and
// returns [h_fwd(last unmasked); h_bwd(first unmasked)]. Masked positions
// leave both states untouched.
Var bigru_encode(Tape& tape, std::span<const Var> seq, std::span<const unsigned char> mask,
                 const GruParams& fwd, const GruParams& bwd);
// Unmasked convenience overload.
Var bigru_encode(Tape& tape, std::span<const Var> seq, const GruParams& fwd, const GruParams& bwd);

struct DenseLayer {
  Param* weight = nullptr;
  Param* bias = nullptr;
};

// Feed-forward stack: tanh after every layer except the last, which is linear.
struct Mlp {
  std::vector<DenseLayer> layers;

  Eigen::Index input_dim() const { return layers.front().weight->value.cols(); }
  Eigen::Index output_dim() const { return layers.back().weight->value.rows(); }
};

// in -> out (tanh) -> out (linear).
Mlp make_mlp(ParamStore& store, const std::string& prefix, Eigen::Index input_dim,
             Eigen::Index output_dim);

Var mlp_apply(Tape& tape, Var x, const Mlp& mlp);

// Diagonal Gaussian N(mu, diag(sigma^2)) as plain values.
struct GaussianParams {
  Vec mu;
  Vec sigma;

  Eigen::Index dim() const { return mu.size(); }
  static GaussianParams standard(Eigen::Index dim) {
    return {Vec::Zero(dim), Vec::Ones(dim)};
  }
};

// The same Gaussian while it is still on a tape.
struct GaussianVars {
  Var mu;
  Var sigma;
};

// Mean and softplus-positive standard deviation from two separate MLPs.
struct GaussianHead {
  Mlp mean;
  Mlp scale;
};

GaussianHead make_gaussian_head(ParamStore& store, const std::string& prefix,
                                Eigen::Index input_dim, Eigen::Index latent_dim);

GaussianVars gaussian_head_apply(Tape& tape, Var x, const GaussianHead& head);

// z = mu + sigma . noise, differentiable in mu and sigma.
Var gaussian_sample(Tape& tape, GaussianVars g, const Vec& noise);

// Value-level helpers.
double softplus(double x);
Vec softplus(const Vec& x);
Vec gaussian_sample(const GaussianParams& g, const Vec& noise);
double gaussian_kl(const GaussianParams& q, const GaussianParams& p);
GaussianParams gaussian_values(const Tape& tape, GaussianVars g);

// Initialisation: Glorot-uniform for matrices, zeros for biases.
void glorot_init(Param& p, std::mt19937_64& rng);

}  // namespace csrr::nn
