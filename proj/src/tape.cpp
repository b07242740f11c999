#include "csrr/tape.hpp"

#include "csrr/error.hpp"

#include <cmath>
#include <limits>
#include <numeric>

namespace csrr::nn {

namespace {

double softplus_scalar(double x) {
  double y = x > 30.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  // exp(x) underflows below about -745; the true value is positive.
  return y > 0.0 ? y : std::numeric_limits<double>::denorm_min();
}

double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Param& ParamStore::add(std::string name, Eigen::Index rows, Eigen::Index cols) {
  if (index_.contains(name)) throw Error("param.duplicate", "duplicate parameter name: " + name);
  auto p = std::make_unique<Param>();
  p->name = name;
  if (allocate_) {
    p->value = Mat::Zero(rows, cols);
    p->grad = Mat::Zero(rows, cols);
  }
  declared_size_ += static_cast<std::size_t>(rows * cols);
  index_.emplace(std::move(name), params_.size());
  params_.push_back(std::move(p));
  return *params_.back();
}

Param& ParamStore::at(std::string_view name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("param.unknown", "unknown parameter: " + std::string(name));
  return *params_[it->second];
}

const Param& ParamStore::at(std::string_view name) const {
  return const_cast<ParamStore*>(this)->at(name);
}

bool ParamStore::contains(std::string_view name) const { return index_.find(name) != index_.end(); }

void ParamStore::zero_grad() {
  for (auto& p : params_) p->grad.setZero();
}

Var Tape::push(Vec value, std::function<void(Tape&, const Node&)> propagate) {
  nodes_.push_back(Node{std::move(value), Vec(), std::move(propagate)});
  return Var{static_cast<int>(nodes_.size() - 1)};
}

void Tape::check(Var v) const {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
    throw Error("tape.invalid_var", "variable does not belong to this tape");
}

Vec& Tape::grad_of(Var v) {
  Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (n.grad.size() == 0) n.grad = Vec::Zero(n.value.size());
  return n.grad;
}

Var Tape::input(Vec value) { return push(std::move(value), nullptr); }

Var Tape::param(Param& p) {
  if (p.value.cols() != 1) throw Error("tape.shape", "param " + p.name + " is not a vector");
  Param* target = &p;
  return push(p.value.col(0), [target](Tape&, const Node& n) { target->grad.col(0) += n.grad; });
}

Var Tape::matvec(Param& w, Var x) {
  check(x);
  if (w.value.cols() != value(x).size())
    throw Error("tape.shape", "matvec: " + w.name + " has " + std::to_string(w.value.cols()) +
                                  " columns, input has " + std::to_string(value(x).size()));
  Param* target = &w;
  return push(w.value * value(x), [target, x](Tape& t, const Node& n) {
    target->grad.noalias() += n.grad * t.value(x).transpose();
    t.grad_of(x).noalias() += target->value.transpose() * n.grad;
  });
}

Var Tape::affine(Param& w, Param& b, Var x) {
  check(x);
  if (w.value.cols() != value(x).size() || b.value.rows() != w.value.rows() || b.value.cols() != 1)
    throw Error("tape.shape", "affine: shape mismatch for " + w.name + "/" + b.name);
  Param* wp = &w;
  Param* bp = &b;
  Vec out = w.value * value(x) + b.value.col(0);
  return push(std::move(out), [wp, bp, x](Tape& t, const Node& n) {
    wp->grad.noalias() += n.grad * t.value(x).transpose();
    bp->grad.col(0) += n.grad;
    t.grad_of(x).noalias() += wp->value.transpose() * n.grad;
  });
}

Var Tape::lookup(Param& table, int column) {
  if (column < 0 || column >= table.value.cols())
    throw Error("tape.index", "lookup: column " + std::to_string(column) + " out of range for " +
                                  table.name);
  Param* target = &table;
  return push(table.value.col(column),
              [target, column](Tape&, const Node& n) { target->grad.col(column) += n.grad; });
}

Var Tape::add(Var a, Var b) {
  check(a);
  check(b);
  if (value(a).size() != value(b).size()) throw Error("tape.shape", "add: size mismatch");
  return push(value(a) + value(b), [a, b](Tape& t, const Node& n) {
    t.grad_of(a) += n.grad;
    t.grad_of(b) += n.grad;
  });
}

Var Tape::sub(Var a, Var b) {
  check(a);
  check(b);
  if (value(a).size() != value(b).size()) throw Error("tape.shape", "sub: size mismatch");
  return push(value(a) - value(b), [a, b](Tape& t, const Node& n) {
    t.grad_of(a) += n.grad;
    t.grad_of(b) -= n.grad;
  });
}

Var Tape::mul(Var a, Var b) {
  check(a);
  check(b);
  if (value(a).size() != value(b).size()) throw Error("tape.shape", "mul: size mismatch");
  return push(value(a).cwiseProduct(value(b)), [a, b](Tape& t, const Node& n) {
    t.grad_of(a) += n.grad.cwiseProduct(t.value(b));
    t.grad_of(b) += n.grad.cwiseProduct(t.value(a));
  });
}

Var Tape::scale(Var a, double factor) {
  check(a);
  return push(value(a) * factor,
              [a, factor](Tape& t, const Node& n) { t.grad_of(a) += factor * n.grad; });
}

Var Tape::add_scalar(Var a, double c) {
  check(a);
  return push(value(a).array() + c, [a](Tape& t, const Node& n) { t.grad_of(a) += n.grad; });
}

Var Tape::sigmoid(Var a) {
  check(a);
  Vec out = value(a).unaryExpr(&sigmoid_scalar);
  return push(std::move(out), [a](Tape& t, const Node& n) {
    t.grad_of(a).array() += n.grad.array() * n.value.array() * (1.0 - n.value.array());
  });
}

Var Tape::tanh(Var a) {
  check(a);
  Vec out = value(a).array().tanh();
  return push(std::move(out), [a](Tape& t, const Node& n) {
    t.grad_of(a).array() += n.grad.array() * (1.0 - n.value.array().square());
  });
}

Var Tape::softplus(Var a) {
  check(a);
  Vec out = value(a).unaryExpr(&softplus_scalar);
  return push(std::move(out), [a](Tape& t, const Node& n) {
    t.grad_of(a).array() += n.grad.array() * t.value(a).unaryExpr(&sigmoid_scalar).array();
  });
}

Var Tape::concat(std::span<const Var> parts) {
  Eigen::Index total = 0;
  for (Var p : parts) {
    check(p);
    total += value(p).size();
  }
  Vec out(total);
  Eigen::Index offset = 0;
  for (Var p : parts) {
    out.segment(offset, value(p).size()) = value(p);
    offset += value(p).size();
  }
  std::vector<Var> saved(parts.begin(), parts.end());
  return push(std::move(out), [saved = std::move(saved)](Tape& t, const Node& n) {
    Eigen::Index off = 0;
    for (Var p : saved) {
      const Eigen::Index len = t.value(p).size();
      t.grad_of(p) += n.grad.segment(off, len);
      off += len;
    }
  });
}

Var Tape::sum(Var a) {
  check(a);
  return push(Vec::Constant(1, value(a).sum()),
              [a](Tape& t, const Node& n) { t.grad_of(a).array() += n.grad(0); });
}

Var Tape::add_all(std::span<const Var> scalars) {
  double total = 0.0;
  for (Var s : scalars) {
    check(s);
    total += scalar(s);
  }
  std::vector<Var> saved(scalars.begin(), scalars.end());
  return push(Vec::Constant(1, total), [saved = std::move(saved)](Tape& t, const Node& n) {
    for (Var s : saved) t.grad_of(s)(0) += n.grad(0);
  });
}

Var Tape::softmax_nll(Var logits, int target) {
  check(logits);
  const Vec& z = value(logits);
  if (target < 0 || target >= z.size()) throw Error("tape.index", "softmax_nll: target out of range");
  const double m = z.maxCoeff();
  const double lse = m + std::log((z.array() - m).exp().sum());
  return push(Vec::Constant(1, lse - z(target)), [logits, target, lse](Tape& t, const Node& n) {
    Vec p = (t.value(logits).array() - lse).exp();
    p(target) -= 1.0;
    t.grad_of(logits) += n.grad(0) * p;
  });
}

Var Tape::gaussian_kl(Var q_mu, Var q_sigma, Var p_mu, Var p_sigma) {
  for (Var v : {q_mu, q_sigma, p_mu, p_sigma}) check(v);
  const Eigen::Index d = value(q_mu).size();
  if (value(q_sigma).size() != d || value(p_mu).size() != d || value(p_sigma).size() != d)
    throw Error("tape.shape", "gaussian_kl: dimension mismatch");
  if ((value(q_sigma).array() <= 0.0).any() || (value(p_sigma).array() <= 0.0).any())
    throw Error("gaussian.sigma", "gaussian_kl: sigma must be strictly positive");
  const auto qs = value(q_sigma).array();
  const auto ps = value(p_sigma).array();
  const auto diff = (value(q_mu) - value(p_mu)).array();
  const double kl =
      ((ps / qs).log() + (qs.square() + diff.square()) / (2.0 * ps.square()) - 0.5).sum();
  return push(Vec::Constant(1, kl), [q_mu, q_sigma, p_mu, p_sigma](Tape& t, const Node& n) {
    const double g = n.grad(0);
    const Eigen::ArrayXd qs = t.value(q_sigma).array();
    const Eigen::ArrayXd ps = t.value(p_sigma).array();
    const Eigen::ArrayXd diff = (t.value(q_mu) - t.value(p_mu)).array();
    const Eigen::ArrayXd ps2 = ps.square();
    t.grad_of(q_mu).array() += g * diff / ps2;
    t.grad_of(p_mu).array() -= g * diff / ps2;
    t.grad_of(q_sigma).array() += g * (qs / ps2 - 1.0 / qs);
    t.grad_of(p_sigma).array() += g * (1.0 / ps - (qs.square() + diff.square()) / (ps2 * ps));
  });
}

void Tape::backward(Var root, double seed) {
  check(root);
  if (value(root).size() != 1) throw Error("tape.shape", "backward: root must be a scalar");
  for (auto& n : nodes_) n.grad.resize(0);
  grad_of(root)(0) = seed;
  for (int i = root.id; i >= 0; --i) {
    const Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.grad.size() == 0 || !n.propagate) continue;
    n.propagate(*this, n);
  }
}

}  // namespace csrr::nn
