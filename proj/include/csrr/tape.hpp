#pragma once

// Minimal reverse-mode differentiation over dense vectors.
//
// Every value on a Tape is a column vector; matrices only appear as
// parameters (Param) consumed by matvec/affine/lookup. A Tape is built for a
// single forward pass, backward() is called once on a scalar node, and the
// tape is then discarded. Parameter gradients accumulate into Param::grad so
// several tapes (one per conversation in a batch) can contribute to one step.

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace csrr::nn {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// A named trainable array together with its gradient accumulator.
struct Param {
  std::string name;
  Mat value;
  Mat grad;

  Eigen::Index size() const { return value.size(); }
};

// Owns parameters; references returned by add()/at() stay valid for the
// lifetime of the store (including after a move).
class ParamStore {
 public:
  ParamStore() = default;
  // A shape-only store records declared sizes without allocating arrays.
  explicit ParamStore(bool allocate) : allocate_(allocate) {}
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  Param& add(std::string name, Eigen::Index rows, Eigen::Index cols);
  Param& at(std::string_view name);
  const Param& at(std::string_view name) const;
  bool contains(std::string_view name) const;

  // Insertion order, which is also the serialization order.
  std::span<const std::unique_ptr<Param>> all() const { return params_; }

  // Sum of declared sizes, also meaningful for a shape-only store.
  std::size_t total_size() const { return declared_size_; }
  bool allocated() const { return allocate_; }
  void zero_grad();

 private:
  std::vector<std::unique_ptr<Param>> params_;
  std::map<std::string, std::size_t, std::less<>> index_;
  bool allocate_ = true;
  std::size_t declared_size_ = 0;
};

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf holding a constant; gradient is still recorded, so it doubles as a
  // probe point for input-gradient checks.
  Var input(Vec value);
  Var param(Param& p);  // p must be a column vector

  Var matvec(Param& w, Var x);
  Var affine(Param& w, Param& b, Var x);
  Var lookup(Param& table, int column);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double factor);
  Var add_scalar(Var a, double c);
  Var sigmoid(Var a);
  Var tanh(Var a);
  Var softplus(Var a);
  Var concat(std::span<const Var> parts);
  Var concat(std::initializer_list<Var> parts) {
    return concat(std::span<const Var>(parts.begin(), parts.size()));
  }
  Var sum(Var a);
  Var add_all(std::span<const Var> scalars);

  // -log softmax(logits)[target]; a 1-vector.
  Var softmax_nll(Var logits, int target);
  // Closed-form KL(q || p) between diagonal Gaussians; a 1-vector.
  Var gaussian_kl(Var q_mu, Var q_sigma, Var p_mu, Var p_sigma);

  const Vec& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  double scalar(Var v) const { return value(v)(0); }
  // Valid after backward(); zero-sized for nodes the root does not reach.
  const Vec& grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }

  // Seeds d(root)/d(root) = seed and propagates to every node and Param.
  void backward(Var root, double seed = 1.0);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Vec value;
    Vec grad;
    std::function<void(Tape&, const Node&)> propagate;
  };

  Var push(Vec value, std::function<void(Tape&, const Node&)> propagate);
  Vec& grad_of(Var v);
  void check(Var v) const;

  std::vector<Node> nodes_;
};

}  // namespace csrr::nn
