#include "csrr/error.hpp"
#include "csrr/grad_check.hpp"
#include "csrr/layers.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace csrr::nn;

namespace {

void randomize(ParamStore& store, std::uint64_t seed, double scale = 0.5) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (const auto& p : store.all())
    for (Eigen::Index i = 0; i < p->size(); ++i) p->value.data()[i] = n(rng);
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Plain Eigen evaluation of the GRU update, independent of the tape.
Vec gru_reference(const Vec& x, const Vec& h, const GruParams& p) {
  auto act = [](Vec v, auto f) {
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = f(v(i));
    return v;
  };
  const Vec z = act(p.wz->value * x + p.uz->value * h + p.bz->value.col(0), sigmoid);
  const Vec r = act(p.wr->value * x + p.ur->value * h + p.br->value.col(0), sigmoid);
  const Vec cand = act(p.wh->value * x + p.uh->value * r.cwiseProduct(h) + p.bh->value.col(0),
                       [](double v) { return std::tanh(v); });
  return (Vec::Ones(h.size()) - z).cwiseProduct(h) + z.cwiseProduct(cand);
}

}  // namespace

TEST_CASE("gru step with zero parameters") {
  ParamStore store;
  auto p = make_gru(store, "g", 3, 4);
  Tape t;
  Vec x(3);
  x << 1.0, -2.0, 3.0;
  Vec v(4);
  v << 1.0, 2.0, -4.0, 0.5;
  const Vec from_zero = t.value(gru_step(t, t.input(x), t.input(Vec::Zero(4)), p));
  CHECK(from_zero.isZero(0.0));
  const Vec from_v = t.value(gru_step(t, t.input(x), t.input(v), p));
  CHECK(from_v == 0.5 * v);
}

TEST_CASE("gru step matches an independent evaluation") {
  ParamStore store;
  auto p = make_gru(store, "g", 3, 4);
  randomize(store, 11);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 5; ++trial) {
    Vec x(3), h(4);
    for (auto& e : x) e = n(rng);
    for (auto& e : h) e = n(rng);
    Tape t;
    const Vec got = t.value(gru_step(t, t.input(x), t.input(h), p));
    CHECK((got - gru_reference(x, h, p)).cwiseAbs().maxCoeff() < 1e-14);
  }
}

TEST_CASE("gru step rejects mismatched dimensions") {
  ParamStore store;
  auto p = make_gru(store, "g", 3, 4);
  Tape t;
  CHECK_THROWS_AS(gru_step(t, t.input(Vec::Zero(2)), t.input(Vec::Zero(4)), p), csrr::Error);
  CHECK_THROWS_AS(gru_step(t, t.input(Vec::Zero(3)), t.input(Vec::Zero(5)), p), csrr::Error);
}

TEST_CASE("gru gradients match finite differences in parameters and inputs") {
  ParamStore store;
  auto p = make_gru(store, "g", 3, 4);
  Param& x0 = store.add("x0", 3, 1);
  Param& x1 = store.add("x1", 3, 1);
  Param& h0 = store.add("h0", 4, 1);
  randomize(store, 21, 0.8);
  const auto report = grad_check(
      store,
      [&](bool accumulate) {
        Tape t;
        Var h = gru_step(t, t.param(x0), t.param(h0), p);
        h = gru_step(t, t.param(x1), h, p);
        Var loss = t.sum(t.mul(h, h));
        if (accumulate) t.backward(loss);
        return t.scalar(loss);
      },
      {});
  CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("bigru encoding") {
  ParamStore store;
  auto fwd = make_gru(store, "f", 2, 3);
  auto bwd = make_gru(store, "b", 2, 3);
  randomize(store, 3);
  Vec a(2), pad(2);
  a << 0.3, -0.7;
  pad << 5.0, 5.0;

  SUBCASE("single token is one step each way") {
    Tape t;
    Var x = t.input(a);
    Var seq[] = {x};
    const Vec out = t.value(bigru_encode(t, seq, fwd, bwd));
    REQUIRE(out.size() == 6);
    Tape ref;
    const Vec f = ref.value(gru_step(ref, ref.input(a), ref.input(Vec::Zero(3)), fwd));
    const Vec b = ref.value(gru_step(ref, ref.input(a), ref.input(Vec::Zero(3)), bwd));
    CHECK(out.head(3) == f);
    CHECK(out.tail(3) == b);
  }
  SUBCASE("trailing masked padding is bit-identical") {
    Tape t;
    Var x = t.input(a), y = t.input(-a), p = t.input(pad);
    Var short_seq[] = {x, y};
    Var long_seq[] = {x, y, p, p};
    const unsigned char short_mask[] = {1, 1};
    const unsigned char long_mask[] = {1, 1, 0, 0};
    const Vec a_out = t.value(bigru_encode(t, short_seq, short_mask, fwd, bwd));
    const Vec b_out = t.value(bigru_encode(t, long_seq, long_mask, fwd, bwd));
    CHECK(a_out == b_out);
  }
  SUBCASE("fully masked input is an error") {
    Tape t;
    Var x = t.input(a);
    Var seq[] = {x};
    const unsigned char mask[] = {0};
    CHECK_THROWS_AS(bigru_encode(t, seq, mask, fwd, bwd), csrr::Error);
  }
  SUBCASE("order matters") {
    Tape t;
    Var x = t.input(a), y = t.input(pad);
    Var s1[] = {x, y};
    Var s2[] = {y, x};
    const Vec o1 = t.value(bigru_encode(t, s1, fwd, bwd));
    const Vec o2 = t.value(bigru_encode(t, s2, fwd, bwd));
    CHECK(o1 != o2);
  }
}

TEST_CASE("bigru output is twice the hidden size at the default width") {
  ParamStore store;
  auto fwd = make_gru(store, "f", 2, 1000);
  auto bwd = make_gru(store, "b", 2, 1000);
  Tape t;
  Var x = t.input(Vec::Ones(2));
  Var seq[] = {x};
  CHECK(t.value(bigru_encode(t, seq, fwd, bwd)).size() == 2000);
}

TEST_CASE("mlp") {
  ParamStore store;
  auto mlp = make_mlp(store, "m", 3, 2);
  CHECK(mlp.layers.size() == 2);
  Vec b(2);
  b << 0.25, -1.5;
  mlp.layers.back().bias->value.col(0) = b;
  Tape t;
  Vec x(3);
  x << 1.0, 2.0, 3.0;
  CHECK(t.value(mlp_apply(t, t.input(x), mlp)) == b);
  CHECK_THROWS_AS(mlp_apply(t, t.input(Vec::Zero(4)), mlp), csrr::Error);

  SUBCASE("single linear layer is W x + b") {
    ParamStore s2;
    Mlp lin;
    lin.layers.push_back({&s2.add("w", 2, 3), &s2.add("b", 2, 1)});
    randomize(s2, 4);
    Tape t2;
    const Vec expect = lin.layers[0].weight->value * x + lin.layers[0].bias->value.col(0);
    CHECK((t2.value(mlp_apply(t2, t2.input(x), lin)) - expect).cwiseAbs().maxCoeff() < 1e-15);
  }
  SUBCASE("gradient check") {
    randomize(store, 8);
    Param& in = store.add("in", 3, 1);
    in.value.col(0) = x * 0.3;
    const auto r = grad_check(
        store,
        [&](bool acc) {
          Tape t3;
          Var y = mlp_apply(t3, t3.param(in), mlp);
          Var loss = t3.sum(t3.mul(y, y));
          if (acc) t3.backward(loss);
          return t3.scalar(loss);
        },
        {});
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("softplus values") {
  CHECK(softplus(0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(std::abs(softplus(50.0) - 50.0) < 1e-12);
  CHECK(softplus(-20.0) == doctest::Approx(2.0611536181902037e-9).epsilon(1e-12));
  CHECK(softplus(-20.0) > 0.0);
  CHECK(std::isfinite(softplus(1e6)));
}

TEST_CASE("softplus is strictly positive and monotone on [-1e6, 1e6]") {
  double prev = 0.0;
  bool positive = true, monotone = true;
  for (int i = 0; i <= 200000; ++i) {
    const double x = -1e6 + 10.0 * i;
    const double y = softplus(x);
    positive = positive && y > 0.0;
    if (i > 0) monotone = monotone && y >= prev;
    prev = y;
  }
  CHECK(positive);
  CHECK(monotone);
  CHECK(softplus(-1e6) > 0.0);
}

TEST_CASE("gaussian sample") {
  GaussianParams g{Vec::Constant(3, 1.5), Vec::Constant(3, 2.0)};
  CHECK(gaussian_sample(g, Vec::Zero(3)) == g.mu);
  Vec noise(3);
  noise << 0.1, -0.2, 0.3;
  CHECK(gaussian_sample(GaussianParams::standard(3), noise) == noise);
  CHECK_THROWS_AS(gaussian_sample(g, Vec::Zero(2)), csrr::Error);

  SUBCASE("distribution over 1e5 draws") {
    GaussianParams h{Vec(2), Vec(2)};
    h.mu << -1.0, 3.0;
    h.sigma << 0.5, 2.0;
    std::mt19937_64 rng(17);
    std::normal_distribution<double> n;
    const int N = 100000;
    Vec sum = Vec::Zero(2), sq = Vec::Zero(2);
    for (int i = 0; i < N; ++i) {
      Vec e(2);
      e << n(rng), n(rng);
      const Vec z = gaussian_sample(h, e);
      sum += z;
      sq += z.cwiseProduct(z);
    }
    const Vec mean = sum / N;
    const Vec var = sq / N - mean.cwiseProduct(mean);
    for (int j = 0; j < 2; ++j) {
      CHECK(std::abs(mean(j) - h.mu(j)) < 3.0 * h.sigma(j) / std::sqrt(double(N)));
      CHECK(std::abs(var(j) - h.sigma(j) * h.sigma(j)) < 0.05 * h.sigma(j) * h.sigma(j));
    }
  }
  SUBCASE("gradients flow to mu and sigma") {
    ParamStore store;
    Param& mu = store.add("mu", 3, 1);
    Param& pre = store.add("pre", 3, 1);
    randomize(store, 2);
    const auto r = grad_check(
        store,
        [&](bool acc) {
          Tape t;
          Var z = gaussian_sample(t, {t.param(mu), t.softplus(t.param(pre))}, noise);
          Var loss = t.sum(t.mul(z, z));
          if (acc) t.backward(loss);
          return t.scalar(loss);
        },
        {});
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("gaussian kl closed form") {
  const auto p = GaussianParams::standard(2);
  CHECK(gaussian_kl(p, p) == 0.0);
  GaussianParams q{Vec(2), Vec::Ones(2)};
  q.mu << 1.0, 0.0;
  CHECK(gaussian_kl(q, p) == doctest::Approx(0.5).epsilon(1e-15));
  GaussianParams wide{Vec::Zero(1), Vec::Constant(1, 2.0)};
  const double expect = 0.5 * (4.0 - 1.0 - std::log(4.0));
  CHECK(gaussian_kl(wide, GaussianParams::standard(1)) == doctest::Approx(expect).epsilon(1e-15));
  CHECK(expect == doctest::Approx(0.80685).epsilon(1e-5));

  GaussianParams bad{Vec::Zero(1), Vec::Constant(1, -1.0)};
  CHECK_THROWS_AS(gaussian_kl(bad, GaussianParams::standard(1)), csrr::Error);
  CHECK_THROWS_AS(gaussian_kl(GaussianParams::standard(1), bad), csrr::Error);
  CHECK_THROWS_AS(gaussian_kl(GaussianParams::standard(1), p), csrr::Error);
}

TEST_CASE("gaussian kl agrees with a Monte-Carlo estimate") {
  // E_q[log q(z) - log p(z)] from 1e6 samples.
  auto mc = [](const GaussianParams& q, const GaussianParams& p, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n;
    const int N = 1000000;
    double acc = 0.0;
    for (int s = 0; s < N; ++s) {
      for (Eigen::Index i = 0; i < q.dim(); ++i) {
        const double e = n(rng);
        const double z = q.mu(i) + q.sigma(i) * e;
        const double lq = -std::log(q.sigma(i)) - 0.5 * e * e;
        const double d = (z - p.mu(i)) / p.sigma(i);
        const double lp = -std::log(p.sigma(i)) - 0.5 * d * d;
        acc += lq - lp;
      }
    }
    return acc / N;
  };
  GaussianParams q{Vec(2), Vec::Ones(2)};
  q.mu << 1.0, 0.0;
  CHECK(std::abs(mc(q, GaussianParams::standard(2), 1) - 0.5) < 1e-2);
  GaussianParams wide{Vec::Zero(1), Vec::Constant(1, 2.0)};
  CHECK(std::abs(mc(wide, GaussianParams::standard(1), 2) - 0.5 * (3.0 - std::log(4.0))) < 1e-2);
}

TEST_CASE("gaussian kl is non-negative on random pairs") {
  std::mt19937_64 rng(99);
  std::normal_distribution<double> n;
  std::uniform_real_distribution<double> s(0.05, 3.0);
  double worst = 0.0;
  for (int k = 0; k < 2000; ++k) {
    GaussianParams q{Vec(3), Vec(3)}, p{Vec(3), Vec(3)};
    for (int i = 0; i < 3; ++i) {
      q.mu(i) = n(rng);
      p.mu(i) = n(rng);
      q.sigma(i) = s(rng);
      p.sigma(i) = s(rng);
    }
    worst = std::min(worst, gaussian_kl(q, p));
  }
  CHECK(worst >= -1e-9);
}

TEST_CASE("glorot init bounds and zero biases") {
  ParamStore store;
  Param& w = store.add("w", 10, 20);
  Param& b = store.add("b", 10, 1);
  b.value.setOnes();
  std::mt19937_64 rng(1);
  glorot_init(w, rng);
  glorot_init(b, rng);
  const double limit = std::sqrt(6.0 / 30.0);
  CHECK(w.value.cwiseAbs().maxCoeff() <= limit);
  CHECK(w.value.cwiseAbs().maxCoeff() > 0.0);
  CHECK(b.value.isZero(0.0));
}
