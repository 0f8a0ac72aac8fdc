// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "scob/error.hpp"
#include "scob/gradcheck.hpp"
#include "scob/losses.hpp"
#include "scob/ops.hpp"
#include "scob/optim.hpp"

using namespace scob;

namespace {

Tensor random_probs(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<Real> u(0.02, 0.98);
  std::vector<Real> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

Tensor one_hot_rows(int B, int L, std::mt19937_64& rng) {
  std::vector<Real> v(static_cast<std::size_t>(B) * L, 0);
  for (int b = 0; b < B; ++b) v[b * L + rng() % L] = 1;
  return Tensor::from({B, L}, v);
}

// Scalar evaluations of the three terms.
Real ref_pseudo(const Tensor& p, const Tensor& y) {
  const auto B = p.dim(0), L = p.dim(1);
  Real s = 0;
  for (std::int64_t i = 0; i < B * L; ++i) {
    const Real a = std::clamp<Real>(p.values()[i], 1e-7, 1 - 1e-7), t = y.values()[i];
    s += -(t * std::log(a) + (1 - t) * std::log(1 - a));
  }
  return s / (B * L);
}

Real ref_single(const Tensor& p, const Tensor& z) {
  Real s = 0;
  for (std::int64_t i = 0; i < p.numel(); ++i) {
    if (z.values()[i] == 1) s += -std::log(std::clamp<Real>(p.values()[i], 1e-7, 1 - 1e-7));
  }
  return s / p.dim(0);
}

Real ref_epr(const Tensor& p, Real k) {
  Real s = 0;
  for (Real v : p.values()) s += v;
  const Real gap = (s / p.dim(0) - k) / p.dim(1);
  return gap * gap;
}

}  // namespace

TEST_CASE("single-positive BCE") {
  auto z = Tensor::from({1, 3}, {0, 1, 0});
  CHECK(bce_single_positive(Tensor::from({1, 3}, {0.2, 1.0, 0.9}), z).item() < 1e-6);
  CHECK(bce_single_positive(Tensor::from({1, 3}, {0.2, 0.5, 0.9}), z).item() == doctest::Approx(std::log(2.0)));
  CHECK(bce_single_positive(Tensor::from({1, 3}, {0.7, 0.5, 0.1}), z).item() ==
        bce_single_positive(Tensor::from({1, 3}, {0.2, 0.5, 0.9}), z).item());
  CHECK(std::isfinite(bce_single_positive(Tensor::from({1, 3}, {0.2, 0.0, 0.9}), z).item()));
  CHECK_THROWS_AS(bce_single_positive(Tensor::full({1, 3}, 0.5), Tensor::from({1, 3}, {1, 1, 0})), ContractError);
}

TEST_CASE("pseudo-label BCE and its stop-gradient") {
  CHECK(bce_pseudo(Tensor::full({2, 4}, 0.5), Tensor::full({2, 4}, 0.5)).item() == doctest::Approx(std::log(2.0)));
  auto hard = Tensor::from({1, 4}, {1, 0, 1, 0});
  CHECK(bce_pseudo(hard, hard).item() < 1e-6);

  auto p = Tensor::from({1, 2}, {0.3, 0.6}, true);
  auto y = Tensor::from({1, 2}, {0.8, 0.1}, true);
  Tape tape;
  Tensor l;
  {
    TapeScope s(tape);
    l = bce_pseudo(p, y);
  }
  tape.backward(l);
  CHECK(p.has_grad());
  CHECK_FALSE(y.has_grad());
}

TEST_CASE("expected positive regularizer") {
  DistributionPrior prior{1.5, 4};
  CHECK(expected_positive_regularizer(Tensor::full({2, 4}, 0.5), prior).item() == 0.015625);
  DistributionPrior exact{2.0, 4};
  CHECK(expected_positive_regularizer(Tensor::full({2, 4}, 0.5), exact).item() == 0);
  CHECK_THROWS_AS((DistributionPrior{0.5, 4}.validate()), ConfigError);

  std::mt19937_64 rng(3);
  auto p = random_probs({5, 4}, rng);
  std::vector<Real> v(p.values().begin(), p.values().end()), w(v.size());
  const int rows[] = {3, 0, 4, 1, 2}, cols[] = {2, 3, 1, 0};
  for (int b = 0; b < 5; ++b) {
    for (int c = 0; c < 4; ++c) w[b * 4 + c] = v[rows[b] * 4 + cols[c]];
  }
  CHECK(expected_positive_regularizer(Tensor::from({5, 4}, w), prior).item() ==
        doctest::Approx(expected_positive_regularizer(p, prior).item()).epsilon(1e-14));
}

TEST_CASE("loss_sp and loss_class decompose into independent terms") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    const int B = 1 + trial % 8, L = 3 + trial % 4;
    DistributionPrior prior{1 + (trial % 3) * 0.5, L};
    auto p = random_probs({B, L}, rng);
    auto y = random_probs({B, L}, rng);
    auto z = one_hot_rows(B, L, rng);
    const Real sp_py = ref_pseudo(p, y) + ref_single(p, z) + ref_epr(p, prior.k);
    const Real sp_yp = ref_pseudo(y, p) + ref_single(y, z) + ref_epr(y, prior.k);
    CHECK(loss_sp(p, y, z, prior).item() == doctest::Approx(sp_py).epsilon(1e-12));
    CHECK(loss_class(p, y, z, prior).item() == doctest::Approx((sp_py + sp_yp) / 2).epsilon(1e-12));
    CHECK(loss_class(p, y, z, prior).item() >= 0);
  }

  auto hard = Tensor::from({2, 3}, {1, 0, 0, 0, 1, 0});
  CHECK(loss_class(hard, hard, hard, DistributionPrior{1.0, 3}).item() < 1e-5);
}

TEST_CASE("loss_class gradient routing") {
  std::mt19937_64 rng(5);
  DistributionPrior prior{2.0, 4};
  auto z = one_hot_rows(3, 4, rng);
  auto p = random_probs({3, 4}, rng);
  p.set_requires_grad(true);
  auto logits = Tensor::from({3, 4}, {0.1, -0.3, 0.5, 0.2, 1.0, -1.0, 0.0, 0.4, -0.2, 0.3, 0.9, -0.6}, true);

  // dL_sp(P|Y)/dY and dL_sp(Y|P)/dP vanish
  {
    Tape tape;
    Tensor l;
    {
      TapeScope s(tape);
      l = loss_sp(p, ops::sigmoid(logits), z, prior);
    }
    tape.backward(l);
    CHECK_FALSE(logits.has_grad());
    p.zero_grad();
  }
  {
    Tape tape;
    Tensor l;
    {
      TapeScope s(tape);
      l = loss_sp(ops::sigmoid(logits), p, z, prior);
    }
    tape.backward(l);
    CHECK_FALSE(p.has_grad());
    Real g = 0;
    for (Real v : logits.grad()) g += std::abs(v);
    CHECK(g > 0);
    logits.zero_grad();
  }
  // with the target held constant each direction is an ordinary function of its first argument
  const Tensor p_fixed = p.clone();
  auto f = [&](const Tensor& x) { return loss_sp(ops::sigmoid(x), p_fixed, z, prior); };
  CHECK(finite_diff_check(f, logits, 1e-5) < 1e-4);
  const Tensor y_fixed = ops::stop_gradient(ops::sigmoid(logits));
  auto g = [&](const Tensor& x) { return loss_sp(x, y_fixed, z, prior); };
  CHECK(finite_diff_check(g, p, 1e-5) < 1e-4);
}

TEST_CASE("estimator initialization") {
  std::mt19937_64 rng(6);
  std::vector<std::vector<std::uint8_t>> z(500, std::vector<std::uint8_t>(6, 0));
  for (auto& row : z) row[rng() % 6] = 1;
  LabelEstimator est(z, 0.3, rng);
  Real lo = 1, hi = 0;
  for (int n = 0; n < 500; ++n) {
    for (int c = 0; c < 6; ++c) {
      const Real p = est.probability(n, c);
      if (z[n][c]) {
        CHECK(p >= 0.99);
      } else {
        lo = std::min(lo, p);
        hi = std::max(hi, p);
      }
    }
  }
  CHECK(lo >= 0.2);
  CHECK(hi <= 0.8);
  CHECK(lo < 0.25);  // the range is actually explored
  CHECK(hi > 0.75);

  LabelEstimator flat(z, 0.0, rng);
  for (int c = 0; c < 6; ++c) {
    if (!z[0][c]) CHECK(flat.probability(0, c) == 0.5);
  }
  CHECK_THROWS_AS(LabelEstimator(z, 0.5, rng), ConfigError);
  CHECK_THROWS_AS(LabelEstimator(z, -0.1, rng), ConfigError);
}

TEST_CASE("row-wise Adam leaves other rows untouched") {
  std::mt19937_64 rng(7);
  std::vector<std::vector<std::uint8_t>> z(10, {1, 0, 0});
  LabelEstimator est(z, 0.3, rng);
  const std::vector<Real> before(est.logits().begin(), est.logits().end());
  RowAdam opt(10, 3);
  const std::vector<int> ids{2, 7};
  const std::vector<Real> grads{1, -1, 0.5, 0.2, 0.3, -0.4};
  opt.step(est, ids, grads, 0.01);
  for (int n = 0; n < 10; ++n) {
    for (int c = 0; c < 3; ++c) {
      const bool touched = (n == 2 || n == 7);
      CHECK((est.logits()[n * 3 + c] != before[n * 3 + c]) == touched);
    }
  }
  // first Adam step moves each coordinate by lr against the gradient sign
  CHECK(est.logits()[2 * 3] == doctest::Approx(before[6] - 0.01).epsilon(1e-9));

  std::stringstream ss;
  opt.save(ss);
  CHECK(RowAdam::load(ss) == opt);
}
