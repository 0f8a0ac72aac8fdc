// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include "doctest.h"
#include "scob/contrastive.hpp"
#include "scob/error.hpp"
#include "scob/gradcheck.hpp"
#include "scob/ops.hpp"

using namespace scob;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, Real lo = -1, Real hi = 1) {
  std::uniform_real_distribution<Real> u(lo, hi);
  std::vector<Real> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

std::vector<Real> unit(std::span<const Real> v) {
  Real n = 0;
  for (Real x : v) n += x * x;
  n = std::sqrt(n + 1e-12);
  std::vector<Real> out(v.begin(), v.end());
  for (auto& x : out) x /= n;
  return out;
}

Real dot(const std::vector<Real>& a, const std::vector<Real>& b) {
  Real s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Direct per-anchor evaluation of the loss.
Real reference_nce(const Tensor& anchors, const Tensor& positives, const std::vector<Tensor>& negs, Real tau,
                   Real lambda) {
  const auto B = anchors.dim(0), d = anchors.dim(1);
  Real total = 0;
  for (std::int64_t b = 0; b < B; ++b) {
    auto h = unit(anchors.values().subspan(b * d, d));
    auto hp = unit(positives.values().subspan(b * d, d));
    const Real num = std::exp(dot(h, hp) / tau);
    Real den = num;
    const std::int64_t m = negs[b].defined() ? negs[b].dim(0) : 0;
    for (std::int64_t j = 0; j < m; ++j) den += std::exp(dot(h, unit(negs[b].values().subspan(j * d, d))) / tau);
    total += -lambda / (1 + m) * std::log(num / den);
  }
  return total / B;
}

NetworkConfig tiny() {
  NetworkConfig c;
  c.backbone.widths = {4, 4, 6, 6};
  c.backbone.input_size = 32;
  c.smt.d_model = 8;
  c.smt.num_heads = 2;
  c.smt.hidden_dim = 8;
  c.num_classes = 3;
  return c;
}

}  // namespace

TEST_CASE("info_nce unit values") {
  auto h = Tensor::from({1, 3}, {1, 2, 3});
  std::vector<Tensor> none{Tensor()};
  CHECK(info_nce(h, h, none).item() == 0);

  auto p = Tensor::from({1, 3}, {0.5, -1, 2});
  std::vector<Tensor> same{p.clone()};
  const Real got = info_nce(h, p, same).item();
  CHECK(std::abs(got - 0.1 * 0.5 * std::log(2.0)) < 1e-9);

  ContrastiveOptions bad;
  bad.tau = 0;
  CHECK_THROWS_AS(info_nce(h, p, same, bad), ConfigError);
  CHECK_THROWS_AS(info_nce(h, Tensor::zeros({1, 2}), same), DimensionError);
}

TEST_CASE("info_nce matches a direct evaluation with ragged negatives") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const int B = 1 + trial % 4, d = 2 + trial % 5;
    auto a = random_tensor({B, d}, rng);
    auto p = random_tensor({B, d}, rng);
    std::vector<Tensor> negs;
    for (int b = 0; b < B; ++b) {
      const int m = static_cast<int>(rng() % 5);
      negs.push_back(m ? random_tensor({m, d}, rng) : Tensor());
    }
    ContrastiveOptions opt;
    opt.tau = 0.2 + 0.1 * (trial % 9);
    const Real got = info_nce(a, p, negs, opt).item();
    CHECK(got == doctest::Approx(reference_nce(a, p, negs, opt.tau, opt.lambda_c)).epsilon(1e-12));
    CHECK(got >= 0);
    auto f = [&](const Tensor& x) { return info_nce(x, p, negs, opt); };
    CHECK(finite_diff_check(f, a, 1e-5) < 1e-4);
  }
}

TEST_CASE("info_nce decreases as the positive similarity grows") {
  auto h = Tensor::from({1, 2}, {1, 0});
  std::vector<Tensor> negs{Tensor::from({2, 2}, {0, 1, -1, 0.2})};
  Real prev = 1e9;
  for (int k = 0; k <= 20; ++k) {
    const Real angle = 3.0 * (1 - k / 20.0);
    auto pos = Tensor::from({1, 2}, {std::cos(angle), std::sin(angle)});
    const Real l = info_nce(h, pos, negs).item();
    CHECK(l < prev);
    prev = l;
  }
}

TEST_CASE("momentum complement and blend") {
  CHECK(momentum_complement(0.999) == 0.001);
  CHECK(momentum_complement(0.9) == 0.1);
  CHECK(momentum_complement(0.5) == 0.5);
  CHECK(momentum_complement(0.0) == 1.0);
  CHECK(momentum_complement(1.0) == 0.0);
  CHECK(momentum_complement(0.99999) == 0.00001);
  CHECK_THROWS_AS(momentum_complement(1.5), ConfigError);

  ParameterTable on, tar;
  on.add("w", ParamGroup::Head, Tensor::full({4}, 1));
  tar.add("w", ParamGroup::Head, Tensor::zeros({4}));
  momentum_update(tar, on, 0.999);
  for (Real v : tar[0].tensor.values()) CHECK(v == 0.001);

  ParameterTable same;
  same.add("w", ParamGroup::Head, Tensor::from({3}, {0.3, -7.1, 1e-3}));
  ParameterTable copy;
  copy.add("w", ParamGroup::Head, same[0].tensor.clone());
  momentum_update(copy, same, 0.999);
  CHECK(copy.checksum() == same.checksum());

  std::mt19937_64 rng(2);
  ParameterTable a, b;
  a.add("w", ParamGroup::Head, random_tensor({50}, rng));
  b.add("w", ParamGroup::Head, random_tensor({50}, rng));
  auto dist = [&] {
    Real s = 0;
    for (int i = 0; i < 50; ++i) s += std::pow(a[0].tensor.values()[i] - b[0].tensor.values()[i], 2);
    return std::sqrt(s);
  };
  const Real before = dist();
  momentum_update(a, b, 0.9);
  CHECK(dist() == doctest::Approx(0.9 * before).epsilon(1e-12));
  momentum_update(a, b, 0.0);
  CHECK(a.checksum() == b.checksum());

  ParameterTable other;
  other.add("v", ParamGroup::Head, Tensor::zeros({50}));
  CHECK_THROWS_AS(momentum_update(a, other, 0.5), ContractError);
}

TEST_CASE("online and target encoders") {
  DualNet net(tiny(), 5);
  CHECK(net.online.parameters().checksum() == net.target.parameters().checksum());
  std::mt19937_64 rng(5);
  auto px = random_tensor({2, 3, 32, 32}, rng, 0, 1);
  auto masks = net.online.zero_masks(2);
  masks[0].stage3.at(1, 1) = 1;

  Tape tape;
  Tensor h, loss;
  {
    TapeScope scope(tape);
    h = encode_online(net.online, px, masks);
    auto hp = encode_target(net.target, px, masks);
    CHECK_FALSE(hp.requires_grad());
    CHECK(h.shape() == Shape{2, 16});
    CHECK(std::vector<Real>(h.values().begin(), h.values().end()) ==
          std::vector<Real>(hp.values().begin(), hp.values().end()));
    std::vector<Tensor> negs{random_tensor({3, 16}, rng), Tensor()};
    loss = ops::add(info_nce(h, hp, negs), ops::scale(ops::sum_all(h), 1e-3));
  }
  tape.backward(loss);
  for (const auto& e : net.target.parameters()) CHECK_FALSE(e.tensor.has_grad());
  Real g = 0;
  for (Real v : net.online.parameters().find("backbone.stage1.weight")->tensor.grad()) g += std::abs(v);
  CHECK(g > 0);
}
