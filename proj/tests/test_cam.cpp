// SPDX-License-Identifier: Apache-2.0
#include <random>

#include "doctest.h"
#include "scob/cam.hpp"
#include "scob/error.hpp"
#include "scob/ops.hpp"

using namespace scob;

namespace {

ActivationMap filled(int h, int w, Real v) { return {h, w, 0, 3, std::vector<Real>(static_cast<std::size_t>(h) * w, v)}; }

// Padded-array reference for the window threshold.
BinaryMask reference_threshold(const ActivationMap& m, Real gamma, int l) {
  const int r = l / 2, ph = m.height + 2 * r, pw = m.width + 2 * r;
  std::vector<Real> pad(static_cast<std::size_t>(ph) * pw, 0);
  for (int i = 0; i < m.height; ++i) {
    for (int j = 0; j < m.width; ++j) pad[(i + r) * pw + j + r] = m.at(i, j);
  }
  BinaryMask out(m.height, m.width);
  for (int i = 0; i < m.height; ++i) {
    for (int j = 0; j < m.width; ++j) {
      Real s = 0;
      for (int a = 0; a < l; ++a) {
        for (int b = 0; b < l; ++b) s += pad[(i + a) * pw + j + b];
      }
      out.at(i, j) = s / (l * l) >= gamma;
    }
  }
  return out;
}

NetworkConfig small_net() {
  NetworkConfig c;
  c.backbone.widths = {4, 6, 8, 8};
  c.backbone.input_size = 64;
  c.smt.d_model = 8;
  c.smt.num_heads = 2;
  c.smt.hidden_dim = 16;
  c.num_classes = 4;
  return c;
}

Tensor random_pixels(int B, int S, std::mt19937_64& rng) {
  std::uniform_real_distribution<Real> u(0, 1);
  std::vector<Real> v(static_cast<std::size_t>(B) * 3 * S * S);
  for (auto& x : v) x = u(rng);
  return Tensor::from({B, 3, S, S}, v);
}

}  // namespace

TEST_CASE("gradient activation examples") {
  const std::vector<Real> f{3}, g{2};
  CHECK(gradient_activation(f, g, 1, 1, 1).values[0] == 6);

  std::mt19937_64 rng(1);
  std::uniform_real_distribution<Real> u(0, 1);
  std::vector<Real> feat(16 * 5), neg(16 * 5);
  for (auto& x : feat) x = u(rng);
  for (auto& x : neg) x = -u(rng);
  for (Real v : gradient_activation(feat, neg, 4, 4, 5).values) CHECK(v == 0);

  std::vector<Real> grad(16 * 5);
  for (auto& x : grad) x = u(rng) - 0.3;
  auto base = gradient_activation(feat, grad, 4, 4, 5);
  std::vector<Real> scaled = feat;
  for (auto& x : scaled) x *= 2.5;
  auto big = gradient_activation(scaled, grad, 4, 4, 5);
  for (std::size_t i = 0; i < base.values.size(); ++i) CHECK(big.values[i] == doctest::Approx(2.5 * base.values[i]));

  CHECK_THROWS_AS(gradient_activation(feat, std::vector<Real>(3), 4, 4, 5), DimensionError);
}

TEST_CASE("threshold examples") {
  for (auto c : threshold_cam(filled(8, 8, 0)).grid.cells) CHECK(c == 0);
  auto m = threshold_cam(filled(8, 8, 1), 0.5, 3).grid;
  for (int i = 1; i < 7; ++i) {
    for (int j = 1; j < 7; ++j) CHECK(m.at(i, j) == 1);
  }
  CHECK(m.at(0, 0) == 0);  // 4/9
  CHECK(m.at(7, 7) == 0);
  CHECK(m.at(0, 3) == 1);  // 6/9
  CHECK_THROWS_AS(threshold_cam(filled(8, 8, 1), 1.5), ConfigError);
  CHECK_THROWS_AS(threshold_cam(filled(8, 8, 1), -0.1), ConfigError);
  CHECK_THROWS_AS(threshold_cam(filled(8, 8, 1), 0.5, 2), ConfigError);
  CHECK_THROWS_AS(threshold_cam(filled(2, 2, 1), 0.5, 3), ConfigError);
}

TEST_CASE("threshold matches padded reference and is monotone in gamma") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<Real> u(0, 1);
  for (int trial = 0; trial < 200; ++trial) {
    const int h = 3 + trial % 6, w = 3 + (trial / 6) % 6;
    ActivationMap m = filled(h, w, 0);
    for (auto& v : m.values) v = u(rng);
    const Real g1 = u(rng), g2 = g1 + (1 - g1) * u(rng);
    auto a = threshold_cam(m, g1, 3).grid;
    auto b = threshold_cam(m, g2, 3).grid;
    CHECK(a == reference_threshold(m, g1, 3));
    for (std::size_t i = 0; i < a.cells.size(); ++i) CHECK(b.cells[i] <= a.cells[i]);
  }
}

TEST_CASE("min-max normalization") {
  ActivationMap m = filled(2, 2, 0);
  m.values = {1, 3, 2, 5};
  auto n = normalize_minmax(m);
  CHECK(n.values == std::vector<Real>{0, 0.5, 0.25, 1});
  for (Real v : normalize_minmax(filled(3, 3, 4)).values) CHECK(v == 0);
}

TEST_CASE("positive_class requires one-hot labels") {
  const std::vector<std::uint8_t> ok{0, 0, 1}, none{0, 0, 0}, two{1, 0, 1};
  CHECK(positive_class(ok) == 2);
  CHECK_THROWS_AS(positive_class(none), ContractError);
  CHECK_THROWS_AS(positive_class(two), ContractError);
}

TEST_CASE("e_step is read-only and pure") {
  Network net(small_net(), 3);
  std::mt19937_64 rng(3);
  auto px = random_pixels(3, 64, rng);
  std::vector<std::vector<std::uint8_t>> z{{1, 0, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}};
  const auto before = net.parameters().checksum();
  auto a = e_step(net, px, z);
  auto b = e_step(net, px, z);
  CHECK(net.parameters().checksum() == before);
  for (const auto& e : net.parameters()) CHECK_FALSE(e.tensor.has_grad());
  REQUIRE(a.masks.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(a.masks[i].stage3 == b.masks[i].stage3);
    CHECK(a.masks[i].stage4 == b.masks[i].stage4);
    CHECK(a.masks[i].stage3.height == 8);
    CHECK(a.masks[i].stage4.height == 4);
    for (Real v : a.stage3[i].values) CHECK((v >= 0 && v <= 1));
  }
  CHECK(a.stage3[1].class_id == 2);

  z[1] = {0, 1, 1, 0};
  CHECK_THROWS_AS(e_step(net, px, z), ContractError);
}

TEST_CASE("e_step maps agree with finite-difference gradients of the class score") {
  Network net(small_net(), 4);
  std::mt19937_64 rng(4);
  auto px = random_pixels(2, 64, rng);
  std::vector<std::vector<std::uint8_t>> z{{0, 1, 0, 0}, {0, 0, 0, 1}};
  CamOptions raw;
  raw.normalize = false;
  auto res = e_step(net, px, z, raw);

  auto [s3, s4] = net.backbone_forward(px);
  const auto zero = net.zero_masks(2);
  const int cls[] = {1, 3};
  const Real eps = 1e-6;
  for (int stage = 0; stage < 2; ++stage) {
    TokenGrid base = stage == 0 ? s3 : s4;
    const auto T = static_cast<std::size_t>(base.height) * base.width;
    const int K = static_cast<int>(base.tokens.dim(2));
    std::vector<Real> vals(base.tokens.values().begin(), base.tokens.values().end());
    std::vector<Real> grad(vals.size());
    for (std::size_t i = 0; i < vals.size(); ++i) {
      auto eval = [&](Real delta) {
        auto v = vals;
        v[i] += delta;
        TokenGrid g = base;
        g.tokens = Tensor::from(base.tokens.shape(), v);
        auto out = stage == 0 ? net.head_forward(g, s4, zero) : net.head_forward(s3, g, zero);
        const auto b = static_cast<std::int64_t>(i / (T * K));
        return out.probs.at({b, cls[b]});
      };
      grad[i] = (eval(eps) - eval(-eps)) / (2 * eps);
    }
    for (int b = 0; b < 2; ++b) {
      const std::size_t off = b * T * K;
      auto ref = gradient_activation(std::span<const Real>(vals).subspan(off, T * K),
                                     std::span<const Real>(grad).subspan(off, T * K), base.height, base.width, K);
      const auto& got = stage == 0 ? res.stage3[b] : res.stage4[b];
      for (std::size_t t = 0; t < T; ++t) CHECK(got.values[t] == doctest::Approx(ref.values[t]).epsilon(1e-6));
    }
  }
}
