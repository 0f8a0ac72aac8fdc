// SPDX-License-Identifier: Apache-2.0
#include "scob/contrastive.hpp"

#include <charconv>
#include <cmath>
#include <string>

#include "scob/error.hpp"
#include "scob/ops.hpp"

namespace scob {

void ContrastiveOptions::validate() const {
  if (!(tau > 0) || !std::isfinite(tau)) throw ConfigError("tau must be positive");
  if (!(lambda_c >= 0) || !std::isfinite(lambda_c)) throw ConfigError("lambda_c must be nonnegative");
}

DualNet::DualNet(const NetworkConfig& config, std::uint64_t seed, Real a)
    : online(config, seed), target(config, seed), alpha(a) {
  if (!(alpha >= 0 && alpha <= 1)) throw ConfigError("momentum alpha must lie in [0, 1]");
  for (auto& e : target.parameters()) e.tensor.set_requires_grad(false);
}

Tensor encode_online(const Network& online, const Tensor& pixels, std::span<const MaskSet> masks) {
  return online.forward(pixels, masks).pooled;
}

Tensor encode_target(const Network& target, const Tensor& pixels, std::span<const MaskSet> masks) {
  NoGradScope detached;
  return target.forward(pixels, masks).pooled;
}

Tensor info_nce(const Tensor& anchors, const Tensor& positives, std::span<const Tensor> negatives,
                const ContrastiveOptions& options) {
  options.validate();
  if (anchors.rank() != 2 || positives.shape() != anchors.shape()) {
    throw DimensionError("anchors and positives must both be [B, d]");
  }
  const auto B = anchors.dim(0), d = anchors.dim(1);
  if (static_cast<std::int64_t>(negatives.size()) != B) throw DimensionError("one negative set per anchor required");
  std::int64_t width = 0;
  for (const auto& n : negatives) {
    if (!n.defined()) continue;
    if (n.rank() != 2 || n.dim(1) != d) throw DimensionError("negatives must be [m, d]");
    width = std::max(width, n.dim(0));
  }

  Tensor h = options.normalize ? ops::l2_normalize(anchors) : anchors;
  Tensor pos = ops::stop_gradient(positives);
  if (options.normalize) pos = ops::l2_normalize(pos);

  // Negatives padded into [B, width, d]; padded logits are pushed far below
  // every real logit so they vanish from the softmax.
  constexpr Real kPad = -1e9;
  std::vector<Real> neg_vals(static_cast<std::size_t>(B * width * d), 0);
  std::vector<Real> pad(static_cast<std::size_t>(B * (1 + width)), 0);
  std::vector<Real> weight(static_cast<std::size_t>(B * (1 + width)), 0);
  for (std::int64_t b = 0; b < B; ++b) {
    const std::int64_t m = negatives[b].defined() ? negatives[b].dim(0) : 0;
    if (m > 0) {
      Tensor nb = options.normalize ? ops::l2_normalize(ops::stop_gradient(negatives[b])) : negatives[b];
      auto v = nb.values();
      std::copy(v.begin(), v.end(), neg_vals.begin() + b * width * d);
    }
    for (std::int64_t j = m; j < width; ++j) pad[b * (1 + width) + 1 + j] = kPad;
    weight[b * (1 + width)] = -options.lambda_c / static_cast<Real>(1 + m);
  }

  Tensor pos_logit = ops::reshape(ops::sum(ops::mul(h, pos), {1}), {B, 1});
  Tensor logits = pos_logit;
  if (width > 0) {
    Tensor neg = Tensor::from({B, width, d}, std::move(neg_vals));
    Tensor neg_logit = ops::reshape(ops::matmul(ops::reshape(h, {B, 1, d}), neg, true), {B, width});
    const Tensor parts[] = {pos_logit, neg_logit};
    logits = ops::concat(parts, 1);
  }
  logits = ops::add(ops::scale(logits, 1 / options.tau), Tensor::from({B, 1 + width}, std::move(pad)));
  Tensor log_prob = ops::log_softmax(logits, 1);
  return ops::scale(ops::sum_all(ops::mul(log_prob, Tensor::from({B, 1 + width}, std::move(weight)))),
                    1 / static_cast<Real>(B));
}

namespace {

// 1 - x on decimal digit strings, x in [0, 1] written in fixed notation.
std::string decimal_complement(const std::string& x) {
  const auto dot = x.find('.');
  const std::string ip = x.substr(0, dot);
  std::string frac = dot == std::string::npos ? "" : x.substr(dot + 1);
  if (ip == "1") return "0";
  if (ip != "0") throw ConfigError("momentum alpha must lie in [0, 1]");
  if (frac.empty()) return "1";
  // 10^n - frac as an n-digit number; the shortest spelling never ends in 0
  std::string out(frac.size(), '0');
  for (std::size_t k = 0; k < frac.size(); ++k) {
    out[k] = static_cast<char>('0' + (k + 1 == frac.size() ? 10 : 9) - (frac[k] - '0'));
  }
  return "0." + out;
}

}  // namespace

Real momentum_complement(Real alpha) {
  if (!(alpha >= 0 && alpha <= 1)) throw ConfigError("momentum alpha must lie in [0, 1]");
  char buf[512];
  auto res = std::to_chars(buf, buf + sizeof buf, alpha, std::chars_format::fixed);
  const std::string comp = decimal_complement(std::string(buf, res.ptr));
  Real out = 0;
  std::from_chars(comp.data(), comp.data() + comp.size(), out);
  return out;
}

void momentum_update(ParameterTable& target, const ParameterTable& online, Real alpha) {
  target.check_same_structure(online);
  const Real beta = momentum_complement(alpha);
  for (std::size_t i = 0; i < target.size(); ++i) {
    auto dst = target[i].tensor.mutable_values();
    auto src = online[i].tensor.values();
    if (beta == 1) {
      std::copy(src.begin(), src.end(), dst.begin());
      continue;
    }
    // same blend written so that a target equal to the online value stays put
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += beta * (src[k] - dst[k]);
  }
}

}  // namespace scob
