// SPDX-License-Identifier: Apache-2.0
#include "scob/cam.hpp"

#include <algorithm>
#include <cmath>

#include "scob/error.hpp"
#include "scob/ops.hpp"

namespace scob {

ActivationMap gradient_activation(std::span<const Real> features, std::span<const Real> grads, int height, int width,
                                  int channels, int class_id, int stage) {
  if (height < 1 || width < 1 || channels < 1) throw DimensionError("activation grid must be nonempty");
  const std::size_t T = static_cast<std::size_t>(height) * width;
  if (features.size() != T * channels || grads.size() != features.size()) {
    throw DimensionError("features and gradients must both be [H*W, K]");
  }
  std::vector<Real> weight(channels, 0);
  for (std::size_t t = 0; t < T; ++t) {
    for (int k = 0; k < channels; ++k) weight[k] += grads[t * channels + k];
  }
  for (auto& w : weight) w /= static_cast<Real>(T);

  ActivationMap map{height, width, class_id, stage, std::vector<Real>(T)};
  for (std::size_t t = 0; t < T; ++t) {
    Real s = 0;
    for (int k = 0; k < channels; ++k) s += weight[k] * features[t * channels + k];
    map.values[t] = std::max<Real>(0, s / channels);
  }
  return map;
}

ActivationMap normalize_minmax(const ActivationMap& map) {
  ActivationMap out = map;
  if (map.values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(map.values.begin(), map.values.end());
  const Real a = *lo, b = *hi;
  for (auto& v : out.values) v = b > a ? (v - a) / (b - a) : 0;
  return out;
}

SemanticMask threshold_cam(const ActivationMap& map, Real gamma, int window) {
  if (!(gamma >= 0 && gamma <= 1)) throw ConfigError("gamma_cam must lie in [0, 1]");
  if (window < 1 || window % 2 == 0) throw ConfigError("window length must be odd and positive");
  if (window > std::min(map.height, map.width)) throw ConfigError("window larger than the activation grid");
  const int r = window / 2;
  const Real divisor = static_cast<Real>(window) * window;
  SemanticMask m{BinaryMask(map.height, map.width), map.class_id, map.stage, 0};
  for (int i = 0; i < map.height; ++i) {
    for (int j = 0; j < map.width; ++j) {
      Real s = 0;
      for (int di = -r; di <= r; ++di) {
        for (int dj = -r; dj <= r; ++dj) {
          const int y = i + di, x = j + dj;
          if (y >= 0 && y < map.height && x >= 0 && x < map.width) s += map.at(y, x);
        }
      }
      m.grid.at(i, j) = s / divisor >= gamma ? 1 : 0;
    }
  }
  return m;
}

int positive_class(std::span<const std::uint8_t> z) {
  int found = -1;
  for (std::size_t c = 0; c < z.size(); ++c) {
    if (z[c] > 1) throw ContractError("label entries must be 0 or 1");
    if (z[c] == 1) {
      if (found >= 0) throw ContractError("observed labels are not one-hot");
      found = static_cast<int>(c);
    }
  }
  if (found < 0) throw ContractError("observed labels are not one-hot");
  return found;
}

EStepResult e_step(const Network& net, const Tensor& pixels, std::span<const std::vector<std::uint8_t>> z,
                   const CamOptions& options, std::int64_t iteration) {
  const auto B = pixels.rank() > 0 ? pixels.dim(0) : 0;
  if (static_cast<std::int64_t>(z.size()) != B) throw DimensionError("one label vector per image required");
  const int L = net.config().num_classes;
  std::vector<int> cls(z.size());
  std::vector<Real> select(static_cast<std::size_t>(B) * L, 0);
  for (std::size_t b = 0; b < z.size(); ++b) {
    if (static_cast<int>(z[b].size()) != L) throw DimensionError("label vector length differs from num_classes");
    cls[b] = positive_class(z[b]);
    select[b * L + cls[b]] = 1;
  }

  // Keep the caller's gradient buffers intact.
  std::vector<std::vector<Real>> saved;
  for (const auto& e : net.parameters()) saved.push_back(e.tensor.impl()->grad);

  ForwardOptions fwd;
  fwd.stage_tokens_as_leaves = true;
  const auto zero = net.zero_masks(static_cast<std::size_t>(B));
  Tape tape;
  NetworkOutput out;
  Tensor score;
  {
    TapeScope scope(tape);
    out = net.forward(pixels, zero, fwd);
    score = ops::sum_all(ops::mul(out.probs, Tensor::from({B, L}, select)));
  }
  tape.backward(score);

  std::size_t i = 0;
  for (const auto& e : net.parameters()) e.tensor.impl()->grad = std::move(saved[i++]);

  EStepResult res;
  res.probs = ops::stop_gradient(out.probs);
  res.masks.resize(static_cast<std::size_t>(B));
  for (int s = 0; s < 2; ++s) {
    const TokenGrid& g = s == 0 ? out.stage3 : out.stage4;
    const auto T = static_cast<std::size_t>(g.height) * g.width;
    const int K = static_cast<int>(g.tokens.dim(2));
    auto fv = g.tokens.values();
    auto gv = g.tokens.grad();
    for (std::int64_t b = 0; b < B; ++b) {
      const std::size_t off = static_cast<std::size_t>(b) * T * K;
      auto map = gradient_activation(fv.subspan(off, T * K), gv.subspan(off, T * K), g.height, g.width, K, cls[b], g.stage);
      if (options.normalize) map = normalize_minmax(map);
      // a 1x1 grid cannot host the smoothing window; fall back to the cell itself
      const int window = std::min({options.window, g.height, g.width});
      auto mask = threshold_cam(map, options.gamma, window % 2 ? window : window - 1);
      mask.iteration = iteration;
      (s == 0 ? res.masks[b].stage3 : res.masks[b].stage4) = std::move(mask.grid);
      (s == 0 ? res.stage3 : res.stage4).push_back(std::move(map));
    }
  }
  return res;
}

}  // namespace scob
