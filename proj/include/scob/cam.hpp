// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "scob/model.hpp"

namespace scob {

/// Nonnegative class evidence over a token grid, row-major.
struct ActivationMap {
  int height = 0;
  int width = 0;
  int class_id = 0;
  int stage = 0;
  std::vector<Real> values;

  Real at(int i, int j) const { return values[static_cast<std::size_t>(i) * width + j]; }
};

struct SemanticMask {
  BinaryMask grid;
  int class_id = 0;
  int stage = 0;
  std::int64_t iteration = 0;
};

struct CamOptions {
  Real gamma = 0.5;
  int window = 3;
  bool normalize = true;  // min-max rescale before thresholding
};

/// features, grads: token-major [H*W, K]. Channel weight = spatial mean of
/// the gradient; map = ReLU(channel average of weight * feature).
ActivationMap gradient_activation(std::span<const Real> features, std::span<const Real> grads, int height, int width,
                                  int channels, int class_id = 0, int stage = 0);

/// Rescales to [0, 1]; a constant map becomes all zeros.
ActivationMap normalize_minmax(const ActivationMap& map);

/// Cell is foreground iff the zero-padded window mean (divisor window^2) of
/// the map around it reaches gamma. No normalization happens here.
SemanticMask threshold_cam(const ActivationMap& map, Real gamma = 0.5, int window = 3);

struct EStepResult {
  std::vector<MaskSet> masks;            // one per sample, for its positive class
  std::vector<ActivationMap> stage3;     // normalized maps, one per sample
  std::vector<ActivationMap> stage4;
  Tensor probs;                          // [B, L] predictions under all-zero masks
};

/// Index of the single positive in z; ContractError unless z is one-hot.
int positive_class(std::span<const std::uint8_t> z);

/// Grad-CAM extraction for each sample's observed class. Runs the network with
/// all-zero masks, backpropagates sum_b p[b, c_b] into the stage-3/4 tokens and
/// thresholds the resulting maps. Parameter values and gradients are left as
/// they were.
EStepResult e_step(const Network& net, const Tensor& pixels, std::span<const std::vector<std::uint8_t>> z,
                   const CamOptions& options = {}, std::int64_t iteration = 0);

}  // namespace scob
