// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include "scob/model.hpp"

namespace scob {

struct ContrastiveOptions {
  Real tau = 1.0;
  Real lambda_c = 0.1;
  bool normalize = true;  // cosine similarities; false uses raw dot products

  void validate() const;
};

/// Online network plus its momentum-averaged target copy.
struct DualNet {
  Network online;
  Network target;
  Real alpha = 0.999;

  DualNet(const NetworkConfig& config, std::uint64_t seed, Real alpha = 0.999);
};

/// Differentiable pooled feature of the online network, [B, 2 * d_model].
Tensor encode_online(const Network& online, const Tensor& pixels, std::span<const MaskSet> masks);
/// Detached pooled feature of the target network.
Tensor encode_target(const Network& target, const Tensor& pixels, std::span<const MaskSet> masks);

/// Batch mean over anchors of
///   -lambda_c / (1 + m_b) * log( e^{h.h+/tau} / (e^{h.h+/tau} + sum_j e^{h.h-_j/tau}) ).
/// anchors: [B, d]; positives: [B, d] (treated as constants); negatives[b]:
/// [m_b, d] or an undefined tensor for m_b = 0.
Tensor info_nce(const Tensor& anchors, const Tensor& positives, std::span<const Tensor> negatives,
                const ContrastiveOptions& options = {});

/// 1 - alpha evaluated on the shortest decimal spelling of alpha, so that
/// e.g. 0.999 yields exactly the double nearest 0.001.
Real momentum_complement(Real alpha);

/// target <- alpha * target + (1 - alpha) * online, elementwise.
void momentum_update(ParameterTable& target, const ParameterTable& online, Real alpha);

}  // namespace scob
