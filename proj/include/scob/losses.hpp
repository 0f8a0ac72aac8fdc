// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "scob/tensor.hpp"

// Single-positive classification losses. Batch tensors are [B, L]; every
// per-sample term is averaged over the batch.
namespace scob {

inline constexpr Real kProbClamp = 1e-7;

struct DistributionPrior {
  Real k = 2.0;  // expected positives per image
  int num_classes = 6;

  void validate() const;
};

/// -log p_c for the observed class c of each row. z must be one-hot per row.
Tensor bce_single_positive(const Tensor& probs, const Tensor& z);

/// (1/L) sum_l BCE(p_l, y_l) with y under stop-gradient.
Tensor bce_pseudo(const Tensor& probs, const Tensor& soft_targets);

/// ((k_hat - k) / L)^2 with k_hat the batch mean of row sums.
Tensor expected_positive_regularizer(const Tensor& probs, const DistributionPrior& prior);

/// Batch mean of [bce_pseudo(A | S(B)) + bce_single_positive(A)] plus the
/// regularizer on A.
Tensor loss_sp(const Tensor& a, const Tensor& b, const Tensor& z, const DistributionPrior& prior);

/// (loss_sp(P | Y~) + loss_sp(Y~ | P)) / 2.
Tensor loss_class(const Tensor& probs, const Tensor& estimate, const Tensor& z, const DistributionPrior& prior);

/// Trainable logits [N, L]; row n belongs to training sample n.
class LabelEstimator {
 public:
  LabelEstimator() = default;
  /// Observed positives start at sigmoid >= 0.99, unknowns uniform in
  /// [0.5 - xi, 0.5 + xi] on the probability scale.
  LabelEstimator(std::span<const std::vector<std::uint8_t>> z, Real xi, std::mt19937_64& rng);

  std::int64_t rows() const { return rows_; }
  int num_classes() const { return cols_; }
  std::span<const Real> logits() const { return logits_; }
  std::span<Real> mutable_logits() { return logits_; }
  Real probability(std::int64_t row, int c) const;

  /// Copies the listed rows into a fresh requires-grad leaf [b, L].
  Tensor gather(std::span<const int> ids) const;

  static LabelEstimator from_logits(std::int64_t rows, int cols, std::vector<Real> logits);

 private:
  std::int64_t rows_ = 0;
  int cols_ = 0;
  std::vector<Real> logits_;
};

/// Logit given to observed positives at initialization.
inline constexpr Real kObservedLogit = 5.0;

}  // namespace scob
