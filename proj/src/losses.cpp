// SPDX-License-Identifier: Apache-2.0
#include "scob/losses.hpp"

#include <cmath>

#include "scob/error.hpp"
#include "scob/ops.hpp"

namespace scob {

void DistributionPrior::validate() const {
  if (num_classes < 1) throw ConfigError("prior needs at least one class");
  if (!(k >= 1 && k <= num_classes)) throw ConfigError("expected positive count must lie in [1, L]");
}

namespace {

void check_batch(const Tensor& a, const Tensor& b, const char* what) {
  if (a.rank() != 2 || a.dim(0) < 1) throw DimensionError(std::string(what) + ": expected a nonempty [B, L] batch");
  if (b.shape() != a.shape()) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

Tensor safe_log(const Tensor& p) { return ops::log(ops::clamp(p, kProbClamp, 1 - kProbClamp)); }

}  // namespace

Tensor bce_single_positive(const Tensor& probs, const Tensor& z) {
  check_batch(probs, z, "bce_single_positive");
  const auto L = z.dim(1);
  auto zv = z.values();
  for (std::int64_t b = 0; b < z.dim(0); ++b) {
    int ones = 0;
    for (std::int64_t c = 0; c < L; ++c) {
      const Real v = zv[b * L + c];
      if (v != 0 && v != 1) throw ContractError("observed labels must be 0 or 1");
      ones += v == 1;
    }
    if (ones != 1) throw ContractError("observed labels are not one-hot");
  }
  Tensor picked = ops::sum_all(ops::mul(safe_log(probs), ops::stop_gradient(z)));
  return ops::scale(picked, -1 / static_cast<Real>(z.dim(0)));
}

Tensor bce_pseudo(const Tensor& probs, const Tensor& soft_targets) {
  check_batch(probs, soft_targets, "bce_pseudo");
  Tensor y = ops::stop_gradient(soft_targets);
  Tensor one_minus_y = ops::add_scalar(ops::scale(y, -1), 1);
  Tensor log_p = safe_log(probs);
  Tensor log_q = safe_log(ops::add_scalar(ops::scale(probs, -1), 1));
  Tensor total = ops::sum_all(ops::add(ops::mul(y, log_p), ops::mul(one_minus_y, log_q)));
  return ops::scale(total, -1 / static_cast<Real>(probs.dim(0) * probs.dim(1)));
}

Tensor expected_positive_regularizer(const Tensor& probs, const DistributionPrior& prior) {
  if (probs.rank() != 2 || probs.dim(0) < 1) throw DimensionError("expected a nonempty [B, L] batch");
  if (probs.dim(1) != prior.num_classes) throw DimensionError("prior class count differs from the batch");
  Tensor k_hat = ops::scale(ops::sum_all(probs), 1 / static_cast<Real>(probs.dim(0)));
  Tensor gap = ops::scale(ops::add_scalar(k_hat, -prior.k), 1 / static_cast<Real>(prior.num_classes));
  return ops::mul(gap, gap);
}

Tensor loss_sp(const Tensor& a, const Tensor& b, const Tensor& z, const DistributionPrior& prior) {
  return ops::add(ops::add(bce_pseudo(a, b), bce_single_positive(a, z)), expected_positive_regularizer(a, prior));
}

Tensor loss_class(const Tensor& probs, const Tensor& estimate, const Tensor& z, const DistributionPrior& prior) {
  return ops::scale(ops::add(loss_sp(probs, estimate, z, prior), loss_sp(estimate, probs, z, prior)), 0.5);
}

LabelEstimator::LabelEstimator(std::span<const std::vector<std::uint8_t>> z, Real xi, std::mt19937_64& rng) {
  if (!(xi >= 0 && xi < 0.5)) throw ConfigError("estimator half-range xi must lie in [0, 0.5)");
  if (z.empty()) throw DataError("estimator needs at least one row");
  rows_ = static_cast<std::int64_t>(z.size());
  cols_ = static_cast<int>(z[0].size());
  logits_.resize(static_cast<std::size_t>(rows_) * cols_);
  std::uniform_real_distribution<double> u(0.5 - xi, 0.5 + xi);
  for (std::int64_t n = 0; n < rows_; ++n) {
    if (static_cast<int>(z[n].size()) != cols_) throw DimensionError("ragged observed label matrix");
    for (int c = 0; c < cols_; ++c) {
      Real& l = logits_[n * cols_ + c];
      if (z[n][c]) {
        l = kObservedLogit;
      } else if (xi == 0) {
        l = 0;
      } else {
        const double p = u(rng);
        l = static_cast<Real>(std::log(p / (1 - p)));
      }
    }
  }
}

Real LabelEstimator::probability(std::int64_t row, int c) const {
  if (row < 0 || row >= rows_ || c < 0 || c >= cols_) throw BoundsError("estimator index out of range");
  return 1 / (1 + std::exp(-logits_[row * cols_ + c]));
}

Tensor LabelEstimator::gather(std::span<const int> ids) const {
  std::vector<Real> v;
  v.reserve(ids.size() * cols_);
  for (int id : ids) {
    if (id < 0 || id >= rows_) throw BoundsError("estimator row out of range");
    v.insert(v.end(), logits_.begin() + static_cast<std::ptrdiff_t>(id) * cols_,
             logits_.begin() + static_cast<std::ptrdiff_t>(id + 1) * cols_);
  }
  return Tensor::from({static_cast<std::int64_t>(ids.size()), cols_}, std::move(v), true);
}

LabelEstimator LabelEstimator::from_logits(std::int64_t rows, int cols, std::vector<Real> logits) {
  if (rows < 0 || cols < 1 || logits.size() != static_cast<std::size_t>(rows) * cols) {
    throw DimensionError("estimator logits do not match rows x cols");
  }
  LabelEstimator e;
  e.rows_ = rows;
  e.cols_ = cols;
  e.logits_ = std::move(logits);
  return e;
}

}  // namespace scob
