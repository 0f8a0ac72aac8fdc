// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "scob/losses.hpp"
#include "scob/model.hpp"

namespace scob {

struct AdamHyper {
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real eps = 1e-8;

  bool operator==(const AdamHyper&) const = default;
};

/// Learning rate per parameter group.
struct GroupRates {
  Real backbone = 1e-3;
  Real smt = 4e-4;
  Real head = 1e-2;

  Real of(ParamGroup g) const;
};

/// Adam over a parameter table. Parameters without a gradient are skipped and
/// keep their moments and step count.
class Adam {
 public:
  Adam() = default;
  Adam(const ParameterTable& params, AdamHyper hyper = {});

  void step(ParameterTable& params, const GroupRates& rates);
  std::int64_t steps(std::size_t i) const { return count_[i]; }

  void save(std::ostream& os) const;
  static Adam load(std::istream& is);
  bool operator==(const Adam&) const = default;

 private:
  AdamHyper hyper_;
  std::vector<std::vector<Real>> m_, v_;
  std::vector<std::int64_t> count_;
};

/// Adam over the estimator logits, one step counter per row; rows outside
/// the batch never move.
class RowAdam {
 public:
  RowAdam() = default;
  RowAdam(std::int64_t rows, int cols, AdamHyper hyper = {});

  /// grads: [ids.size(), cols] row-aligned with ids.
  void step(LabelEstimator& estimator, std::span<const int> ids, std::span<const Real> grads, Real lr);

  void save(std::ostream& os) const;
  static RowAdam load(std::istream& is);
  bool operator==(const RowAdam&) const = default;

 private:
  AdamHyper hyper_;
  std::int64_t rows_ = 0;
  int cols_ = 0;
  std::vector<Real> m_, v_;
  std::vector<std::int64_t> count_;
};

}  // namespace scob
