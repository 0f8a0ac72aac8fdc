// SPDX-License-Identifier: Apache-2.0
#include "scob/optim.hpp"

#include <cmath>

#include "scob/binary_io.hpp"
#include "scob/error.hpp"

namespace scob {

Real GroupRates::of(ParamGroup g) const {
  switch (g) {
    case ParamGroup::Backbone: return backbone;
    case ParamGroup::Smt: return smt;
    case ParamGroup::Head: return head;
  }
  return backbone;
}

namespace {

void adam_update(std::span<Real> x, std::span<const Real> g, std::span<Real> m, std::span<Real> v, std::int64_t t,
                 Real lr, const AdamHyper& h) {
  const Real c1 = 1 - std::pow(h.beta1, static_cast<Real>(t));
  const Real c2 = 1 - std::pow(h.beta2, static_cast<Real>(t));
  for (std::size_t k = 0; k < x.size(); ++k) {
    m[k] = h.beta1 * m[k] + (1 - h.beta1) * g[k];
    v[k] = h.beta2 * v[k] + (1 - h.beta2) * g[k] * g[k];
    x[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + h.eps);
  }
}

void write_reals(std::ostream& os, const std::vector<Real>& v) {
  io::write<std::uint64_t>(os, v.size());
  for (Real x : v) io::write<double>(os, x);
}

std::vector<Real> read_reals(std::istream& is) {
  const auto n = io::read<std::uint64_t>(is);
  if (n > (1ull << 32)) throw FormatError("array length out of range");
  std::vector<Real> v(n);
  for (auto& x : v) x = static_cast<Real>(io::read<double>(is));
  return v;
}

void write_hyper(std::ostream& os, const AdamHyper& h) {
  io::write<double>(os, h.beta1);
  io::write<double>(os, h.beta2);
  io::write<double>(os, h.eps);
}

AdamHyper read_hyper(std::istream& is) {
  AdamHyper h;
  h.beta1 = static_cast<Real>(io::read<double>(is));
  h.beta2 = static_cast<Real>(io::read<double>(is));
  h.eps = static_cast<Real>(io::read<double>(is));
  return h;
}

}  // namespace

Adam::Adam(const ParameterTable& params, AdamHyper hyper) : hyper_(hyper) {
  for (const auto& e : params) {
    m_.emplace_back(e.tensor.numel(), 0);
    v_.emplace_back(e.tensor.numel(), 0);
    count_.push_back(0);
  }
}

void Adam::step(ParameterTable& params, const GroupRates& rates) {
  if (params.size() != m_.size()) throw ContractError("optimizer state does not match the parameter table");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& e = params[i];
    if (!e.tensor.has_grad()) continue;
    if (static_cast<std::size_t>(e.tensor.numel()) != m_[i].size()) throw ContractError("optimizer state size mismatch");
    ++count_[i];
    adam_update(e.tensor.mutable_values(), e.tensor.grad(), m_[i], v_[i], count_[i], rates.of(e.group), hyper_);
  }
}

void Adam::save(std::ostream& os) const {
  write_hyper(os, hyper_);
  io::write<std::uint64_t>(os, m_.size());
  for (std::size_t i = 0; i < m_.size(); ++i) {
    io::write<std::int64_t>(os, count_[i]);
    write_reals(os, m_[i]);
    write_reals(os, v_[i]);
  }
}

Adam Adam::load(std::istream& is) {
  Adam a;
  a.hyper_ = read_hyper(is);
  const auto n = io::read<std::uint64_t>(is);
  if (n > 100000) throw FormatError("parameter count out of range");
  for (std::uint64_t i = 0; i < n; ++i) {
    a.count_.push_back(io::read<std::int64_t>(is));
    a.m_.push_back(read_reals(is));
    a.v_.push_back(read_reals(is));
  }
  return a;
}

RowAdam::RowAdam(std::int64_t rows, int cols, AdamHyper hyper)
    : hyper_(hyper),
      rows_(rows),
      cols_(cols),
      m_(static_cast<std::size_t>(rows) * cols, 0),
      v_(static_cast<std::size_t>(rows) * cols, 0),
      count_(static_cast<std::size_t>(rows), 0) {}

void RowAdam::step(LabelEstimator& estimator, std::span<const int> ids, std::span<const Real> grads, Real lr) {
  if (estimator.rows() != rows_ || estimator.num_classes() != cols_) {
    throw ContractError("row optimizer does not match the estimator");
  }
  if (grads.size() != ids.size() * cols_) throw DimensionError("one gradient row per id required");
  auto logits = estimator.mutable_logits();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const int id = ids[r];
    if (id < 0 || id >= rows_) throw BoundsError("estimator row out of range");
    const std::size_t off = static_cast<std::size_t>(id) * cols_;
    ++count_[id];
    adam_update(logits.subspan(off, cols_), grads.subspan(r * cols_, cols_), std::span<Real>(m_).subspan(off, cols_),
                std::span<Real>(v_).subspan(off, cols_), count_[id], lr, hyper_);
  }
}

void RowAdam::save(std::ostream& os) const {
  write_hyper(os, hyper_);
  io::write<std::int64_t>(os, rows_);
  io::write<std::int32_t>(os, cols_);
  for (auto c : count_) io::write<std::int64_t>(os, c);
  write_reals(os, m_);
  write_reals(os, v_);
}

RowAdam RowAdam::load(std::istream& is) {
  RowAdam a;
  a.hyper_ = read_hyper(is);
  a.rows_ = io::read<std::int64_t>(is);
  a.cols_ = io::read<std::int32_t>(is);
  if (a.rows_ < 0 || a.rows_ > (1 << 26) || a.cols_ < 1 || a.cols_ > 4096) throw FormatError("estimator shape out of range");
  a.count_.resize(a.rows_);
  for (auto& c : a.count_) c = io::read<std::int64_t>(is);
  a.m_ = read_reals(is);
  a.v_ = read_reals(is);
  if (a.m_.size() != static_cast<std::size_t>(a.rows_) * a.cols_ || a.v_.size() != a.m_.size()) {
    throw FormatError("estimator moments do not match its shape");
  }
  return a;
}

}  // namespace scob
