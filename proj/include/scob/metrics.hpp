// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "scob/dataset.hpp"
#include "scob/tensor.hpp"

namespace scob {

/// Row-major N x L score matrix with matching 0/1 labels.
struct ScoreTable {
  int rows = 0;
  int cols = 0;
  std::vector<Real> scores;
  std::vector<std::uint8_t> labels;

  void check() const;
};

struct ApResult {
  Real map = 0;
  std::vector<Real> per_class;     // NaN for skipped classes
  std::vector<int> skipped_classes;  // no positive label anywhere
};

/// Non-interpolated AP per class (precision at each positive, ties ranked by
/// row index), averaged over classes that have positives.
ApResult mean_average_precision(const ScoreTable& table);

struct MetricRow {
  Real map = 0;
  Real op = 0, orec = 0, of1 = 0;
  Real cp = 0, cr = 0, cf1 = 0;
  Real threshold = 0.5;

  bool operator==(const MetricRow&) const = default;
};

/// Overall (pooled) and per-class-averaged precision/recall at a threshold.
/// F1 is the harmonic mean of the matching P and R (0 when both are 0).
MetricRow prf_metrics(const ScoreTable& table, Real threshold = 0.5);

/// mAP plus PRF in one row.
MetricRow evaluate_scores(const ScoreTable& table, Real threshold = 0.5);

struct MaskMetrics {
  Real precision = 0;
  Real recall = 0;
  Real f1 = 0;
  std::int64_t true_pos = 0, false_pos = 0, false_neg = 0;
};

/// Cell-wise micro-averaged P/R/F1 of predicted against reference masks.
/// MetricError when no reference mask has a foreground cell.
MaskMetrics cam_mask_metrics(std::span<const BinaryMask> predicted, std::span<const BinaryMask> reference);

/// Intersection over union of two grids; 0 when both are empty.
Real mask_iou(const BinaryMask& a, const BinaryMask& b);

struct HistogramRow {
  int epoch = 0;
  std::vector<Real> frequency;  // bins partition [0, 1]
};

/// Histogram of predictions at entries with z = 0 and y = 0, normalized to
/// sum to 1 (all zeros when there are no such entries).
HistogramRow unknown_negative_histogram(const ScoreTable& preds, std::span<const std::uint8_t> z, int epoch,
                                        int bins = 50);
/// Mean prediction over the same entries.
Real mean_unknown_negative(const ScoreTable& preds, std::span<const std::uint8_t> z);

void write_histogram_csv(std::ostream& os, std::span<const HistogramRow> rows);

struct Series {
  std::string name;
  std::vector<Real> x, y;
};

/// Standalone SVG line chart.
void write_line_chart_svg(std::ostream& os, std::span<const Series> series, const std::string& title,
                          const std::string& x_label, const std::string& y_label);
/// Standalone SVG heat grid: one column per histogram row, one cell per bin.
void write_histogram_svg(std::ostream& os, std::span<const HistogramRow> rows, const std::string& title);

/// Writes a grid of values in [0, 1] as an 8-bit binary PGM, each cell
/// expanded to scale x scale pixels.
void write_pgm(std::ostream& os, int height, int width, std::span<const Real> values, int scale = 8);

}  // namespace scob
