// SPDX-License-Identifier: Apache-2.0
#include "scob/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>

#include "scob/error.hpp"

namespace scob {

void ScoreTable::check() const {
  if (rows < 0 || cols < 1) throw DimensionError("score table needs at least one column");
  const auto n = static_cast<std::size_t>(rows) * cols;
  if (scores.size() != n || labels.size() != n) throw DimensionError("scores and labels must both be rows x cols");
  for (Real s : scores) {
    if (!std::isfinite(s)) throw NumericError("non-finite score");
  }
}

ApResult mean_average_precision(const ScoreTable& t) {
  t.check();
  ApResult r;
  r.per_class.assign(t.cols, std::numeric_limits<Real>::quiet_NaN());
  std::vector<int> order(t.rows);
  Real total = 0;
  int counted = 0;
  for (int c = 0; c < t.cols; ++c) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return t.scores[a * t.cols + c] > t.scores[b * t.cols + c]; });
    int hits = 0;
    Real sum = 0;
    for (int rank = 0; rank < t.rows; ++rank) {
      if (t.labels[order[rank] * t.cols + c]) {
        ++hits;
        sum += static_cast<Real>(hits) / (rank + 1);
      }
    }
    if (hits == 0) {
      r.skipped_classes.push_back(c);
      continue;
    }
    r.per_class[c] = sum / hits;
    total += r.per_class[c];
    ++counted;
  }
  if (counted == 0) throw MetricError("no class has a positive label");
  r.map = total / counted;
  return r;
}

namespace {

Real ratio(std::int64_t a, std::int64_t b) { return b > 0 ? static_cast<Real>(a) / b : 0; }
Real harmonic(Real p, Real r) { return p + r > 0 ? 2 * p * r / (p + r) : 0; }

}  // namespace

MetricRow prf_metrics(const ScoreTable& t, Real threshold) {
  t.check();
  if (!(threshold > 0 && threshold < 1)) throw ConfigError("threshold must lie in (0, 1)");
  MetricRow m;
  m.threshold = threshold;
  std::int64_t tp = 0, fp = 0, fn = 0;
  Real cp = 0, cr = 0;
  for (int c = 0; c < t.cols; ++c) {
    std::int64_t ctp = 0, cfp = 0, cfn = 0;
    for (int n = 0; n < t.rows; ++n) {
      const bool pred = t.scores[n * t.cols + c] >= threshold;
      const bool pos = t.labels[n * t.cols + c] != 0;
      ctp += pred && pos;
      cfp += pred && !pos;
      cfn += !pred && pos;
    }
    tp += ctp;
    fp += cfp;
    fn += cfn;
    cp += ratio(ctp, ctp + cfp);
    cr += ratio(ctp, ctp + cfn);
  }
  m.op = ratio(tp, tp + fp);
  m.orec = ratio(tp, tp + fn);
  m.of1 = harmonic(m.op, m.orec);
  m.cp = cp / t.cols;
  m.cr = cr / t.cols;
  m.cf1 = harmonic(m.cp, m.cr);
  return m;
}

MetricRow evaluate_scores(const ScoreTable& t, Real threshold) {
  MetricRow m = prf_metrics(t, threshold);
  m.map = mean_average_precision(t).map;
  return m;
}

MaskMetrics cam_mask_metrics(std::span<const BinaryMask> predicted, std::span<const BinaryMask> reference) {
  if (predicted.size() != reference.size()) throw DimensionError("one reference mask per prediction required");
  MaskMetrics m;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const auto& p = predicted[i];
    const auto& g = reference[i];
    if (p.height != g.height || p.width != g.width) throw DimensionError("mask grids differ in shape");
    for (std::size_t k = 0; k < p.cells.size(); ++k) {
      const bool a = p.cells[k] != 0, b = g.cells[k] != 0;
      m.true_pos += a && b;
      m.false_pos += a && !b;
      m.false_neg += !a && b;
    }
  }
  if (m.true_pos + m.false_neg == 0) throw MetricError("reference masks contain no foreground");
  m.precision = ratio(m.true_pos, m.true_pos + m.false_pos);
  m.recall = ratio(m.true_pos, m.true_pos + m.false_neg);
  m.f1 = harmonic(m.precision, m.recall);
  return m;
}

Real mask_iou(const BinaryMask& a, const BinaryMask& b) {
  if (a.height != b.height || a.width != b.width) throw DimensionError("mask grids differ in shape");
  std::int64_t inter = 0, uni = 0;
  for (std::size_t k = 0; k < a.cells.size(); ++k) {
    inter += a.cells[k] && b.cells[k];
    uni += a.cells[k] || b.cells[k];
  }
  return ratio(inter, uni);
}

HistogramRow unknown_negative_histogram(const ScoreTable& preds, std::span<const std::uint8_t> z, int epoch,
                                        int bins) {
  preds.check();
  if (bins < 1) throw ConfigError("histogram needs at least one bin");
  if (z.size() != preds.labels.size()) throw DimensionError("observed labels must match the score table");
  HistogramRow row{epoch, std::vector<Real>(bins, 0)};
  std::int64_t count = 0;
  for (std::size_t k = 0; k < z.size(); ++k) {
    if (z[k] || preds.labels[k]) continue;
    const Real p = std::clamp<Real>(preds.scores[k], 0, 1);
    const int b = std::min(bins - 1, static_cast<int>(p * bins));
    row.frequency[b] += 1;
    ++count;
  }
  if (count > 0) {
    for (auto& f : row.frequency) f /= static_cast<Real>(count);
  }
  return row;
}

Real mean_unknown_negative(const ScoreTable& preds, std::span<const std::uint8_t> z) {
  preds.check();
  if (z.size() != preds.labels.size()) throw DimensionError("observed labels must match the score table");
  Real sum = 0;
  std::int64_t count = 0;
  for (std::size_t k = 0; k < z.size(); ++k) {
    if (z[k] || preds.labels[k]) continue;
    sum += preds.scores[k];
    ++count;
  }
  return count ? sum / count : 0;
}

void write_histogram_csv(std::ostream& os, std::span<const HistogramRow> rows) {
  os << "epoch,bin_low,bin_high,frequency\n";
  os << std::setprecision(17);
  for (const auto& r : rows) {
    const int bins = static_cast<int>(r.frequency.size());
    for (int b = 0; b < bins; ++b) {
      os << r.epoch << ',' << static_cast<Real>(b) / bins << ',' << static_cast<Real>(b + 1) / bins << ','
         << r.frequency[b] << '\n';
    }
  }
}

namespace {

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};

}  // namespace

void write_line_chart_svg(std::ostream& os, std::span<const Series> series, const std::string& title,
                          const std::string& x_label, const std::string& y_label) {
  constexpr double W = 640, H = 400, left = 60, right = 160, top = 40, bottom = 50;
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      x0 = std::min<double>(x0, s.x[i]);
      x1 = std::max<double>(x1, s.x[i]);
      y0 = std::min<double>(y0, s.y[i]);
      y1 = std::max<double>(y1, s.y[i]);
    }
  }
  if (x0 > x1) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * (W - left - right); };
  auto py = [&](double y) { return H - bottom - (y - y0) / (y1 - y0) * (H - top - bottom); };

  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" << xml_escape(title)
     << "</text>\n"
     << "<line x1=\"" << left << "\" y1=\"" << H - bottom << "\" x2=\"" << W - right << "\" y2=\"" << H - bottom
     << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << H - bottom
     << "\" stroke=\"black\"/>\n"
     << "<text x=\"" << (left + W - right) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"12\">"
     << xml_escape(x_label) << "</text>\n"
     << "<text x=\"14\" y=\"" << H / 2 << "\" transform=\"rotate(-90 14 " << H / 2
     << ")\" text-anchor=\"middle\" font-size=\"12\">" << xml_escape(y_label) << "</text>\n";
  os << std::setprecision(6);
  for (int k = 0; k <= 4; ++k) {
    const double y = y0 + (y1 - y0) * k / 4;
    os << "<text x=\"" << left - 6 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\" font-size=\"10\">" << y
       << "</text>\n";
    const double x = x0 + (x1 - x0) * k / 4;
    os << "<text x=\"" << px(x) << "\" y=\"" << H - bottom + 14 << "\" text-anchor=\"middle\" font-size=\"10\">" << x
       << "</text>\n";
  }
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = kPalette[s % std::size(kPalette)];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < series[s].x.size() && i < series[s].y.size(); ++i) {
      os << px(series[s].x[i]) << ',' << py(series[s].y[i]) << ' ';
    }
    os << "\"/>\n";
    const double ly = top + 16 * s + 10;
    os << "<line x1=\"" << W - right + 10 << "\" y1=\"" << ly << "\" x2=\"" << W - right + 30 << "\" y2=\"" << ly
       << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n"
       << "<text x=\"" << W - right + 36 << "\" y=\"" << ly + 4 << "\" font-size=\"11\">"
       << xml_escape(series[s].name) << "</text>\n";
  }
  os << "</svg>\n";
}

void write_histogram_svg(std::ostream& os, std::span<const HistogramRow> rows, const std::string& title) {
  const int bins = rows.empty() ? 0 : static_cast<int>(rows.front().frequency.size());
  constexpr double cell_w = 24, cell_h = 6, left = 50, top = 40;
  const double W = left + cell_w * std::max<std::size_t>(rows.size(), 1) + 20;
  const double H = top + cell_h * bins + 40;
  Real peak = 0;
  for (const auto& r : rows) {
    for (Real f : r.frequency) peak = std::max(peak, f);
  }
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << xml_escape(title)
     << "</text>\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (int b = 0; b < bins && b < static_cast<int>(rows[i].frequency.size()); ++b) {
      const int shade = peak > 0 ? 255 - static_cast<int>(std::lround(255 * rows[i].frequency[b] / peak)) : 255;
      // probability 0 at the bottom
      os << "<rect x=\"" << left + cell_w * i << "\" y=\"" << top + cell_h * (bins - 1 - b) << "\" width=\"" << cell_w
         << "\" height=\"" << cell_h << "\" fill=\"rgb(" << shade << ',' << shade << ",255)\"/>\n";
    }
    os << "<text x=\"" << left + cell_w * (i + 0.5) << "\" y=\"" << H - 22
       << "\" text-anchor=\"middle\" font-size=\"10\">" << rows[i].epoch << "</text>\n";
  }
  os << "<text x=\"" << left - 6 << "\" y=\"" << top + 8 << "\" text-anchor=\"end\" font-size=\"10\">1</text>\n"
     << "<text x=\"" << left - 6 << "\" y=\"" << top + cell_h * bins << "\" text-anchor=\"end\" font-size=\"10\">0</text>\n"
     << "<text x=\"" << W / 2 << "\" y=\"" << H - 6 << "\" text-anchor=\"middle\" font-size=\"11\">epoch</text>\n"
     << "</svg>\n";
}

void write_pgm(std::ostream& os, int height, int width, std::span<const Real> values, int scale) {
  if (height < 1 || width < 1 || scale < 1) throw DimensionError("image extents must be positive");
  if (values.size() != static_cast<std::size_t>(height) * width) throw DimensionError("value count does not match grid");
  os << "P5\n" << width * scale << ' ' << height * scale << "\n255\n";
  std::string line(static_cast<std::size_t>(width) * scale, '\0');
  for (int i = 0; i < height; ++i) {
    for (int j = 0; j < width; ++j) {
      const Real v = std::clamp<Real>(values[static_cast<std::size_t>(i) * width + j], 0, 1);
      std::fill_n(line.begin() + static_cast<std::ptrdiff_t>(j) * scale, scale,
                  static_cast<char>(static_cast<unsigned char>(std::lround(v * 255))));
    }
    for (int r = 0; r < scale; ++r) os.write(line.data(), static_cast<std::streamsize>(line.size()));
  }
}

}  // namespace scob
