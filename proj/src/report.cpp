// SPDX-License-Identifier: Apache-2.0
#include "scob/report.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>

#include "scob/error.hpp"

namespace scob {

const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names{"full",      "no_cl",  "baseline", "joint_optim",
                                              "two_stage", "no_cam", "gt_masks", "random_negatives"};
  return names;
}

TrainConfig with_variant(TrainConfig c, const std::string& variant) {
  c.no_cl = c.no_cam = c.no_smt = c.random_negatives = c.joint_optim = c.two_stage = c.gt_masks = false;
  if (variant == "full") {
  } else if (variant == "no_cl") {
    c.no_cl = true;
  } else if (variant == "baseline") {
    c.no_smt = true;
    c.no_cl = true;
  } else if (variant == "joint_optim") {
    c.joint_optim = true;
  } else if (variant == "two_stage") {
    c.two_stage = true;
  } else if (variant == "no_cam") {
    c.no_cam = true;
  } else if (variant == "gt_masks") {
    c.gt_masks = true;
  } else if (variant == "random_negatives") {
    c.random_negatives = true;
  } else {
    throw ConfigError("unknown variant '" + variant + "'");
  }
  return c;
}

RunSummary summarize(const TrainState& state, const Dataset& dataset, const std::string& variant) {
  if (state.rows.empty()) throw ContractError("no completed epochs to summarize");
  RunSummary s;
  s.variant = variant;
  s.seed = state.config.seed;
  s.first = state.rows.front();
  s.last = state.rows.back();
  s.cam = cam_quality(state.nets.online, dataset.val, state.config);
  return s;
}

namespace {

std::string fmt(Real v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", static_cast<double>(v));
  return buf;
}

}  // namespace

void write_summary_csv(std::ostream& os, const std::vector<RunSummary>& runs) {
  os << "variant,seed,epochs,val_mAP,val_OF1,val_CF1,cam_precision,cam_recall,cam_f1,"
        "unknown_neg_first,unknown_neg_last,val_k_hat\n";
  for (const auto& r : runs) {
    os << r.variant << ',' << r.seed << ',' << r.last.epoch << ',' << fmt(r.last.val.map) << ','
       << fmt(r.last.val.of1) << ',' << fmt(r.last.val.cf1) << ',' << fmt(r.cam.combined.precision) << ','
       << fmt(r.cam.combined.recall) << ',' << fmt(r.cam.combined.f1) << ',' << fmt(r.first.mean_unknown_neg) << ','
       << fmt(r.last.mean_unknown_neg) << ',' << fmt(r.last.val_k_hat) << '\n';
  }
}

void write_eval_csv(std::ostream& os, const std::vector<std::pair<std::string, MetricRow>>& rows,
                    const std::vector<Real>& k_hat, const std::vector<CamQuality>& cams) {
  os << "split,mAP,OP,OR,OF1,CP,CR,CF1,threshold,k_hat,cam_precision,cam_recall,cam_f1\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& m = rows[i].second;
    const auto& c = cams[i].combined;
    os << rows[i].first;
    for (Real v : {m.map, m.op, m.orec, m.of1, m.cp, m.cr, m.cf1, m.threshold, k_hat[i], c.precision, c.recall, c.f1}) {
      os << ',' << fmt(v);
    }
    os << '\n';
  }
}

std::vector<CamExportRow> export_cams(const Network& net, const std::vector<ImageSample>& samples,
                                      const std::vector<int>& indices, const TrainConfig& config,
                                      const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const int L = net.config().num_classes;
  const int S = net.config().backbone.input_size;
  std::vector<CamExportRow> rows;
  for (int idx : indices) {
    if (idx < 0 || static_cast<std::size_t>(idx) >= samples.size()) throw BoundsError("sample index out of range");
    const auto& s = samples[static_cast<std::size_t>(idx)];
    const std::vector<const std::vector<float>*> img{&s.pixels};
    const Tensor x = batch_pixels(img, S);
    {
      std::ofstream out(fs::path(dir) / ("sample" + std::to_string(s.id) + "_image.ppm"), std::ios::binary);
      out << "P6\n" << S << ' ' << S << "\n255\n";
      const std::size_t plane = static_cast<std::size_t>(S) * S;
      for (std::size_t p = 0; p < plane; ++p) {
        for (int ch = 0; ch < 3; ++ch) out.put(static_cast<char>(std::lround(s.pixels[ch * plane + p] * 255.0f)));
      }
    }
    for (int c = 0; c < L; ++c) {
      if (!s.y[static_cast<std::size_t>(c)]) continue;
      std::vector<std::vector<std::uint8_t>> z{std::vector<std::uint8_t>(static_cast<std::size_t>(L), 0)};
      z[0][static_cast<std::size_t>(c)] = 1;
      const auto res = e_step(net, x, z, config.cam());
      for (int stage : {3, 4}) {
        const auto& map = stage == 3 ? res.stage3[0] : res.stage4[0];
        const auto& mask = stage == 3 ? res.masks[0].stage3 : res.masks[0].stage4;
        const std::string stem = "sample" + std::to_string(s.id) + "_class" + std::to_string(c) + "_stage" +
                                 std::to_string(stage);
        CamExportRow row;
        row.sample_id = s.id;
        row.class_id = c;
        row.stage = stage;
        row.map_file = stem + "_map.pgm";
        row.mask_file = stem + "_mask.pgm";
        const int scale = S / map.height;
        {
          std::ofstream out(fs::path(dir) / row.map_file, std::ios::binary);
          write_pgm(out, map.height, map.width, map.values, scale);
        }
        std::vector<Real> mv(mask.cells.begin(), mask.cells.end());
        {
          std::ofstream out(fs::path(dir) / row.mask_file, std::ios::binary);
          write_pgm(out, mask.height, mask.width, mv, scale);
        }
        row.foreground = static_cast<Real>(mask.count()) / static_cast<Real>(mask.cells.size());
        const auto gt = max_pool_mask(s.gt_masks[static_cast<std::size_t>(c)], mask.height, mask.width);
        row.gt_foreground = static_cast<Real>(gt.count()) / static_cast<Real>(gt.cells.size());
        rows.push_back(std::move(row));
      }
    }
  }
  std::ofstream csv(fs::path(dir) / "cams.csv");
  csv << "sample_id,class,stage,foreground_fraction,gt_foreground_fraction,map_file,mask_file\n";
  for (const auto& r : rows) {
    csv << r.sample_id << ',' << r.class_id << ',' << r.stage << ',' << fmt(r.foreground) << ','
        << fmt(r.gt_foreground) << ',' << r.map_file << ',' << r.mask_file << '\n';
  }
  return rows;
}

}  // namespace scob
