// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "scob/trainer.hpp"

namespace scob {

/// full, no_cl, baseline, joint_optim, two_stage, no_cam, gt_masks, random_negatives
const std::vector<std::string>& variant_names();

/// base with every ablation switch cleared, then the named variant's switches
/// set. ConfigError for an unknown name.
TrainConfig with_variant(TrainConfig base, const std::string& variant);

struct RunSummary {
  std::string variant;
  std::uint64_t seed = 0;
  EpochRow first;
  EpochRow last;
  CamQuality cam;
};

RunSummary summarize(const TrainState& state, const Dataset& dataset, const std::string& variant);

void write_summary_csv(std::ostream& os, const std::vector<RunSummary>& runs);

/// One CSV row per evaluated split.
void write_eval_csv(std::ostream& os, const std::vector<std::pair<std::string, MetricRow>>& rows,
                    const std::vector<Real>& k_hat, const std::vector<CamQuality>& cams);

struct CamExportRow {
  int sample_id = 0;
  int class_id = 0;
  int stage = 0;
  Real foreground = 0;  // fraction of mask cells set
  Real gt_foreground = 0;
  std::string map_file;
  std::string mask_file;
};

/// Writes activation-map and mask PGMs for every positive class of the given
/// samples into dir, plus cams.csv. Returns the rows written.
std::vector<CamExportRow> export_cams(const Network& net, const std::vector<ImageSample>& samples,
                                      const std::vector<int>& indices, const TrainConfig& config,
                                      const std::string& dir);

}  // namespace scob
