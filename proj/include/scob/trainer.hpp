// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "scob/cam.hpp"
#include "scob/contrastive.hpp"
#include "scob/dataset.hpp"
#include "scob/ipt.hpp"
#include "scob/losses.hpp"
#include "scob/metrics.hpp"
#include "scob/optim.hpp"

namespace scob {

struct TrainConfig {
  int epochs = 30;
  int batch_size = 8;
  Real lr_estimator = 0.01;
  Real lr_smt = 4e-4;
  Real lr_head = 0.01;
  Real lr_backbone = 1e-3;
  Real adam_beta1 = 0.9;
  Real adam_beta2 = 0.999;
  Real adam_eps = 1e-8;
  Real gamma_cam = 0.5;
  int cam_window = 3;
  Real tau = 1.0;
  Real lambda_c = 0.1;
  Real alpha = 0.999;
  int negatives_k = 16;
  int ipt_capacity = 80;
  Real xi = 0.3;
  Real prior_k = 0;  // 0: take the dataset's expected positive count
  std::uint64_t seed = 0;

  bool no_cl = false;
  bool no_cam = false;
  bool no_smt = false;  // convolutional head in place of the masked transformers
  bool random_negatives = false;
  bool joint_optim = false;
  bool two_stage = false;
  bool gt_masks = false;
  bool momentum_per_step = false;
  bool augment = true;
  bool wall_clock = true;  // false writes 0 to wall_seconds
  std::string eval_masks = "cam";  // cam | zero
  Real threshold = 0.5;

  std::vector<int> widths{32, 64, 128, 128};
  int d_model = 128;
  int smt_layers = 2;
  int heads = 4;
  int hidden_dim = 256;

  /// ConfigError on bad values or inconsistent flags.
  void validate() const;
  NetworkConfig network(int num_classes, int image_size) const;
  GroupRates rates() const;
  AdamHyper adam() const;
  CamOptions cam() const;
  ContrastiveOptions contrastive() const;
  /// Epochs (1-based) up to this one run with zero masks under two_stage.
  int warmup_epochs() const;

  /// Sets one key from its text form. ConfigError on unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  /// key=value lines, '#' comments and blank lines allowed.
  void merge_text(std::istream& is);
  static TrainConfig from_file(const std::string& path);
  /// Every key, one per line, in a form merge_text reads back exactly.
  std::string to_text() const;
  static std::vector<std::string> keys();

  bool operator==(const TrainConfig&) const = default;
};

struct EpochRow {
  int epoch = 0;
  std::int64_t t = 0;
  Real loss_class = 0;
  Real loss_cont = 0;
  MetricRow val;
  Real mean_unknown_neg = 0;
  Real val_k_hat = 0;  // mean predicted positive count on validation
  Real wall_seconds = 0;

  bool operator==(const EpochRow&) const = default;
};

void write_metrics_csv(std::ostream& os, const std::vector<EpochRow>& rows);

/// Shape of the training data a state was built for.
struct DataShape {
  int num_classes = 0;
  int image_size = 0;
  int num_train = 0;

  static DataShape of(const Dataset& dataset);
  bool operator==(const DataShape&) const = default;
};

/// Everything the loop mutates; a checkpoint round-trips it exactly.
struct TrainState {
  TrainConfig config;
  DataShape shape;
  DualNet nets;
  Adam adam;  // both M-step updates share one moment state
  LabelEstimator estimator;
  RowAdam estimator_adam;
  IptForest forest;
  std::mt19937_64 rng;
  int epoch = 0;        // completed epochs
  std::int64_t t = 0;   // completed batches
  std::vector<EpochRow> rows;
  std::vector<HistogramRow> histograms;
  std::vector<MaskSet> cached_masks;  // joint_optim only: last masks per sample

  TrainState(const TrainConfig& config, const Dataset& dataset);
  TrainState(const TrainConfig& config, const DataShape& shape);

  Network& online() { return nets.online; }
  Network& target() { return nets.target; }
};

struct RunOptions {
  std::string metrics_path;    // rewritten after every epoch when set
  std::string checkpoint_path; // written after every epoch when set
  std::string histogram_path;  // per-epoch unknown-negative histograms
  int stop_after_epoch = -1;   // return once this many epochs are complete
  std::vector<std::string>* events = nullptr;
  std::ostream* log = nullptr;
};

/// Runs epochs state.epoch + 1 .. config.epochs. The dataset must hold single
/// positives; NumericError on a non-finite loss.
void run_bootstrap(TrainState& state, const Dataset& dataset, const RunOptions& options = {});
TrainState run_bootstrap(const TrainConfig& config, const Dataset& dataset, const RunOptions& options = {});

void save_checkpoint(const TrainState& state, const std::string& path);
void save_checkpoint(const TrainState& state, std::ostream& os);
/// FormatError on bad magic, version or truncation; nothing is returned then.
TrainState load_checkpoint(const std::string& path);
TrainState load_checkpoint(std::istream& is);

/// Predictions on samples, labelled with their full y. eval_masks = cam runs
/// a zero-mask pass, takes each sample's top class and feeds its CAM masks to
/// a second pass.
ScoreTable predict(const Network& net, const std::vector<ImageSample>& samples, const TrainConfig& config);

struct CamQuality {
  MaskMetrics stage3;
  MaskMetrics stage4;
  MaskMetrics combined;
};

/// CAM masks for every (sample, positive class) pair against the max-pooled
/// ground truth.
CamQuality cam_quality(const Network& net, const std::vector<ImageSample>& samples, const TrainConfig& config);

/// Mean over rows of the summed predicted probabilities.
Real mean_positive_count(const ScoreTable& table);

}  // namespace scob
