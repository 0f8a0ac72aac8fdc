// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace scob {

enum class ShapeKind : std::uint8_t { Circle, Square, Triangle, Cross, Ring, Bar };

const char* shape_name(ShapeKind kind);

struct ClassStyle {
  ShapeKind kind = ShapeKind::Circle;
  std::array<float, 3> color{1.0f, 0.0f, 0.0f};
  bool operator==(const ClassStyle&) const = default;
};

/// Six shapes with distinct saturated colors; extend for more classes.
std::vector<ClassStyle> default_palette();

struct DatasetSpec {
  int num_classes = 6;
  int image_size = 64;
  int num_train = 2000;
  int num_val = 500;
  int min_positives = 1;
  int max_positives = 3;
  std::vector<ClassStyle> palette = default_palette();
  double noise_sigma = 0.08;
  std::uint64_t seed = 0;

  /// Throws ConfigError on an invalid description.
  void validate() const;
  /// Mean number of positives per image implied by the uniform count draw.
  double expected_positives() const { return 0.5 * (min_positives + max_positives); }
  bool operator==(const DatasetSpec&) const = default;
};

/// Binary grid, row-major.
struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> cells;

  BinaryMask() = default;
  BinaryMask(int h, int w) : height(h), width(w), cells(static_cast<std::size_t>(h) * w, 0) {}
  std::uint8_t at(int i, int j) const { return cells[static_cast<std::size_t>(i) * width + j]; }
  std::uint8_t& at(int i, int j) { return cells[static_cast<std::size_t>(i) * width + j]; }
  std::size_t count() const;
  bool operator==(const BinaryMask&) const = default;
};

struct ImageSample {
  int id = 0;
  int image_size = 0;
  std::vector<float> pixels;  // 3 x S x S, channel-major, values in [0, 1]
  std::vector<std::uint8_t> y;  // full labels
  std::vector<std::uint8_t> z;  // observed labels
  std::vector<BinaryMask> gt_masks;  // one per class, empty grid for absent classes

  int num_classes() const { return static_cast<int>(y.size()); }
  int positive_count() const;
  /// Index of the single observed positive; ContractError unless z is one-hot.
  int observed_class() const;
  bool operator==(const ImageSample&) const = default;
};

struct Dataset {
  DatasetSpec spec;
  std::vector<ImageSample> train;
  std::vector<ImageSample> val;
  bool single_positive = false;  // drop_to_single_positive has been applied

  bool operator==(const Dataset&) const = default;
};

/// Renders every sample from its own RNG stream seeded by (spec.seed, id).
/// Observed labels start equal to the full labels.
Dataset generate_dataset(const DatasetSpec& spec);

/// Keeps one uniformly chosen positive per training sample, once. Validation
/// samples keep all labels. DataError if a training sample has no positive.
void drop_to_single_positive(Dataset& dataset, std::uint64_t seed);

/// Rejects training samples violating z <= y, sum(z) = 1, or mask/label consistency.
void validate_dataset(const Dataset& dataset);

// ---- view augmentation ------------------------------------------------------

enum class ViewRole : std::uint8_t { Online, Target };

struct ViewTransform {
  bool flipped = false;
  std::array<float, 3> jitter{1.0f, 1.0f, 1.0f};
};

struct AugmentOptions {
  double flip_probability = 0.5;
  double jitter_low = 0.8;
  double jitter_high = 1.2;
  double noise_sigma = 0.02;
  bool enable_jitter = true;
  bool enable_noise = true;
};

struct AugmentedView {
  ViewRole role = ViewRole::Online;
  std::vector<float> pixels;
  ViewTransform transform;
};

struct ViewPair {
  AugmentedView online;
  AugmentedView target;
};

/// Horizontal flip, per-channel multiplicative jitter and additive noise, all
/// clipped to [0, 1]. No cropping: every object stays in view.
AugmentedView augment_view(const ImageSample& sample, ViewRole role, std::mt19937_64& rng,
                           const AugmentOptions& options = {});
ViewPair make_view_pair(const ImageSample& sample, std::mt19937_64& rng, const AugmentOptions& options = {});

/// Flips pixels horizontally (channel-major 3 x S x S layout).
std::vector<float> flip_pixels(const std::vector<float>& pixels, int image_size);
/// Maps a mask from the source frame into the view frame.
BinaryMask map_mask_to_view(const BinaryMask& mask, const ViewTransform& transform);
/// Maps a mask between two views of the same source sample.
BinaryMask transport_mask(const BinaryMask& mask, const ViewTransform& from, const ViewTransform& to);

/// Max-pools a full-resolution mask down to a grid of the given extent.
BinaryMask max_pool_mask(const BinaryMask& mask, int grid_height, int grid_width);

// ---- serialization ----------------------------------------------------------

void save_dataset(const Dataset& dataset, const std::string& path);
Dataset load_dataset(const std::string& path);

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace scob
