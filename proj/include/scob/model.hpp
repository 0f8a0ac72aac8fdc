// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "scob/dataset.hpp"
#include "scob/tensor.hpp"

namespace scob {

/// Learning-rate group a parameter belongs to.
enum class ParamGroup : std::uint8_t { Backbone, Smt, Head };

struct NamedParameter {
  std::string name;
  ParamGroup group;
  Tensor tensor;
};

/// Ordered name -> tensor table; the unit of checkpointing, optimization and
/// momentum blending.
class ParameterTable {
 public:
  Tensor& add(std::string name, ParamGroup group, Tensor tensor);
  const NamedParameter* find(const std::string& name) const;
  std::size_t size() const { return entries_.size(); }
  std::int64_t scalar_count() const;

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  NamedParameter& operator[](std::size_t i) { return entries_[i]; }
  const NamedParameter& operator[](std::size_t i) const { return entries_[i]; }

  void zero_grad();
  /// FNV-1a over names, shapes and raw value bytes.
  std::uint64_t checksum() const;
  /// Throws ContractError unless names and shapes line up entry by entry.
  void check_same_structure(const ParameterTable& other) const;
  void copy_values_from(const ParameterTable& other);

 private:
  std::vector<NamedParameter> entries_;
};

struct BackboneConfig {
  std::array<int, 4> widths{32, 64, 128, 128};
  int input_size = 64;

  void validate() const;
  /// Spatial extent of stage k (1-based); each stage halves the resolution.
  int grid_extent(int stage) const;
};

/// Reference sizes used at full scale: d_model 512, 8 heads, hidden 2048.
struct SmtConfig {
  int d_model = 128;
  int num_layers = 2;
  int num_heads = 4;
  int hidden_dim = 256;

  void validate() const;
};

enum class HeadKind : std::uint8_t {
  MaskedTransformer,  // two SMTs on stages 3 and 4
  Convolutional,      // baseline: two 3x3 convolutions per stage instead of the SMTs
};

struct NetworkConfig {
  BackboneConfig backbone;
  SmtConfig smt;
  int num_classes = 6;
  HeadKind head = HeadKind::MaskedTransformer;

  void validate() const;
  /// Dimension of the pooled feature H~ fed to the classifier.
  int feature_dim() const { return 2 * smt.d_model; }
};

/// Patch tokens of one backbone stage: [B, H*W, C].
struct TokenGrid {
  Tensor tokens;
  int height = 0;
  int width = 0;
  int stage = 0;
};

/// Per-sample semantic masks for the two tapped stages. A cell set to 1 zeroes
/// that token's query/key input.
struct MaskSet {
  BinaryMask stage3;
  BinaryMask stage4;
};

struct NetworkOutput {
  TokenGrid stage3;
  TokenGrid stage4;
  Tensor pooled;  // [B, 2 * d_model]
  Tensor logits;  // [B, L]
  Tensor probs;   // sigmoid(logits)
};

struct ForwardOptions {
  /// Run the backbone detached and hand its stage tokens to the head as fresh
  /// requires-grad leaves, so backward yields dp/dF at those tokens only.
  bool stage_tokens_as_leaves = false;
};

class Network {
 public:
  Network(const NetworkConfig& config, std::uint64_t seed);

  const NetworkConfig& config() const { return config_; }
  ParameterTable& parameters() { return params_; }
  const ParameterTable& parameters() const { return params_; }

  /// pixels: [B, 3, S, S] -> stage-3 and stage-4 token grids.
  std::pair<TokenGrid, TokenGrid> backbone_forward(const Tensor& pixels) const;

  /// Delta(i, j) of SMT `smt_index` (0: stage 3, 1: stage 4): row embedding of
  /// i concatenated with column embedding of j.
  Tensor positional_encode(int smt_index, int i, int j) const;
  /// All positions of one SMT as [H*W, d_model].
  Tensor positional_table(int smt_index) const;

  /// One masked attention layer. x: [B, T, d_model]; mask: [B, T] values in
  /// {0, 1}. If logits_out is given it receives the pre-softmax attention
  /// logits [B * heads, T, T].
  Tensor masked_attention(const Tensor& x, const Tensor& mask, int smt_index, int layer,
                          Tensor* logits_out = nullptr) const;

  /// Runs both SMTs (or the convolutional baseline head), mean-pools tokens,
  /// concatenates and classifies. masks must hold one entry per batch row.
  NetworkOutput head_forward(const TokenGrid& stage3, const TokenGrid& stage4, std::span<const MaskSet> masks) const;

  NetworkOutput forward(const Tensor& pixels, std::span<const MaskSet> masks, const ForwardOptions& options = {}) const;

  /// All-zero masks for a batch of the given size.
  std::vector<MaskSet> zero_masks(std::size_t batch) const;

 private:
  Tensor smt_tokens(const TokenGrid& grid, std::span<const MaskSet> masks, int smt_index) const;
  Tensor conv_tokens(const TokenGrid& grid, int smt_index) const;
  const Tensor& p(const std::string& name) const;

  NetworkConfig config_;
  ParameterTable params_;
};

/// Packs pixel buffers (each 3 x S x S) into a [B, 3, S, S] tensor.
Tensor batch_pixels(std::span<const std::vector<float>* const> images, int image_size);

/// Packs per-sample mask grids into a [B, H*W] tensor of 0/1 values.
Tensor mask_tensor(std::span<const MaskSet> masks, int stage, int height, int width);

}  // namespace scob
