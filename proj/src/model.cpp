// SPDX-License-Identifier: Apache-2.0
#include "scob/model.hpp"

#include <cmath>
#include <cstring>
#include <random>

#include "scob/error.hpp"
#include "scob/ops.hpp"

namespace scob {

// ---- ParameterTable ---------------------------------------------------------

Tensor& ParameterTable::add(std::string name, ParamGroup group, Tensor tensor) {
  if (find(name)) throw ContractError("duplicate parameter " + name);
  tensor.set_requires_grad(true);
  entries_.push_back({std::move(name), group, std::move(tensor)});
  return entries_.back().tensor;
}

const NamedParameter* ParameterTable::find(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

std::int64_t ParameterTable::scalar_count() const {
  std::int64_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

void ParameterTable::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

std::uint64_t ParameterTable::checksum() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& e : entries_) {
    mix(e.name.data(), e.name.size());
    for (auto d : e.tensor.shape()) mix(&d, sizeof d);
    auto v = e.tensor.values();
    mix(v.data(), v.size() * sizeof(Real));
  }
  return h;
}

void ParameterTable::check_same_structure(const ParameterTable& other) const {
  if (other.size() != size()) throw ContractError("parameter tables differ in size");
  for (std::size_t i = 0; i < size(); ++i) {
    const auto& a = entries_[i];
    const auto& b = other.entries_[i];
    if (a.name != b.name || a.tensor.shape() != b.tensor.shape()) {
      throw ContractError("parameter mismatch at " + a.name + " vs " + b.name);
    }
  }
}

void ParameterTable::copy_values_from(const ParameterTable& other) {
  check_same_structure(other);
  for (std::size_t i = 0; i < size(); ++i) {
    auto src = other.entries_[i].tensor.values();
    auto dst = entries_[i].tensor.mutable_values();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

// ---- configs ----------------------------------------------------------------

void BackboneConfig::validate() const {
  for (int w : widths) {
    if (w < 1) throw ConfigError("backbone widths must be positive");
  }
  if (input_size < 16 || input_size % 16 != 0) throw ConfigError("input_size must be a positive multiple of 16");
}

int BackboneConfig::grid_extent(int stage) const {
  if (stage < 1 || stage > 4) throw BoundsError("stage must be in 1..4");
  return input_size >> stage;
}

void SmtConfig::validate() const {
  if (d_model < 2 || d_model % 2 != 0) throw ConfigError("d_model must be even and >= 2");
  if (num_heads < 1 || d_model % num_heads != 0) throw ConfigError("num_heads must divide d_model");
  if (num_layers < 1) throw ConfigError("num_layers must be >= 1");
  if (hidden_dim < 1) throw ConfigError("hidden_dim must be >= 1");
}

void NetworkConfig::validate() const {
  backbone.validate();
  smt.validate();
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
}

// ---- Network ----------------------------------------------------------------

namespace {

Tensor random_normal(Shape shape, Real stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<Real> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<Real>(dist(rng) * stddev);
  return Tensor::from(std::move(shape), std::move(v));
}

std::string smt_prefix(int smt) { return smt == 0 ? "smt3" : "smt4"; }

}  // namespace

Network::Network(const NetworkConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const auto& w = config_.backbone.widths;
  const int D = config_.smt.d_model;

  int in_c = 3;
  for (int s = 0; s < 4; ++s) {
    const std::string n = "backbone.stage" + std::to_string(s + 1);
    params_.add(n + ".weight", ParamGroup::Backbone,
                random_normal({w[s], in_c, 3, 3}, std::sqrt(2.0 / (in_c * 9.0)), rng));
    params_.add(n + ".bias", ParamGroup::Backbone, Tensor::zeros({w[s]}));
    in_c = w[s];
  }

  for (int smt = 0; smt < 2; ++smt) {
    const std::string n = smt_prefix(smt);
    const int C = w[2 + smt];
    const int ext = config_.backbone.grid_extent(3 + smt);
    if (config_.head == HeadKind::Convolutional) {
      params_.add(n + ".conv1.weight", ParamGroup::Backbone, random_normal({D, C, 3, 3}, std::sqrt(2.0 / (C * 9.0)), rng));
      params_.add(n + ".conv1.bias", ParamGroup::Backbone, Tensor::zeros({D}));
      params_.add(n + ".conv2.weight", ParamGroup::Backbone, random_normal({D, D, 3, 3}, std::sqrt(2.0 / (D * 9.0)), rng));
      params_.add(n + ".conv2.bias", ParamGroup::Backbone, Tensor::zeros({D}));
      continue;
    }
    const Real lin = std::sqrt(1.0 / D);
    params_.add(n + ".in.weight", ParamGroup::Smt, random_normal({C, D}, std::sqrt(1.0 / C), rng));
    params_.add(n + ".in.bias", ParamGroup::Smt, Tensor::zeros({D}));
    params_.add(n + ".pos.row", ParamGroup::Smt, random_normal({ext, D / 2}, 0.1, rng));
    params_.add(n + ".pos.col", ParamGroup::Smt, random_normal({ext, D / 2}, 0.1, rng));
    for (int l = 0; l < config_.smt.num_layers; ++l) {
      const std::string ln = n + ".layer" + std::to_string(l);
      params_.add(ln + ".wq", ParamGroup::Smt, random_normal({D, D}, lin, rng));
      params_.add(ln + ".wk", ParamGroup::Smt, random_normal({D, D}, lin, rng));
      params_.add(ln + ".wv", ParamGroup::Smt, random_normal({D, D}, lin, rng));
      params_.add(ln + ".bv", ParamGroup::Smt, Tensor::zeros({D}));
      params_.add(ln + ".wo", ParamGroup::Smt, random_normal({D, D}, lin, rng));
      params_.add(ln + ".bo", ParamGroup::Smt, Tensor::zeros({D}));
      params_.add(ln + ".ln1.gamma", ParamGroup::Smt, Tensor::full({D}, 1));
      params_.add(ln + ".ln1.beta", ParamGroup::Smt, Tensor::zeros({D}));
      params_.add(ln + ".ffn.w1", ParamGroup::Smt, random_normal({D, config_.smt.hidden_dim}, std::sqrt(2.0 / D), rng));
      params_.add(ln + ".ffn.b1", ParamGroup::Smt, Tensor::zeros({config_.smt.hidden_dim}));
      params_.add(ln + ".ffn.w2", ParamGroup::Smt,
                  random_normal({config_.smt.hidden_dim, D}, std::sqrt(1.0 / config_.smt.hidden_dim), rng));
      params_.add(ln + ".ffn.b2", ParamGroup::Smt, Tensor::zeros({D}));
      params_.add(ln + ".ln2.gamma", ParamGroup::Smt, Tensor::full({D}, 1));
      params_.add(ln + ".ln2.beta", ParamGroup::Smt, Tensor::zeros({D}));
    }
  }

  params_.add("head.weight", ParamGroup::Head,
              random_normal({config_.feature_dim(), config_.num_classes}, std::sqrt(1.0 / config_.feature_dim()), rng));
  params_.add("head.bias", ParamGroup::Head, Tensor::zeros({config_.num_classes}));
}

const Tensor& Network::p(const std::string& name) const {
  const auto* e = params_.find(name);
  if (!e) throw ContractError("unknown parameter " + name);
  return e->tensor;
}

std::pair<TokenGrid, TokenGrid> Network::backbone_forward(const Tensor& pixels) const {
  const int S = config_.backbone.input_size;
  if (pixels.rank() != 4 || pixels.dim(1) != 3 || pixels.dim(2) != S || pixels.dim(3) != S) {
    throw DimensionError("backbone expects [B, 3, " + std::to_string(S) + ", " + std::to_string(S) + "], got " +
                         shape_str(pixels.shape()));
  }
  const auto B = pixels.dim(0);
  Tensor x = pixels;
  TokenGrid grids[2];
  for (int s = 0; s < 4; ++s) {
    const std::string n = "backbone.stage" + std::to_string(s + 1);
    x = ops::relu(ops::conv2d(x, p(n + ".weight"), p(n + ".bias"), 2));
    if (s >= 2) {
      const auto C = x.dim(1), H = x.dim(2), W = x.dim(3);
      auto& g = grids[s - 2];
      g.tokens = ops::reshape(ops::permute(x, {0, 2, 3, 1}), {B, H * W, C});
      if (g.tokens.requires_grad()) g.tokens.retain_grad();
      g.height = static_cast<int>(H);
      g.width = static_cast<int>(W);
      g.stage = s + 1;
    }
  }
  return {grids[0], grids[1]};
}

Tensor Network::positional_table(int smt_index) const {
  if (smt_index < 0 || smt_index > 1) throw BoundsError("smt index must be 0 or 1");
  if (config_.head != HeadKind::MaskedTransformer) throw ContractError("convolutional head has no positional encoding");
  const std::string n = smt_prefix(smt_index);
  const Tensor& row = p(n + ".pos.row");
  const Tensor& col = p(n + ".pos.col");
  const auto H = row.dim(0), W = col.dim(0), half = row.dim(1);
  Tensor r = ops::add(ops::reshape(row, {H, 1, half}), Tensor::zeros({1, W, half}));
  Tensor c = ops::add(ops::reshape(col, {1, W, half}), Tensor::zeros({H, 1, half}));
  const Tensor parts[] = {r, c};
  return ops::reshape(ops::concat(parts, 2), {H * W, 2 * half});
}

Tensor Network::positional_encode(int smt_index, int i, int j) const {
  const int ext = config_.backbone.grid_extent(3 + smt_index);
  if (i < 0 || j < 0 || i >= ext || j >= ext) throw BoundsError("position outside the token grid");
  Tensor table = positional_table(smt_index);
  const auto D = table.dim(1);
  auto v = table.values();
  const auto off = (static_cast<std::size_t>(i) * ext + j) * D;
  return Tensor::from({D}, std::vector<Real>(v.begin() + off, v.begin() + off + D));
}

Tensor Network::masked_attention(const Tensor& x, const Tensor& mask, int smt_index, int layer,
                                 Tensor* logits_out) const {
  const int D = config_.smt.d_model, h = config_.smt.num_heads, dh = D / h;
  if (x.rank() != 3 || x.dim(2) != D) throw DimensionError("attention input must be [B, T, d_model]");
  const auto B = x.dim(0), T = x.dim(1);
  if (mask.shape() != Shape{B, T}) throw DimensionError("mask must be [B, T], got " + shape_str(mask.shape()));
  if (layer < 0 || layer >= config_.smt.num_layers) throw BoundsError("layer index out of range");
  const std::string n = smt_prefix(smt_index) + ".layer" + std::to_string(layer);

  Tensor pos = positional_table(smt_index);
  if (pos.dim(0) != T) throw DimensionError("token count does not match the positional grid");
  Tensor keep = ops::reshape(ops::add_scalar(ops::scale(mask, -1), 1), {B, T, 1});
  Tensor qk_in = ops::mul(ops::add(x, pos), keep);

  auto split = [&](const Tensor& t) {
    return ops::reshape(ops::permute(ops::reshape(t, {B, T, h, dh}), {0, 2, 1, 3}), {B * h, T, dh});
  };
  Tensor q = split(ops::matmul(qk_in, p(n + ".wq")));
  Tensor k = split(ops::matmul(qk_in, p(n + ".wk")));
  Tensor v = split(ops::add(ops::matmul(x, p(n + ".wv")), p(n + ".bv")));

  Tensor logits = ops::scale(ops::matmul(q, k, true), 1.0 / std::sqrt(static_cast<Real>(dh)));
  if (logits_out) *logits_out = logits;
  Tensor ctx = ops::matmul(ops::softmax(logits, 2), v);
  ctx = ops::reshape(ops::permute(ops::reshape(ctx, {B, h, T, dh}), {0, 2, 1, 3}), {B, T, D});
  return ops::add(ops::matmul(ctx, p(n + ".wo")), p(n + ".bo"));
}

Tensor Network::smt_tokens(const TokenGrid& grid, std::span<const MaskSet> masks, int smt_index) const {
  const std::string n = smt_prefix(smt_index);
  Tensor mask = mask_tensor(masks, grid.stage, grid.height, grid.width);
  Tensor x = ops::add(ops::matmul(grid.tokens, p(n + ".in.weight")), p(n + ".in.bias"));
  for (int l = 0; l < config_.smt.num_layers; ++l) {
    const std::string ln = n + ".layer" + std::to_string(l);
    Tensor a = masked_attention(x, mask, smt_index, l);
    x = ops::layer_norm(ops::add(x, a), p(ln + ".ln1.gamma"), p(ln + ".ln1.beta"));
    Tensor f = ops::relu(ops::add(ops::matmul(x, p(ln + ".ffn.w1")), p(ln + ".ffn.b1")));
    f = ops::add(ops::matmul(f, p(ln + ".ffn.w2")), p(ln + ".ffn.b2"));
    x = ops::layer_norm(ops::add(x, f), p(ln + ".ln2.gamma"), p(ln + ".ln2.beta"));
  }
  return ops::mean(x, {1});
}

Tensor Network::conv_tokens(const TokenGrid& grid, int smt_index) const {
  const std::string n = smt_prefix(smt_index);
  const auto B = grid.tokens.dim(0), C = grid.tokens.dim(2);
  Tensor x = ops::permute(ops::reshape(grid.tokens, {B, grid.height, grid.width, C}), {0, 3, 1, 2});
  x = ops::relu(ops::conv2d(x, p(n + ".conv1.weight"), p(n + ".conv1.bias"), 1));
  x = ops::relu(ops::conv2d(x, p(n + ".conv2.weight"), p(n + ".conv2.bias"), 1));
  return ops::mean(x, {2, 3});
}

NetworkOutput Network::head_forward(const TokenGrid& stage3, const TokenGrid& stage4,
                                    std::span<const MaskSet> masks) const {
  const auto B = stage3.tokens.dim(0);
  if (static_cast<std::int64_t>(masks.size()) != B) throw DimensionError("one mask set per batch row required");
  NetworkOutput out;
  out.stage3 = stage3;
  out.stage4 = stage4;
  Tensor a, b;
  if (config_.head == HeadKind::MaskedTransformer) {
    a = smt_tokens(stage3, masks, 0);
    b = smt_tokens(stage4, masks, 1);
  } else {
    a = conv_tokens(stage3, 0);
    b = conv_tokens(stage4, 1);
  }
  const Tensor parts[] = {a, b};
  out.pooled = ops::concat(parts, 1);
  out.logits = ops::add(ops::matmul(out.pooled, p("head.weight")), p("head.bias"));
  out.probs = ops::sigmoid(out.logits);
  return out;
}

NetworkOutput Network::forward(const Tensor& pixels, std::span<const MaskSet> masks,
                               const ForwardOptions& options) const {
  if (!options.stage_tokens_as_leaves) {
    auto [s3, s4] = backbone_forward(pixels);
    return head_forward(s3, s4, masks);
  }
  std::pair<TokenGrid, TokenGrid> grids;
  {
    NoGradScope detached;
    grids = backbone_forward(pixels);
  }
  grids.first.tokens = grids.first.tokens.clone(true);
  grids.second.tokens = grids.second.tokens.clone(true);
  return head_forward(grids.first, grids.second, masks);
}

std::vector<MaskSet> Network::zero_masks(std::size_t batch) const {
  const int e3 = config_.backbone.grid_extent(3), e4 = config_.backbone.grid_extent(4);
  return std::vector<MaskSet>(batch, MaskSet{BinaryMask(e3, e3), BinaryMask(e4, e4)});
}

Tensor batch_pixels(std::span<const std::vector<float>* const> images, int image_size) {
  const std::size_t per = 3ull * image_size * image_size;
  std::vector<Real> v;
  v.reserve(images.size() * per);
  for (const auto* img : images) {
    if (img->size() != per) throw DimensionError("image buffer does not match image_size");
    v.insert(v.end(), img->begin(), img->end());
  }
  return Tensor::from({static_cast<std::int64_t>(images.size()), 3, image_size, image_size}, std::move(v));
}

Tensor mask_tensor(std::span<const MaskSet> masks, int stage, int height, int width) {
  if (stage != 3 && stage != 4) throw BoundsError("masks exist for stages 3 and 4 only");
  std::vector<Real> v;
  v.reserve(masks.size() * height * width);
  for (const auto& m : masks) {
    const BinaryMask& g = stage == 3 ? m.stage3 : m.stage4;
    if (g.cells.empty()) throw ContractError("missing mask for stage " + std::to_string(stage));
    if (g.height != height || g.width != width) {
      throw DimensionError("mask grid " + std::to_string(g.height) + "x" + std::to_string(g.width) +
                           " does not match tokens " + std::to_string(height) + "x" + std::to_string(width));
    }
    for (auto c : g.cells) v.push_back(c ? 1 : 0);
  }
  return Tensor::from({static_cast<std::int64_t>(masks.size()), static_cast<std::int64_t>(height) * width},
                      std::move(v));
}

}  // namespace scob
