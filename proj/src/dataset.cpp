// SPDX-License-Identifier: Apache-2.0
#include "scob/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "scob/binary_io.hpp"
#include "scob/error.hpp"

namespace scob {

namespace {

constexpr char kDatasetMagic[5] = "SCOB";
constexpr std::uint16_t kDatasetVersion = 1;

bool inside_shape(ShapeKind kind, double dx, double dy, double r) {
  const double d = std::sqrt(dx * dx + dy * dy);
  switch (kind) {
    case ShapeKind::Circle:
      return d <= r;
    case ShapeKind::Square:
      return std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r;
    case ShapeKind::Triangle: {
      // apex up, base at dy = 0.75 r
      if (dy > 0.75 * r || dy < -r) return false;
      const double half_width = 0.95 * r * (dy + r) / (1.75 * r);
      return std::abs(dx) <= half_width;
    }
    case ShapeKind::Cross:
      return (std::abs(dx) <= 0.3 * r && std::abs(dy) <= r) || (std::abs(dy) <= 0.3 * r && std::abs(dx) <= r);
    case ShapeKind::Ring:
      return d <= r && d >= 0.55 * r;
    case ShapeKind::Bar:
      return std::abs(dx) <= r && std::abs(dy) <= 0.3 * r;
  }
  return false;
}

struct Placement {
  int cls;
  double cx, cy, r;
  float brightness;
};

// Label map of the topmost class per pixel, -1 for background.
std::vector<int> rasterize(const std::vector<Placement>& objects, const std::vector<ClassStyle>& palette, int S,
                           std::vector<std::size_t>& full_area) {
  std::vector<int> label(static_cast<std::size_t>(S) * S, -1);
  full_area.assign(objects.size(), 0);
  for (std::size_t k = 0; k < objects.size(); ++k) {
    const auto& o = objects[k];
    for (int i = 0; i < S; ++i) {
      for (int j = 0; j < S; ++j) {
        if (inside_shape(palette[o.cls].kind, j + 0.5 - o.cx, i + 0.5 - o.cy, o.r)) {
          label[static_cast<std::size_t>(i) * S + j] = static_cast<int>(k);
          ++full_area[k];
        }
      }
    }
  }
  return label;
}

ImageSample render_sample(const DatasetSpec& spec, int id) {
  std::mt19937_64 rng(mix_seed(spec.seed, static_cast<std::uint64_t>(id)));
  const int S = spec.image_size;
  const int L = spec.num_classes;
  std::uniform_int_distribution<int> count_dist(spec.min_positives, spec.max_positives);
  const int k = count_dist(rng);
  std::vector<int> classes(L);
  std::iota(classes.begin(), classes.end(), 0);
  std::shuffle(classes.begin(), classes.end(), rng);
  classes.resize(k);

  std::uniform_real_distribution<double> radius_dist(0.10 * S, 0.20 * S);
  std::uniform_real_distribution<float> bright_dist(0.8f, 1.0f);
  std::vector<Placement> objects;
  std::vector<int> label;
  std::vector<std::size_t> full_area;
  for (int attempt = 0;; ++attempt) {
    objects.clear();
    for (int c : classes) {
      const double r = radius_dist(rng);
      std::uniform_real_distribution<double> pos(r, S - r);
      const double cx = pos(rng);
      const double cy = pos(rng);
      objects.push_back({c, cx, cy, r, bright_dist(rng)});
    }
    label = rasterize(objects, spec.palette, S, full_area);
    std::vector<std::size_t> visible(objects.size(), 0);
    for (int v : label) {
      if (v >= 0) ++visible[v];
    }
    bool ok = true;
    for (std::size_t o = 0; o < objects.size(); ++o) {
      // partial overlap allowed, but each object keeps at least half its area
      if (visible[o] == 0 || 2 * visible[o] < full_area[o]) ok = false;
    }
    if (ok) break;
    if (attempt > 1000) throw DataError("could not place objects without heavy occlusion");
  }

  ImageSample s;
  s.id = id;
  s.image_size = S;
  s.y.assign(L, 0);
  s.gt_masks.assign(L, BinaryMask(S, S));
  for (int c : classes) s.y[c] = 1;
  s.z = s.y;

  std::uniform_real_distribution<float> base_dist(0.25f, 0.55f);
  std::uniform_real_distribution<float> tint_dist(-0.05f, 0.05f);
  const float base = base_dist(rng);
  std::array<float, 3> background{};
  for (auto& b : background) b = base + tint_dist(rng);
  std::normal_distribution<double> noise(0.0, spec.noise_sigma);

  s.pixels.resize(static_cast<std::size_t>(3) * S * S);
  for (int i = 0; i < S; ++i) {
    for (int j = 0; j < S; ++j) {
      const int v = label[static_cast<std::size_t>(i) * S + j];
      if (v >= 0) s.gt_masks[objects[v].cls].at(i, j) = 1;
      for (int ch = 0; ch < 3; ++ch) {
        float value = v >= 0 ? spec.palette[objects[v].cls].color[ch] * objects[v].brightness : background[ch];
        value += static_cast<float>(spec.noise_sigma > 0 ? noise(rng) : 0.0);
        s.pixels[(static_cast<std::size_t>(ch) * S + i) * S + j] = std::clamp(value, 0.0f, 1.0f);
      }
    }
  }
  return s;
}

void write_mask_rle(std::ostream& os, const BinaryMask& m) {
  std::vector<std::uint32_t> runs;
  std::uint8_t current = 0;
  std::uint32_t len = 0;
  for (std::uint8_t v : m.cells) {
    if (v != current) {
      runs.push_back(len);
      current = v;
      len = 0;
    }
    ++len;
  }
  runs.push_back(len);
  io::write<std::uint32_t>(os, static_cast<std::uint32_t>(runs.size()));
  io::write_array(os, runs.data(), runs.size());
}

BinaryMask read_mask_rle(std::istream& is, int S) {
  BinaryMask m(S, S);
  const auto n = io::read<std::uint32_t>(is);
  if (n > m.cells.size() + 1) throw FormatError("mask run count out of range");
  std::vector<std::uint32_t> runs(n);
  io::read_array(is, runs.data(), n);
  std::size_t pos = 0;
  std::uint8_t v = 0;
  for (std::uint32_t len : runs) {
    if (pos + len > m.cells.size()) throw FormatError("mask runs overflow the grid");
    std::fill_n(m.cells.begin() + static_cast<std::ptrdiff_t>(pos), len, v);
    pos += len;
    v ^= 1;
  }
  if (pos != m.cells.size()) throw FormatError("mask runs do not cover the grid");
  return m;
}

void write_sample(std::ostream& os, const ImageSample& s) {
  io::write<std::uint32_t>(os, static_cast<std::uint32_t>(s.id));
  io::write_array(os, s.pixels.data(), s.pixels.size());
  io::write_array(os, s.y.data(), s.y.size());
  io::write_array(os, s.z.data(), s.z.size());
  for (const auto& m : s.gt_masks) write_mask_rle(os, m);
}

ImageSample read_sample(std::istream& is, int L, int S) {
  ImageSample s;
  s.id = static_cast<int>(io::read<std::uint32_t>(is));
  s.image_size = S;
  s.pixels.resize(static_cast<std::size_t>(3) * S * S);
  io::read_array(is, s.pixels.data(), s.pixels.size());
  s.y.resize(L);
  s.z.resize(L);
  io::read_array(is, s.y.data(), s.y.size());
  io::read_array(is, s.z.data(), s.z.size());
  for (int c = 0; c < L; ++c) s.gt_masks.push_back(read_mask_rle(is, S));
  return s;
}

}  // namespace

const char* shape_name(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::Circle: return "circle";
    case ShapeKind::Square: return "square";
    case ShapeKind::Triangle: return "triangle";
    case ShapeKind::Cross: return "cross";
    case ShapeKind::Ring: return "ring";
    case ShapeKind::Bar: return "bar";
  }
  return "?";
}

std::vector<ClassStyle> default_palette() {
  return {
      {ShapeKind::Circle, {0.90f, 0.15f, 0.15f}},  {ShapeKind::Square, {0.15f, 0.80f, 0.20f}},
      {ShapeKind::Triangle, {0.20f, 0.30f, 0.95f}}, {ShapeKind::Cross, {0.95f, 0.85f, 0.10f}},
      {ShapeKind::Ring, {0.85f, 0.20f, 0.85f}},     {ShapeKind::Bar, {0.10f, 0.85f, 0.85f}},
  };
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over the combined words
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

void DatasetSpec::validate() const {
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (image_size < 32) throw ConfigError("image_size must be >= 32");
  if (num_train < 0 || num_val < 0) throw ConfigError("sample counts must be non-negative");
  if (min_positives < 1 || max_positives > num_classes || min_positives > max_positives) {
    throw ConfigError("positives range must lie within [1, num_classes]");
  }
  if (static_cast<int>(palette.size()) < num_classes) {
    throw ConfigError("palette has " + std::to_string(palette.size()) + " entries for " + std::to_string(num_classes) +
                      " classes");
  }
  if (!(noise_sigma >= 0)) throw ConfigError("noise_sigma must be non-negative");
}

std::size_t BinaryMask::count() const { return static_cast<std::size_t>(std::count(cells.begin(), cells.end(), 1)); }

int ImageSample::positive_count() const { return static_cast<int>(std::count(y.begin(), y.end(), 1)); }

int ImageSample::observed_class() const {
  int found = -1;
  for (std::size_t c = 0; c < z.size(); ++c) {
    if (z[c] == 1) {
      if (found >= 0) throw ContractError("observed labels are not one-hot");
      found = static_cast<int>(c);
    } else if (z[c] != 0) {
      throw ContractError("observed labels must be binary");
    }
  }
  if (found < 0) throw ContractError("observed labels are not one-hot");
  return found;
}

Dataset generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  Dataset d;
  d.spec = spec;
  d.train.reserve(spec.num_train);
  d.val.reserve(spec.num_val);
  for (int i = 0; i < spec.num_train; ++i) d.train.push_back(render_sample(spec, i));
  for (int i = 0; i < spec.num_val; ++i) d.val.push_back(render_sample(spec, spec.num_train + i));
  return d;
}

void drop_to_single_positive(Dataset& dataset, std::uint64_t seed) {
  if (dataset.single_positive) throw ContractError("single-positive labels were already drawn for this dataset");
  for (const auto& s : dataset.train) {
    if (s.positive_count() == 0) throw DataError("training sample " + std::to_string(s.id) + " has no positive label");
  }
  for (auto& s : dataset.train) {
    std::vector<int> pos;
    for (int c = 0; c < s.num_classes(); ++c) {
      if (s.y[c]) pos.push_back(c);
    }
    std::mt19937_64 rng(mix_seed(seed ^ 0x5350u, static_cast<std::uint64_t>(s.id)));
    std::uniform_int_distribution<std::size_t> pick(0, pos.size() - 1);
    std::fill(s.z.begin(), s.z.end(), 0);
    s.z[pos[pick(rng)]] = 1;
  }
  for (auto& s : dataset.val) s.z = s.y;
  dataset.single_positive = true;
}

void validate_dataset(const Dataset& dataset) {
  auto check_masks = [](const ImageSample& s) {
    for (int c = 0; c < s.num_classes(); ++c) {
      if ((s.gt_masks[c].count() > 0) != (s.y[c] == 1)) {
        throw DataError("sample " + std::to_string(s.id) + ": mask/label mismatch for class " + std::to_string(c));
      }
    }
  };
  for (const auto& s : dataset.train) {
    check_masks(s);
    int observed = 0;
    for (int c = 0; c < s.num_classes(); ++c) {
      if (s.z[c] > s.y[c]) throw DataError("sample " + std::to_string(s.id) + ": observed label not in full labels");
      observed += s.z[c];
    }
    if (dataset.single_positive && observed != 1) {
      throw DataError("sample " + std::to_string(s.id) + ": expected exactly one observed positive");
    }
  }
  for (const auto& s : dataset.val) check_masks(s);
}

std::vector<float> flip_pixels(const std::vector<float>& pixels, int S) {
  std::vector<float> out(pixels.size());
  for (int ch = 0; ch < 3; ++ch) {
    for (int i = 0; i < S; ++i) {
      const float* src = pixels.data() + (static_cast<std::size_t>(ch) * S + i) * S;
      float* dst = out.data() + (static_cast<std::size_t>(ch) * S + i) * S;
      for (int j = 0; j < S; ++j) dst[j] = src[S - 1 - j];
    }
  }
  return out;
}

AugmentedView augment_view(const ImageSample& sample, ViewRole role, std::mt19937_64& rng,
                           const AugmentOptions& options) {
  AugmentedView view;
  view.role = role;
  const int S = sample.image_size;
  std::bernoulli_distribution flip(options.flip_probability);
  view.transform.flipped = flip(rng);
  view.pixels = view.transform.flipped ? flip_pixels(sample.pixels, S) : sample.pixels;
  if (options.enable_jitter) {
    std::uniform_real_distribution<double> jitter(options.jitter_low, options.jitter_high);
    for (auto& f : view.transform.jitter) f = static_cast<float>(jitter(rng));
  }
  std::normal_distribution<double> noise(0.0, options.noise_sigma);
  const std::size_t plane = static_cast<std::size_t>(S) * S;
  for (int ch = 0; ch < 3; ++ch) {
    for (std::size_t p = 0; p < plane; ++p) {
      float& v = view.pixels[ch * plane + p];
      if (options.enable_jitter) v = std::clamp(v * view.transform.jitter[ch], 0.0f, 1.0f);
      if (options.enable_noise && options.noise_sigma > 0) {
        v = std::clamp(v + static_cast<float>(noise(rng)), 0.0f, 1.0f);
      }
    }
  }
  return view;
}

ViewPair make_view_pair(const ImageSample& sample, std::mt19937_64& rng, const AugmentOptions& options) {
  ViewPair pair;
  pair.online = augment_view(sample, ViewRole::Online, rng, options);
  pair.target = augment_view(sample, ViewRole::Target, rng, options);
  return pair;
}

namespace {
BinaryMask flip_mask(const BinaryMask& m) {
  BinaryMask out(m.height, m.width);
  for (int i = 0; i < m.height; ++i) {
    for (int j = 0; j < m.width; ++j) out.at(i, j) = m.at(i, m.width - 1 - j);
  }
  return out;
}
}  // namespace

BinaryMask map_mask_to_view(const BinaryMask& mask, const ViewTransform& transform) {
  return transform.flipped ? flip_mask(mask) : mask;
}

BinaryMask transport_mask(const BinaryMask& mask, const ViewTransform& from, const ViewTransform& to) {
  return from.flipped != to.flipped ? flip_mask(mask) : mask;
}

BinaryMask max_pool_mask(const BinaryMask& mask, int gh, int gw) {
  if (gh <= 0 || gw <= 0 || gh > mask.height || gw > mask.width) throw DimensionError("max_pool_mask: bad grid");
  BinaryMask out(gh, gw);
  for (int i = 0; i < gh; ++i) {
    const int r0 = i * mask.height / gh, r1 = (i + 1) * mask.height / gh;
    for (int j = 0; j < gw; ++j) {
      const int c0 = j * mask.width / gw, c1 = (j + 1) * mask.width / gw;
      std::uint8_t any = 0;
      for (int r = r0; r < r1 && !any; ++r) {
        for (int c = c0; c < c1; ++c) {
          if (mask.at(r, c)) {
            any = 1;
            break;
          }
        }
      }
      out.at(i, j) = any;
    }
  }
  return out;
}

void save_dataset(const Dataset& d, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path + "' for writing");
  os.write(kDatasetMagic, 4);
  io::write<std::uint16_t>(os, kDatasetVersion);
  const auto& sp = d.spec;
  io::write<std::uint32_t>(os, static_cast<std::uint32_t>(sp.num_classes));
  io::write<std::uint32_t>(os, static_cast<std::uint32_t>(sp.image_size));
  io::write<std::uint32_t>(os, static_cast<std::uint32_t>(d.train.size()));
  io::write<std::uint32_t>(os, static_cast<std::uint32_t>(d.val.size()));
  io::write<std::uint32_t>(os, static_cast<std::uint32_t>(sp.min_positives));
  io::write<std::uint32_t>(os, static_cast<std::uint32_t>(sp.max_positives));
  io::write<std::uint64_t>(os, sp.seed);
  io::write<double>(os, sp.noise_sigma);
  io::write<std::uint8_t>(os, d.single_positive ? 1 : 0);
  io::write<std::uint32_t>(os, static_cast<std::uint32_t>(sp.palette.size()));
  for (const auto& st : sp.palette) {
    io::write<std::uint8_t>(os, static_cast<std::uint8_t>(st.kind));
    io::write_array(os, st.color.data(), 3);
  }
  for (const auto& s : d.train) write_sample(os, s);
  for (const auto& s : d.val) write_sample(os, s);
  if (!os) throw FormatError("write to '" + path + "' failed");
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open '" + path + "'");
  io::expect_magic(is, kDatasetMagic);
  const auto version = io::read<std::uint16_t>(is);
  if (version != kDatasetVersion) {
    throw FormatError("unsupported dataset version " + std::to_string(version) + " (expected " +
                      std::to_string(kDatasetVersion) + ")");
  }
  Dataset d;
  auto& sp = d.spec;
  sp.num_classes = static_cast<int>(io::read<std::uint32_t>(is));
  sp.image_size = static_cast<int>(io::read<std::uint32_t>(is));
  sp.num_train = static_cast<int>(io::read<std::uint32_t>(is));
  sp.num_val = static_cast<int>(io::read<std::uint32_t>(is));
  sp.min_positives = static_cast<int>(io::read<std::uint32_t>(is));
  sp.max_positives = static_cast<int>(io::read<std::uint32_t>(is));
  sp.seed = io::read<std::uint64_t>(is);
  sp.noise_sigma = io::read<double>(is);
  d.single_positive = io::read<std::uint8_t>(is) != 0;
  const auto palette_size = io::read<std::uint32_t>(is);
  if (palette_size > 4096) throw FormatError("palette size out of range");
  sp.palette.clear();
  for (std::uint32_t i = 0; i < palette_size; ++i) {
    ClassStyle st;
    const auto kind = io::read<std::uint8_t>(is);
    if (kind > static_cast<std::uint8_t>(ShapeKind::Bar)) throw FormatError("unknown shape kind");
    st.kind = static_cast<ShapeKind>(kind);
    io::read_array(is, st.color.data(), 3);
    sp.palette.push_back(st);
  }
  try {
    sp.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid dataset header: ") + e.what());
  }
  for (int i = 0; i < sp.num_train; ++i) d.train.push_back(read_sample(is, sp.num_classes, sp.image_size));
  for (int i = 0; i < sp.num_val; ++i) d.val.push_back(read_sample(is, sp.num_classes, sp.image_size));
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after dataset payload");
  return d;
}

}  // namespace scob
