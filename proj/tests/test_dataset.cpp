// SPDX-License-Identifier: Apache-2.0
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "doctest.h"
#include "scob/dataset.hpp"
#include "scob/error.hpp"

using namespace scob;

namespace {

DatasetSpec small_spec(std::uint64_t seed) {
  DatasetSpec s;
  s.num_train = 24;
  s.num_val = 8;
  s.seed = seed;
  return s;
}

std::string read_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

ImageSample manual_sample(int id, std::vector<std::uint8_t> y) {
  ImageSample s;
  s.id = id;
  s.image_size = 32;
  s.pixels.assign(3 * 32 * 32, 0.5f);
  s.y = y;
  s.z = y;
  for (auto v : y) {
    BinaryMask m(32, 32);
    if (v) m.at(3, 3) = 1;
    s.gt_masks.push_back(m);
  }
  return s;
}

std::string tmp_path(const char* name) { return (std::filesystem::temp_directory_path() / name).string(); }

}  // namespace

TEST_CASE("generation is byte-identical for a fixed seed") {
  auto a = generate_dataset(small_spec(7));
  auto b = generate_dataset(small_spec(7));
  const auto pa = tmp_path("scob_ds_a.bin"), pb = tmp_path("scob_ds_b.bin");
  save_dataset(a, pa);
  save_dataset(b, pb);
  CHECK(read_bytes(pa) == read_bytes(pb));
  auto c = generate_dataset(small_spec(8));
  CHECK_FALSE(c.train[0].pixels == a.train[0].pixels);
  std::remove(pa.c_str());
  std::remove(pb.c_str());
}

TEST_CASE("forced positive count") {
  auto spec = small_spec(3);
  spec.min_positives = spec.max_positives = 2;
  auto d = generate_dataset(spec);
  for (const auto& s : d.train) CHECK(s.positive_count() == 2);
  for (const auto& s : d.val) CHECK(s.positive_count() == 2);
}

TEST_CASE("mean positive count matches the midpoint of the range") {
  DatasetSpec spec;
  spec.num_train = 2000;
  spec.num_val = 0;
  spec.image_size = 32;
  spec.seed = 99;
  auto d = generate_dataset(spec);
  double total = 0;
  for (const auto& s : d.train) total += s.positive_count();
  CHECK(std::abs(total / 2000.0 - 2.0) <= 0.1);
}

TEST_CASE("config errors") {
  auto spec = small_spec(1);
  spec.palette.resize(4);
  CHECK_THROWS_AS(generate_dataset(spec), ConfigError);
  spec = small_spec(1);
  spec.num_classes = 1;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = small_spec(1);
  spec.image_size = 16;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = small_spec(1);
  spec.max_positives = 7;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
}

TEST_CASE("masks and labels agree, objects carry their color") {
  auto d = generate_dataset(small_spec(11));
  validate_dataset(d);
  for (const auto& s : d.train) {
    for (int c = 0; c < s.num_classes(); ++c) {
      CHECK((s.gt_masks[c].count() > 0) == (s.y[c] == 1));
      CHECK(s.gt_masks[c].height == s.image_size);
    }
  }
}

TEST_CASE("drop_to_single_positive keeps one positive from the support") {
  Dataset d;
  d.spec = small_spec(0);
  d.train.push_back(manual_sample(0, {1, 0, 1, 0}));
  d.train.push_back(manual_sample(1, {0, 1, 0, 0}));
  d.val.push_back(manual_sample(2, {1, 1, 0, 0}));
  drop_to_single_positive(d, 5);
  const auto& z0 = d.train[0].z;
  CHECK(z0[0] + z0[1] + z0[2] + z0[3] == 1);
  CHECK((z0[0] == 1 || z0[2] == 1));
  CHECK(d.train[1].z == std::vector<std::uint8_t>{0, 1, 0, 0});
  CHECK(d.val[0].z == d.val[0].y);
  CHECK_THROWS_AS(drop_to_single_positive(d, 5), ContractError);

  Dataset bad;
  bad.train.push_back(manual_sample(0, {0, 0, 0, 0}));
  CHECK_THROWS_AS(drop_to_single_positive(bad, 1), DataError);
}

TEST_CASE("single-positive draw is reproducible and persisted") {
  auto a = generate_dataset(small_spec(21));
  auto b = generate_dataset(small_spec(21));
  drop_to_single_positive(a, 4);
  drop_to_single_positive(b, 4);
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].z == b.train[i].z);
    for (int c = 0; c < a.train[i].num_classes(); ++c) CHECK(a.train[i].z[c] <= a.train[i].y[c]);
  }
  validate_dataset(a);
  const auto path = tmp_path("scob_ds_sp.bin");
  save_dataset(a, path);
  auto loaded = load_dataset(path);
  CHECK(loaded == a);
  CHECK(loaded.single_positive);
  std::remove(path.c_str());
}

TEST_CASE("flip is an involution and views are seed-deterministic") {
  auto d = generate_dataset(small_spec(2));
  const auto& s = d.train[0];
  CHECK(flip_pixels(flip_pixels(s.pixels, s.image_size), s.image_size) == s.pixels);

  AugmentOptions plain;
  plain.enable_jitter = false;
  plain.enable_noise = false;
  plain.flip_probability = 1.0;
  std::mt19937_64 rng(1);
  auto once = augment_view(s, ViewRole::Online, rng, plain);
  CHECK(once.transform.flipped);
  ImageSample flipped = s;
  flipped.pixels = once.pixels;
  auto twice = augment_view(flipped, ViewRole::Online, rng, plain);
  CHECK(twice.pixels == s.pixels);

  std::mt19937_64 r1(77), r2(77);
  auto v1 = make_view_pair(s, r1);
  auto v2 = make_view_pair(s, r2);
  CHECK(v1.online.pixels == v2.online.pixels);
  CHECK(v1.target.pixels == v2.target.pixels);
  for (float p : v1.online.pixels) CHECK((p >= 0.0f && p <= 1.0f));
  for (float j : v1.online.transform.jitter) CHECK((j >= 0.8f && j <= 1.2f));
}

TEST_CASE("mask mapping preserves foreground count") {
  auto d = generate_dataset(small_spec(5));
  for (const auto& s : d.train) {
    const int c = [&] {
      for (int k = 0; k < s.num_classes(); ++k) {
        if (s.y[k]) return k;
      }
      return -1;
    }();
    const auto& m = s.gt_masks[c];
    ViewTransform flipped;
    flipped.flipped = true;
    auto mapped = map_mask_to_view(m, flipped);
    CHECK(mapped.count() == m.count());
    CHECK(transport_mask(mapped, flipped, ViewTransform{}) == m);
    // foreground pixels land on mirrored columns
    for (int i = 0; i < m.height; ++i) {
      for (int j = 0; j < m.width; ++j) CHECK(mapped.at(i, m.width - 1 - j) == m.at(i, j));
    }
  }
}

TEST_CASE("max pooling of masks") {
  BinaryMask m(64, 64);
  m.at(0, 0) = 1;
  m.at(63, 63) = 1;
  auto p = max_pool_mask(m, 8, 8);
  CHECK(p.count() == 2);
  CHECK(p.at(0, 0) == 1);
  CHECK(p.at(7, 7) == 1);
  CHECK_THROWS_AS(max_pool_mask(m, 0, 8), DimensionError);
}

TEST_CASE("corrupt or truncated files are rejected") {
  auto d = generate_dataset(small_spec(6));
  const auto path = tmp_path("scob_ds_bad.bin");
  save_dataset(d, path);
  std::string bytes = read_bytes(path);
  {
    std::string bad = bytes;
    bad[0] = 'X';
    std::ofstream(path, std::ios::binary) << bad;
    CHECK_THROWS_AS(load_dataset(path), FormatError);
  }
  {
    std::string bad = bytes;
    bad[4] = 9;
    std::ofstream(path, std::ios::binary) << bad;
    CHECK_THROWS_AS(load_dataset(path), FormatError);
  }
  {
    std::ofstream(path, std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    CHECK_THROWS_AS(load_dataset(path), FormatError);
  }
  std::remove(path.c_str());
}
