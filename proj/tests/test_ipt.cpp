// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "doctest.h"
#include "scob/error.hpp"
#include "scob/ipt.hpp"

using namespace scob;

namespace {

IptNode node(int cls, Real conf, int id) { return {{conf, Real(id)}, conf, id, cls}; }

std::vector<Real> confidences(std::vector<IptNode> nodes) {
  std::vector<Real> v;
  for (const auto& n : nodes) v.push_back(n.confidence);
  std::sort(v.begin(), v.end());
  return v;
}

// Per-class list of (confidence, id) kept sorted by confidence.
struct SortedReference {
  std::vector<std::vector<std::pair<Real, int>>> lists;

  explicit SortedReference(int classes) : lists(classes) {}

  void insert(int cls, Real conf, int id) { lists[cls].emplace_back(conf, id); }
  void erase(int cls, int id) {
    auto& l = lists[cls];
    l.erase(std::find_if(l.begin(), l.end(), [&](const auto& e) { return e.second == id; }));
  }
  std::vector<Real> pop_top(int positive, int t) const {
    std::vector<Real> out;
    for (std::size_t c = 0; c < lists.size(); ++c) {
      if (static_cast<int>(c) == positive) continue;
      auto l = lists[c];
      std::sort(l.begin(), l.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
      for (std::size_t k = 0; k < l.size() && k < static_cast<std::size_t>(t); ++k) out.push_back(l[k].first);
    }
    std::sort(out.begin(), out.end());
    return out;
  }
};

}  // namespace

TEST_CASE("insert examples") {
  InstancePriorityTree t(2);
  t.insert(node(2, 0.3, 0));
  CHECK(t.top().confidence == 0.3);
  t.insert(node(2, 0.9, 1));
  t.insert(node(2, 0.5, 2));
  CHECK(t.top().confidence == 0.9);
  CHECK(t.heap_ok());
  CHECK_THROWS_AS(t.insert(node(1, 0.5, 3)), ContractError);
  CHECK_THROWS_AS(t.insert(node(2, 1.5, 3)), ContractError);

  InstancePriorityTree full(0, 80);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<Real> u(0, 1);
  int evicted = 0;
  for (int i = 0; i < 200; ++i) evicted += full.insert(node(0, u(rng), i)).has_value();
  CHECK(full.size() == 80);
  CHECK(evicted == 120);
  CHECK(full.heap_ok());
}

TEST_CASE("pop_top examples") {
  IptForest f(3, 80);
  for (auto [c, id] : {std::pair{0.1, 0}, {0.8, 1}, {0.4, 2}}) f.insert(node(1, c, id));
  f.insert(node(0, 0.7, 3));
  auto got = f.pop_top(0, 2);
  CHECK(confidences(got) == std::vector<Real>{0.4, 0.8});
  CHECK(f.pop_top(1, 2).size() == 1);  // class 1 is the positive, class 0 holds one node
  CHECK(confidences(f.pop_top(2, 5)) == std::vector<Real>{0.1, 0.4, 0.7, 0.8});
  CHECK(f.tree(1).size() == 3);
  CHECK_THROWS_AS(f.pop_top(0, 0), ContractError);

  auto neg = f.top_negatives(2, 2);
  REQUIRE(neg.size() == 2);
  CHECK(neg[0].confidence == 0.8);
  CHECK(neg[1].confidence == 0.7);
}

TEST_CASE("node confidence is the class probability") {
  const std::vector<Real> p{0.2, 0.37, 1.0};
  CHECK(node_confidence(p, 1) == 0.37);
  CHECK(node_confidence(p, 2) == 1.0);
  CHECK_THROWS_AS(node_confidence(p, 3), BoundsError);

  InstancePriorityTree t(0);
  t.insert(node(0, node_confidence(p, 0), 10));
  t.insert(node(0, node_confidence(p, 1), 11));
  CHECK(t.top().sample_id == 11);
}

TEST_CASE("random operations match a sorted-list reference") {
  constexpr int kClasses = 6;
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<Real> u(0, 1);
  IptForest forest(kClasses, 40);
  SortedReference ref(kClasses);
  double worst_ratio = 0;
  for (int op = 0; op < 10000; ++op) {
    if (rng() % 3 != 0) {
      const int cls = static_cast<int>(rng() % kClasses);
      // coarse confidences create plenty of ties
      const Real conf = std::round(u(rng) * 50) / 50;
      ref.insert(cls, conf, op);
      if (auto dropped = forest.insert(node(cls, conf, op))) ref.erase(cls, dropped->sample_id);
    } else {
      const int positive = static_cast<int>(rng() % kClasses);
      const int t = 1 + static_cast<int>(rng() % 8);
      std::vector<std::vector<IptNode>> before;
      std::vector<std::uint64_t> steps;
      for (int c = 0; c < kClasses; ++c) {
        before.push_back(forest.tree(c).nodes());
        forest.tree(c).reset_sift_steps();
      }
      auto got = forest.pop_top(positive, t);
      CHECK(confidences(got) == ref.pop_top(positive, t));
      for (const auto& n : got) CHECK(n.class_id != positive);
      for (int c = 0; c < kClasses; ++c) {
        const auto& tree = forest.tree(c);
        CHECK(confidences(tree.nodes()) == confidences(before[c]));
        const double N = static_cast<double>(tree.size());
        if (c != positive && N > t) {
          const double ratio = tree.sift_steps() / (t * std::log2(N));
          worst_ratio = std::max(worst_ratio, ratio);
        }
      }
    }
    for (int c = 0; c < kClasses; ++c) {
      REQUIRE(forest.tree(c).heap_ok());
      REQUIRE(forest.tree(c).size() == ref.lists[c].size());
    }
  }
  MESSAGE("worst sift steps / (t log2 N) = " << worst_ratio);
  CHECK(worst_ratio <= 6.0);
}

TEST_CASE("random negatives exclude the positive class without repeats") {
  IptForest f(3, 80);
  for (int i = 0; i < 30; ++i) f.insert(node(i % 3, 0.01 * i, i));
  std::mt19937_64 rng(5);
  auto neg = f.random_negatives(1, 12, rng);
  CHECK(neg.size() == 12);
  std::set<int> ids;
  for (const auto& n : neg) {
    CHECK(n.class_id != 1);
    ids.insert(n.sample_id);
  }
  CHECK(ids.size() == 12);
  CHECK(f.random_negatives(1, 100, rng).size() == 20);
}

TEST_CASE("forest persistence and dump") {
  IptForest f(2, 5);
  for (int i = 0; i < 9; ++i) f.insert(node(i % 2, 0.1 * i, i));
  std::stringstream ss;
  f.save(ss);
  auto g = IptForest::load(ss);
  for (int c = 0; c < 2; ++c) CHECK(g.tree(c).nodes() == f.tree(c).nodes());
  std::ostringstream csv;
  f.dump_csv(csv);
  CHECK(csv.str().rfind("class,rank,confidence,sample_id\n", 0) == 0);

  std::stringstream broken(ss.str().substr(0, 10));
  CHECK_THROWS_AS(IptForest::load(broken), FormatError);
}
