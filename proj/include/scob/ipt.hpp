// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "scob/tensor.hpp"

namespace scob {

struct IptNode {
  std::vector<Real> feature;  // detached snapshot
  Real confidence = 0;
  int sample_id = -1;
  int class_id = 0;

  bool operator==(const IptNode&) const = default;
};

/// Per-class bounded max-heap. Parent of slot i (i >= 1) is slot i / 2, so
/// slot 0 has the single child 1 and slot k >= 1 has children 2k and 2k + 1.
class InstancePriorityTree {
 public:
  explicit InstancePriorityTree(int class_id = 0, std::size_t capacity = 80);

  int class_id() const { return class_id_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }
  const std::vector<IptNode>& nodes() const { return nodes_; }
  const IptNode& top() const;

  /// Append, sift up, then drop array-tail nodes beyond capacity. Returns the
  /// dropped node, if any (possibly the one just inserted).
  std::optional<IptNode> insert(IptNode node);
  /// Removes and returns the root.
  IptNode pop();

  bool heap_ok() const;

  /// Sift comparisons performed so far by insert/pop.
  std::uint64_t sift_steps() const { return sift_steps_; }
  void reset_sift_steps() { sift_steps_ = 0; }

  void save(std::ostream& os) const;
  static InstancePriorityTree load(std::istream& is);

 private:
  void sift_up(std::size_t i);
  void sift_down(std::size_t i);

  int class_id_;
  std::size_t capacity_;
  std::vector<IptNode> nodes_;
  std::uint64_t sift_steps_ = 0;
};

/// s for a node of class c: the online classifier's probability p_c.
Real node_confidence(std::span<const Real> probs, int class_id);

/// One tree per class.
class IptForest {
 public:
  IptForest() = default;
  IptForest(int num_classes, std::size_t capacity);

  int num_classes() const { return static_cast<int>(trees_.size()); }
  InstancePriorityTree& tree(int c);
  const InstancePriorityTree& tree(int c) const;
  std::size_t total_size() const;

  std::optional<IptNode> insert(IptNode node);

  /// For every class other than `positive`, the t most confident nodes (all of
  /// them when the tree holds <= t). Trees are restored before returning.
  std::vector<IptNode> pop_top(int positive, int t);

  /// pop_top(positive, k), merged, ordered by confidence (descending, stable
  /// by class) and truncated to k.
  std::vector<IptNode> top_negatives(int positive, int k);
  /// k uniform draws without replacement from all nodes of other classes.
  std::vector<IptNode> random_negatives(int positive, int k, std::mt19937_64& rng) const;

  /// CSV rows: class,rank,confidence,sample_id (rank by descending confidence).
  void dump_csv(std::ostream& os) const;

  void save(std::ostream& os) const;
  static IptForest load(std::istream& is);

 private:
  std::vector<InstancePriorityTree> trees_;
};

}  // namespace scob
