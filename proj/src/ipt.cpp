// SPDX-License-Identifier: Apache-2.0
#include "scob/ipt.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "scob/binary_io.hpp"
#include "scob/error.hpp"

namespace scob {

InstancePriorityTree::InstancePriorityTree(int class_id, std::size_t capacity)
    : class_id_(class_id), capacity_(capacity) {
  if (capacity == 0) throw ConfigError("tree capacity must be positive");
}

const IptNode& InstancePriorityTree::top() const {
  if (nodes_.empty()) throw ContractError("top of an empty tree");
  return nodes_.front();
}

std::optional<IptNode> InstancePriorityTree::insert(IptNode node) {
  if (node.class_id != class_id_) {
    throw ContractError("node of class " + std::to_string(node.class_id) + " inserted into tree " +
                        std::to_string(class_id_));
  }
  if (!(node.confidence >= 0 && node.confidence <= 1)) throw ContractError("confidence must lie in [0, 1]");
  for (Real v : node.feature) {
    if (!std::isfinite(v)) throw NumericError("non-finite node feature");
  }
  nodes_.push_back(std::move(node));
  sift_up(nodes_.size() - 1);
  if (nodes_.size() <= capacity_) return std::nullopt;
  IptNode dropped = std::move(nodes_.back());
  nodes_.pop_back();
  return dropped;
}

IptNode InstancePriorityTree::pop() {
  if (nodes_.empty()) throw ContractError("pop from an empty tree");
  IptNode out = std::move(nodes_.front());
  nodes_.front() = std::move(nodes_.back());
  nodes_.pop_back();
  if (!nodes_.empty()) sift_down(0);
  return out;
}

void InstancePriorityTree::sift_up(std::size_t i) {
  while (i > 0) {
    ++sift_steps_;
    const std::size_t parent = i / 2;
    if (nodes_[parent].confidence >= nodes_[i].confidence) break;
    std::swap(nodes_[parent], nodes_[i]);
    i = parent;
  }
}

void InstancePriorityTree::sift_down(std::size_t i) {
  const std::size_t n = nodes_.size();
  for (;;) {
    ++sift_steps_;
    std::size_t best = i;
    const std::size_t first = i == 0 ? 1 : 2 * i;
    const std::size_t last = i == 0 ? 1 : 2 * i + 1;
    for (std::size_t c = first; c <= last && c < n; ++c) {
      if (nodes_[c].confidence > nodes_[best].confidence) best = c;
    }
    if (best == i) return;
    std::swap(nodes_[i], nodes_[best]);
    i = best;
  }
}

bool InstancePriorityTree::heap_ok() const {
  for (std::size_t i = 1; i < nodes_.size(); ++i) {
    if (nodes_[i / 2].confidence < nodes_[i].confidence) return false;
  }
  return nodes_.size() <= capacity_;
}

void InstancePriorityTree::save(std::ostream& os) const {
  io::write<std::int32_t>(os, class_id_);
  io::write<std::uint32_t>(os, static_cast<std::uint32_t>(capacity_));
  io::write<std::uint32_t>(os, static_cast<std::uint32_t>(nodes_.size()));
  for (const auto& n : nodes_) {
    io::write<double>(os, n.confidence);
    io::write<std::int32_t>(os, n.sample_id);
    io::write<std::uint32_t>(os, static_cast<std::uint32_t>(n.feature.size()));
    for (Real v : n.feature) io::write<double>(os, v);
  }
}

InstancePriorityTree InstancePriorityTree::load(std::istream& is) {
  const auto cls = io::read<std::int32_t>(is);
  const auto cap = io::read<std::uint32_t>(is);
  if (cap == 0) throw FormatError("tree capacity must be positive");
  InstancePriorityTree t(cls, cap);
  const auto n = io::read<std::uint32_t>(is);
  if (n > cap) throw FormatError("tree holds more nodes than its capacity");
  t.nodes_.resize(n);
  for (auto& node : t.nodes_) {
    node.class_id = cls;
    node.confidence = static_cast<Real>(io::read<double>(is));
    node.sample_id = io::read<std::int32_t>(is);
    const auto d = io::read<std::uint32_t>(is);
    if (d > (1u << 20)) throw FormatError("feature length out of range");
    node.feature.resize(d);
    for (auto& v : node.feature) v = static_cast<Real>(io::read<double>(is));
  }
  if (!t.heap_ok()) throw FormatError("stored tree violates the heap property");
  return t;
}

Real node_confidence(std::span<const Real> probs, int class_id) {
  if (class_id < 0 || static_cast<std::size_t>(class_id) >= probs.size()) throw BoundsError("class id out of range");
  return probs[class_id];
}

IptForest::IptForest(int num_classes, std::size_t capacity) {
  if (num_classes < 1) throw ConfigError("forest needs at least one class");
  for (int c = 0; c < num_classes; ++c) trees_.emplace_back(c, capacity);
}

InstancePriorityTree& IptForest::tree(int c) {
  if (c < 0 || c >= num_classes()) throw BoundsError("class id out of range");
  return trees_[c];
}

const InstancePriorityTree& IptForest::tree(int c) const {
  if (c < 0 || c >= num_classes()) throw BoundsError("class id out of range");
  return trees_[c];
}

std::size_t IptForest::total_size() const {
  std::size_t n = 0;
  for (const auto& t : trees_) n += t.size();
  return n;
}

std::optional<IptNode> IptForest::insert(IptNode node) { return tree(node.class_id).insert(std::move(node)); }

std::vector<IptNode> IptForest::pop_top(int positive, int t) {
  if (t < 1) throw ContractError("pop_top needs t >= 1");
  std::vector<IptNode> out;
  for (auto& tree : trees_) {
    if (tree.class_id() == positive) continue;
    if (tree.size() <= static_cast<std::size_t>(t)) {
      out.insert(out.end(), tree.nodes().begin(), tree.nodes().end());
      continue;
    }
    const std::size_t start = out.size();
    for (int k = 0; k < t; ++k) out.push_back(tree.pop());
    for (std::size_t k = start; k < out.size(); ++k) tree.insert(out[k]);
  }
  return out;
}

std::vector<IptNode> IptForest::top_negatives(int positive, int k) {
  auto all = pop_top(positive, k);
  std::stable_sort(all.begin(), all.end(),
                   [](const IptNode& a, const IptNode& b) { return a.confidence > b.confidence; });
  if (all.size() > static_cast<std::size_t>(k)) all.resize(k);
  return all;
}

std::vector<IptNode> IptForest::random_negatives(int positive, int k, std::mt19937_64& rng) const {
  std::vector<const IptNode*> pool;
  for (const auto& t : trees_) {
    if (t.class_id() == positive) continue;
    for (const auto& n : t.nodes()) pool.push_back(&n);
  }
  std::vector<IptNode> out;
  const std::size_t take = std::min<std::size_t>(pool.size(), std::max(k, 0));
  for (std::size_t i = 0; i < take; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
    out.push_back(*pool[i]);
  }
  return out;
}

void IptForest::dump_csv(std::ostream& os) const {
  os << "class,rank,confidence,sample_id\n";
  for (const auto& t : trees_) {
    auto nodes = t.nodes();
    std::stable_sort(nodes.begin(), nodes.end(),
                     [](const IptNode& a, const IptNode& b) { return a.confidence > b.confidence; });
    for (std::size_t r = 0; r < nodes.size(); ++r) {
      os << t.class_id() << ',' << r << ',' << nodes[r].confidence << ',' << nodes[r].sample_id << '\n';
    }
  }
}

void IptForest::save(std::ostream& os) const {
  io::write<std::uint32_t>(os, static_cast<std::uint32_t>(trees_.size()));
  for (const auto& t : trees_) t.save(os);
}

IptForest IptForest::load(std::istream& is) {
  IptForest f;
  const auto n = io::read<std::uint32_t>(is);
  if (n > 4096) throw FormatError("class count out of range");
  for (std::uint32_t c = 0; c < n; ++c) {
    f.trees_.push_back(InstancePriorityTree::load(is));
    if (f.trees_.back().class_id() != static_cast<int>(c)) throw FormatError("trees stored out of class order");
  }
  return f;
}

}  // namespace scob
