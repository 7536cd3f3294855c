#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <vector>

#include "genrec/array.hpp"

namespace genrec {

// Ordered tuple of per-layer codeword indices identifying one item
// coarse-to-fine.
struct SemanticId {
  std::vector<int> codes;

  bool operator==(const SemanticId& o) const { return codes == o.codes; }
  bool operator<(const SemanticId& o) const { return codes < o.codes; }
};

// Prefix tree over the legal code sequences of a quantized corpus. A leaf
// holds every item that quantized to that sequence; collisions are kept,
// never dropped.
class SemanticTrie {
 public:
  SemanticTrie() = default;
  explicit SemanticTrie(int depth);

  int depth() const { return depth_; }

  void insert(const SemanticId& id, int64_t item);

  // True iff some corpus item quantized to exactly this sequence.
  bool accepts(std::span<const int> codes) const;
  // Items at the leaf, or nullptr when the sequence is not in the trie.
  const std::vector<int64_t>* lookup(std::span<const int> codes) const;
  // Legal continuations of a (possibly empty) prefix, ascending.
  std::vector<int> children_of(std::span<const int> prefix) const;

  int64_t item_count() const { return item_count_; }
  int64_t leaf_count() const { return leaf_count_; }
  // Leaves holding more than one item.
  int64_t collision_count() const;

  // Walks every leaf in code order.
  void for_each_leaf(
      const std::function<void(const SemanticId&, const std::vector<int64_t>&)>& fn) const;

 private:
  struct TrieNode {
    std::map<int, int> children;  // code -> node index; ordered for determinism
    std::vector<int64_t> items;   // non-empty only at depth() level
  };

  int find(std::span<const int> codes) const;  // node index or -1

  int depth_ = 0;
  std::vector<TrieNode> nodes_{TrieNode{}};  // node 0 is the root
  int64_t item_count_ = 0;
  int64_t leaf_count_ = 0;

  friend class TrieSerializer;
};

}  // namespace genrec
