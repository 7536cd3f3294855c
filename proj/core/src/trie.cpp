#include "genrec/trie.hpp"

#include <functional>

namespace genrec {

SemanticTrie::SemanticTrie(int depth) : depth_(depth) {
  GENREC_REQUIRE(depth >= 1, "trie depth must be >= 1");
}

void SemanticTrie::insert(const SemanticId& id, int64_t item) {
  GENREC_REQUIRE(static_cast<int>(id.codes.size()) == depth_, "semantic id length must equal trie depth");
  int node = 0;
  for (int code : id.codes) {
    GENREC_REQUIRE(code >= 0, "semantic id codes must be non-negative");
    auto it = nodes_[static_cast<size_t>(node)].children.find(code);
    if (it == nodes_[static_cast<size_t>(node)].children.end()) {
      nodes_.push_back(TrieNode{});
      int child = static_cast<int>(nodes_.size()) - 1;
      nodes_[static_cast<size_t>(node)].children.emplace(code, child);
      node = child;
    } else {
      node = it->second;
    }
  }
  if (nodes_[static_cast<size_t>(node)].items.empty()) ++leaf_count_;
  nodes_[static_cast<size_t>(node)].items.push_back(item);
  ++item_count_;
}

int SemanticTrie::find(std::span<const int> codes) const {
  int node = 0;
  for (int code : codes) {
    const auto& ch = nodes_[static_cast<size_t>(node)].children;
    auto it = ch.find(code);
    if (it == ch.end()) return -1;
    node = it->second;
  }
  return node;
}

bool SemanticTrie::accepts(std::span<const int> codes) const {
  if (static_cast<int>(codes.size()) != depth_) return false;
  return find(codes) >= 0;
}

const std::vector<int64_t>* SemanticTrie::lookup(std::span<const int> codes) const {
  if (static_cast<int>(codes.size()) != depth_) return nullptr;
  int node = find(codes);
  return node < 0 ? nullptr : &nodes_[static_cast<size_t>(node)].items;
}

std::vector<int> SemanticTrie::children_of(std::span<const int> prefix) const {
  std::vector<int> out;
  int node = find(prefix);
  if (node < 0) return out;
  for (const auto& [code, _] : nodes_[static_cast<size_t>(node)].children) out.push_back(code);
  return out;
}

int64_t SemanticTrie::collision_count() const {
  int64_t n = 0;
  for (const auto& node : nodes_)
    if (node.items.size() > 1) ++n;
  return n;
}

void SemanticTrie::for_each_leaf(
    const std::function<void(const SemanticId&, const std::vector<int64_t>&)>& fn) const {
  SemanticId path;
  std::function<void(int)> walk = [&](int node) {
    const TrieNode& tn = nodes_[static_cast<size_t>(node)];
    if (static_cast<int>(path.codes.size()) == depth_) {
      if (!tn.items.empty()) fn(path, tn.items);
      return;
    }
    for (const auto& [code, child] : tn.children) {
      path.codes.push_back(code);
      walk(child);
      path.codes.pop_back();
    }
  };
  walk(0);
}

}  // namespace genrec
