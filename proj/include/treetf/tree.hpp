#pragma once

#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "treetf/constituent.hpp"

namespace treetf {

class TreeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Ordered unlabeled tree over token positions 0..N-1. Leaves have no
/// children; every node covers the contiguous interval [begin, end).
struct ParseTree {
  struct Node {
    int begin = 0, end = 0;
    std::vector<int> children;
    bool is_leaf() const { return children.empty(); }
  };

  std::vector<Node> nodes;
  int root = -1;

  int leaf_count() const { return root < 0 ? 0 : nodes[root].end - nodes[root].begin; }
  /// Internal nodes with exactly two children.
  int binary_splits() const;
  /// Throws TreeError unless leaves read 0..N-1 left to right, spans are
  /// contiguous and every internal node has at least two children.
  void check() const;

  int add_leaf(int position);
  int add_node(std::vector<int> children);
};

/// Structural equality (same shape over the same positions).
bool same_tree(const ParseTree& a, const ParseTree& b);

/// Top-down splitting over a merge ladder (layers ordered bottom to top).
/// Within a segment at layer l, the leftmost minimum breakpoint is split if
/// it lies below threshold and both halves continue at layer l; otherwise
/// the segment descends to layer l-1. Segments that survive layer 0 become
/// flat constituents.
ParseTree extract(const MergeLadder& ladder, double threshold = 0.8);

/// "[[the cat] runs]"; a lone leaf renders as the bare token.
std::string to_bracketed(const ParseTree& tree, const std::vector<std::string>& tokens);
/// Inverse of to_bracketed. Throws TreeError on malformed input.
std::pair<ParseTree, std::vector<std::string>> parse_bracketed(const std::string& text);

/// [begin, end) of every internal node.
std::set<std::pair<int, int>> spans(const ParseTree& tree);

}  // namespace treetf
