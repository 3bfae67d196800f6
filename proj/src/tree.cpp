#include "treetf/tree.hpp"

#include <functional>

namespace treetf {

int ParseTree::add_leaf(int position) {
  nodes.push_back({position, position + 1, {}});
  return static_cast<int>(nodes.size()) - 1;
}

int ParseTree::add_node(std::vector<int> children) {
  if (children.empty()) throw TreeError("internal node without children");
  Node n;
  n.begin = nodes.at(children.front()).begin;
  n.end = nodes.at(children.back()).end;
  n.children = std::move(children);
  nodes.push_back(std::move(n));
  return static_cast<int>(nodes.size()) - 1;
}

int ParseTree::binary_splits() const {
  int n = 0;
  for (const auto& node : nodes) n += node.children.size() == 2;
  return n;
}

void ParseTree::check() const {
  if (root < 0 || root >= static_cast<int>(nodes.size())) throw TreeError("tree has no root");
  if (nodes[root].begin != 0) throw TreeError("root span does not start at 0");
  int next_leaf = 0;
  std::vector<char> visited(nodes.size(), 0);
  std::function<void(int)> walk = [&](int i) {
    if (i < 0 || i >= static_cast<int>(nodes.size()) || visited[i]) throw TreeError("malformed node reference");
    visited[i] = 1;
    const Node& n = nodes[i];
    if (n.is_leaf()) {
      if (n.begin != next_leaf || n.end != n.begin + 1) throw TreeError("leaves out of order");
      ++next_leaf;
      return;
    }
    if (n.children.size() < 2) throw TreeError("internal node with a single child");
    int cursor = n.begin;
    for (int c : n.children) {
      walk(c);
      if (nodes[c].begin != cursor) throw TreeError("non-contiguous span");
      cursor = nodes[c].end;
    }
    if (cursor != n.end) throw TreeError("span does not match children");
  };
  walk(root);
  if (next_leaf != nodes[root].end) throw TreeError("leaf count mismatch");
}

bool same_tree(const ParseTree& a, const ParseTree& b) {
  std::function<bool(int, int)> eq = [&](int x, int y) {
    const auto& p = a.nodes[x];
    const auto& q = b.nodes[y];
    if (p.begin != q.begin || p.end != q.end || p.children.size() != q.children.size()) return false;
    for (std::size_t i = 0; i < p.children.size(); ++i) {
      if (!eq(p.children[i], q.children[i])) return false;
    }
    return true;
  };
  if (a.root < 0 || b.root < 0) return a.root == b.root;
  return eq(a.root, b.root);
}

ParseTree extract(const MergeLadder& ladder, double threshold) {
  if (ladder.layers.empty()) throw TreeError("empty merge ladder");
  if (!(threshold > 0.0 && threshold < 1.0)) throw std::invalid_argument("threshold must lie in (0, 1)");
  const int n = static_cast<int>(ladder.tokens);
  if (n < 1) throw TreeError("ladder has no tokens");
  for (const auto& row : ladder.layers) {
    if (static_cast<int>(row.size()) != n - 1) throw TreeError("ladder row length does not match token count");
  }
  ParseTree t;
  std::function<int(int, int, int)> split = [&](int b, int e, int layer) -> int {
    if (e - b == 1) return t.add_leaf(b);
    for (int l = layer; l >= 0; --l) {
      const auto& a = ladder.layers[static_cast<std::size_t>(l)];
      int best = -1;
      for (int k = b; k + 1 < e; ++k) {
        if (best < 0 || a[k] < a[best]) best = k;
      }
      if (a[best] < threshold) {
        const int left = split(b, best + 1, l);
        const int right = split(best + 1, e, l);
        return t.add_node({left, right});
      }
    }
    std::vector<int> leaves;
    for (int i = b; i < e; ++i) leaves.push_back(t.add_leaf(i));
    return t.add_node(std::move(leaves));
  };
  t.root = split(0, n, static_cast<int>(ladder.layers.size()) - 1);
  return t;
}

std::string to_bracketed(const ParseTree& tree, const std::vector<std::string>& tokens) {
  if (tree.root < 0) throw TreeError("empty tree");
  if (static_cast<int>(tokens.size()) != tree.leaf_count()) {
    throw TreeError("tree has " + std::to_string(tree.leaf_count()) + " leaves but " + std::to_string(tokens.size()) +
                    " tokens were given");
  }
  for (const auto& tok : tokens) {
    if (tok.empty() || tok.find_first_of("[] \t\n") != std::string::npos) {
      throw TreeError("token '" + tok + "' cannot be bracketed");
    }
  }
  std::string out;
  std::function<void(int)> emit = [&](int i) {
    const auto& n = tree.nodes[i];
    if (n.is_leaf()) {
      out += tokens[n.begin];
      return;
    }
    out += '[';
    for (std::size_t c = 0; c < n.children.size(); ++c) {
      if (c) out += ' ';
      emit(n.children[c]);
    }
    out += ']';
  };
  emit(tree.root);
  return out;
}

std::pair<ParseTree, std::vector<std::string>> parse_bracketed(const std::string& text) {
  ParseTree t;
  std::vector<std::string> tokens;
  std::size_t i = 0;
  auto skip = [&]() {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
  };
  std::function<int()> node = [&]() -> int {
    skip();
    if (i >= text.size()) throw TreeError("unexpected end of bracketed string");
    if (text[i] == ']') throw TreeError("unexpected ']' at offset " + std::to_string(i));
    if (text[i] != '[') {
      const auto start = i;
      while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i])) && text[i] != '[' &&
             text[i] != ']') {
        ++i;
      }
      tokens.push_back(text.substr(start, i - start));
      return t.add_leaf(static_cast<int>(tokens.size()) - 1);
    }
    ++i;
    std::vector<int> kids;
    for (;;) {
      skip();
      if (i >= text.size()) throw TreeError("unbalanced '['");
      if (text[i] == ']') {
        ++i;
        break;
      }
      kids.push_back(node());
    }
    if (kids.size() < 2) throw TreeError("constituent with fewer than two children");
    return t.add_node(std::move(kids));
  };
  t.root = node();
  skip();
  if (i != text.size()) throw TreeError("trailing characters after tree");
  t.check();
  return {std::move(t), std::move(tokens)};
}

std::set<std::pair<int, int>> spans(const ParseTree& tree) {
  std::set<std::pair<int, int>> out;
  for (const auto& n : tree.nodes) {
    if (!n.is_leaf()) out.emplace(n.begin, n.end);
  }
  return out;
}

}  // namespace treetf
