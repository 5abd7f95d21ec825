#include "steer/edit.hpp"

#include <algorithm>
#include <map>
#include <unordered_map>

namespace steer {

EditMode edit_mode_from_string(std::string_view s) {
  if (s == "absorb") return EditMode::Absorb;
  if (s == "join") return EditMode::Join;
  if (s == "collapse") return EditMode::Collapse;
  throw Error(ErrorCode::InvalidArgument, "unknown merge mode '" + std::string(s) + "'", "/mode");
}

const char* to_string(EditMode mode) {
  switch (mode) {
    case EditMode::Absorb: return "absorb";
    case EditMode::Join: return "join";
    case EditMode::Collapse: return "collapse";
  }
  return "?";
}

namespace {

void require(const RoseTree& t, NodeId id) {
  if (!t.contains(id) || (t.node(id).parent == kNoNode && id != t.root())) {
    throw Error(ErrorCode::NodeNotFound, "node " + std::to_string(id) + " not found");
  }
}

// Walks up from `n` dropping nodes left without documents; flags unary ones.
void tidy(RoseTree& t, NodeId n) {
  while (n != kNoNode && t.contains(n)) {
    TreeNode& node = t.node(n);
    const NodeId parent = node.parent;
    if (node.children.empty() && node.docs.empty()) {
      t.detach(n);
      t.kill_subtree(n);
      n = parent;
      continue;
    }
    if (node.children.size() == 1) node.edited = true;
    return;
  }
}

// Moves a leaf's documents into a fresh child so the node can take children.
void open_leaf(RoseTree& t, NodeId n) {
  TreeNode& node = t.node(n);
  if (!node.is_leaf() || node.docs.empty()) return;
  auto docs = std::move(node.docs);
  node.docs.clear();
  const NodeId leaf = t.add_leaf(std::move(docs));
  t.attach(n, leaf);
}

std::unordered_map<DocIndex, NodeId> leaf_map(const RoseTree& t) {
  std::unordered_map<DocIndex, NodeId> out;
  if (t.empty()) return out;
  for (NodeId id : t.preorder())
    for (DocIndex d : t.node(id).docs) out[d] = id;
  return out;
}

void place(RoseTree& t, std::vector<DocIndex> docs, NodeId to) {
  if (docs.empty()) return;
  TreeNode& target = t.node(to);
  target.edited = true;
  if (target.is_leaf()) {
    target.docs.insert(target.docs.end(), docs.begin(), docs.end());
    return;
  }
  const NodeId leaf = t.add_leaf(std::move(docs));
  t.node(leaf).edited = true;
  t.attach(to, leaf);
}

}  // namespace

RoseTree merge_nodes(const RoseTree& tree, NodeId src, NodeId dst, EditMode mode) {
  require(tree, src);
  require(tree, dst);
  if (src == dst) throw Error(ErrorCode::IllegalMerge, "cannot merge a node with itself");
  if (src == tree.root()) throw Error(ErrorCode::IllegalMerge, "the root cannot be merged into another node");
  if (tree.is_ancestor(src, dst)) {
    throw Error(ErrorCode::IllegalMerge, "node " + std::to_string(dst) + " lies under node " + std::to_string(src));
  }
  RoseTree out = tree;
  const NodeId old_parent = out.node(src).parent;
  switch (mode) {
    case EditMode::Absorb: {
      if (old_parent == dst) {
        throw Error(ErrorCode::IllegalMerge, "node " + std::to_string(src) + " is already a child of " + std::to_string(dst));
      }
      out.detach(src);
      open_leaf(out, dst);
      out.attach(dst, src);
      out.node(dst).edited = true;
      break;
    }
    case EditMode::Join: {
      if (tree.is_ancestor(dst, src)) {
        throw Error(ErrorCode::IllegalMerge, "join needs unrelated nodes; " + std::to_string(src) + " lies under " +
                                                 std::to_string(dst));
      }
      out.detach(src);
      const NodeId p = out.node(dst).parent;
      const NodeId j = out.add_node();
      auto& siblings = out.node(p).children;
      std::replace(siblings.begin(), siblings.end(), dst, j);
      out.node(j).parent = p;
      out.node(j).edited = true;
      out.node(dst).parent = kNoNode;
      out.attach(j, dst);
      out.attach(j, src);
      break;
    }
    case EditMode::Collapse: {
      if (tree.is_ancestor(dst, src)) {
        throw Error(ErrorCode::IllegalMerge, "collapse needs unrelated nodes; " + std::to_string(src) +
                                                 " lies under " + std::to_string(dst));
      }
      if (tree.node(src).is_leaf() || tree.node(dst).is_leaf()) {
        throw Error(ErrorCode::IllegalMerge, "collapse needs two internal nodes");
      }
      for (NodeId c : std::vector<NodeId>(out.node(src).children)) out.attach(dst, c);
      out.detach(src);
      out.kill_subtree(src);
      out.node(dst).edited = true;
      break;
    }
  }
  tidy(out, old_parent);
  return out;
}

RoseTree remove_node(const RoseTree& tree, NodeId node, std::vector<DocIndex>& released) {
  require(tree, node);
  if (node == tree.root()) throw Error(ErrorCode::IllegalMove, "the root cannot be removed");
  RoseTree out = tree;
  const auto docs = out.docs_under(node);
  const NodeId parent = out.node(node).parent;
  out.detach(node);
  out.kill_subtree(node);
  tidy(out, parent);
  released.insert(released.end(), docs.begin(), docs.end());
  return out;
}

RoseTree move_documents(const RoseTree& tree, std::span<const DocIndex> docs, NodeId to) {
  require(tree, to);
  const auto where = leaf_map(tree);
  std::vector<DocIndex> moving;
  std::vector<NodeId> sources;
  for (DocIndex d : docs) {
    auto it = where.find(d);
    if (it == where.end()) throw Error(ErrorCode::DocNotInTree, "document " + std::to_string(d) + " is not in the tree");
    if (it->second == to) continue;
    if (tree.is_ancestor(to, it->second)) {
      throw Error(ErrorCode::IllegalMove,
                  "node " + std::to_string(to) + " already holds document " + std::to_string(d) + " in a descendant");
    }
    if (std::find(moving.begin(), moving.end(), d) != moving.end()) continue;
    moving.push_back(d);
    sources.push_back(it->second);
  }
  RoseTree out = tree;
  place(out, moving, to);
  for (std::size_t i = 0; i < moving.size(); ++i) {
    auto& ds = out.node(sources[i]).docs;
    ds.erase(std::remove(ds.begin(), ds.end(), moving[i]), ds.end());
  }
  std::sort(sources.begin(), sources.end());
  sources.erase(std::unique(sources.begin(), sources.end()), sources.end());
  for (NodeId s : sources) tidy(out, s);
  return out;
}

RoseTree insert_documents(const RoseTree& tree, std::span<const DocIndex> docs, NodeId to) {
  const auto where = leaf_map(tree);
  std::vector<DocIndex> fresh;
  for (DocIndex d : docs) {
    if (where.count(d)) {
      throw Error(ErrorCode::IllegalMove, "document " + std::to_string(d) + " is already in the tree");
    }
    if (std::find(fresh.begin(), fresh.end(), d) == fresh.end()) fresh.push_back(d);
  }
  RoseTree out = tree;
  if (fresh.empty()) return out;
  if (out.empty()) {
    out.set_root(out.add_leaf(std::move(fresh)));
    return out;
  }
  require(tree, to);
  place(out, std::move(fresh), to);
  return out;
}

RoseTree remove_documents(const RoseTree& tree, std::span<const DocIndex> docs) {
  const auto where = leaf_map(tree);
  RoseTree out = tree;
  std::vector<NodeId> sources;
  for (DocIndex d : docs) {
    auto it = where.find(d);
    if (it == where.end()) continue;
    auto& ds = out.node(it->second).docs;
    ds.erase(std::remove(ds.begin(), ds.end(), d), ds.end());
    sources.push_back(it->second);
  }
  std::sort(sources.begin(), sources.end());
  sources.erase(std::unique(sources.begin(), sources.end()), sources.end());
  for (NodeId s : sources) tidy(out, s);
  return out;
}

RoseTree rename_node(const RoseTree& tree, NodeId node, std::string label) {
  require(tree, node);
  RoseTree out = tree;
  out.node(node).label = std::move(label);
  return out;
}

namespace {

void pool_counts(const RoseTree& t, NodeId n, const Corpus& corpus, std::unordered_map<NodeId, SparseCounts>& out) {
  const TreeNode& node = t.node(n);
  SparseCounts acc;
  for (DocIndex d : node.docs) acc = add_counts(acc, corpus.docs.at(d).counts);
  for (NodeId c : node.children) {
    pool_counts(t, c, corpus, out);
    acc = add_counts(acc, out[c]);
  }
  out[n] = std::move(acc);
}

}  // namespace

NodeId best_attachment(const RoseTree& tree, const Corpus& corpus, const Document& doc, const DcmParams& dcm) {
  if (tree.empty()) throw Error(ErrorCode::NodeNotFound, "tree is empty");
  std::unordered_map<NodeId, SparseCounts> pooled;
  pool_counts(tree, tree.root(), corpus, pooled);
  // Every internal node competes; a greedy descent goes astray where a broad
  // mixture sits next to a pure sibling topic. Ties go to the deeper node.
  NodeId best = tree.root();
  Scalar best_score = -INFINITY;
  for (NodeId v : tree.preorder()) {
    if (tree.node(v).is_leaf()) continue;
    const Scalar s = log_dcm_counts(doc.counts, pooled[v], dcm);
    if (s >= best_score) {
      best_score = s;
      best = v;
    }
  }
  return best;
}

std::vector<std::pair<std::string, std::int64_t>> top_terms(const RoseTree& tree, NodeId node, const Corpus& corpus,
                                                            std::size_t k) {
  require(tree, node);
  std::map<TermId, std::int64_t> acc;
  for (DocIndex d : tree.docs_under(node))
    for (const auto& [t, c] : corpus.docs.at(d).counts) acc[t] += c;
  std::vector<std::pair<std::string, std::int64_t>> out;
  out.reserve(acc.size());
  for (const auto& [t, c] : acc) out.emplace_back(corpus.vocab.term(t), c);
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  if (out.size() > k) out.resize(k);
  return out;
}

}  // namespace steer
