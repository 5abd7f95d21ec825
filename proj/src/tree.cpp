#include "steer/tree.hpp"

#include <algorithm>
#include <array>
#include <random>
#include <unordered_set>

namespace steer {

const char* to_string(MergeMode mode) {
  switch (mode) {
    case MergeMode::Join: return "join";
    case MergeMode::AbsorbLeft: return "absorb-left";
    case MergeMode::AbsorbRight: return "absorb-right";
    case MergeMode::Collapse: return "collapse";
  }
  return "join";
}

MergeMode merge_mode_from_string(std::string_view s) {
  if (s == "join") return MergeMode::Join;
  if (s == "absorb-left") return MergeMode::AbsorbLeft;
  if (s == "absorb-right") return MergeMode::AbsorbRight;
  if (s == "collapse") return MergeMode::Collapse;
  throw Error(ErrorCode::SchemaViolation, "unknown merge mode '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// RoseTree

NodeId RoseTree::add_node(std::string label) {
  TreeNode n;
  n.id = static_cast<NodeId>(nodes_.size());
  n.label = std::move(label);
  nodes_.push_back(std::move(n));
  return nodes_.back().id;
}

NodeId RoseTree::add_leaf(std::vector<DocIndex> docs, std::string label) {
  const NodeId id = add_node(std::move(label));
  nodes_[id].docs = std::move(docs);
  return id;
}

void RoseTree::attach(NodeId parent, NodeId child) {
  TreeNode& p = node(parent);
  TreeNode& c = node(child);
  if (c.parent != kNoNode) detach(child);
  p.children.push_back(child);
  c.parent = parent;
}

void RoseTree::detach(NodeId child) {
  TreeNode& c = node(child);
  if (c.parent == kNoNode) return;
  auto& siblings = node(c.parent).children;
  siblings.erase(std::remove(siblings.begin(), siblings.end(), child), siblings.end());
  c.parent = kNoNode;
}

void RoseTree::kill_subtree(NodeId id) {
  std::vector<NodeId> stack{id};
  while (!stack.empty()) {
    const NodeId n = stack.back();
    stack.pop_back();
    TreeNode& t = node(n);
    t.alive = false;
    for (NodeId c : t.children) stack.push_back(c);
  }
  if (id == root_) root_ = kNoNode;
}

void RoseTree::set_root(NodeId id) {
  root_ = id;
  if (id != kNoNode) node(id).parent = kNoNode;
}

const TreeNode& RoseTree::node(NodeId id) const {
  if (!contains(id)) throw Error(ErrorCode::NodeNotFound, "node " + std::to_string(id) + " not found");
  return nodes_[id];
}

TreeNode& RoseTree::node(NodeId id) {
  if (!contains(id)) throw Error(ErrorCode::NodeNotFound, "node " + std::to_string(id) + " not found");
  return nodes_[id];
}

std::vector<NodeId> RoseTree::preorder() const {
  std::vector<NodeId> out;
  if (empty()) return out;
  std::vector<NodeId> stack{root_};
  while (!stack.empty()) {
    const NodeId n = stack.back();
    stack.pop_back();
    out.push_back(n);
    const auto& ch = nodes_[n].children;
    for (auto it = ch.rbegin(); it != ch.rend(); ++it) stack.push_back(*it);
  }
  return out;
}

std::vector<DocIndex> RoseTree::docs_under(NodeId id) const {
  std::vector<DocIndex> out;
  std::vector<NodeId> stack{id};
  node(id);
  while (!stack.empty()) {
    const NodeId n = stack.back();
    stack.pop_back();
    const auto& t = nodes_[n];
    out.insert(out.end(), t.docs.begin(), t.docs.end());
    for (auto it = t.children.rbegin(); it != t.children.rend(); ++it) stack.push_back(*it);
  }
  return out;
}

std::size_t RoseTree::doc_count(NodeId id) const { return docs_under(id).size(); }

bool RoseTree::is_ancestor(NodeId ancestor, NodeId id) const {
  NodeId cur = node(id).parent;
  while (cur != kNoNode) {
    if (cur == ancestor) return true;
    cur = nodes_[cur].parent;
  }
  return false;
}

std::size_t RoseTree::depth_of(NodeId id) const {
  std::size_t d = 0;
  for (NodeId cur = node(id).parent; cur != kNoNode; cur = nodes_[cur].parent) ++d;
  return d;
}

void RoseTree::contract_unary() {
  for (NodeId n : preorder()) {
    if (!contains(n)) continue;
    NodeId cur = n;
    while (nodes_[cur].children.size() == 1) {
      const NodeId only = nodes_[cur].children.front();
      const NodeId parent = nodes_[cur].parent;
      detach(only);
      if (parent == kNoNode) {
        nodes_[cur].alive = false;
        set_root(only);
      } else {
        auto& siblings = nodes_[parent].children;
        std::replace(siblings.begin(), siblings.end(), cur, only);
        nodes_[only].parent = parent;
        nodes_[cur].parent = kNoNode;
        nodes_[cur].alive = false;
      }
      cur = only;
    }
  }
}

namespace {

bool node_equal(const TreeNode& a, const TreeNode& b) {
  auto unc_eq = [](const std::optional<UncertaintyScore>& x, const std::optional<UncertaintyScore>& y) {
    if (x.has_value() != y.has_value()) return false;
    if (!x) return true;
    return x->model == y->model && x->knowledge == y->knowledge && x->structure == y->structure &&
           x->overall == y->overall;
  };
  return a.id == b.id && a.label == b.label && a.kb_ref == b.kb_ref && a.children == b.children &&
         a.docs == b.docs && a.edited == b.edited && unc_eq(a.uncertainty, b.uncertainty);
}

}  // namespace

bool RoseTree::operator==(const RoseTree& other) const {
  if (root_ != other.root_ || partial_ != other.partial_) return false;
  const auto mine = preorder();
  if (mine != other.preorder()) return false;
  for (NodeId n : mine) {
    if (!node_equal(nodes_[n], other.nodes_[n])) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// LCA

LcaIndex::LcaIndex(const RoseTree& tree) {
  parent_.assign(tree.arena_size(), kNoNode);
  depth_.assign(tree.arena_size(), 0);
  if (tree.empty()) return;
  std::vector<NodeId> stack{tree.root()};
  while (!stack.empty()) {
    const NodeId n = stack.back();
    stack.pop_back();
    const auto& t = tree.node(n);
    max_depth_ = std::max(max_depth_, depth_[n]);
    for (DocIndex d : t.docs) {
      if (d >= leaf_of_.size()) leaf_of_.resize(d + 1, kNoNode);
      leaf_of_[d] = n;
      docs_.push_back(d);
    }
    for (NodeId c : t.children) {
      parent_[c] = n;
      depth_[c] = depth_[n] + 1;
      stack.push_back(c);
    }
  }
  std::sort(docs_.begin(), docs_.end());
}

NodeId LcaIndex::leaf_of(DocIndex d) const {
  if (!has_doc(d)) throw Error(ErrorCode::DocNotInTree, "document " + std::to_string(d) + " is not in the tree");
  return leaf_of_[d];
}

NodeId LcaIndex::lca_nodes(NodeId u, NodeId v) const {
  while (depth_[u] > depth_[v]) u = parent_[u];
  while (depth_[v] > depth_[u]) v = parent_[v];
  while (u != v) {
    u = parent_[u];
    v = parent_[v];
  }
  return u;
}

NodeId LcaIndex::lca(DocIndex x, DocIndex y) const { return lca_nodes(leaf_of(x), leaf_of(y)); }

NodeId LcaIndex::ancestor_at_depth(NodeId n, std::size_t depth) const {
  while (depth_[n] > depth) n = parent_[n];
  return n;
}

NodeId lca(const RoseTree& tree, DocIndex x, DocIndex y) { return LcaIndex(tree).lca(x, y); }

Triplet classify_triplet(const LcaIndex& index, DocIndex a, DocIndex b, DocIndex c) {
  const NodeId ab = index.lca(a, b);
  const NodeId ac = index.lca(a, c);
  const NodeId bc = index.lca(b, c);
  if (ab == ac && ac == bc) return Triplet::Fan;
  // Two of the three pairwise LCAs coincide; the odd one out is strictly deeper.
  if (ac == bc) return Triplet::AB_C;
  if (ab == bc) return Triplet::AC_B;
  return Triplet::BC_A;
}

Triplet classify_triplet(const RoseTree& tree, DocIndex a, DocIndex b, DocIndex c) {
  return classify_triplet(LcaIndex(tree), a, b, c);
}

TripleFan TripleFan::from(Triplet t, DocIndex a, DocIndex b, DocIndex c) {
  TripleFan tf;
  auto pair = [&](DocIndex x, DocIndex y, DocIndex out) {
    tf.kind = Kind::Triple;
    tf.a = std::min(x, y);
    tf.b = std::max(x, y);
    tf.c = out;
  };
  switch (t) {
    case Triplet::AB_C: pair(a, b, c); break;
    case Triplet::AC_B: pair(a, c, b); break;
    case Triplet::BC_A: pair(b, c, a); break;
    case Triplet::Fan: {
      std::array<DocIndex, 3> s{a, b, c};
      std::sort(s.begin(), s.end());
      tf.kind = Kind::Fan;
      tf.a = s[0];
      tf.b = s[1];
      tf.c = s[2];
      break;
    }
  }
  return tf;
}

std::uint64_t choose3(std::uint64_t n) {
  if (n < 3) return 0;
  return n * (n - 1) / 2 * (n - 2) / 3;
}

Decomposition decompose_docs(const RoseTree& tree, std::span<const DocIndex> docs_in, std::size_t cap,
                             std::uint64_t seed) {
  const LcaIndex index(tree);
  std::vector<DocIndex> docs(docs_in.begin(), docs_in.end());
  std::sort(docs.begin(), docs.end());
  docs.erase(std::unique(docs.begin(), docs.end()), docs.end());
  for (DocIndex d : docs) index.leaf_of(d);

  Decomposition out;
  out.seed = seed;
  const std::uint64_t n = docs.size();
  out.total_triplets = choose3(n);
  if (out.total_triplets <= cap) {
    out.items.reserve(out.total_triplets);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        for (std::size_t k = j + 1; k < n; ++k)
          out.items.push_back(TripleFan::from(classify_triplet(index, docs[i], docs[j], docs[k]), docs[i],
                                              docs[j], docs[k]));
    return out;
  }
  out.sampled = true;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::uint64_t> pick(0, n - 1);
  std::unordered_set<std::uint64_t> seen;
  seen.reserve(cap * 2);
  out.items.reserve(cap);
  while (out.items.size() < cap) {
    std::array<std::uint64_t, 3> t{pick(rng), pick(rng), pick(rng)};
    if (t[0] == t[1] || t[0] == t[2] || t[1] == t[2]) continue;
    std::sort(t.begin(), t.end());
    const std::uint64_t key = (t[0] * n + t[1]) * n + t[2];
    if (!seen.insert(key).second) continue;
    const DocIndex a = docs[t[0]], b = docs[t[1]], c = docs[t[2]];
    out.items.push_back(TripleFan::from(classify_triplet(index, a, b, c), a, b, c));
  }
  return out;
}

Decomposition decompose(const RoseTree& tree, std::size_t cap, std::uint64_t seed) {
  const auto docs = tree.all_docs();
  return decompose_docs(tree, docs, cap, seed);
}

// ---------------------------------------------------------------------------
// Serialization

DocIdTable::DocIdTable(std::vector<std::string> ids) {
  for (auto& id : ids) intern(id);
}

DocIndex DocIdTable::intern(const std::string& id) {
  auto [it, inserted] = index_.try_emplace(id, static_cast<DocIndex>(ids_.size()));
  if (inserted) ids_.push_back(id);
  return it->second;
}

std::optional<DocIndex> DocIdTable::find(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

namespace {

nlohmann::json node_to_json(const RoseTree& tree, NodeId id, const DocIdTable& ids) {
  const TreeNode& n = tree.node(id);
  nlohmann::json j = nlohmann::json::object();
  j["id"] = n.id;
  j["label"] = n.label;
  if (n.kb_ref) j["kb_ref"] = *n.kb_ref;
  if (n.edited) j["edited"] = true;
  if (n.merge) {
    j["merge"] = {{"mode", to_string(n.merge->mode)}, {"log_posterior_ratio", n.merge->log_posterior_ratio}};
  }
  if (n.uncertainty) {
    j["uncertainty"] = {{"model", n.uncertainty->model},
                        {"knowledge", n.uncertainty->knowledge},
                        {"structure", n.uncertainty->structure},
                        {"overall", n.uncertainty->overall}};
  }
  if (!n.docs.empty()) {
    nlohmann::json docs = nlohmann::json::array();
    for (DocIndex d : n.docs) docs.push_back(ids.id(d));
    j["docs"] = std::move(docs);
  }
  nlohmann::json children = nlohmann::json::array();
  for (NodeId c : n.children) children.push_back(node_to_json(tree, c, ids));
  j["children"] = std::move(children);
  return j;
}

[[noreturn]] void schema_error(const std::string& message, const std::string& path) {
  throw Error(ErrorCode::SchemaViolation, message, path);
}

}  // namespace

nlohmann::json tree_to_json(const RoseTree& tree, const DocIdTable& ids) {
  if (tree.empty()) return nlohmann::json::object();
  nlohmann::json j = node_to_json(tree, tree.root(), ids);
  if (tree.partial()) j["partial"] = true;
  return j;
}

std::string serialize_tree(const RoseTree& tree, const DocIdTable& ids) { return tree_to_json(tree, ids).dump(); }

namespace {

class TreeBuilder {
 public:
  TreeBuilder(DocIdTable& ids, bool allow_new_docs) : ids_(ids), allow_new_docs_(allow_new_docs) {}

  RoseTree build(const nlohmann::json& j) {
    if (!j.is_object()) schema_error("tree root must be an object", "");
    if (j.empty()) return {};
    collect(j, "", kNoNode);
    RoseTree tree;
    NodeId max_id = 0;
    for (const auto& r : records_) max_id = std::max(max_id, r.id);
    for (NodeId i = 0; i <= max_id; ++i) tree.add_node();
    std::vector<bool> used(max_id + 1, false);
    for (const auto& r : records_) used[r.id] = true;
    for (NodeId i = 0; i <= max_id; ++i) {
      if (!used[i]) tree.node(i).alive = false;
    }
    for (auto& r : records_) {
      TreeNode& n = tree.node(r.id);
      n.label = std::move(r.label);
      n.kb_ref = std::move(r.kb_ref);
      n.docs = std::move(r.docs);
      n.edited = r.edited;
      n.merge = r.merge;
      n.uncertainty = r.uncertainty;
      n.parent = r.parent;
      n.children = std::move(r.children);
    }
    tree.set_root(records_.front().id);
    if (j.contains("partial")) {
      if (!j["partial"].is_boolean()) schema_error("'partial' must be a boolean", "/partial");
      tree.set_partial(j["partial"].get<bool>());
    }
    return tree;
  }

 private:
  struct Record {
    NodeId id = kNoNode;
    NodeId parent = kNoNode;
    std::string label;
    std::optional<std::string> kb_ref;
    std::vector<DocIndex> docs;
    std::vector<NodeId> children;
    bool edited = false;
    std::optional<MergeRecord> merge;
    std::optional<UncertaintyScore> uncertainty;
  };

  NodeId collect(const nlohmann::json& j, const std::string& path, NodeId parent) {
    if (!j.is_object()) {
      schema_error("node " + std::to_string(parent) + " has a child reference that is not a node object", path);
    }
    if (!j.contains("id") || !j["id"].is_number_unsigned()) {
      schema_error(parent == kNoNode ? "root node is missing a non-negative integer 'id'"
                                     : "child of node " + std::to_string(parent) +
                                           " is missing a non-negative integer 'id'",
                   path + "/id");
    }
    const auto raw = j["id"].get<std::uint64_t>();
    if (raw >= kNoNode) schema_error("node id " + std::to_string(raw) + " out of range", path + "/id");
    const auto id = static_cast<NodeId>(raw);
    if (!seen_ids_.insert(id).second) {
      schema_error("node " + std::to_string(id) + " appears more than once (child of node " +
                       std::to_string(parent) + ")",
                   path + "/id");
    }
    const std::size_t slot = records_.size();
    records_.emplace_back();
    Record r;
    r.id = id;
    r.parent = parent;
    if (j.contains("label")) {
      if (!j["label"].is_string()) schema_error("node " + std::to_string(id) + ": 'label' must be a string", path + "/label");
      r.label = j["label"].get<std::string>();
    }
    if (j.contains("kb_ref")) {
      if (!j["kb_ref"].is_string()) schema_error("node " + std::to_string(id) + ": 'kb_ref' must be a string", path + "/kb_ref");
      r.kb_ref = j["kb_ref"].get<std::string>();
    }
    if (j.contains("edited")) {
      if (!j["edited"].is_boolean()) schema_error("node " + std::to_string(id) + ": 'edited' must be a boolean", path + "/edited");
      r.edited = j["edited"].get<bool>();
    }
    if (j.contains("merge")) {
      const auto& m = j["merge"];
      if (!m.is_object() || !m.contains("mode") || !m["mode"].is_string() || !m.contains("log_posterior_ratio") ||
          !m["log_posterior_ratio"].is_number()) {
        schema_error("node " + std::to_string(id) + ": malformed 'merge' record", path + "/merge");
      }
      MergeRecord rec;
      rec.mode = merge_mode_from_string(m["mode"].get<std::string>());
      rec.log_posterior_ratio = m["log_posterior_ratio"].get<Scalar>();
      rec.log_likelihood_ratio = rec.log_posterior_ratio;
      r.merge = rec;
    }
    if (j.contains("uncertainty")) {
      const auto& u = j["uncertainty"];
      UncertaintyScore s;
      for (const char* key : {"model", "knowledge", "structure", "overall"}) {
        if (!u.is_object() || !u.contains(key) || !u[key].is_number()) {
          schema_error("node " + std::to_string(id) + ": 'uncertainty' needs numeric '" + key + "'",
                       path + "/uncertainty/" + key);
        }
      }
      s.model = u["model"].get<Scalar>();
      s.knowledge = u["knowledge"].get<Scalar>();
      s.structure = u["structure"].get<Scalar>();
      s.overall = u["overall"].get<Scalar>();
      r.uncertainty = s;
    }
    if (j.contains("docs")) {
      const auto& docs = j["docs"];
      if (!docs.is_array()) schema_error("node " + std::to_string(id) + ": 'docs' must be an array", path + "/docs");
      for (std::size_t i = 0; i < docs.size(); ++i) {
        const std::string dpath = path + "/docs/" + std::to_string(i);
        if (!docs[i].is_string()) schema_error("node " + std::to_string(id) + ": document ids must be strings", dpath);
        const auto name = docs[i].get<std::string>();
        std::optional<DocIndex> d = ids_.find(name);
        if (!d) {
          if (!allow_new_docs_) schema_error("node " + std::to_string(id) + ": unknown document '" + name + "'", dpath);
          d = ids_.intern(name);
        }
        if (!seen_docs_.insert(*d).second) {
          schema_error("document '" + name + "' appears in more than one leaf (again at node " + std::to_string(id) + ")",
                       dpath);
        }
        r.docs.push_back(*d);
      }
    }
    if (!j.contains("children") || !j["children"].is_array()) {
      schema_error("node " + std::to_string(id) + ": 'children' must be an array", path + "/children");
    }
    const auto& children = j["children"];
    if (!children.empty() && !r.docs.empty()) {
      schema_error("node " + std::to_string(id) + ": only leaves may carry documents", path + "/docs");
    }
    records_[slot] = std::move(r);
    for (std::size_t i = 0; i < children.size(); ++i) {
      const NodeId child = collect(children[i], path + "/children/" + std::to_string(i), id);
      records_[slot].children.push_back(child);
    }
    return id;
  }

  DocIdTable& ids_;
  bool allow_new_docs_;
  std::vector<Record> records_;
  std::unordered_set<NodeId> seen_ids_;
  std::unordered_set<DocIndex> seen_docs_;
};

}  // namespace

RoseTree tree_from_json(const nlohmann::json& j, DocIdTable& ids, bool allow_new_docs) {
  return TreeBuilder(ids, allow_new_docs).build(j);
}

RoseTree parse_tree(const std::string& text, DocIdTable& ids, bool allow_new_docs) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::SchemaViolation, std::string("tree is not valid JSON: ") + e.what(), "");
  }
  return tree_from_json(j, ids, allow_new_docs);
}

}  // namespace steer
