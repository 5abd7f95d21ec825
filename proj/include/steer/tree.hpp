#ifndef STEER_TREE_HPP
#define STEER_TREE_HPP

#include "steer/common.hpp"

#include "json.hpp"

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace steer {

enum class MergeMode : std::uint8_t { Join = 0, AbsorbLeft = 1, AbsorbRight = 2, Collapse = 3 };

const char* to_string(MergeMode mode);
MergeMode merge_mode_from_string(std::string_view s);

/// How a clustering node came to be: the greedy step that created it.
struct MergeRecord {
  MergeMode mode = MergeMode::Join;
  Scalar log_likelihood_ratio = 0;
  std::int64_t violations = 0;
  Scalar log_posterior_ratio = 0;
};

struct UncertaintyScore {
  Scalar model = 0;
  Scalar knowledge = 0;
  Scalar structure = 0;
  Scalar overall = 0;
};

struct TreeNode {
  NodeId id = kNoNode;
  std::string label;
  std::optional<std::string> kb_ref;
  std::vector<NodeId> children;
  std::vector<DocIndex> docs;  // leaves only
  NodeId parent = kNoNode;
  bool alive = true;
  bool edited = false;  // touched by a user edit; may be unary
  std::optional<MergeRecord> merge;
  std::optional<UncertaintyScore> uncertainty;

  bool is_leaf() const { return children.empty(); }
};

/// Multi-branch hierarchy stored in an arena. Node ids index the arena and
/// are never reused: removed nodes stay as dead slots.
class RoseTree {
 public:
  RoseTree() = default;

  NodeId add_node(std::string label = {});
  NodeId add_leaf(std::vector<DocIndex> docs, std::string label = {});
  void attach(NodeId parent, NodeId child);
  /// Removes `child` from its parent's child list; the child stays alive.
  void detach(NodeId child);
  /// Marks the subtree rooted at `id` dead.
  void kill_subtree(NodeId id);

  void set_root(NodeId id);
  NodeId root() const { return root_; }

  bool contains(NodeId id) const { return id < nodes_.size() && nodes_[id].alive; }
  const TreeNode& node(NodeId id) const;
  TreeNode& node(NodeId id);
  std::size_t arena_size() const { return nodes_.size(); }

  bool empty() const { return root_ == kNoNode; }
  bool partial() const { return partial_; }
  void set_partial(bool p) { partial_ = p; }

  /// Alive nodes reachable from the root, pre-order.
  std::vector<NodeId> preorder() const;
  std::vector<DocIndex> docs_under(NodeId id) const;
  std::vector<DocIndex> all_docs() const { return empty() ? std::vector<DocIndex>{} : docs_under(root_); }
  std::size_t doc_count(NodeId id) const;
  bool is_ancestor(NodeId ancestor, NodeId id) const;  // strict
  std::size_t depth_of(NodeId id) const;

  /// Replaces every unary internal node by its only child.
  void contract_unary();

  bool operator==(const RoseTree& other) const;

 private:
  std::vector<TreeNode> nodes_;
  NodeId root_ = kNoNode;
  bool partial_ = false;
};

/// Ancestor bookkeeping for repeated LCA queries against one tree snapshot.
class LcaIndex {
 public:
  explicit LcaIndex(const RoseTree& tree);

  bool has_doc(DocIndex d) const { return d < leaf_of_.size() && leaf_of_[d] != kNoNode; }
  NodeId leaf_of(DocIndex d) const;
  NodeId lca(DocIndex x, DocIndex y) const;
  NodeId lca_nodes(NodeId u, NodeId v) const;
  std::size_t depth(NodeId n) const { return depth_[n]; }
  NodeId parent(NodeId n) const { return parent_[n]; }
  /// Ancestor of `n` at `depth`, or `n` itself when it is shallower.
  NodeId ancestor_at_depth(NodeId n, std::size_t depth) const;
  std::size_t max_depth() const { return max_depth_; }
  const std::vector<DocIndex>& docs() const { return docs_; }

 private:
  std::vector<NodeId> leaf_of_;
  std::vector<NodeId> parent_;
  std::vector<std::size_t> depth_;
  std::vector<DocIndex> docs_;
  std::size_t max_depth_ = 0;
};

NodeId lca(const RoseTree& tree, DocIndex x, DocIndex y);

enum class Triplet { AB_C, AC_B, BC_A, Fan };

Triplet classify_triplet(const LcaIndex& index, DocIndex a, DocIndex b, DocIndex c);
Triplet classify_triplet(const RoseTree& tree, DocIndex a, DocIndex b, DocIndex c);

/// A hierarchical constraint over three documents. Triples keep the bonded
/// pair as (a, b) with a < b and the outsider in c; fans keep a < b < c.
struct TripleFan {
  enum class Kind : std::uint8_t { Triple, Fan };
  Kind kind = Kind::Fan;
  DocIndex a = 0;
  DocIndex b = 0;
  DocIndex c = 0;

  static TripleFan from(Triplet t, DocIndex a, DocIndex b, DocIndex c);
  bool is_fan() const { return kind == Kind::Fan; }
  auto operator<=>(const TripleFan&) const = default;
};

struct Decomposition {
  std::vector<TripleFan> items;
  std::uint64_t total_triplets = 0;  // C(n, 3)
  bool sampled = false;
  std::uint64_t seed = 0;
};

inline constexpr std::size_t kDefaultTripletCap = 200000;

std::uint64_t choose3(std::uint64_t n);

/// All C(n,3) classifications when that fits under `cap`, otherwise exactly
/// `cap` distinct triplets drawn uniformly with `seed`.
Decomposition decompose(const RoseTree& tree, std::size_t cap = kDefaultTripletCap, std::uint64_t seed = 0);
Decomposition decompose_docs(const RoseTree& tree, std::span<const DocIndex> docs, std::size_t cap,
                             std::uint64_t seed);

/// Interns external document ids for tree (de)serialization.
class DocIdTable {
 public:
  DocIdTable() = default;
  explicit DocIdTable(std::vector<std::string> ids);

  DocIndex intern(const std::string& id);
  std::optional<DocIndex> find(const std::string& id) const;
  const std::string& id(DocIndex d) const { return ids_.at(d); }
  std::size_t size() const { return ids_.size(); }
  std::span<const std::string> ids() const { return ids_; }

 private:
  std::vector<std::string> ids_;
  std::unordered_map<std::string, DocIndex> index_;
};

nlohmann::json tree_to_json(const RoseTree& tree, const DocIdTable& ids);
std::string serialize_tree(const RoseTree& tree, const DocIdTable& ids);

/// Parses the nested tree document. Unknown doc ids are interned when
/// `allow_new_docs`, otherwise they are a SchemaViolation.
RoseTree tree_from_json(const nlohmann::json& j, DocIdTable& ids, bool allow_new_docs = true);
RoseTree parse_tree(const std::string& text, DocIdTable& ids, bool allow_new_docs = true);

}  // namespace steer

#endif  // STEER_TREE_HPP
