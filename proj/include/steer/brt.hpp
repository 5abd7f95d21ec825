#ifndef STEER_BRT_HPP
#define STEER_BRT_HPP

#include "steer/common.hpp"
#include "steer/corpus.hpp"
#include "steer/dcm.hpp"
#include "steer/tree.hpp"

#include <atomic>
#include <functional>
#include <span>

namespace steer {

/// Agglomeration state: the active sub-trees over a document set plus the
/// bookkeeping needed to tell which triple/fan constraints a merge breaks.
///
/// Sub-tree ids are creation indices: the n input documents are leaves
/// 0..n-1 and every merge appends one id. A merge never mutates its operands.
///
/// Merge modes, with L the left and R the right operand:
///   Join        new node with children {L, R}
///   AbsorbLeft  new node with children(L) + {R}   (L must be internal)
///   AbsorbRight new node with children(R) + {L}   (R must be internal)
///   Collapse    new node with children(L) + children(R) (both internal)
class ForestState {
 public:
  using SubtreeId = std::uint32_t;

  ForestState(std::span<const DocIndex> docs, std::span<const TripleFan> constraints);

  std::size_t subtree_count() const { return subs_.size(); }
  std::size_t active_count() const { return active_count_; }
  std::vector<SubtreeId> active() const;
  bool is_active(SubtreeId s) const { return s < subs_.size() && subs_[s].alive; }
  bool is_leaf(SubtreeId s) const { return subs_.at(s).children.empty(); }
  std::size_t arity(SubtreeId s) const { return subs_.at(s).children.size(); }
  std::span<const SubtreeId> children(SubtreeId s) const { return subs_.at(s).children; }
  std::span<const DocIndex> docs(SubtreeId s) const { return subs_.at(s).docs; }
  SubtreeId root_of(DocIndex d) const;
  std::size_t constraint_count() const { return constraints_.size(); }

  bool mode_allowed(SubtreeId left, SubtreeId right, MergeMode mode) const;

  /// Constraints satisfiable before merging (left, right, mode) and
  /// unsatisfiable after it.
  std::int64_t count_new_violations(SubtreeId left, SubtreeId right, MergeMode mode) const;

  SubtreeId merge(SubtreeId left, SubtreeId right, MergeMode mode);

  /// Structure as a rose tree whose node ids equal sub-tree ids. Remaining
  /// active roots, if more than one, are joined under an extra root.
  RoseTree to_tree() const;

 private:
  struct Sub {
    std::vector<SubtreeId> children;
    std::vector<DocIndex> docs;
    bool alive = true;
    std::int64_t fragile = 0;
  };

  struct Placement {
    SubtreeId tree;
    std::uint32_t top;
  };

  std::uint32_t local(DocIndex d) const { return d < local_.size() ? local_[d] : kAbsent; }
  std::int64_t count_fragile(SubtreeId s) const;

  static constexpr std::uint32_t kAbsent = static_cast<std::uint32_t>(-1);

  std::vector<Sub> subs_;
  std::size_t active_count_ = 0;
  std::vector<std::uint32_t> local_;      // corpus doc -> local index
  std::vector<DocIndex> doc_of_;          // local index -> corpus doc
  std::vector<SubtreeId> root_;           // local index -> active root
  std::vector<std::uint32_t> top_;        // local index -> child of root holding it
  std::vector<TripleFan> constraints_;    // members as local indices
  std::vector<std::vector<std::uint32_t>> by_doc_;
};

std::int64_t count_new_violations(const ForestState& state, ForestState::SubtreeId left,
                                  ForestState::SubtreeId right, MergeMode mode);

/// Cached evidence of one sub-tree: log p(D|T), log f(D), the sum of the
/// children's log evidence, and arity (0 for a leaf).
struct SubtreeEvidence {
  Scalar log_p = 0;
  Scalar log_f = 0;
  Scalar child_sum = 0;
  std::size_t arity = 0;
};

/// log p(D_m|T_m) - log p(D_l|T_l) - log p(D_r|T_r) for the merge in `mode`,
/// given log f of the merged document set.
Scalar likelihood_ratio(const SubtreeEvidence& left, const SubtreeEvidence& right, Scalar log_f_merged,
                        MergeMode mode, Scalar pi0);

/// Evidence of the merged node, in the same terms.
SubtreeEvidence merged_evidence(const SubtreeEvidence& left, const SubtreeEvidence& right, Scalar log_f_merged,
                                MergeMode mode, Scalar pi0);

struct BrtParams {
  DcmParams dcm;
  Scalar pi0 = 0.5;
  Scalar lambda = 1e-6;
  bool approx = false;
  std::size_t approx_threshold = 2000;
  std::size_t approx_neighbors = 50;
  std::size_t approx_refresh = 100;
  unsigned threads = 1;
};

struct ClusterControl {
  std::function<void(double)> progress;           // fraction of merges done
  const std::atomic<bool>* cancel = nullptr;      // polled every 100 merges
};

/// Greedy agglomerative rose-tree clustering of `docs` (indices into
/// `corpus`), penalizing each merge by lambda times the number of
/// constraints it breaks. Internal nodes carry their MergeRecord.
RoseTree cluster(const Corpus& corpus, std::span<const DocIndex> docs, std::span<const TripleFan> constraints,
                 const BrtParams& params, const ClusterControl* control = nullptr);

RoseTree cluster(const Corpus& corpus, std::span<const TripleFan> constraints, const BrtParams& params,
                 const ClusterControl* control = nullptr);

/// Replaces the subtree under `node` by an unconstrained clustering of its
/// documents. The subtree root keeps its id; new internal nodes get fresh ids.
RoseTree rebuild_subtree(const RoseTree& tree, NodeId node, const Corpus& corpus, const BrtParams& params,
                         const ClusterControl* control = nullptr);

/// Recursive log p(D|T) of an explicit tree (leaves use pi = 1).
Scalar log_evidence(const RoseTree& tree, NodeId node, const Corpus& corpus, const BrtParams& params);

/// Top `k` terms of a pooled count vector, most frequent first.
std::string top_terms_label(const SparseCounts& pooled, const Vocabulary& vocab, std::size_t k = 3);

}  // namespace steer

#endif  // STEER_BRT_HPP
