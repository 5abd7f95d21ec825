#ifndef STEER_UNCERTAINTY_HPP
#define STEER_UNCERTAINTY_HPP

#include "steer/common.hpp"
#include "steer/corpus.hpp"
#include "steer/tree.hpp"

#include <Eigen/SparseCore>

#include <span>
#include <vector>

namespace steer {

// Per-node scores are indexed by NodeId (arena slot); dead slots hold 0.

/// -(creation-merge log posterior ratio), min-max normalized over internal
/// nodes. Leaves score 0; a degenerate range maps to 0.5, as do internal
/// nodes without a merge record (user edits, the extra root of a partial run).
std::vector<Scalar> model_uncertainty(const RoseTree& tree);

enum class DispersionCombine { Avg, Max };

/// Normalized entropy of how `node`'s documents spread over `other`'s nodes at
/// the same depth (or their leaf when shallower). 0 when nothing is shared.
Scalar dispersion(const RoseTree& tree, const LcaIndex& tree_index, NodeId node, const LcaIndex& other_index);

struct KnowledgeScores {
  std::vector<Scalar> clustering;
  std::vector<Scalar> constraint;
};

/// Clustering nodes combine their forward dispersion with the mean backward
/// dispersion of the constraint nodes their documents map to.
KnowledgeScores knowledge_uncertainty(const RoseTree& clustering, const RoseTree& constraint,
                                      DispersionCombine combine = DispersionCombine::Avg);

/// sum_d min(mu_c, mu_p) / sum_d mu_c; 1 when the child has no mass.
Scalar subsethood(std::span<const Scalar> mu_child, std::span<const Scalar> mu_parent);

/// Row-per-document unit vectors. Embedding vectors and tf-idf fallbacks live
/// in disjoint column blocks, so mixing the two gives cosine 0.
Eigen::SparseMatrix<Scalar, Eigen::RowMajor> doc_matrix(const Corpus& corpus, const EmbeddingStore* store,
                                                        const TfIdfModel& tfidf);

/// 1 - subsethood of each child in its parent, with memberships
/// mu_v(d) = max(0, cos(d, mean direction of v)) over the parent's documents.
std::vector<Scalar> structure_uncertainty(const RoseTree& tree,
                                          const Eigen::SparseMatrix<Scalar, Eigen::RowMajor>& doc_vectors);

UncertaintyScore aggregate(Scalar model, Scalar knowledge, Scalar structure);

/// Computes all factors and stores them on every live node. Without a
/// constraint tree the knowledge factor is 0.
void annotate_uncertainty(RoseTree& tree, const RoseTree* constraint, const Corpus& corpus,
                          const EmbeddingStore* store, DispersionCombine combine = DispersionCombine::Avg);

}  // namespace steer

#endif  // STEER_UNCERTAINTY_HPP
