#ifndef STEER_DCM_HPP
#define STEER_DCM_HPP

#include "steer/common.hpp"
#include "steer/corpus.hpp"

#include <span>

namespace steer {

enum class DcmConditioning { LeaveOneOut, Full };

struct DcmParams {
  Scalar alpha = 0.01;   // symmetric pseudo-count per term
  Scalar kappa = 100.0;  // weight of the node's normalized term profile
  std::size_t vocab_size = 1;
  DcmConditioning conditioning = DcmConditioning::LeaveOneOut;

  void validate() const;
};

/// Member count and pooled term counts of a document set.
struct ClusterStats {
  std::size_t doc_count = 0;
  SparseCounts pooled_counts;
};

SparseCounts add_counts(const SparseCounts& a, const SparseCounts& b);
SparseCounts subtract_counts(const SparseCounts& a, const SparseCounts& b);
std::int64_t total_count(const SparseCounts& c);

ClusterStats make_stats(std::span<const Document* const> docs);

/// log Polya(d | alpha_w) with alpha_w = alpha + kappa * tf_w(node) / sum tf(node).
/// An empty node gives the symmetric prior alpha_w = alpha.
Scalar log_dcm_doc_given_node(const Document& d, const SparseCounts& node_counts, const DcmParams& params);

/// Same as above, for a raw count vector (no EmptyDocument check: L = 0 gives 0).
Scalar log_dcm_counts(const SparseCounts& doc_counts, const SparseCounts& node_counts, const DcmParams& params);

/// Sum over members of log f(d_i | pooled - d_i) (or | pooled with full conditioning).
Scalar log_cluster_marginal(const ClusterStats& stats, std::span<const Document* const> members,
                            const DcmParams& params);

/// Partition prior of a rose-tree node with the given arity: 1 - (1 - pi0)^(k - 1).
Scalar pi_prior(std::size_t num_children, Scalar pi0);

/// log(exp(a) + exp(b)) without overflow.
Scalar log_add_exp(Scalar a, Scalar b);

namespace detail {

/// sum_{k < n} log(a + k), i.e. lgamma(a + n) - lgamma(a).
Scalar log_rising(Scalar a, std::int64_t n);

}  // namespace detail

}  // namespace steer

#endif  // STEER_DCM_HPP
