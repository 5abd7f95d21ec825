#ifndef STEER_LAYOUT_HPP
#define STEER_LAYOUT_HPP

#include "steer/common.hpp"
#include "steer/tree.hpp"

#include "json.hpp"

#include <Eigen/SparseCore>

#include <map>
#include <set>
#include <span>
#include <vector>

namespace steer {

// Orderings are permutations of child indices 0..k-1.

/// -sum of cosines between adjacent children. `cosines` is k x k.
Scalar similarity_cost(std::span<const std::size_t> order, const Mat& cosines);
Scalar similarity_cost(std::span<const std::size_t> order, std::span<const Vec> vectors);

/// Stripe crossings against fixed category order: for every i before j,
/// sum over k < l of n(i,l) * n(j,k). `counts` is k x m.
Scalar readability_cost(std::span<const std::size_t> order, const Mat& counts);

/// sum over position pairs a < b of |(a - b) - (prev[order[a]] - prev[order[b]])|.
Scalar stability_cost(std::span<const std::size_t> order, std::span<const Scalar> previous);

struct LayoutWeights {
  Scalar similarity = 1;
  Scalar readability = 1;
  Scalar stability = 0.5;
};

struct AnnealParams {
  Scalar swap_probability = 0.7;
  Scalar cooling = 0.99;
  Scalar initial_acceptance = 0.8;
  std::size_t max_proposals = 10000;
  std::size_t max_rejections = 500;
};

/// Inputs for ordering one node's children. Empty matrices/vectors switch
/// the corresponding term off.
struct OrderingProblem {
  Mat cosines;
  Mat counts;
  std::vector<Scalar> previous;
};

struct OrderingResult {
  std::vector<std::size_t> order;
  Scalar cost = 0;          // normalized weighted cost
  Scalar initial_cost = 0;  // same, for the identity order
};

/// Weighted cost with each term divided by its absolute identity-order
/// value (or 1 when that is 0).
class OrderingCost {
 public:
  OrderingCost(const OrderingProblem& problem, const LayoutWeights& weights);
  Scalar operator()(std::span<const std::size_t> order) const;
  std::size_t size() const { return k_; }

 private:
  const OrderingProblem& p_;
  LayoutWeights w_;
  std::size_t k_ = 0;
  Scalar ns_ = 1, nr_ = 1, nt_ = 1;
  Mat cross_;  // cross_(i, j): crossings when i precedes j
};

/// Simulated annealing from the identity order; exhaustive for k <= 2.
/// Never returns a cost above the identity order's.
OrderingResult anneal_order(const OrderingProblem& problem, const LayoutWeights& weights, std::uint64_t seed,
                            const AnnealParams& params = {});

using Ordering = std::map<NodeId, std::vector<NodeId>>;

/// Orders the children of every internal node. `categories` maps documents to
/// first-level constraint categories (empty to skip readability); `previous`
/// is the last ordering shown, if any.
Ordering optimize_ordering(const RoseTree& tree, const Eigen::SparseMatrix<Scalar, Eigen::RowMajor>& doc_vectors,
                           const std::map<DocIndex, std::size_t>& categories, std::size_t category_count,
                           const Ordering* previous, const LayoutWeights& weights, std::uint64_t seed,
                           const AnnealParams& params = {});

/// First-level categories of a constraint tree in the given child order.
std::map<DocIndex, std::size_t> first_level_categories(const RoseTree& constraint, std::span<const NodeId> order);

void apply_ordering(RoseTree& tree, const Ordering& ordering);

struct DoiParams {
  Scalar api_max = 10;
  std::size_t budget = 50;
};

struct DoiCut {
  NodeId focus = kNoNode;
  std::set<NodeId> pinned;
  std::set<NodeId> visible;
  std::set<NodeId> collapsed;
};

/// API(v) = api_max * doc_count(v) / doc_count(root) * overall uncertainty;
/// DOI(v) = API(v) - hops(v, focus). Visible: the top `budget` nodes by DOI,
/// the pinned nodes and focus, closed under ancestors.
DoiCut doi_cut(const RoseTree& tree, NodeId focus, const std::set<NodeId>& pinned, const DoiParams& params = {});
std::vector<Scalar> degree_of_interest(const RoseTree& tree, NodeId focus, const DoiParams& params = {});

nlohmann::json layout_to_json(const Ordering& ordering, const DoiCut& cut);

}  // namespace steer

#endif  // STEER_LAYOUT_HPP
