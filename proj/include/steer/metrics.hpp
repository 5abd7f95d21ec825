#ifndef STEER_METRICS_HPP
#define STEER_METRICS_HPP

#include "steer/common.hpp"
#include "steer/tree.hpp"

#include <span>
#include <vector>

namespace steer {

/// Fraction of the truth's triples/fans (over shared documents) that the
/// candidate reproduces with the same kind and bonded pair.
Scalar triple_fan_accuracy(const RoseTree& candidate, const RoseTree& truth, std::size_t cap = kDefaultTripletCap,
                           std::uint64_t seed = 0);

/// 2 I(X;Y) / (H(X) + H(Y)) in nats; 1 when both labelings have one cluster.
Scalar nmi(std::span<const std::uint32_t> x, std::span<const std::uint32_t> y);

struct LayeredNmi {
  Scalar average = 0;
  std::vector<Scalar> layers;
};

/// Per-layer NMI for layers 1..min(depth) (documents shallower than a layer
/// keep their leaf's label), averaged.
LayeredNmi average_nmi(const RoseTree& candidate, const RoseTree& truth);

}  // namespace steer

#endif  // STEER_METRICS_HPP
