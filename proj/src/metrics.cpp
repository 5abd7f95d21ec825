#include "steer/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <unordered_map>

namespace steer {

namespace {

std::vector<DocIndex> shared_docs(const LcaIndex& a, const LcaIndex& b) {
  std::vector<DocIndex> out;
  std::set_intersection(a.docs().begin(), a.docs().end(), b.docs().begin(), b.docs().end(), std::back_inserter(out));
  return out;
}

}  // namespace

Scalar triple_fan_accuracy(const RoseTree& candidate, const RoseTree& truth, std::size_t cap, std::uint64_t seed) {
  const LcaIndex ci(candidate), ti(truth);
  const auto shared = shared_docs(ci, ti);
  if (shared.size() < 3) throw Error(ErrorCode::TooFewSharedDocs, "trees share fewer than three documents");
  const Decomposition dec = decompose_docs(truth, shared, cap, seed);
  std::size_t correct = 0;
  for (const TripleFan& t : dec.items) {
    if (TripleFan::from(classify_triplet(ci, t.a, t.b, t.c), t.a, t.b, t.c) == t) ++correct;
  }
  return static_cast<Scalar>(correct) / static_cast<Scalar>(dec.items.size());
}

Scalar nmi(std::span<const std::uint32_t> x, std::span<const std::uint32_t> y) {
  if (x.size() != y.size()) throw Error(ErrorCode::DimensionMismatch, "labelings differ in length");
  const auto n = static_cast<Scalar>(x.size());
  std::map<std::pair<std::uint32_t, std::uint32_t>, Scalar> joint;
  std::map<std::uint32_t, Scalar> px, py;
  for (std::size_t i = 0; i < x.size(); ++i) {
    joint[{x[i], y[i]}] += 1;
    px[x[i]] += 1;
    py[y[i]] += 1;
  }
  // identical partitions up to relabeling: exactly 1, without rounding
  if (joint.size() == px.size() && joint.size() == py.size()) return 1;
  auto entropy = [&](const std::map<std::uint32_t, Scalar>& p) {
    Scalar h = 0;
    for (const auto& [k, c] : p) h -= c / n * std::log(c / n);
    return h;
  };
  Scalar mi = 0;
  for (const auto& [k, c] : joint) mi += c / n * std::log(c * n / (px[k.first] * py[k.second]));
  const Scalar h = entropy(px) + entropy(py);
  if (h <= 0) return 1;
  return std::clamp(2 * mi / h, Scalar(0), Scalar(1));
}

LayeredNmi average_nmi(const RoseTree& candidate, const RoseTree& truth) {
  const LcaIndex ci(candidate), ti(truth);
  const auto shared = shared_docs(ci, ti);
  if (shared.size() < 2) throw Error(ErrorCode::TooFewSharedDocs, "trees share fewer than two documents");
  auto leaf_depth = [&](const LcaIndex& idx) {
    std::size_t d = 0;
    for (DocIndex doc : shared) d = std::max(d, idx.depth(idx.leaf_of(doc)));
    return d;
  };
  const std::size_t layers = std::min(leaf_depth(ci), leaf_depth(ti));
  LayeredNmi out;
  std::vector<std::uint32_t> x(shared.size()), y(shared.size());
  for (std::size_t l = 1; l <= layers; ++l) {
    for (std::size_t i = 0; i < shared.size(); ++i) {
      x[i] = ci.ancestor_at_depth(ci.leaf_of(shared[i]), l);
      y[i] = ti.ancestor_at_depth(ti.leaf_of(shared[i]), l);
    }
    out.layers.push_back(nmi(x, y));
  }
  if (out.layers.empty()) {
    // both trees are a single leaf over the shared docs
    out.layers.push_back(1);
  }
  Scalar sum = 0;
  for (Scalar v : out.layers) sum += v;
  out.average = sum / static_cast<Scalar>(out.layers.size());
  return out;
}

}  // namespace steer
