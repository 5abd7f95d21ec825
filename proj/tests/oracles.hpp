#ifndef STEER_TESTS_ORACLES_HPP
#define STEER_TESTS_ORACLES_HPP

// Independent reference implementations shared by the unit tests and the
// acceptance run.

#include "steer/brt.hpp"
#include "steer/dcm.hpp"
#include "steer/layout.hpp"
#include "steer/tree.hpp"

#include <mpfr.h>

#include <algorithm>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <tuple>
#include <vector>

namespace steer::testing {

// Straight-line Polya evaluation in 256-bit arithmetic.
inline double polya_oracle(const SparseCounts& doc, const SparseCounts& node, std::size_t w, double alpha, double kappa) {
  mpfr_t a_sum, total, acc, tmp, aw, g1, g2;
  for (mpfr_ptr p : {a_sum, total, acc, tmp, aw, g1, g2}) mpfr_init2(p, 256);
  std::int64_t node_total = 0, len = 0;
  for (const auto& [t, c] : node) node_total += c;
  for (const auto& [t, c] : doc) len += c;
  int sign = 0;

  // A = W alpha + kappa (when the node has mass)
  mpfr_set_d(a_sum, alpha, MPFR_RNDN);
  mpfr_mul_ui(a_sum, a_sum, w, MPFR_RNDN);
  if (node_total > 0) mpfr_add_d(a_sum, a_sum, kappa, MPFR_RNDN);
  mpfr_lngamma(acc, a_sum, MPFR_RNDN);
  mpfr_add_si(tmp, a_sum, len, MPFR_RNDN);
  mpfr_lgamma(g1, &sign, tmp, MPFR_RNDN);
  mpfr_sub(acc, acc, g1, MPFR_RNDN);

  for (const auto& [t, n] : doc) {
    std::int64_t tf = 0;
    for (const auto& [u, c] : node)
      if (u == t) tf = c;
    mpfr_set_d(aw, alpha, MPFR_RNDN);
    if (node_total > 0) {
      mpfr_set_d(tmp, kappa, MPFR_RNDN);
      mpfr_mul_si(tmp, tmp, tf, MPFR_RNDN);
      mpfr_div_si(tmp, tmp, node_total, MPFR_RNDN);
      mpfr_add(aw, aw, tmp, MPFR_RNDN);
    }
    mpfr_add_si(tmp, aw, n, MPFR_RNDN);
    mpfr_lgamma(g1, &sign, tmp, MPFR_RNDN);
    mpfr_lgamma(g2, &sign, aw, MPFR_RNDN);
    mpfr_add(acc, acc, g1, MPFR_RNDN);
    mpfr_sub(acc, acc, g2, MPFR_RNDN);
  }
  const double out = mpfr_get_d(acc, MPFR_RNDN);
  for (mpfr_ptr p : {a_sum, total, acc, tmp, aw, g1, g2}) mpfr_clear(p);
  return out;
}

// Root-to-leaf node path of every document, from an explicit walk.
inline std::vector<std::vector<NodeId>> paths(const RoseTree& t, std::size_t n) {
  std::vector<std::vector<NodeId>> out(n);
  std::vector<NodeId> stack;
  std::function<void(NodeId)> walk = [&](NodeId id) {
    stack.push_back(id);
    for (DocIndex d : t.node(id).docs) out[d] = stack;
    for (NodeId c : t.node(id).children) walk(c);
    stack.pop_back();
  };
  walk(t.root());
  return out;
}

inline std::size_t common(const std::vector<NodeId>& a, const std::vector<NodeId>& b) {
  std::size_t k = 0;
  while (k < a.size() && k < b.size() && a[k] == b[k]) ++k;
  return k;
}

// (kind, bonded pair) of a triplet from LCA depths: 0 = fan, else the
// index of the outsider + 1.
inline int shape(const std::vector<std::vector<NodeId>>& p, DocIndex a, DocIndex b, DocIndex c) {
  const auto ab = common(p[a], p[b]), ac = common(p[a], p[c]), bc = common(p[b], p[c]);
  if (ab == ac && ac == bc) return 0;
  if (ab > ac) return 3;
  if (ac > ab) return 2;
  return 1;
}

inline Scalar exhaustive_accuracy(const RoseTree& cand, const RoseTree& truth, std::size_t n) {
  const auto pc = paths(cand, n), pt = paths(truth, n);
  std::size_t ok = 0, total = 0;
  for (DocIndex a = 0; a < n; ++a)
    for (DocIndex b = a + 1; b < n; ++b)
      for (DocIndex c = b + 1; c < n; ++c) {
        ++total;
        ok += shape(pc, a, b, c) == shape(pt, a, b, c);
      }
  return static_cast<Scalar>(ok) / static_cast<Scalar>(total);
}

// Stripe picture: children along the top in `order`, categories along the
// bottom in fixed order, one segment per document. Counts proper crossings.
inline std::size_t geometric_crossings(std::span<const std::size_t> order, const Mat& counts) {
  struct Seg {
    std::size_t child_pos, cat, serial;
  };
  std::vector<Seg> segs;
  std::size_t serial = 0;
  for (std::size_t p = 0; p < order.size(); ++p)
    for (Eigen::Index c = 0; c < counts.cols(); ++c)
      for (int n = 0; n < static_cast<int>(counts(static_cast<Eigen::Index>(order[p]), c)); ++n)
        segs.push_back({p, static_cast<std::size_t>(c), serial++});
  // x positions: top sorted by (child, category, serial), bottom by (category, child, serial)
  std::vector<std::size_t> top(segs.size()), bottom(segs.size());
  std::vector<std::size_t> idx(segs.size());
  std::iota(idx.begin(), idx.end(), 0);
  auto by_top = idx, by_bottom = idx;
  std::sort(by_top.begin(), by_top.end(), [&](std::size_t a, std::size_t b) {
    return std::tie(segs[a].child_pos, segs[a].cat, segs[a].serial) < std::tie(segs[b].child_pos, segs[b].cat, segs[b].serial);
  });
  std::sort(by_bottom.begin(), by_bottom.end(), [&](std::size_t a, std::size_t b) {
    return std::tie(segs[a].cat, segs[a].child_pos, segs[a].serial) < std::tie(segs[b].cat, segs[b].child_pos, segs[b].serial);
  });
  for (std::size_t i = 0; i < idx.size(); ++i) {
    top[by_top[i]] = i;
    bottom[by_bottom[i]] = i;
  }
  std::size_t crossings = 0;
  for (std::size_t a = 0; a < segs.size(); ++a)
    for (std::size_t b = a + 1; b < segs.size(); ++b) {
      const long dt = static_cast<long>(top[a]) - static_cast<long>(top[b]);
      const long db = static_cast<long>(bottom[a]) - static_cast<long>(bottom[b]);
      if ((dt < 0) != (db < 0)) ++crossings;
    }
  return crossings;
}

// One random legal merge: (left, right, mode) with left < right.
inline std::tuple<ForestState::SubtreeId, ForestState::SubtreeId, MergeMode> random_merge(const ForestState& f, std::mt19937_64& rng) {
  auto act = f.active();
  std::shuffle(act.begin(), act.end(), rng);
  const ForestState::SubtreeId l = std::min(act[0], act[1]), r = std::max(act[0], act[1]);
  std::vector<MergeMode> ok;
  for (MergeMode m : {MergeMode::Join, MergeMode::AbsorbLeft, MergeMode::AbsorbRight, MergeMode::Collapse})
    if (f.mode_allowed(l, r, m)) ok.push_back(m);
  return {l, r, ok[rng() % ok.size()]};
}

inline std::size_t preserved(const RoseTree& t, const std::vector<TripleFan>& cons) {
  const LcaIndex idx(t);
  std::size_t n = 0;
  for (const auto& c : cons) {
    if (TripleFan::from(classify_triplet(idx, c.a, c.b, c.c), c.a, c.b, c.c) == c) ++n;
  }
  return n;
}

}  // namespace steer::testing

#endif
