#include "steer/dcm.hpp"

#include <cmath>
#include <limits>
#include <numeric>

namespace steer {

void DcmParams::validate() const {
  if (!(alpha > 0)) throw Error(ErrorCode::InvalidArgument, "DCM alpha must be positive");
  if (!(kappa > 0)) throw Error(ErrorCode::InvalidArgument, "DCM kappa must be positive");
  if (vocab_size == 0) throw Error(ErrorCode::InvalidArgument, "DCM vocabulary size must be positive");
}

SparseCounts add_counts(const SparseCounts& a, const SparseCounts& b) {
  SparseCounts out;
  out.reserve(a.size() + b.size());
  auto i = a.begin();
  auto j = b.begin();
  while (i != a.end() || j != b.end()) {
    if (j == b.end() || (i != a.end() && i->first < j->first)) {
      out.push_back(*i++);
    } else if (i == a.end() || j->first < i->first) {
      out.push_back(*j++);
    } else {
      const auto c = i->second + j->second;
      if (c != 0) out.emplace_back(i->first, c);
      ++i;
      ++j;
    }
  }
  return out;
}

SparseCounts subtract_counts(const SparseCounts& a, const SparseCounts& b) {
  SparseCounts neg(b);
  for (auto& [t, c] : neg) c = -c;
  return add_counts(a, neg);
}

std::int64_t total_count(const SparseCounts& c) {
  return std::accumulate(c.begin(), c.end(), std::int64_t{0},
                         [](std::int64_t acc, const auto& tc) { return acc + tc.second; });
}

ClusterStats make_stats(std::span<const Document* const> docs) {
  ClusterStats s;
  s.doc_count = docs.size();
  for (const Document* d : docs) s.pooled_counts = add_counts(s.pooled_counts, d->counts);
  return s;
}

namespace detail {

Scalar log_rising(Scalar a, std::int64_t n) {
  if (n <= 0) return 0;
  if (n <= 8) {
    Scalar prod = 1;
    for (std::int64_t k = 0; k < n; ++k) prod *= a + static_cast<Scalar>(k);
    return std::log(prod);
  }
  return std::lgamma(a + static_cast<Scalar>(n)) - std::lgamma(a);
}

}  // namespace detail

Scalar log_dcm_counts(const SparseCounts& doc_counts, const SparseCounts& node_counts, const DcmParams& params) {
  const std::int64_t length = total_count(doc_counts);
  if (length == 0) return 0;
  const std::int64_t node_total = total_count(node_counts);
  const auto w = static_cast<Scalar>(params.vocab_size);
  const Scalar scale = node_total > 0 ? params.kappa / static_cast<Scalar>(node_total) : 0;
  const Scalar a_sum = w * params.alpha + (node_total > 0 ? params.kappa : 0);

  Scalar acc = -detail::log_rising(a_sum, length);
  auto node_it = node_counts.begin();
  for (const auto& [term, n] : doc_counts) {
    while (node_it != node_counts.end() && node_it->first < term) ++node_it;
    const std::int64_t tf = (node_it != node_counts.end() && node_it->first == term) ? node_it->second : 0;
    const Scalar a = params.alpha + scale * static_cast<Scalar>(tf);
    acc += detail::log_rising(a, n);
  }
  return acc;
}

Scalar log_dcm_doc_given_node(const Document& d, const SparseCounts& node_counts, const DcmParams& params) {
  if (d.length == 0) throw Error(ErrorCode::EmptyDocument, "document '" + d.id + "' is empty");
  return log_dcm_counts(d.counts, node_counts, params);
}

Scalar log_cluster_marginal(const ClusterStats& stats, std::span<const Document* const> members,
                            const DcmParams& params) {
  Scalar acc = 0;
  for (const Document* d : members) {
    if (params.conditioning == DcmConditioning::LeaveOneOut) {
      acc += log_dcm_counts(d->counts, subtract_counts(stats.pooled_counts, d->counts), params);
    } else {
      acc += log_dcm_counts(d->counts, stats.pooled_counts, params);
    }
  }
  return acc;
}

Scalar pi_prior(std::size_t num_children, Scalar pi0) {
  if (num_children < 2) return 1;
  return 1 - std::pow(1 - pi0, static_cast<Scalar>(num_children - 1));
}

Scalar log_add_exp(Scalar a, Scalar b) {
  if (a == -std::numeric_limits<Scalar>::infinity()) return b;
  if (b == -std::numeric_limits<Scalar>::infinity()) return a;
  return a > b ? a + std::log1p(std::exp(b - a)) : b + std::log1p(std::exp(a - b));
}

}  // namespace steer
