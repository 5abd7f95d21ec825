#include "steer/brt.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <thread>

#include <Eigen/Sparse>

namespace steer {

// ---------------------------------------------------------------------------
// ForestState

ForestState::ForestState(std::span<const DocIndex> docs, std::span<const TripleFan> constraints) {
  DocIndex max_doc = 0;
  for (DocIndex d : docs) max_doc = std::max(max_doc, d);
  local_.assign(docs.empty() ? 0 : max_doc + 1, kAbsent);
  subs_.reserve(docs.size() * 2);
  for (DocIndex d : docs) {
    if (local_[d] != kAbsent) throw Error(ErrorCode::InvalidArgument, "document listed twice in forest");
    local_[d] = static_cast<std::uint32_t>(doc_of_.size());
    doc_of_.push_back(d);
    Sub s;
    s.docs = {d};
    subs_.push_back(std::move(s));
  }
  active_count_ = subs_.size();
  root_.resize(doc_of_.size());
  std::iota(root_.begin(), root_.end(), SubtreeId{0});
  top_.assign(doc_of_.size(), kAbsent);

  by_doc_.resize(doc_of_.size());
  for (const TripleFan& c : constraints) {
    const auto a = local(c.a), b = local(c.b), cc = local(c.c);
    if (a == kAbsent || b == kAbsent || cc == kAbsent) continue;
    const auto idx = static_cast<std::uint32_t>(constraints_.size());
    constraints_.push_back(TripleFan{c.kind, a, b, cc});
    by_doc_[a].push_back(idx);
    by_doc_[b].push_back(idx);
    by_doc_[cc].push_back(idx);
  }
}

std::vector<ForestState::SubtreeId> ForestState::active() const {
  std::vector<SubtreeId> out;
  out.reserve(active_count_);
  for (SubtreeId s = 0; s < subs_.size(); ++s)
    if (subs_[s].alive) out.push_back(s);
  return out;
}

ForestState::SubtreeId ForestState::root_of(DocIndex d) const {
  const auto l = local(d);
  if (l == kAbsent) throw Error(ErrorCode::DocNotInTree, "document not in forest");
  return root_[l];
}

bool ForestState::mode_allowed(SubtreeId left, SubtreeId right, MergeMode mode) const {
  if (left == right || !is_active(left) || !is_active(right)) return false;
  switch (mode) {
    case MergeMode::Join: return true;
    case MergeMode::AbsorbLeft: return !is_leaf(left);
    case MergeMode::AbsorbRight: return !is_leaf(right);
    case MergeMode::Collapse: return !is_leaf(left) && !is_leaf(right);
  }
  return false;
}

namespace {

struct Place {
  std::uint32_t tree;
  std::uint32_t top;
};

// Whether some sequence of future merges can still realize the constraint,
// given where its three members sit (a, b, c order; for a triple (a, b) is
// the bonded pair). Members of one tree are compared by the child of that
// tree's root holding them.
bool satisfiable(bool fan, const Place& a, const Place& b, const Place& c) {
  const bool ab = a.tree == b.tree;
  const bool ac = a.tree == c.tree;
  const bool bc = b.tree == c.tree;
  if (ab && ac) {
    if (fan) return a.top != b.top && a.top != c.top && b.top != c.top;
    return a.top == b.top && c.top != a.top;
  }
  if (ab) return fan ? a.top != b.top : true;
  if (ac) return fan ? a.top != c.top : false;
  if (bc) return fan ? b.top != c.top : false;
  return true;
}

constexpr std::uint32_t kMerged = static_cast<std::uint32_t>(-2);

}  // namespace

std::int64_t ForestState::count_new_violations(SubtreeId left, SubtreeId right, MergeMode mode) const {
  if (!mode_allowed(left, right, mode)) {
    throw Error(ErrorCode::IllegalMerge, "merge mode not applicable to these sub-trees");
  }
  if (constraints_.empty()) return 0;
  const SubtreeId small = subs_[left].docs.size() <= subs_[right].docs.size() ? left : right;
  const SubtreeId other = small == left ? right : left;

  auto place_after = [&](std::uint32_t x) -> Place {
    const SubtreeId r = root_[x];
    if (r != left && r != right) return {r, top_[x]};
    switch (mode) {
      case MergeMode::Join: return {kMerged, r};
      case MergeMode::AbsorbLeft: return {kMerged, r == left ? top_[x] : right};
      case MergeMode::AbsorbRight: return {kMerged, r == right ? top_[x] : left};
      case MergeMode::Collapse: return {kMerged, top_[x]};
    }
    return {kMerged, top_[x]};
  };

  std::int64_t violations = 0;
  std::int64_t fragile_cross_left = 0;
  std::int64_t fragile_cross_right = 0;
  for (DocIndex d : subs_[small].docs) {
    const std::uint32_t x = local(d);
    for (std::uint32_t ci : by_doc_[x]) {
      const TripleFan& c = constraints_[ci];
      const std::array<std::uint32_t, 3> m{c.a, c.b, c.c};
      bool touches_other = false;
      std::uint32_t first_small = kAbsent;
      for (std::uint32_t y : m) {
        if (root_[y] == other) touches_other = true;
        if (root_[y] == small && first_small == kAbsent) first_small = y;
      }
      if (!touches_other || first_small != x) continue;
      const Place b0{root_[m[0]], top_[m[0]]}, b1{root_[m[1]], top_[m[1]]}, b2{root_[m[2]], top_[m[2]]};
      const bool before = satisfiable(c.is_fan(), b0, b1, b2);
      if (!before) continue;
      const bool after = satisfiable(c.is_fan(), place_after(m[0]), place_after(m[1]), place_after(m[2]));
      if (!after) ++violations;
      if (c.is_fan()) {
        // Two members in one operand with distinct tops, third in the other:
        // these are part of that operand's fragile count.
        int in_left = 0, in_right = 0;
        for (std::uint32_t y : m) {
          in_left += root_[y] == left;
          in_right += root_[y] == right;
        }
        if (in_left == 2 && in_right == 1) ++fragile_cross_left;
        if (in_right == 2 && in_left == 1) ++fragile_cross_right;
      }
    }
  }
  // A satisfiable fan with two members in one tree needs those two to stay
  // in distinct children of the root; burying the root under a new node
  // (join, or being absorbed) breaks it when the third member is elsewhere.
  const bool bury_left = mode == MergeMode::Join || mode == MergeMode::AbsorbRight;
  const bool bury_right = mode == MergeMode::Join || mode == MergeMode::AbsorbLeft;
  if (bury_left) violations += subs_[left].fragile - fragile_cross_left;
  if (bury_right) violations += subs_[right].fragile - fragile_cross_right;
  return violations;
}

std::int64_t ForestState::count_fragile(SubtreeId s) const {
  std::int64_t fragile = 0;
  for (DocIndex d : subs_[s].docs) {
    const std::uint32_t x = local(d);
    for (std::uint32_t ci : by_doc_[x]) {
      const TripleFan& c = constraints_[ci];
      if (!c.is_fan()) continue;
      std::uint32_t inside[3];
      int k = 0;
      for (std::uint32_t y : {c.a, c.b, c.c})
        if (root_[y] == s) inside[k++] = y;
      if (k == 2 && inside[0] == x && top_[inside[0]] != top_[inside[1]]) ++fragile;
    }
  }
  return fragile;
}

ForestState::SubtreeId ForestState::merge(SubtreeId left, SubtreeId right, MergeMode mode) {
  if (!mode_allowed(left, right, mode)) {
    throw Error(ErrorCode::IllegalMerge, "merge mode not applicable to these sub-trees");
  }
  const auto id = static_cast<SubtreeId>(subs_.size());
  Sub m;
  switch (mode) {
    case MergeMode::Join: m.children = {left, right}; break;
    case MergeMode::AbsorbLeft:
      m.children = subs_[left].children;
      m.children.push_back(right);
      break;
    case MergeMode::AbsorbRight:
      m.children = subs_[right].children;
      m.children.push_back(left);
      break;
    case MergeMode::Collapse:
      m.children = subs_[left].children;
      m.children.insert(m.children.end(), subs_[right].children.begin(), subs_[right].children.end());
      break;
  }
  m.docs = subs_[left].docs;
  m.docs.insert(m.docs.end(), subs_[right].docs.begin(), subs_[right].docs.end());

  for (SubtreeId operand : {left, right}) {
    const bool buried = mode == MergeMode::Join || (mode == MergeMode::AbsorbLeft && operand == right) ||
                        (mode == MergeMode::AbsorbRight && operand == left);
    for (DocIndex d : subs_[operand].docs) {
      const std::uint32_t x = local(d);
      root_[x] = id;
      if (buried) top_[x] = operand;
    }
    subs_[operand].alive = false;
  }
  subs_.push_back(std::move(m));
  --active_count_;
  subs_[id].fragile = count_fragile(id);
  return id;
}

RoseTree ForestState::to_tree() const {
  // Hosts of absorb and both operands of collapse are dissolved into the new node.
  std::vector<bool> in_structure(subs_.size(), false);
  std::vector<SubtreeId> stack;
  for (SubtreeId s = 0; s < subs_.size(); ++s)
    if (subs_[s].alive) stack.push_back(s);
  const std::vector<SubtreeId> roots = stack;
  while (!stack.empty()) {
    const SubtreeId s = stack.back();
    stack.pop_back();
    in_structure[s] = true;
    for (SubtreeId c : subs_[s].children) stack.push_back(c);
  }
  RoseTree tree;
  for (SubtreeId s = 0; s < subs_.size(); ++s) {
    const NodeId n = tree.add_node();
    if (!in_structure[s]) tree.node(n).alive = false;
  }
  for (SubtreeId s = 0; s < subs_.size(); ++s) {
    if (!in_structure[s]) continue;
    if (subs_[s].children.empty()) tree.node(s).docs = subs_[s].docs;
    for (SubtreeId c : subs_[s].children) tree.attach(s, c);
  }
  if (roots.size() == 1) {
    tree.set_root(roots.front());
  } else if (!roots.empty()) {
    const NodeId top = tree.add_node();
    for (SubtreeId r : roots) tree.attach(top, r);
    tree.set_root(top);
  }
  return tree;
}

std::int64_t count_new_violations(const ForestState& state, ForestState::SubtreeId left,
                                  ForestState::SubtreeId right, MergeMode mode) {
  return state.count_new_violations(left, right, mode);
}

// ---------------------------------------------------------------------------
// Evidence algebra

SubtreeEvidence merged_evidence(const SubtreeEvidence& left, const SubtreeEvidence& right, Scalar log_f_merged,
                                MergeMode mode, Scalar pi0) {
  std::size_t arity = 0;
  Scalar child_sum = 0;
  switch (mode) {
    case MergeMode::Join:
      arity = 2;
      child_sum = left.log_p + right.log_p;
      break;
    case MergeMode::AbsorbLeft:
      arity = left.arity + 1;
      child_sum = left.child_sum + right.log_p;
      break;
    case MergeMode::AbsorbRight:
      arity = right.arity + 1;
      child_sum = right.child_sum + left.log_p;
      break;
    case MergeMode::Collapse:
      arity = left.arity + right.arity;
      child_sum = left.child_sum + right.child_sum;
      break;
  }
  const Scalar pi = pi_prior(arity, pi0);
  SubtreeEvidence m;
  m.arity = arity;
  m.child_sum = child_sum;
  m.log_f = log_f_merged;
  m.log_p = pi >= 1 ? log_f_merged : log_add_exp(std::log(pi) + log_f_merged, std::log1p(-pi) + child_sum);
  return m;
}

Scalar likelihood_ratio(const SubtreeEvidence& left, const SubtreeEvidence& right, Scalar log_f_merged,
                        MergeMode mode, Scalar pi0) {
  return merged_evidence(left, right, log_f_merged, mode, pi0).log_p - left.log_p - right.log_p;
}

// ---------------------------------------------------------------------------
// Greedy agglomeration

namespace {

// Evaluates log f of unions of document sets with a dense scratch buffer.
class UnionScorer {
 public:
  UnionScorer(const Corpus& corpus, const DcmParams& params)
      : corpus_(corpus), params_(params), buf_(params.vocab_size, 0) {
    const Scalar w = static_cast<Scalar>(params.vocab_size);
    pre_full_.resize(corpus.docs.size());
    pre_empty_.resize(corpus.docs.size());
    for (std::size_t i = 0; i < corpus.docs.size(); ++i) {
      const auto len = corpus.docs[i].length;
      pre_full_[i] = -detail::log_rising(w * params.alpha + params.kappa, len);
      pre_empty_[i] = -detail::log_rising(w * params.alpha, len);
    }
  }

  Scalar singleton(DocIndex d) const {
    const Document& doc = corpus_.docs[d];
    Scalar acc = pre_empty_[d];
    for (const auto& [t, n] : doc.counts) acc += detail::log_rising(params_.alpha, n);
    return acc;
  }

  Scalar union_log_f(std::span<const DocIndex> a, const SparseCounts& pa, std::int64_t ta,
                     std::span<const DocIndex> b, const SparseCounts& pb, std::int64_t tb) {
    for (const auto& [t, c] : pa) buf_[t] += c;
    for (const auto& [t, c] : pb) buf_[t] += c;
    const std::int64_t total = ta + tb;
    Scalar acc = 0;
    for (DocIndex d : a) acc += doc_term(d, total);
    for (DocIndex d : b) acc += doc_term(d, total);
    for (const auto& [t, c] : pa) buf_[t] = 0;
    for (const auto& [t, c] : pb) buf_[t] = 0;
    return acc;
  }

 private:
  Scalar doc_term(DocIndex d, std::int64_t total) const {
    const Document& doc = corpus_.docs[d];
    const bool loo = params_.conditioning == DcmConditioning::LeaveOneOut;
    const std::int64_t rest = loo ? total - doc.length : total;
    const Scalar alpha = params_.alpha;
    if (rest <= 0) {
      Scalar acc = pre_empty_[d];
      for (const auto& [t, n] : doc.counts) acc += detail::log_rising(alpha, n);
      return acc;
    }
    const Scalar scale = params_.kappa / static_cast<Scalar>(rest);
    Scalar acc = pre_full_[d];
    Scalar prod = 1;
    for (const auto& [t, n] : doc.counts) {
      const std::int64_t c = loo ? buf_[t] - n : buf_[t];
      const Scalar a = alpha + scale * static_cast<Scalar>(c);
      if (n == 1) {
        prod *= a;
      } else if (n <= 8) {
        for (std::int64_t k = 0; k < n; ++k) prod *= a + static_cast<Scalar>(k);
      } else {
        acc += std::lgamma(a + static_cast<Scalar>(n)) - std::lgamma(a);
      }
      if (prod > 1e150 || prod < 1e-150) {
        acc += std::log(prod);
        prod = 1;
      }
    }
    return acc + std::log(prod);
  }

  const Corpus& corpus_;
  const DcmParams& params_;
  std::vector<std::int64_t> buf_;
  std::vector<Scalar> pre_full_;
  std::vector<Scalar> pre_empty_;
};

struct Candidate {
  Scalar score;
  std::uint32_t left;
  std::uint32_t right_mode;  // right id in the low 30 bits, mode in the top 2

  std::uint32_t right() const { return right_mode & 0x3FFFFFFFu; }
  MergeMode mode() const { return static_cast<MergeMode>(right_mode >> 30); }
};

// Higher score first, then smaller left id, smaller right id, mode order.
bool better(const Candidate& x, const Candidate& y) {
  if (x.score != y.score) return x.score > y.score;
  if (x.left != y.left) return x.left < y.left;
  if (x.right() != y.right()) return x.right() < y.right();
  return x.mode() < y.mode();
}

bool heap_less(const Candidate& x, const Candidate& y) { return better(y, x); }

template <typename Fn>
void parallel_for(std::size_t count, unsigned threads, Fn&& fn) {
  if (threads <= 1 || count < 64) {
    for (std::size_t i = 0; i < count; ++i) fn(i, 0u);
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (count + threads - 1) / threads;
  for (unsigned t = 0; t < threads; ++t) {
    const std::size_t lo = t * chunk, hi = std::min(count, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&, lo, hi, t] {
      for (std::size_t i = lo; i < hi; ++i) fn(i, t);
    });
  }
  for (auto& th : pool) th.join();
}

class Agglomerator {
 public:
  Agglomerator(const Corpus& corpus, std::span<const DocIndex> docs, std::span<const TripleFan> constraints,
               const BrtParams& params)
      : corpus_(corpus),
        params_(params),
        forest_(docs, constraints),
        constrained_(forest_.constraint_count() > 0) {
    threads_ = std::max(1u, params.threads);
    for (unsigned t = 0; t < threads_; ++t) scorers_.emplace_back(corpus, params_.dcm);
    const std::size_t n = docs.size();
    info_.reserve(2 * n);
    for (DocIndex d : docs) {
      Info in;
      in.pooled = corpus.docs[d].counts;
      in.total = corpus.docs[d].length;
      in.ev.log_f = scorers_[0].singleton(d);
      in.ev.log_p = in.ev.log_f;
      info_.push_back(std::move(in));
    }
  }

  RoseTree run(const ClusterControl* control) {
    const std::size_t n = info_.size();
    const std::size_t total_merges = n - 1;
    std::size_t merges = 0;
    if (params_.approx && n > params_.approx_threshold) {
      rebuild_heap_approx();
    } else {
      seed_heap_exact();
    }
    bool cancelled = false;
    while (forest_.active_count() > 1) {
      if (heap_.empty()) rebuild_heap_exact();
      std::pop_heap(heap_.begin(), heap_.end(), heap_less);
      const Candidate c = heap_.back();
      heap_.pop_back();
      if (!forest_.is_active(c.left) || !forest_.is_active(c.right())) continue;
      apply(c);
      ++merges;
      if (merges % 100 == 0) {
        if (control && control->cancel && control->cancel->load()) {
          cancelled = true;
          break;
        }
        if (control && control->progress) control->progress(static_cast<double>(merges) / total_merges);
      }
      if (params_.approx && forest_.active_count() > params_.approx_threshold) {
        if (merges % params_.approx_refresh == 0) rebuild_heap_approx();
      } else if (approx_mode_) {
        rebuild_heap_exact();
      } else {
        maybe_compact();
      }
    }
    if (control && control->progress && !cancelled) control->progress(1.0);
    return finish(cancelled);
  }

 private:
  struct Info {
    SparseCounts pooled;
    std::int64_t total = 0;
    SubtreeEvidence ev;
    MergeRecord record;
  };

  struct Scored {
    Candidate cand;
    bool valid = false;
  };

  Scalar union_f(ForestState::SubtreeId a, ForestState::SubtreeId b, unsigned thread) {
    const Info& x = info_[a];
    const Info& y = info_[b];
    return scorers_[thread].union_log_f(forest_.docs(a), x.pooled, x.total, forest_.docs(b), y.pooled, y.total);
  }

  // Best mode for the pair; left must be the older sub-tree.
  Candidate score_pair(ForestState::SubtreeId left, ForestState::SubtreeId right, unsigned thread) {
    const Scalar log_f = union_f(left, right, thread);
    Candidate best{-std::numeric_limits<Scalar>::infinity(), left, right};
    bool have = false;
    for (MergeMode mode : {MergeMode::Join, MergeMode::AbsorbLeft, MergeMode::AbsorbRight, MergeMode::Collapse}) {
      if (!forest_.mode_allowed(left, right, mode)) continue;
      Scalar score = likelihood_ratio(info_[left].ev, info_[right].ev, log_f, mode, params_.pi0);
      if (constrained_ && params_.lambda > 0) {
        score -= params_.lambda * static_cast<Scalar>(forest_.count_new_violations(left, right, mode));
      }
      if (!have || score > best.score) {
        best.score = score;
        best.right_mode = right | (static_cast<std::uint32_t>(mode) << 30);
        have = true;
      }
    }
    return best;
  }

  void seed_heap_exact() {
    const std::size_t n = info_.size();
    heap_.clear();
    heap_.resize(n * (n - 1) / 2);
    parallel_for(n, threads_, [&](std::size_t i, unsigned t) {
      // row i holds pairs (j, i) for j < i, stored at offset i(i-1)/2
      const std::size_t base = i * (i - 1) / 2;
      for (std::size_t j = 0; j < i; ++j) {
        heap_[base + j] = score_pair(static_cast<std::uint32_t>(j), static_cast<std::uint32_t>(i), t);
      }
    });
    std::make_heap(heap_.begin(), heap_.end(), heap_less);
  }

  void rebuild_heap_exact() {
    approx_mode_ = false;
    const auto act = forest_.active();
    const std::size_t n = act.size();
    heap_.clear();
    heap_.resize(n * (n - 1) / 2);
    parallel_for(n, threads_, [&](std::size_t i, unsigned t) {
      const std::size_t base = i * (i - 1) / 2;
      for (std::size_t j = 0; j < i; ++j) heap_[base + j] = score_pair(act[j], act[i], t);
    });
    std::make_heap(heap_.begin(), heap_.end(), heap_less);
  }

  // Each active sub-tree scores only its nearest neighbours by centroid cosine.
  void rebuild_heap_approx() {
    approx_mode_ = true;
    const auto act = forest_.active();
    const std::size_t n = act.size();
    const auto dim = static_cast<Eigen::Index>(params_.dcm.vocab_size);
    Eigen::SparseMatrix<Scalar, Eigen::RowMajor> centroids(static_cast<Eigen::Index>(n), dim);
    std::vector<Eigen::Triplet<Scalar>> trips;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& pooled = info_[act[i]].pooled;
      Scalar norm = 0;
      for (const auto& [t, c] : pooled) norm += static_cast<Scalar>(c) * static_cast<Scalar>(c);
      norm = std::sqrt(norm);
      for (const auto& [t, c] : pooled)
        trips.emplace_back(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(t), static_cast<Scalar>(c) / norm);
    }
    centroids.setFromTriplets(trips.begin(), trips.end());
    const Eigen::SparseMatrix<Scalar, Eigen::RowMajor> gram = centroids * Eigen::SparseMatrix<Scalar>(centroids.transpose());
    std::vector<std::vector<std::uint32_t>> neighbours(n);
    parallel_for(n, threads_, [&](std::size_t i, unsigned) {
      std::vector<std::pair<Scalar, std::uint32_t>> row;
      for (Eigen::SparseMatrix<Scalar, Eigen::RowMajor>::InnerIterator it(gram, static_cast<Eigen::Index>(i)); it; ++it) {
        if (static_cast<std::size_t>(it.col()) != i) row.emplace_back(-it.value(), static_cast<std::uint32_t>(it.col()));
      }
      const std::size_t k = std::min(params_.approx_neighbors, row.size());
      std::partial_sort(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(k), row.end());
      for (std::size_t r = 0; r < k; ++r) neighbours[i].push_back(row[r].second);
    });
    std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;
    for (std::size_t i = 0; i < n; ++i)
      for (std::uint32_t j : neighbours[i]) pairs.emplace_back(std::min<std::uint32_t>(i, j), std::max<std::uint32_t>(i, j));
    std::sort(pairs.begin(), pairs.end());
    pairs.erase(std::unique(pairs.begin(), pairs.end()), pairs.end());
    heap_.assign(pairs.size(), Candidate{});
    parallel_for(pairs.size(), threads_, [&](std::size_t p, unsigned t) {
      heap_[p] = score_pair(act[pairs[p].first], act[pairs[p].second], t);
    });
    std::make_heap(heap_.begin(), heap_.end(), heap_less);
  }

  void apply(const Candidate& c) {
    const auto left = c.left;
    const auto right = c.right();
    const MergeMode mode = c.mode();
    Info m;
    const Scalar log_f = union_f(left, right, 0);
    m.ev = merged_evidence(info_[left].ev, info_[right].ev, log_f, mode, params_.pi0);
    m.pooled = add_counts(info_[left].pooled, info_[right].pooled);
    m.total = info_[left].total + info_[right].total;
    m.record.mode = mode;
    m.record.log_likelihood_ratio = m.ev.log_p - info_[left].ev.log_p - info_[right].ev.log_p;
    m.record.violations = constrained_ ? forest_.count_new_violations(left, right, mode) : 0;
    m.record.log_posterior_ratio = m.record.log_likelihood_ratio - params_.lambda * static_cast<Scalar>(m.record.violations);
    const auto id = forest_.merge(left, right, mode);
    info_[left].pooled = {};
    info_[right].pooled = {};
    info_.push_back(std::move(m));

    if (approx_mode_) {
      // neighbour lists are refreshed wholesale; score the new node against
      // the current best partners of its operands' neighbourhood
      const auto act = forest_.active();
      if (act.size() <= params_.approx_threshold) return;
      std::vector<std::pair<Scalar, std::uint32_t>> near;
      for (auto k : act) {
        if (k == id) continue;
        near.emplace_back(-centroid_cosine(id, k), k);
      }
      const std::size_t kk = std::min(params_.approx_neighbors, near.size());
      std::partial_sort(near.begin(), near.begin() + static_cast<std::ptrdiff_t>(kk), near.end());
      for (std::size_t r = 0; r < kk; ++r) push(score_pair(near[r].second, id, 0));
      return;
    }
    const auto act = forest_.active();
    std::vector<Candidate> row(act.size() - 1);
    parallel_for(act.size() - 1, threads_, [&](std::size_t i, unsigned t) { row[i] = score_pair(act[i], id, t); });
    for (const auto& r : row) push(r);
  }

  Scalar centroid_cosine(std::uint32_t a, std::uint32_t b) const {
    const auto& pa = info_[a].pooled;
    const auto& pb = info_[b].pooled;
    Scalar dot = 0, na = 0, nb = 0;
    auto i = pa.begin();
    auto j = pb.begin();
    for (const auto& [t, c] : pa) na += static_cast<Scalar>(c * c);
    for (const auto& [t, c] : pb) nb += static_cast<Scalar>(c * c);
    while (i != pa.end() && j != pb.end()) {
      if (i->first < j->first) ++i;
      else if (j->first < i->first) ++j;
      else {
        dot += static_cast<Scalar>(i->second * j->second);
        ++i;
        ++j;
      }
    }
    return dot / std::sqrt(na * nb);
  }

  void push(const Candidate& c) {
    heap_.push_back(c);
    std::push_heap(heap_.begin(), heap_.end(), heap_less);
  }

  void maybe_compact() {
    const std::size_t a = forest_.active_count();
    const std::size_t live = a * (a - 1) / 2;
    if (heap_.size() <= 2 * live + 4096) return;
    std::erase_if(heap_, [&](const Candidate& c) {
      return !forest_.is_active(c.left) || !forest_.is_active(c.right());
    });
    std::make_heap(heap_.begin(), heap_.end(), heap_less);
  }

  RoseTree finish(bool cancelled) {
    RoseTree tree = forest_.to_tree();
    tree.set_partial(cancelled && forest_.active_count() > 1);
    const std::size_t n_leaves = corpus_leaf_count();
    for (NodeId id : tree.preorder()) {
      TreeNode& node = tree.node(id);
      if (id < n_leaves) {
        const Document& d = corpus_.docs[node.docs.front()];
        node.label = d.title.empty() ? d.id : d.title;
      } else if (id < info_.size()) {
        node.merge = info_[id].record;
      }
    }
    label_internal(tree);
    return tree;
  }

  std::size_t corpus_leaf_count() const {
    std::size_t leaves = 0;
    while (leaves < forest_.subtree_count() && forest_.is_leaf(static_cast<std::uint32_t>(leaves))) ++leaves;
    return leaves;
  }

  void label_internal(RoseTree& tree) const {
    if (tree.empty()) return;
    // post-order pooled counts
    const auto order = tree.preorder();
    std::vector<SparseCounts> pooled(tree.arena_size());
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      TreeNode& node = tree.node(*it);
      if (node.is_leaf()) {
        for (DocIndex d : node.docs) pooled[*it] = add_counts(pooled[*it], corpus_.docs[d].counts);
        continue;
      }
      for (NodeId c : node.children) {
        pooled[*it] = add_counts(pooled[*it], pooled[c]);
        if (!tree.node(c).is_leaf()) pooled[c] = {};
      }
      node.label = top_terms_label(pooled[*it], corpus_.vocab);
    }
  }

  const Corpus& corpus_;
  BrtParams params_;
  ForestState forest_;
  bool constrained_;
  unsigned threads_ = 1;
  bool approx_mode_ = false;
  std::vector<UnionScorer> scorers_;
  std::vector<Info> info_;
  std::vector<Candidate> heap_;
};

}  // namespace

RoseTree cluster(const Corpus& corpus, std::span<const DocIndex> docs, std::span<const TripleFan> constraints,
                 const BrtParams& params, const ClusterControl* control) {
  params.dcm.validate();
  if (docs.empty()) throw Error(ErrorCode::EmptyCorpus, "nothing to cluster");
  for (DocIndex d : docs) {
    if (d >= corpus.docs.size()) throw Error(ErrorCode::DocNotInTree, "document index out of range");
    if (corpus.docs[d].length == 0) {
      throw Error(ErrorCode::EmptyDocument, "document '" + corpus.docs[d].id + "' has no tokens");
    }
  }
  BrtParams p = params;
  p.dcm.vocab_size = std::max(p.dcm.vocab_size, corpus.vocab.size());
  if (docs.size() == 1) {
    RoseTree tree;
    const Document& d = corpus.docs[docs.front()];
    tree.set_root(tree.add_leaf({docs.front()}, d.title.empty() ? d.id : d.title));
    return tree;
  }
  return Agglomerator(corpus, docs, constraints, p).run(control);
}

RoseTree cluster(const Corpus& corpus, std::span<const TripleFan> constraints, const BrtParams& params,
                 const ClusterControl* control) {
  std::vector<DocIndex> docs(corpus.docs.size());
  std::iota(docs.begin(), docs.end(), DocIndex{0});
  return cluster(corpus, docs, constraints, params, control);
}

RoseTree rebuild_subtree(const RoseTree& tree, NodeId node, const Corpus& corpus, const BrtParams& params,
                         const ClusterControl* control) {
  if (!tree.contains(node)) throw Error(ErrorCode::NodeNotFound, "node " + std::to_string(node) + " not found");
  const auto docs = tree.docs_under(node);
  if (docs.size() < 2) {
    throw Error(ErrorCode::TooFewDocuments, "node " + std::to_string(node) + " holds fewer than two documents");
  }
  BrtParams unconstrained = params;
  unconstrained.lambda = 0;
  RoseTree sub = cluster(corpus, docs, {}, unconstrained, control);

  RoseTree out = tree;
  TreeNode& target = out.node(node);
  for (NodeId c : std::vector<NodeId>(target.children)) {
    out.detach(c);
    out.kill_subtree(c);
  }
  out.node(node).docs.clear();
  out.node(node).merge = sub.node(sub.root()).merge;
  out.node(node).uncertainty.reset();
  out.set_partial(tree.partial() || sub.partial());

  // copy sub's structure under `node`
  std::vector<std::pair<NodeId, NodeId>> stack{{sub.root(), node}};
  while (!stack.empty()) {
    const auto [from, to] = stack.back();
    stack.pop_back();
    const TreeNode& src = sub.node(from);
    if (src.is_leaf()) {
      out.node(to).docs = src.docs;
      continue;
    }
    for (NodeId c : src.children) {
      const TreeNode& child = sub.node(c);
      const NodeId nid = out.add_node(child.label);
      out.node(nid).merge = child.merge;
      out.attach(to, nid);
      stack.emplace_back(c, nid);
    }
  }
  return out;
}

Scalar log_evidence(const RoseTree& tree, NodeId node, const Corpus& corpus, const BrtParams& params) {
  DcmParams dcm = params.dcm;
  dcm.vocab_size = std::max(dcm.vocab_size, corpus.vocab.size());
  const auto docs = tree.docs_under(node);
  std::vector<const Document*> members;
  for (DocIndex d : docs) members.push_back(&corpus.docs[d]);
  const Scalar log_f = log_cluster_marginal(make_stats(members), members, dcm);
  const TreeNode& n = tree.node(node);
  if (n.children.size() < 2) {
    if (n.children.empty()) return log_f;
    return log_evidence(tree, n.children.front(), corpus, params);
  }
  Scalar child_sum = 0;
  for (NodeId c : n.children) child_sum += log_evidence(tree, c, corpus, params);
  const Scalar pi = pi_prior(n.children.size(), params.pi0);
  return log_add_exp(std::log(pi) + log_f, std::log1p(-pi) + child_sum);
}

std::string top_terms_label(const SparseCounts& pooled, const Vocabulary& vocab, std::size_t k) {
  std::vector<std::pair<std::int64_t, TermId>> ranked;
  ranked.reserve(pooled.size());
  for (const auto& [t, c] : pooled) ranked.emplace_back(-c, t);
  const std::size_t m = std::min(k, ranked.size());
  std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(m), ranked.end());
  std::string label;
  for (std::size_t i = 0; i < m; ++i) {
    if (i) label += ' ';
    label += ranked[i].second < vocab.size() ? vocab.term(ranked[i].second) : std::to_string(ranked[i].second);
  }
  return label;
}

}  // namespace steer
