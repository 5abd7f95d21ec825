#include "steer/layout.hpp"

#include "steer/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <queue>
#include <random>

namespace steer {

Scalar similarity_cost(std::span<const std::size_t> order, const Mat& cosines) {
  Scalar s = 0;
  for (std::size_t i = 1; i < order.size(); ++i) s -= cosines(order[i - 1], order[i]);
  return s;
}

Scalar similarity_cost(std::span<const std::size_t> order, std::span<const Vec> vectors) {
  Scalar s = 0;
  for (std::size_t i = 1; i < order.size(); ++i) {
    s -= cosine_similarity(vectors[order[i - 1]], vectors[order[i]]);
  }
  return s;
}

namespace {

Mat crossings(const Mat& counts) {
  const auto k = counts.rows(), m = counts.cols();
  Mat cross = Mat::Zero(k, k);
  if (m < 2) return cross;
  // suffix(j, l): docs of child j in categories below l
  Mat below = Mat::Zero(k, m);
  for (Eigen::Index j = 0; j < k; ++j)
    for (Eigen::Index l = 1; l < m; ++l) below(j, l) = below(j, l - 1) + counts(j, l - 1);
  for (Eigen::Index i = 0; i < k; ++i)
    for (Eigen::Index j = 0; j < k; ++j) {
      if (i == j) continue;
      Scalar c = 0;
      for (Eigen::Index l = 1; l < m; ++l) c += counts(i, l) * below(j, l);
      cross(i, j) = c;
    }
  return cross;
}

Scalar pair_stability(std::size_t a, std::size_t b, std::span<const std::size_t> order, std::span<const Scalar> prev) {
  return std::abs((static_cast<Scalar>(a) - static_cast<Scalar>(b)) - (prev[order[a]] - prev[order[b]]));
}

}  // namespace

Scalar readability_cost(std::span<const std::size_t> order, const Mat& counts) {
  const Mat cross = crossings(counts);
  Scalar s = 0;
  for (std::size_t a = 0; a < order.size(); ++a)
    for (std::size_t b = a + 1; b < order.size(); ++b) s += cross(order[a], order[b]);
  return s;
}

Scalar stability_cost(std::span<const std::size_t> order, std::span<const Scalar> previous) {
  Scalar s = 0;
  for (std::size_t a = 0; a < order.size(); ++a)
    for (std::size_t b = a + 1; b < order.size(); ++b) s += pair_stability(a, b, order, previous);
  return s;
}

OrderingCost::OrderingCost(const OrderingProblem& problem, const LayoutWeights& weights) : p_(problem), w_(weights) {
  k_ = static_cast<std::size_t>(std::max({problem.cosines.rows(), problem.counts.rows(),
                                          static_cast<Eigen::Index>(problem.previous.size())}));
  if (problem.counts.size() > 0) cross_ = crossings(problem.counts);
  std::vector<std::size_t> id(k_);
  std::iota(id.begin(), id.end(), 0);
  auto norm = [](Scalar v) { return v == 0 ? Scalar(1) : std::abs(v); };
  if (p_.cosines.size() > 0) ns_ = norm(similarity_cost(id, p_.cosines));
  if (cross_.size() > 0) {
    Scalar r = 0;
    for (std::size_t a = 0; a < k_; ++a)
      for (std::size_t b = a + 1; b < k_; ++b) r += cross_(a, b);
    nr_ = norm(r);
  }
  if (!p_.previous.empty()) nt_ = norm(stability_cost(id, p_.previous));
}

Scalar OrderingCost::operator()(std::span<const std::size_t> order) const {
  Scalar total = 0;
  if (p_.cosines.size() > 0 && w_.similarity != 0) total += w_.similarity * similarity_cost(order, p_.cosines) / ns_;
  if (cross_.size() > 0 && w_.readability != 0) {
    Scalar r = 0;
    for (std::size_t a = 0; a < order.size(); ++a)
      for (std::size_t b = a + 1; b < order.size(); ++b) r += cross_(order[a], order[b]);
    total += w_.readability * r / nr_;
  }
  if (!p_.previous.empty() && w_.stability != 0) total += w_.stability * stability_cost(order, p_.previous) / nt_;
  return total;
}

namespace {

// Terms touching positions [lo, hi]; the rest of the cost is unchanged by a
// move that only permutes that range.
class RangeCost {
 public:
  RangeCost(const OrderingProblem& p, const LayoutWeights& w, const Mat& cross, Scalar ns, Scalar nr, Scalar nt)
      : p_(p), w_(w), cross_(cross), ns_(ns), nr_(nr), nt_(nt) {}

  Scalar operator()(std::span<const std::size_t> order, std::size_t lo, std::size_t hi) const {
    const std::size_t k = order.size();
    Scalar total = 0;
    if (p_.cosines.size() > 0 && w_.similarity != 0) {
      Scalar s = 0;
      for (std::size_t a = lo == 0 ? 1 : lo; a <= std::min(hi + 1, k - 1); ++a) s -= p_.cosines(order[a - 1], order[a]);
      total += w_.similarity * s / ns_;
    }
    const bool read = cross_.size() > 0 && w_.readability != 0;
    const bool stab = !p_.previous.empty() && w_.stability != 0;
    if (!read && !stab) return total;
    Scalar r = 0, t = 0;
    for (std::size_t a = lo; a <= hi; ++a) {
      for (std::size_t b = 0; b < k; ++b) {
        if (b >= lo && b <= hi && b <= a) continue;  // in-range pairs once
        const std::size_t x = std::min(a, b), y = std::max(a, b);
        if (read) r += cross_(order[x], order[y]);
        if (stab) t += pair_stability(x, y, order, p_.previous);
      }
    }
    if (read) total += w_.readability * r / nr_;
    if (stab) total += w_.stability * t / nt_;
    return total;
  }

 private:
  const OrderingProblem& p_;
  const LayoutWeights& w_;
  const Mat& cross_;
  Scalar ns_, nr_, nt_;
};

struct Move {
  bool swap;
  std::size_t from, to;
  std::size_t lo() const { return std::min(from, to); }
  std::size_t hi() const { return std::max(from, to); }
};

Move propose(std::size_t k, Scalar swap_p, std::mt19937_64& rng) {
  std::uniform_real_distribution<Scalar> u(0, 1);
  if (u(rng) < swap_p) {
    const std::size_t a = std::uniform_int_distribution<std::size_t>(0, k - 2)(rng);
    return {true, a, a + 1};
  }
  std::uniform_int_distribution<std::size_t> pos(0, k - 1);
  std::size_t from = pos(rng), to = pos(rng);
  while (to == from) to = pos(rng);
  return {false, from, to};
}

void apply_move(std::vector<std::size_t>& order, const Move& m) {
  if (m.swap) {
    std::swap(order[m.from], order[m.to]);
  } else if (m.from < m.to) {
    std::rotate(order.begin() + static_cast<std::ptrdiff_t>(m.from), order.begin() + static_cast<std::ptrdiff_t>(m.from) + 1,
                order.begin() + static_cast<std::ptrdiff_t>(m.to) + 1);
  } else {
    std::rotate(order.begin() + static_cast<std::ptrdiff_t>(m.to), order.begin() + static_cast<std::ptrdiff_t>(m.from),
                order.begin() + static_cast<std::ptrdiff_t>(m.from) + 1);
  }
}

void undo_move(std::vector<std::size_t>& order, const Move& m) {
  if (m.swap) {
    apply_move(order, m);
  } else {
    apply_move(order, Move{false, m.to, m.from});
  }
}

}  // namespace

OrderingResult anneal_order(const OrderingProblem& problem, const LayoutWeights& weights, std::uint64_t seed,
                            const AnnealParams& params) {
  const OrderingCost cost(problem, weights);
  const std::size_t k = cost.size();
  OrderingResult out;
  out.order.resize(k);
  std::iota(out.order.begin(), out.order.end(), 0);
  out.initial_cost = out.cost = cost(out.order);
  if (k <= 1) return out;
  if (k == 2) {
    const std::vector<std::size_t> rev{1, 0};
    if (const Scalar c = cost(rev); c < out.cost) {
      out.order = rev;
      out.cost = c;
    }
    return out;
  }

  // normalizers match OrderingCost; rebuilt here for range evaluation
  Mat cross = problem.counts.size() > 0 ? crossings(problem.counts) : Mat();
  std::vector<std::size_t> id(k);
  std::iota(id.begin(), id.end(), 0);
  auto norm = [](Scalar v) { return v == 0 ? Scalar(1) : std::abs(v); };
  const Scalar ns = problem.cosines.size() > 0 ? norm(similarity_cost(id, problem.cosines)) : 1;
  const Scalar nr = cross.size() > 0 ? norm(readability_cost(id, problem.counts)) : 1;
  const Scalar nt = !problem.previous.empty() ? norm(stability_cost(id, problem.previous)) : 1;
  const RangeCost range(problem, weights, cross, ns, nr, nt);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<Scalar> u(0, 1);
  auto delta = [&](std::vector<std::size_t>& order, const Move& m) {
    const Scalar before = range(order, m.lo(), m.hi());
    apply_move(order, m);
    const Scalar after = range(order, m.lo(), m.hi());
    return after - before;
  };

  // T0 from the mean uphill step along a short random walk; probing only
  // around the identity sees no uphill moves when it is a local maximum
  Scalar uphill = 0;
  std::size_t ups = 0;
  {
    auto probe = out.order;
    for (int i = 0; i < 100; ++i) {
      const Scalar d = delta(probe, propose(k, params.swap_probability, rng));
      if (d > 0) {
        uphill += d;
        ++ups;
      }
    }
  }
  Scalar T = ups ? -(uphill / static_cast<Scalar>(ups)) / std::log(params.initial_acceptance) : 1e-12;

  auto cur = out.order;
  Scalar cur_cost = out.cost;
  std::size_t rejections = 0;
  for (std::size_t it = 0; it < params.max_proposals && rejections < params.max_rejections; ++it) {
    const Move m = propose(k, params.swap_probability, rng);
    const Scalar d = delta(cur, m);
    if (d <= 0 || u(rng) < std::exp(-d / T)) {
      cur_cost += d;
      rejections = 0;
      if (cur_cost < out.cost - 1e-12) {
        out.cost = cur_cost;
        out.order = cur;
      }
    } else {
      undo_move(cur, m);
      ++rejections;
    }
    if ((it + 1) % 50 == 0) T *= params.cooling;
  }
  out.cost = cost(out.order);  // drop accumulated rounding
  if (out.cost > out.initial_cost) {
    std::iota(out.order.begin(), out.order.end(), 0);
    out.cost = out.initial_cost;
  }
  return out;
}

std::map<DocIndex, std::size_t> first_level_categories(const RoseTree& constraint, std::span<const NodeId> order) {
  std::map<DocIndex, std::size_t> out;
  for (std::size_t i = 0; i < order.size(); ++i)
    for (DocIndex d : constraint.docs_under(order[i])) out[d] = i;
  return out;
}

namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

}  // namespace

Ordering optimize_ordering(const RoseTree& tree, const Eigen::SparseMatrix<Scalar, Eigen::RowMajor>& doc_vectors,
                           const std::map<DocIndex, std::size_t>& categories, std::size_t category_count,
                           const Ordering* previous, const LayoutWeights& weights, std::uint64_t seed,
                           const AnnealParams& params) {
  Ordering out;
  if (tree.empty()) return out;
  for (NodeId p : tree.preorder()) {
    const auto& node = tree.node(p);
    if (node.is_leaf()) continue;
    const auto& kids = node.children;
    const std::size_t k = kids.size();
    OrderingProblem problem;

    Mat dirs(static_cast<Eigen::Index>(k), doc_vectors.cols());
    dirs.setZero();
    if (category_count > 0) problem.counts = Mat::Zero(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(category_count));
    for (std::size_t i = 0; i < k; ++i) {
      for (DocIndex d : tree.docs_under(kids[i])) {
        if (d < static_cast<DocIndex>(doc_vectors.rows())) dirs.row(static_cast<Eigen::Index>(i)) += doc_vectors.row(d);
        if (category_count > 0) {
          auto it = categories.find(d);
          if (it != categories.end()) problem.counts(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(it->second)) += 1;
        }
      }
      const Scalar n = dirs.row(static_cast<Eigen::Index>(i)).norm();
      if (n > 0) dirs.row(static_cast<Eigen::Index>(i)) /= n;
    }
    problem.cosines = dirs * dirs.transpose();

    if (previous) {
      auto it = previous->find(p);
      if (it != previous->end()) {
        problem.previous.resize(k);
        for (std::size_t i = 0; i < k; ++i) {
          auto at = std::find(it->second.begin(), it->second.end(), kids[i]);
          problem.previous[i] = at == it->second.end() ? static_cast<Scalar>(i)
                                                       : static_cast<Scalar>(at - it->second.begin());
        }
      }
    }
    const auto result = anneal_order(problem, weights, mix(seed ^ mix(p)), params);
    auto& ordered = out[p];
    for (std::size_t i : result.order) ordered.push_back(kids[i]);
  }
  return out;
}

void apply_ordering(RoseTree& tree, const Ordering& ordering) {
  for (const auto& [p, kids] : ordering) {
    if (!tree.contains(p)) continue;
    auto& cur = tree.node(p).children;
    auto sorted_cur = cur, sorted_new = kids;
    std::sort(sorted_cur.begin(), sorted_cur.end());
    std::sort(sorted_new.begin(), sorted_new.end());
    if (sorted_cur != sorted_new) throw Error(ErrorCode::InvalidArgument, "ordering does not match the children of node " + std::to_string(p));
    cur = kids;
  }
}

std::vector<Scalar> degree_of_interest(const RoseTree& tree, NodeId focus, const DoiParams& params) {
  if (!tree.contains(focus)) throw Error(ErrorCode::FocusNotFound, "focus node " + std::to_string(focus) + " not in tree");
  const auto order = tree.preorder();
  std::vector<std::size_t> docs(tree.arena_size(), 0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const auto& n = tree.node(*it);
    docs[*it] = n.docs.size();
    for (NodeId c : n.children) docs[*it] += docs[c];
  }
  const Scalar total = std::max<Scalar>(1, static_cast<Scalar>(docs[tree.root()]));

  std::vector<std::size_t> hops(tree.arena_size(), static_cast<std::size_t>(-1));
  std::queue<NodeId> q;
  hops[focus] = 0;
  q.push(focus);
  while (!q.empty()) {
    const NodeId v = q.front();
    q.pop();
    const auto& n = tree.node(v);
    auto visit = [&](NodeId w) {
      if (w != kNoNode && hops[w] == static_cast<std::size_t>(-1)) {
        hops[w] = hops[v] + 1;
        q.push(w);
      }
    };
    visit(n.parent);
    for (NodeId c : n.children) visit(c);
  }

  std::vector<Scalar> doi(tree.arena_size(), -INFINITY);
  for (NodeId v : order) {
    const auto& n = tree.node(v);
    const Scalar u = n.uncertainty ? n.uncertainty->overall : 0;
    const Scalar api = params.api_max * static_cast<Scalar>(docs[v]) / total * u;
    doi[v] = api - static_cast<Scalar>(hops[v]);
  }
  return doi;
}

DoiCut doi_cut(const RoseTree& tree, NodeId focus, const std::set<NodeId>& pinned, const DoiParams& params) {
  const auto doi = degree_of_interest(tree, focus, params);
  DoiCut cut;
  cut.focus = focus;
  auto order = tree.preorder();
  std::stable_sort(order.begin(), order.end(), [&](NodeId a, NodeId b) {
    if (doi[a] != doi[b]) return doi[a] > doi[b];
    return a < b;
  });
  std::vector<NodeId> seeds(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(std::min(params.budget, order.size())));
  seeds.push_back(focus);
  seeds.push_back(tree.root());
  for (NodeId p : pinned) {
    if (!tree.contains(p)) throw Error(ErrorCode::NodeNotFound, "pinned node " + std::to_string(p) + " not in tree");
    cut.pinned.insert(p);
    seeds.push_back(p);
  }
  for (NodeId v : seeds)
    for (NodeId a = v; a != kNoNode && cut.visible.insert(a).second; a = tree.node(a).parent) {
    }
  for (NodeId v : tree.preorder()) {
    if (cut.visible.count(v)) continue;
    const NodeId p = tree.node(v).parent;
    if (p != kNoNode && cut.visible.count(p)) cut.collapsed.insert(v);
  }
  return cut;
}

nlohmann::json layout_to_json(const Ordering& ordering, const DoiCut& cut) {
  nlohmann::json order = nlohmann::json::object();
  for (const auto& [p, kids] : ordering) order[std::to_string(p)] = kids;
  return {{"order", std::move(order)},
          {"visible", std::vector<NodeId>(cut.visible.begin(), cut.visible.end())},
          {"collapsed", std::vector<NodeId>(cut.collapsed.begin(), cut.collapsed.end())},
          {"focus", cut.focus},
          {"pinned", std::vector<NodeId>(cut.pinned.begin(), cut.pinned.end())}};
}

}  // namespace steer
