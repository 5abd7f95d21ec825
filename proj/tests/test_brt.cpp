#include "doctest.h"
#include "oracles.hpp"
#include "support.hpp"

#include "steer/brt.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

using namespace steer;
using namespace steer::testing;

namespace {

using Sid = ForestState::SubtreeId;


Scalar log_f_of(const Corpus& c, const std::vector<DocIndex>& docs, const DcmParams& p) {
  std::vector<const Document*> m;
  for (DocIndex d : docs) m.push_back(&c.docs[d]);
  return log_cluster_marginal(make_stats(m), m, p);
}

// Non-recursive evidence: sum over all cuts of the tree.
Scalar cut_oracle(const RoseTree& t, const Corpus& c, const BrtParams& p) {
  const auto nodes = t.preorder();
  const std::size_t k = nodes.size();
  REQUIRE(k <= 16);
  std::map<NodeId, std::size_t> pos;
  for (std::size_t i = 0; i < k; ++i) pos[nodes[i]] = i;
  Scalar total = -INFINITY;
  for (std::uint32_t mask = 1; mask < (1u << k); ++mask) {
    bool valid = true;
    std::vector<bool> above(k, false);
    for (NodeId n : nodes) {
      if (!t.node(n).is_leaf()) continue;
      int hits = 0;
      for (NodeId a = n; a != kNoNode; a = t.node(a).parent) hits += (mask >> pos[a]) & 1;
      if (hits != 1) valid = false;
    }
    if (!valid) continue;
    Scalar w = 0;
    for (std::size_t i = 0; i < k; ++i) {
      if (!((mask >> i) & 1)) continue;
      const TreeNode& n = t.node(nodes[i]);
      w += std::log(pi_prior(n.children.size(), p.pi0)) + log_f_of(c, t.docs_under(nodes[i]), p.dcm);
      for (NodeId a = n.parent; a != kNoNode; a = t.node(a).parent) above[pos[a]] = true;
    }
    for (std::size_t i = 0; i < k; ++i)
      if (above[i]) w += std::log1p(-pi_prior(t.node(nodes[i]).children.size(), p.pi0));
    total = log_add_exp(total, w);
  }
  return total;
}

Corpus random_corpus(std::size_t n, std::size_t vocab, std::mt19937_64& rng) {
  std::vector<std::string> texts;
  for (std::size_t i = 0; i < n; ++i) {
    std::string s;
    const int len = 3 + static_cast<int>(rng() % 10);
    const std::size_t base = (i % 2) * vocab / 2;
    for (int k = 0; k < len; ++k) s += "w" + std::to_string((base + rng() % (vocab / 2 + 2)) % vocab) + " ";
    texts.push_back(s);
  }
  return testing::corpus_from_texts(texts);
}

BrtParams params_for(const Corpus& c, Scalar lambda = 0) {
  BrtParams p;
  p.dcm.vocab_size = c.vocab.size();
  p.lambda = lambda;
  return p;
}

}  // namespace

TEST_CASE("violation examples") {
  const std::vector<DocIndex> docs{0, 1, 2};
  const std::vector<TripleFan> cons{{TripleFan::Kind::Triple, 0, 1, 2}};
  ForestState f(docs, cons);
  CHECK(f.count_new_violations(0, 2, MergeMode::Join) == 1);
  CHECK(f.count_new_violations(0, 1, MergeMode::Join) == 0);
  CHECK_THROWS_AS(f.count_new_violations(0, 1, MergeMode::Collapse), Error);

  const std::vector<TripleFan> fan{{TripleFan::Kind::Fan, 0, 1, 2}};
  ForestState g(docs, fan);
  CHECK(g.count_new_violations(0, 1, MergeMode::Join) == 0);
  const Sid m = g.merge(0, 1, MergeMode::Join);
  CHECK(g.count_new_violations(2, m, MergeMode::AbsorbRight) == 0);
  CHECK(g.count_new_violations(2, m, MergeMode::Join) == 1);
}

TEST_CASE("violation summation oracle") {
  std::mt19937_64 rng(2024);
  for (int rep = 0; rep < 300; ++rep) {
    const std::size_t n = 3 + rng() % 6;
    const RoseTree tc = testing::random_tree(n, rng, 4);
    const auto cons = decompose(tc).items;
    std::vector<DocIndex> docs(n);
    for (std::size_t i = 0; i < n; ++i) docs[i] = static_cast<DocIndex>(i);
    ForestState f(docs, cons);
    std::int64_t sum = 0;
    while (f.active_count() > 1) {
      const auto [l, r, m] = random_merge(f, rng);
      sum += f.count_new_violations(l, r, m);
      f.merge(l, r, m);
    }
    const auto final_tree = f.to_tree();
    CHECK(sum == static_cast<std::int64_t>(cons.size() - preserved(final_tree, cons)));
  }
}

TEST_CASE("evidence equals cut enumeration") {
  std::mt19937_64 rng(77);
  for (int rep = 0; rep < 40; ++rep) {
    const std::size_t n = 4 + rep % 2;
    Corpus c = random_corpus(n, 8, rng);
    const BrtParams p = params_for(c);
    std::vector<DocIndex> docs(n);
    for (std::size_t i = 0; i < n; ++i) docs[i] = static_cast<DocIndex>(i);
    ForestState f(docs, {});
    std::vector<SubtreeEvidence> ev;
    for (DocIndex d : docs) {
      SubtreeEvidence e;
      e.log_f = e.log_p = log_f_of(c, {d}, p.dcm);
      ev.push_back(e);
    }
    while (f.active_count() > 1) {
      const auto [l, r, m] = random_merge(f, rng);
      std::vector<DocIndex> u(f.docs(l).begin(), f.docs(l).end());
      u.insert(u.end(), f.docs(r).begin(), f.docs(r).end());
      const Scalar lf = log_f_of(c, u, p.dcm);
      const Scalar ratio = likelihood_ratio(ev[l], ev[r], lf, m, p.pi0);
      ev.push_back(merged_evidence(ev[l], ev[r], lf, m, p.pi0));
      CHECK(ev.back().log_p - ev[l].log_p - ev[r].log_p == doctest::Approx(ratio));
      f.merge(l, r, m);
    }
    const RoseTree t = f.to_tree();
    const Scalar want = cut_oracle(t, c, p);
    CHECK(ev.back().log_p == doctest::Approx(want).epsilon(1e-10));
    CHECK(log_evidence(t, t.root(), c, p) == doctest::Approx(want).epsilon(1e-10));
  }
}

TEST_CASE("absorb only changes the arity term") {
  SubtreeEvidence host{-10, -12, -11, 3};
  SubtreeEvidence guest{-4, -4, 0, 0};
  const auto a = merged_evidence(host, guest, -15, MergeMode::AbsorbLeft, 0.5);
  CHECK(a.arity == 4);
  CHECK(a.child_sum == doctest::Approx(-15));
  const Scalar pi = pi_prior(4, 0.5);
  CHECK(a.log_p == doctest::Approx(std::log(pi * std::exp(-15.0) + (1 - pi) * std::exp(-15.0))));
  const auto j = merged_evidence(host, guest, -15, MergeMode::Join, 0.5);
  CHECK(j.arity == 2);
  CHECK(j.child_sum == doctest::Approx(-14));
  const auto col = merged_evidence(host, host, -30, MergeMode::Collapse, 0.5);
  CHECK(col.arity == 6);
}

TEST_CASE("merge records match reference evidence") {
  std::mt19937_64 rng(8);
  for (int rep = 0; rep < 5; ++rep) {
    Corpus c = random_corpus(25, 30, rng);
    const BrtParams p = params_for(c);
    const RoseTree t = cluster(c, {}, p);
    for (NodeId id : t.preorder()) {
      const TreeNode& n = t.node(id);
      if (n.is_leaf()) continue;
      REQUIRE(n.merge);
      if (n.merge->mode != MergeMode::Join) continue;
      const Scalar lp = log_evidence(t, id, c, p);
      Scalar rest = 0;
      for (NodeId ch : n.children) rest += log_evidence(t, ch, c, p);
      CHECK(n.merge->log_likelihood_ratio == doctest::Approx(lp - rest).epsilon(1e-9));
    }
  }
}

TEST_CASE("cluster basics") {
  std::mt19937_64 rng(1);
  Corpus c = random_corpus(30, 40, rng);
  const BrtParams p = params_for(c);
  const RoseTree t = cluster(c, {}, p);
  auto all = t.all_docs();
  std::sort(all.begin(), all.end());
  REQUIRE(all.size() == 30);
  for (DocIndex i = 0; i < 30; ++i) CHECK(all[i] == i);
  for (NodeId id : t.preorder()) {
    if (!t.node(id).is_leaf()) CHECK(t.node(id).children.size() >= 2);
    if (t.node(id).is_leaf()) CHECK(t.node(id).docs.size() == 1);
  }

  const auto ids = testing::ids_for(c);
  BrtParams threaded = p;
  threaded.threads = 4;
  CHECK(serialize_tree(cluster(c, {}, threaded), ids) == serialize_tree(t, ids));
  CHECK(serialize_tree(cluster(c, {}, p), ids) == serialize_tree(t, ids));

  Corpus empty;
  CHECK_THROWS_AS(cluster(empty, {}, p), Error);
}

TEST_CASE("lambda zero equals unconstrained") {
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 5; ++rep) {
    Corpus c = random_corpus(30, 40, rng);
    const auto ids = testing::ids_for(c);
    const RoseTree tc = testing::random_tree(30, rng, 4);
    const auto cons = decompose(tc).items;
    const auto a = serialize_tree(cluster(c, cons, params_for(c, 0)), ids);
    const auto b = serialize_tree(cluster(c, {}, params_for(c, 0)), ids);
    CHECK(a == b);
  }
}

TEST_CASE("separable corpus splits at the root") {
  std::mt19937_64 rng(4);
  std::vector<std::string> texts;
  for (int i = 0; i < 20; ++i) {
    std::string s;
    const int base = i < 10 ? 0 : 10;
    for (int k = 0; k < 12; ++k) s += "t" + std::to_string(base + rng() % 10) + " ";
    texts.push_back(s);
  }
  Corpus c = testing::corpus_from_texts(texts);
  const RoseTree t = cluster(c, {}, params_for(c));
  const auto& root = t.node(t.root());
  REQUIRE(root.children.size() == 2);
  for (NodeId ch : root.children) {
    const auto docs = t.docs_under(ch);
    CHECK(docs.size() == 10);
    const bool first = docs.front() < 10;
    for (DocIndex d : docs) CHECK((d < 10) == first);
  }
}

TEST_CASE("large lambda follows constraints") {
  std::mt19937_64 rng(6);
  Corpus c = random_corpus(24, 30, rng);
  const RoseTree tc = testing::random_tree(24, rng, 3);
  const auto cons = decompose(tc).items;
  const RoseTree t = cluster(c, cons, params_for(c, 1e3));
  CHECK(preserved(t, cons) == cons.size());
}

TEST_CASE("rebuild subtree") {
  std::mt19937_64 rng(12);
  Corpus c = random_corpus(12, 20, rng);
  const BrtParams p = params_for(c);
  RoseTree t;
  const NodeId r = t.add_node("root");
  const NodeId pair = t.add_leaf({0, 1}, "pair");
  t.attach(r, pair);
  std::vector<DocIndex> rest;
  for (DocIndex d = 2; d < 12; ++d) rest.push_back(d);
  t.attach(r, t.add_leaf(rest, "rest"));
  t.set_root(r);

  const RoseTree a = rebuild_subtree(t, pair, c, p);
  CHECK(a.node(pair).children.size() == 2);
  CHECK(a.node(pair).label == "pair");
  CHECK(a.node(pair).docs.empty());

  const RoseTree whole = rebuild_subtree(t, r, c, p);
  CHECK(whole.root() == r);
  const auto ids = testing::ids_for(c);
  const RoseTree direct = cluster(c, {}, p);
  // same shape as clustering from scratch
  auto sig = [&](const RoseTree& x) {
    std::function<std::string(NodeId)> rec = [&](NodeId n) {
      const auto& nd = x.node(n);
      if (nd.is_leaf()) return std::to_string(nd.docs.front());
      std::string s = "(";
      for (NodeId ch : nd.children) s += rec(ch) + ",";
      return s + ")";
    };
    return rec(x.root());
  };
  CHECK(sig(whole) == sig(direct));

  CHECK_THROWS_AS(rebuild_subtree(t, 99, c, p), Error);
  RoseTree one = t;
  const NodeId solo = one.add_leaf({}, "x");
  one.attach(r, solo);
  CHECK_THROWS_AS(rebuild_subtree(one, solo, c, p), Error);
}

TEST_CASE("cancel yields partial tree") {
  std::mt19937_64 rng(13);
  Corpus c = random_corpus(300, 60, rng);
  std::atomic<bool> cancel{true};
  ClusterControl ctl;
  ctl.cancel = &cancel;
  const RoseTree t = cluster(c, {}, params_for(c), &ctl);
  CHECK(t.partial());
  CHECK(t.all_docs().size() == 300);
}
