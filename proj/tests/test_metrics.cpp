#include "doctest.h"
#include "oracles.hpp"

#include "steer/metrics.hpp"
#include "steer/synth.hpp"
#include "support.hpp"

#include <cmath>
#include <random>
#include <set>

using namespace steer;
using namespace steer::testing;
using steer::testing::random_tree;

namespace {

RoseTree shuffled(const RoseTree& t, std::mt19937_64& rng) {
  RoseTree out;
  std::function<NodeId(NodeId)> copy = [&](NodeId id) -> NodeId {
    const auto& n = t.node(id);
    if (n.is_leaf()) {
      auto docs = n.docs;
      std::shuffle(docs.begin(), docs.end(), rng);
      return out.add_leaf(docs);
    }
    auto kids = n.children;
    std::shuffle(kids.begin(), kids.end(), rng);
    const NodeId m = out.add_node();
    for (NodeId c : kids) out.attach(m, copy(c));
    return m;
  };
  out.set_root(copy(t.root()));
  return out;
}

}  // namespace

TEST_CASE("metrics of a tree against itself") {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 100; ++i) {
    const auto n = 3 + rng() % 40;
    auto t = random_tree(n, rng, 4, i % 2 == 0);
    CHECK(triple_fan_accuracy(t, t) == 1.0);
    CHECK(average_nmi(t, t).average == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("triple vs fan mismatch scores zero") {
  RoseTree truth;
  const NodeId r = truth.add_node();
  const NodeId ab = truth.add_node();
  truth.attach(ab, truth.add_leaf({0}));
  truth.attach(ab, truth.add_leaf({1}));
  truth.attach(r, ab);
  truth.attach(r, truth.add_leaf({2}));
  truth.set_root(r);
  RoseTree flat;
  const NodeId f = flat.add_node();
  for (DocIndex d = 0; d < 3; ++d) flat.attach(f, flat.add_leaf({d}));
  flat.set_root(f);
  CHECK(triple_fan_accuracy(flat, truth) == 0.0);
  CHECK(triple_fan_accuracy(truth, flat) == 0.0);
}

TEST_CASE("accuracy equals the exhaustive 84-triplet oracle") {
  std::mt19937_64 rng(8);
  for (int i = 0; i < 200; ++i) {
    auto a = random_tree(9, rng, 4, i % 3 == 0);
    auto b = random_tree(9, rng, 3, i % 5 == 0);
    CHECK(triple_fan_accuracy(a, b) == doctest::Approx(exhaustive_accuracy(a, b, 9)).epsilon(1e-12));
  }
}

TEST_CASE("accuracy is restricted to shared documents") {
  std::mt19937_64 rng(4);
  auto a = random_tree(12, rng);
  RoseTree b;
  const NodeId r = b.add_node();
  b.attach(r, b.add_leaf({0, 1}));
  b.attach(r, b.add_leaf({2, 40}));
  b.set_root(r);
  // shared docs {0,1,2}; the truth says (01|2)
  const auto p = paths(a, 12);
  CHECK(triple_fan_accuracy(a, b) == (shape(p, 0, 1, 2) == 3 ? 1.0 : 0.0));
  RoseTree tiny;
  tiny.set_root(tiny.add_leaf({0, 1}));
  CHECK_THROWS_AS(triple_fan_accuracy(a, tiny), Error);
}

TEST_CASE("sampled accuracy stays near the exhaustive value") {
  std::mt19937_64 rng(21);
  for (int i = 0; i < 20; ++i) {
    const auto n = 9 + rng() % 22;
    auto a = random_tree(n, rng);
    auto b = random_tree(n, rng, 3);
    const Scalar exact = exhaustive_accuracy(a, b, n);
    const Scalar sampled = triple_fan_accuracy(a, b, 1500, i);
    CHECK(std::abs(sampled - exact) <= 0.03);
  }
}

TEST_CASE("metrics ignore child order") {
  std::mt19937_64 rng(6);
  for (int i = 0; i < 30; ++i) {
    auto a = random_tree(15, rng, 4, true);
    auto b = random_tree(15, rng, 4, true);
    auto a2 = shuffled(a, rng), b2 = shuffled(b, rng);
    CHECK(triple_fan_accuracy(a2, b2) == doctest::Approx(triple_fan_accuracy(a, b)));
    CHECK(average_nmi(a2, b2).average == doctest::Approx(average_nmi(a, b).average));
  }
}

TEST_CASE("nmi closed forms") {
  std::vector<std::uint32_t> x{0, 0, 0, 1, 1, 1}, y{0, 0, 1, 1, 2, 2};
  CHECK(nmi(x, y) == doctest::Approx((4.0 / 3.0) * std::log(2.0) / (std::log(2.0) + std::log(3.0))));
  // product partition: independent
  std::vector<std::uint32_t> u{0, 0, 1, 1}, v{0, 1, 0, 1};
  CHECK(std::abs(nmi(u, v)) < 1e-9);
  std::vector<std::uint32_t> one(5, 7), other(5, 3);
  CHECK(nmi(one, other) == 1.0);
}

TEST_CASE("average nmi on a two-layer hand case") {
  // candidate: root -> {P -> {[0,1], [2,3]}, [4,5]}
  RoseTree cand;
  const NodeId cr = cand.add_node(), cp = cand.add_node();
  cand.attach(cp, cand.add_leaf({0, 1}));
  cand.attach(cp, cand.add_leaf({2, 3}));
  cand.attach(cr, cp);
  cand.attach(cr, cand.add_leaf({4, 5}));
  cand.set_root(cr);
  // truth: root -> {X -> {[0,1], [2]}, Y -> {[3], [4,5]}}
  RoseTree truth;
  const NodeId tr = truth.add_node(), tx = truth.add_node(), ty = truth.add_node();
  truth.attach(tx, truth.add_leaf({0, 1}));
  truth.attach(tx, truth.add_leaf({2}));
  truth.attach(ty, truth.add_leaf({3}));
  truth.attach(ty, truth.add_leaf({4, 5}));
  truth.attach(tr, tx);
  truth.attach(tr, ty);
  truth.set_root(tr);

  const Scalar l2 = std::log(2.0), l3 = std::log(3.0), l6 = std::log(6.0);
  // layer 1: cand {0123 | 45}, truth {012 | 345}
  const Scalar i1 = 0.5 * std::log(1.5) + std::log(0.5) / 6 + l2 / 3;
  const Scalar h1 = -(2.0 / 3 * std::log(2.0 / 3) + 1.0 / 3 * std::log(1.0 / 3)) + l2;
  // layer 2: cand {01|23|45}, truth {01|2|3|45}
  const Scalar i2 = l3;
  const Scalar h2 = l3 + 2.0 / 3 * l3 + l6 / 3;
  auto got = average_nmi(cand, truth);
  REQUIRE(got.layers.size() == 2);
  CHECK(got.layers[0] == doctest::Approx(2 * i1 / h1));
  CHECK(got.layers[1] == doctest::Approx(2 * i2 / h2));
  CHECK(got.average == doctest::Approx((2 * i1 / h1 + 2 * i2 / h2) / 2));
}

TEST_CASE("synthetic generator") {
  SynthConfig cfg;
  auto a = synth(cfg);
  auto b = synth(cfg);
  CHECK(corpus_checksum(a.corpus) == corpus_checksum(b.corpus));
  CHECK(a.kb == b.kb);
  CHECK(corpus_checksum(a.corpus) == 0x118035caaa0bb1afull);
  CHECK(a.corpus.docs.size() == 9 * cfg.docs_per_leaf);
  CHECK(a.leaf_names.size() == 9);

  // truth leaves hold exactly the documents of their generator leaf
  const auto truth_leaves = [&] {
    std::vector<std::vector<DocIndex>> out;
    for (NodeId id : a.truth.preorder())
      if (a.truth.node(id).is_leaf()) out.push_back(a.truth.node(id).docs);
    return out;
  }();
  REQUIRE(truth_leaves.size() == 9);
  for (const auto& docs : truth_leaves) {
    CHECK(docs.size() == cfg.docs_per_leaf);
    for (DocIndex d : docs) CHECK(a.doc_leaf[d] == a.doc_leaf[docs.front()]);
  }
  // kb: root + 3 + 9 real nodes plus two distractor subtrees of 1 + 3
  CHECK(a.kb["nodes"].size() == 1 + 3 + 9 + 2 * 4);
  for (const auto& n : a.kb["nodes"]) CHECK(n["docs"].size() == cfg.kb_docs_per_node);

  cfg.seed = 43;
  CHECK(corpus_checksum(synth(cfg).corpus) != corpus_checksum(a.corpus));
}

TEST_CASE("synthetic limits") {
  SynthConfig cfg;
  cfg.concentration = 1e9;
  cfg.noise = 0;
  auto tight = synth(cfg);
  for (std::size_t i = 1; i < tight.leaf_profiles.size(); ++i) {
    CHECK((tight.leaf_profiles[i] - tight.leaf_profiles[0]).lpNorm<1>() < 0.01);
  }

  SynthConfig two;
  two.branching = {2};
  two.disjoint_support = true;
  two.vocab = 50;
  auto d = synth(two);
  std::set<std::string> seen[2];
  for (DocIndex i = 0; i < d.corpus.docs.size(); ++i)
    for (const auto& [t, c] : d.corpus.docs[i].counts) seen[d.doc_leaf[i]].insert(d.corpus.vocab.term(t));
  for (const auto& w : seen[0]) CHECK(seen[1].count(w) == 0);

  SynthConfig bad;
  bad.noise = 2;
  CHECK_THROWS_AS(synth(bad), Error);
}
