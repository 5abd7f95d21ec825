#include "doctest.h"
#include "oracles.hpp"
#include "support.hpp"

#include "steer/dcm.hpp"

#include <mpfr.h>

#include <cmath>
#include <map>
#include <random>

using namespace steer;
using namespace steer::testing;

namespace {

}  // namespace

TEST_CASE("dcm closed forms") {
  DcmParams p;
  p.vocab_size = 7;
  SparseCounts single{{3, 1}};
  CHECK(log_dcm_counts(single, {}, p) == doctest::Approx(-std::log(7.0)));
  CHECK(log_dcm_counts({}, {{1, 4}}, p) == 0);

  Document empty;
  CHECK_THROWS_AS(log_dcm_doc_given_node(empty, {}, p), Error);

  // doc {a:2, b:1}, node {a:10}, W=3, alpha=0.01, kappa=1
  DcmParams q;
  q.vocab_size = 3;
  q.kappa = 1;
  const SparseCounts doc{{0, 2}, {1, 1}};
  const SparseCounts node{{0, 10}};
  CHECK(log_dcm_counts(doc, node, q) == doctest::Approx(polya_oracle(doc, node, 3, 0.01, 1)).epsilon(1e-12));
  // hand value: A = 1.03, a_a = 1.01, a_b = 0.01
  const double hand = std::log(1.01 * 2.01 * 0.01) - std::log(1.03 * 2.03 * 3.03);
  CHECK(log_dcm_counts(doc, node, q) == doctest::Approx(hand).epsilon(1e-12));
}

TEST_CASE("cluster marginal") {
  Corpus c = testing::corpus_from_texts({"x", "x"});
  DcmParams p;
  p.vocab_size = 5;
  std::vector<const Document*> m{&c.docs[0], &c.docs[1]};
  // each doc conditioned on the other: (alpha + kappa) / (W alpha + kappa)
  const double one = std::log((0.01 + 100) / (5 * 0.01 + 100));
  CHECK(log_cluster_marginal(make_stats(m), m, p) == doctest::Approx(2 * one).epsilon(1e-12));

  std::vector<const Document*> s{&c.docs[0]};
  CHECK(log_cluster_marginal(make_stats(s), s, p) == doctest::Approx(log_dcm_counts(c.docs[0].counts, {}, p)));

  Corpus c3 = testing::corpus_from_texts({"a b b", "c a", "b b b d"});
  std::vector<const Document*> fwd{&c3.docs[0], &c3.docs[1], &c3.docs[2]};
  std::vector<const Document*> rev{&c3.docs[2], &c3.docs[0], &c3.docs[1]};
  p.vocab_size = c3.vocab.size();
  CHECK(log_cluster_marginal(make_stats(fwd), fwd, p) == doctest::Approx(log_cluster_marginal(make_stats(rev), rev, p)));

  p.conditioning = DcmConditioning::Full;
  CHECK(log_cluster_marginal(make_stats(s), s, p) == doctest::Approx(log_dcm_counts(c.docs[0].counts, c.docs[0].counts, p)));
}

TEST_CASE("pi prior") {
  CHECK(pi_prior(2, 0.5) == 0.5);
  CHECK(pi_prior(3, 0.5) == 0.75);
  CHECK(pi_prior(5, 1 - 1e-12) == doctest::Approx(1.0));
}

TEST_CASE("dcm monotone in kappa") {
  DcmParams lo, hi;
  lo.vocab_size = hi.vocab_size = 10;
  lo.kappa = 1;
  hi.kappa = 50;
  const SparseCounts doc{{1, 3}, {4, 1}};
  const SparseCounts node{{1, 5}, {2, 7}, {4, 2}};
  CHECK(log_dcm_counts(doc, node, hi) > log_dcm_counts(doc, node, lo));
}

TEST_CASE("dcm against arbitrary precision oracle") {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 200; ++i) {
    std::uniform_int_distribution<std::size_t> wd(2, 2000);
    const std::size_t w = wd(rng);
    DcmParams p;
    p.vocab_size = w;
    p.alpha = std::uniform_real_distribution<double>(0.001, 1.0)(rng);
    p.kappa = std::uniform_real_distribution<double>(0.1, 500.0)(rng);
    std::uniform_int_distribution<TermId> term(0, static_cast<TermId>(w - 1));
    std::map<TermId, std::int64_t> d, n;
    const std::int64_t len = i % 10 == 0 ? 100000 : std::uniform_int_distribution<std::int64_t>(1, 300)(rng);
    const int spread = std::uniform_int_distribution<int>(1, 40)(rng);
    std::vector<TermId> pool;
    for (int k = 0; k < spread; ++k) pool.push_back(term(rng));
    for (std::int64_t k = 0; k < len; ++k) ++d[pool[rng() % pool.size()]];
    for (int k = 0; k < 50; ++k) n[k % 2 ? pool[rng() % pool.size()] : term(rng)] += 1 + rng() % 20;
    const SparseCounts doc(d.begin(), d.end()), node(n.begin(), n.end());
    const double want = polya_oracle(doc, node, w, p.alpha, p.kappa);
    const double got = log_dcm_counts(doc, node, p);
    CHECK(std::abs(got - want) <= 1e-8 * std::abs(want));
  }
}
