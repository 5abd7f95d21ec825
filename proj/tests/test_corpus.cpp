#include "doctest.h"
#include "support.hpp"

#include "steer/corpus.hpp"

#include <fstream>
#include <random>
#include <sstream>

using namespace steer;

TEST_CASE("tokenize basics") {
  const auto cfg = TokenizerConfig::english();
  CHECK(tokenize("", cfg).empty());
  const auto toks = tokenize("The GAN trains a GAN.", cfg);
  CHECK(toks == std::vector<std::string>{"gan", "trains", "gan"});

  Vocabulary v;
  const auto counts = count_terms(toks, v);
  REQUIRE(counts.size() == 2);
  CHECK(counts[*v.find("gan") == counts[0].first ? 0 : 1].second == 2);
}

TEST_CASE("tokenize golden fixture") {
  std::ifstream fin(STEER_TEST_DATA "/tokenizer_fixture.txt");
  std::ifstream gin(STEER_TEST_DATA "/tokenizer_golden.txt");
  REQUIRE(fin);
  REQUIRE(gin);
  std::stringstream ss;
  ss << fin.rdbuf();
  std::vector<std::string> golden;
  for (std::string line; std::getline(gin, line);)
    if (!line.empty()) golden.push_back(line);
  CHECK(tokenize(ss.str(), TokenizerConfig::english()) == golden);
}

TEST_CASE("tokenize round trip") {
  const auto cfg = TokenizerConfig::english();
  const auto toks = tokenize("Rose trees, rose TREES; and 42 ants walking", cfg);
  std::string joined;
  for (const auto& t : toks) joined += t + " ";
  CHECK(tokenize(joined, cfg) == toks);
}

TEST_CASE("corpus jsonl") {
  std::istringstream in(R"({"id":"a","title":"T","text":"alpha beta beta"}

{"id":"b","text":"gamma"}
)");
  Corpus c;
  read_corpus_jsonl(in, c, TokenizerConfig::english());
  REQUIRE(c.docs.size() == 2);
  CHECK(c.docs[0].length == 3);
  CHECK(c.docs[0].title == "T");
  CHECK(c.find("b") == DocIndex{1});

  std::istringstream dup(R"({"id":"a","text":"x1"}
{"id":"a","text":"y1"})");
  Corpus c2;
  try {
    read_corpus_jsonl(dup, c2, TokenizerConfig::english());
    FAIL("expected schema violation");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::SchemaViolation);
    CHECK(e.path() == "/1/id");
  }

  std::istringstream missing(R"({"title":"no id"})");
  Corpus c3;
  CHECK_THROWS_AS(read_corpus_jsonl(missing, c3, TokenizerConfig::english()), Error);
}

TEST_CASE("cosine similarity") {
  Vec u(2), v(2);
  u << 1, 2;
  v << 2, 1;
  CHECK(cosine_similarity(u, u) == doctest::Approx(1.0));
  CHECK(cosine_similarity(u, v) == doctest::Approx(0.8).epsilon(1e-12));
  Vec e1 = Vec::Unit(3, 0), e2 = Vec::Unit(3, 1);
  CHECK(cosine_similarity(e1, e2) == doctest::Approx(0.0));
  CHECK_THROWS_AS(cosine_similarity(Vec::Zero(2), u), Error);
  CHECK_THROWS_AS(cosine_similarity(Vec::Ones(3), u), Error);

  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  for (int i = 0; i < 50; ++i) {
    Vec a(5), b(5);
    for (int k = 0; k < 5; ++k) {
      a[k] = g(rng);
      b[k] = g(rng);
    }
    CHECK(cosine_similarity(a, b) == cosine_similarity(b, a));
  }
}

TEST_CASE("doc vectors") {
  Corpus c = testing::corpus_from_texts({"apple", "apple banana banana cherry", "apple apple banana banana banana banana cherry cherry"});
  std::istringstream emb("2 2\napple 1 0\nbanana 0 1\nunknown 5 5\n");
  const EmbeddingStore store = read_embeddings(emb, c.vocab);
  CHECK(store.dimension == 2);
  CHECK(store.vectors.size() == 2);
  const TfIdfModel tfidf(c.docs, c.vocab.size());

  const Vec v0 = doc_vector(c.docs[0], &store, tfidf);
  CHECK(v0[0] == doctest::Approx(1.0));
  CHECK(v0[1] == doctest::Approx(0.0));

  // apple:1, banana:2, cherry not in store -> mean (1,2)/3, normalized (1,2)/sqrt5
  const Vec v1 = doc_vector(c.docs[1], &store, tfidf);
  CHECK(v1[0] == doctest::Approx(1 / std::sqrt(5.0)));
  CHECK(v1[1] == doctest::Approx(2 / std::sqrt(5.0)));

  // doubling counts leaves the vector unchanged
  const Vec v2 = doc_vector(c.docs[2], &store, tfidf);
  CHECK((v1 - v2).norm() < 1e-12);

  // no store: tf-idf fallback, L2-normalized
  const Vec f = doc_vector(c.docs[1], nullptr, tfidf);
  CHECK(f.norm() == doctest::Approx(1.0));

  Document empty;
  empty.id = "e";
  CHECK_THROWS_AS(doc_vector(empty, &store, tfidf), Error);
}

TEST_CASE("tf-idf idf") {
  Corpus c = testing::corpus_from_texts({"a b", "a c", "a d d"});
  const TfIdfModel m(c.docs, c.vocab.size());
  CHECK(m.idf(*c.vocab.find("a")) == doctest::Approx(0.0));
  CHECK(m.idf(*c.vocab.find("b")) == doctest::Approx(std::log(3.0)));
}
