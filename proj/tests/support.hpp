#ifndef STEER_TESTS_SUPPORT_HPP
#define STEER_TESTS_SUPPORT_HPP

#include "steer/corpus.hpp"
#include "steer/tree.hpp"

#include <algorithm>
#include <random>
#include <string>
#include <vector>

namespace steer::testing {

// Random rose tree over docs 0..n-1: each internal node splits its doc
// range into 2..max_arity non-empty parts (or stops as a leaf).
inline NodeId grow(RoseTree& t, std::vector<DocIndex> docs, std::mt19937_64& rng, int max_arity, bool allow_multi_leaf) {
  std::uniform_real_distribution<double> u(0, 1);
  if (docs.size() == 1 || (allow_multi_leaf && u(rng) < 0.2)) return t.add_leaf(std::move(docs));
  std::uniform_int_distribution<int> ka(2, std::min<int>(max_arity, static_cast<int>(docs.size())));
  const int k = ka(rng);
  std::shuffle(docs.begin(), docs.end(), rng);
  std::vector<std::size_t> cuts;
  std::vector<std::size_t> pos(docs.size() - 1);
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i + 1;
  std::shuffle(pos.begin(), pos.end(), rng);
  cuts.assign(pos.begin(), pos.begin() + (k - 1));
  std::sort(cuts.begin(), cuts.end());
  cuts.push_back(docs.size());
  const NodeId id = t.add_node();
  std::size_t lo = 0;
  for (std::size_t hi : cuts) {
    std::vector<DocIndex> part(docs.begin() + static_cast<std::ptrdiff_t>(lo), docs.begin() + static_cast<std::ptrdiff_t>(hi));
    t.attach(id, grow(t, std::move(part), rng, max_arity, allow_multi_leaf));
    lo = hi;
  }
  return id;
}

inline RoseTree random_tree(std::size_t n, std::mt19937_64& rng, int max_arity = 4, bool allow_multi_leaf = false) {
  RoseTree t;
  std::vector<DocIndex> docs(n);
  for (std::size_t i = 0; i < n; ++i) docs[i] = static_cast<DocIndex>(i);
  t.set_root(grow(t, std::move(docs), rng, max_arity, allow_multi_leaf));
  return t;
}

// Corpus whose documents are given directly as token strings.
inline Corpus corpus_from_texts(const std::vector<std::string>& texts) {
  Corpus c;
  TokenizerConfig cfg;
  cfg.min_length = 1;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    c.docs.push_back(make_document("d" + std::to_string(i), texts[i], c.vocab, cfg));
  }
  c.reindex();
  return c;
}

inline DocIdTable ids_for(const Corpus& c) {
  std::vector<std::string> ids;
  for (const auto& d : c.docs) ids.push_back(d.id);
  return DocIdTable(ids);
}

inline DocIdTable numeric_ids(std::size_t n) {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back("d" + std::to_string(i));
  return DocIdTable(ids);
}

}  // namespace steer::testing

#endif
