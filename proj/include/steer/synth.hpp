#ifndef STEER_SYNTH_HPP
#define STEER_SYNTH_HPP

#include "steer/corpus.hpp"
#include "steer/tree.hpp"

#include "json.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace steer {

struct SynthConfig {
  std::vector<std::size_t> branching{3, 3};  // children per level below the root
  std::size_t docs_per_leaf = 12;
  std::size_t vocab = 1000;
  Scalar root_concentration = 1;   // symmetric Dirichlet of the root profile
  Scalar concentration = 100;      // child ~ Dir(concentration * parent)
  Scalar noise = 0.1;              // fraction of uniformly drawn tokens
  std::size_t doc_length = 60;
  std::size_t kb_docs_per_node = 3;
  std::size_t kb_doc_length = 100;
  std::size_t distractors = 2;     // extra top-level KB subtrees without corpus docs
  Scalar dag_extra = 0.1;          // chance a KB node gets a second parent
  bool disjoint_support = false;   // leaves draw from disjoint vocabulary blocks
  std::uint64_t seed = 42;

  void validate() const;
};

struct SynthData {
  Corpus corpus;
  RoseTree truth;                  // generator hierarchy; leaves hold their docs
  nlohmann::json kb;               // knowledge-base file contents
  std::vector<std::uint32_t> doc_leaf;  // generator leaf of each doc
  std::vector<std::string> leaf_names;
  std::vector<Vec> leaf_profiles;  // term distribution of each generator leaf
};

SynthData synth(const SynthConfig& config);

/// FNV-1a over the corpus JSON-lines serialization.
std::uint64_t corpus_checksum(const Corpus& corpus);

}  // namespace steer

#endif  // STEER_SYNTH_HPP
