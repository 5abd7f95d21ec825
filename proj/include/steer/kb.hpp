#ifndef STEER_KB_HPP
#define STEER_KB_HPP

#include "steer/common.hpp"
#include "steer/corpus.hpp"
#include "steer/dcm.hpp"
#include "steer/tree.hpp"

#include "json.hpp"

#include <atomic>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace steer {

using KbIndex = std::uint32_t;

struct KbNode {
  std::string id;
  std::string name;
  std::vector<KbIndex> parents;
  std::vector<KbIndex> children;
  SparseCounts term_counts;
  std::vector<std::uint32_t> docs;  // indices into KnowledgeBase::docs
  bool virtual_root = false;
};

/// A DAG of named nodes with reference documents. Shares the corpus
/// vocabulary. When the file has several roots a virtual super-root is added.
struct KnowledgeBase {
  std::vector<KbNode> nodes;
  std::vector<Document> docs;
  std::vector<KbIndex> doc_node;  // attachment node of each reference doc
  KbIndex root = 0;
  std::vector<std::size_t> level;  // longest path from the root
  std::size_t depth = 0;

  std::optional<KbIndex> find(const std::string& id) const;
  std::unordered_map<std::string, KbIndex> by_id;
};

/// Parses {"nodes":[{"id","name","parents","terms","docs":[{"id","text"}]}]}.
/// term_counts hold the node's own terms plus its attached docs; with
/// `aggregate`, descendants' counts are pooled in as well.
KnowledgeBase read_kb_json(const nlohmann::json& j, Vocabulary& vocab, const TokenizerConfig& config,
                           bool aggregate = false);
KnowledgeBase load_kb(const std::string& path, Vocabulary& vocab, const TokenizerConfig& config,
                      bool aggregate = false);
nlohmann::json kb_to_json(const KnowledgeBase& kb, const Vocabulary& vocab);

/// term -> sorted reference-doc postings.
class InvertedIndex {
 public:
  InvertedIndex() = default;
  explicit InvertedIndex(std::span<const Document> docs);

  std::span<const std::uint32_t> postings(TermId term) const;
  std::vector<std::uint32_t> all_of(std::span<const TermId> terms) const;
  std::vector<std::uint32_t> any_of(std::span<const TermId> terms) const;
  Scalar idf(TermId term) const;
  std::size_t doc_count() const { return doc_count_; }

 private:
  std::unordered_map<TermId, std::vector<std::uint32_t>> postings_;
  std::size_t doc_count_ = 0;
};

struct Projection {
  DocIndex doc;
  std::uint32_t kb_doc;
  Scalar score;
};

struct ProjectParams {
  std::size_t K = 50;
  Scalar q = 0.10;
};

struct ProjectionResult {
  std::vector<Projection> kept;  // best first
  std::size_t total_pairs = 0;
};

/// For each corpus doc, the K kb docs with the largest idf-weighted term
/// overlap are scored by cosine of doc vectors; the global top q fraction is kept.
ProjectionResult project(const Corpus& corpus, const KnowledgeBase& kb, const InvertedIndex& index,
                         const EmbeddingStore* store, const ProjectParams& params);

struct WalkQuality {
  Scalar A = 0;
  Scalar R = 0;
  Scalar S = 0;
  Scalar product() const { return A * R * S; }
};

/// A = -L / sum of log f over the walk's nodes below the root, R = min over
/// walk nodes of visited/total children (1 for leaves), S = L^-(gamma+1) *
/// sum of edge ant counts. `walk` runs from the projection node to the root.
WalkQuality walk_quality(std::span<const KbIndex> walk, std::span<const Scalar> log_f,
                         const std::function<std::size_t(KbIndex)>& visited_children,
                         const std::function<std::size_t(KbIndex, KbIndex)>& edge_ants, const KnowledgeBase& kb,
                         Scalar gamma);

/// Edge (child, parent) -> pheromone.
class PheromoneTable {
 public:
  void init(const KnowledgeBase& kb, const std::vector<bool>& in_graph, Scalar tau0 = 1);
  Scalar tau(KbIndex child, KbIndex parent) const;
  void set(KbIndex child, KbIndex parent, Scalar tau);
  /// Transition probabilities over `child`'s parents, in kb parent order.
  std::vector<Scalar> probabilities(const KnowledgeBase& kb, KbIndex child) const;
  std::size_t iteration = 0;
  const std::map<std::pair<KbIndex, KbIndex>, Scalar>& edges() const { return tau_; }

 private:
  std::map<std::pair<KbIndex, KbIndex>, Scalar> tau_;
};

struct Ant {
  DocIndex doc;
  std::uint32_t kb_doc;
  Scalar projection_score;
  std::vector<KbIndex> walk;  // start node first, root last
};

/// Log f(d, v) lookup for one ant's document.
using AntScorer = std::function<Scalar(std::size_t ant, KbIndex node)>;

/// tau' = rho tau + sum of A R S over ants on the edge; then every ant
/// re-samples its walk from the new transition probabilities.
void pheromone_step(PheromoneTable& table, std::vector<Ant>& ants, const KnowledgeBase& kb, Scalar rho,
                    Scalar gamma, const AntScorer& log_f, std::mt19937_64& rng);

/// Level-by-level top-k voting. Returns a survival flag per kb node.
std::vector<bool> beam_prune(const KnowledgeBase& kb, const Corpus& corpus, std::span<const DocIndex> docs,
                             std::size_t k_beam, const DcmParams& dcm);

struct ExtractParams {
  ProjectParams projection;
  Scalar rho = 0.9;
  std::optional<Scalar> gamma;  // auto when empty
  std::size_t k_beam = 20;
  std::size_t iters = 30;
  Scalar tolerance = 1e-4;
  std::optional<std::size_t> min_ants;  // max(3, ceil(0.5% of ants)) when empty
  Scalar floor_per_token = -50;
  std::uint64_t seed = 0;
  DcmParams dcm;
};

struct ExtractionInfo {
  std::size_t total_pairs = 0;
  std::size_t kept_pairs = 0;
  std::size_t ants = 0;
  std::size_t covered_docs = 0;
  Scalar coverage = 0;
  std::size_t iterations = 0;
  bool converged = false;
  bool degenerate = false;
  Scalar gamma = 1;
  std::size_t min_ants = 0;
  std::size_t surviving_nodes = 0;

  nlohmann::json to_json() const;
};

struct ExtractControl {
  std::function<void(double)> progress;
  const std::atomic<bool>* cancel = nullptr;
};

struct ConstraintTree {
  RoseTree tree;
  ExtractionInfo info;
};

ConstraintTree extract_constraint_tree(const Corpus& corpus, const KnowledgeBase& kb, const EmbeddingStore* store,
                                       const ExtractParams& params, const ExtractControl* control = nullptr);

Scalar auto_gamma(const KnowledgeBase& kb);

}  // namespace steer

#endif  // STEER_KB_HPP
