#include "steer/kb.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

namespace steer {

std::optional<KbIndex> KnowledgeBase::find(const std::string& id) const {
  auto it = by_id.find(id);
  if (it == by_id.end()) return std::nullopt;
  return it->second;
}

namespace {

[[noreturn]] void schema_error(const std::string& message, const std::string& path) {
  throw Error(ErrorCode::SchemaViolation, message, path);
}

// First directed cycle found by DFS along parent edges, as "a -> b -> a".
std::optional<std::pair<std::string, KbIndex>> find_cycle(const KnowledgeBase& kb) {
  const std::size_t n = kb.nodes.size();
  std::vector<int> color(n, 0);
  std::vector<KbIndex> stack;
  std::vector<std::size_t> edge_pos;
  for (KbIndex s = 0; s < n; ++s) {
    if (color[s]) continue;
    stack = {s};
    edge_pos = {0};
    color[s] = 1;
    while (!stack.empty()) {
      const KbIndex u = stack.back();
      auto& pos = edge_pos.back();
      if (pos < kb.nodes[u].parents.size()) {
        const KbIndex v = kb.nodes[u].parents[pos++];
        if (color[v] == 1) {
          auto at = std::find(stack.begin(), stack.end(), v);
          std::string path;
          for (auto it = at; it != stack.end(); ++it) path += kb.nodes[*it].id + " -> ";
          return std::make_pair(path + kb.nodes[v].id, v);
        }
        if (color[v] == 0) {
          color[v] = 1;
          stack.push_back(v);
          edge_pos.push_back(0);
        }
      } else {
        color[u] = 2;
        stack.pop_back();
        edge_pos.pop_back();
      }
    }
  }
  return std::nullopt;
}

}  // namespace

KnowledgeBase read_kb_json(const nlohmann::json& j, Vocabulary& vocab, const TokenizerConfig& config, bool aggregate) {
  if (!j.is_object() || !j.contains("nodes") || !j["nodes"].is_array()) {
    schema_error("knowledge base must be an object with a 'nodes' array", "/nodes");
  }
  const auto& arr = j["nodes"];
  if (arr.empty()) throw Error(ErrorCode::EmptyKb, "knowledge base has no nodes", "/nodes");
  KnowledgeBase kb;
  kb.nodes.resize(arr.size());
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string path = "/nodes/" + std::to_string(i);
    const auto& o = arr[i];
    if (!o.is_object()) schema_error("node must be an object", path);
    if (!o.contains("id") || !o["id"].is_string()) schema_error("node needs a string 'id'", path + "/id");
    KbNode& n = kb.nodes[i];
    n.id = o["id"].get<std::string>();
    if (!kb.by_id.emplace(n.id, static_cast<KbIndex>(i)).second) {
      schema_error("duplicate node id '" + n.id + "'", path + "/id");
    }
    n.name = n.id;
    if (o.contains("name")) {
      if (!o["name"].is_string()) schema_error("'name' must be a string", path + "/name");
      n.name = o["name"].get<std::string>();
    }
  }
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string path = "/nodes/" + std::to_string(i);
    const auto& o = arr[i];
    KbNode& n = kb.nodes[i];
    if (o.contains("parents")) {
      if (!o["parents"].is_array()) schema_error("'parents' must be an array", path + "/parents");
      for (std::size_t k = 0; k < o["parents"].size(); ++k) {
        const auto& p = o["parents"][k];
        const std::string ppath = path + "/parents/" + std::to_string(k);
        if (!p.is_string()) schema_error("parent ids must be strings", ppath);
        auto it = kb.by_id.find(p.get<std::string>());
        if (it == kb.by_id.end()) schema_error("unknown parent '" + p.get<std::string>() + "'", ppath);
        if (std::find(n.parents.begin(), n.parents.end(), it->second) != n.parents.end()) continue;
        n.parents.push_back(it->second);
        kb.nodes[it->second].children.push_back(static_cast<KbIndex>(i));
      }
    }
    std::map<TermId, std::int64_t> acc;
    if (o.contains("terms")) {
      if (!o["terms"].is_object()) schema_error("'terms' must be an object", path + "/terms");
      for (const auto& [word, count] : o["terms"].items()) {
        if (!count.is_number_integer() || count.get<std::int64_t>() < 0) {
          schema_error("term counts must be non-negative integers", path + "/terms/" + word);
        }
        for (const auto& tok : tokenize(word, config)) acc[vocab.intern(tok)] += count.get<std::int64_t>();
      }
    }
    if (o.contains("docs")) {
      if (!o["docs"].is_array()) schema_error("'docs' must be an array", path + "/docs");
      for (std::size_t k = 0; k < o["docs"].size(); ++k) {
        const auto& d = o["docs"][k];
        const std::string dpath = path + "/docs/" + std::to_string(k);
        if (!d.is_object() || !d.contains("text") || !d["text"].is_string()) {
          schema_error("reference doc needs a string 'text'", dpath + "/text");
        }
        std::string id = d.contains("id") && d["id"].is_string() ? d["id"].get<std::string>()
                                                                  : n.id + "#" + std::to_string(k);
        Document doc = make_document(std::move(id), d["text"].get<std::string>(), vocab, config);
        for (const auto& [t, c] : doc.counts) acc[t] += c;
        n.docs.push_back(static_cast<std::uint32_t>(kb.docs.size()));
        kb.doc_node.push_back(static_cast<KbIndex>(i));
        kb.docs.push_back(std::move(doc));
      }
    }
    for (const auto& [t, c] : acc)
      if (c > 0) n.term_counts.emplace_back(t, c);
  }

  if (auto cycle = find_cycle(kb)) {
    schema_error("knowledge base has a cycle: " + cycle->first, "/nodes/" + std::to_string(cycle->second) + "/parents");
  }

  std::vector<KbIndex> roots;
  for (KbIndex i = 0; i < kb.nodes.size(); ++i)
    if (kb.nodes[i].parents.empty()) roots.push_back(i);
  if (roots.size() == 1) {
    kb.root = roots.front();
  } else {
    KbNode super;
    super.id = "__root__";
    super.virtual_root = true;
    super.children = roots;
    kb.root = static_cast<KbIndex>(kb.nodes.size());
    for (KbIndex r : roots) kb.nodes[r].parents.push_back(kb.root);
    kb.nodes.push_back(std::move(super));
  }

  // longest-path levels via Kahn order from the root
  const std::size_t n = kb.nodes.size();
  kb.level.assign(n, 0);
  std::vector<std::size_t> indeg(n);
  for (KbIndex i = 0; i < n; ++i) indeg[i] = kb.nodes[i].parents.size();
  std::vector<KbIndex> order{kb.root};
  for (std::size_t h = 0; h < order.size(); ++h) {
    const KbIndex u = order[h];
    for (KbIndex c : kb.nodes[u].children) {
      kb.level[c] = std::max(kb.level[c], kb.level[u] + 1);
      if (--indeg[c] == 0) order.push_back(c);
    }
  }
  kb.depth = *std::max_element(kb.level.begin(), kb.level.end());

  if (aggregate) {
    std::vector<SparseCounts> pooled(n);
    for (KbIndex v = 0; v < n; ++v) {
      std::set<KbIndex> seen{v};
      std::vector<KbIndex> stack{v};
      SparseCounts acc;
      while (!stack.empty()) {
        const KbIndex u = stack.back();
        stack.pop_back();
        acc = add_counts(acc, kb.nodes[u].term_counts);
        for (KbIndex c : kb.nodes[u].children)
          if (seen.insert(c).second) stack.push_back(c);
      }
      pooled[v] = std::move(acc);
    }
    for (KbIndex v = 0; v < n; ++v) kb.nodes[v].term_counts = std::move(pooled[v]);
  }
  return kb;
}

KnowledgeBase load_kb(const std::string& path, Vocabulary& vocab, const TokenizerConfig& config, bool aggregate) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open knowledge base file '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::SchemaViolation, std::string("knowledge base is not valid JSON: ") + e.what(), "");
  }
  return read_kb_json(j, vocab, config, aggregate);
}

nlohmann::json kb_to_json(const KnowledgeBase& kb, const Vocabulary& vocab) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : kb.nodes) {
    if (n.virtual_root) continue;
    nlohmann::json o;
    o["id"] = n.id;
    o["name"] = n.name;
    nlohmann::json parents = nlohmann::json::array();
    for (KbIndex p : n.parents)
      if (!kb.nodes[p].virtual_root) parents.push_back(kb.nodes[p].id);
    o["parents"] = std::move(parents);
    nlohmann::json docs = nlohmann::json::array();
    SparseCounts own = n.term_counts;
    for (auto d : n.docs) {
      own = subtract_counts(own, kb.docs[d].counts);
      docs.push_back({{"id", kb.docs[d].id}, {"text", kb.docs[d].body}});
    }
    nlohmann::json terms = nlohmann::json::object();
    for (const auto& [t, c] : own)
      if (c > 0) terms[vocab.term(t)] = c;
    o["terms"] = std::move(terms);
    o["docs"] = std::move(docs);
    nodes.push_back(std::move(o));
  }
  return {{"nodes", std::move(nodes)}};
}

// ---------------------------------------------------------------------------
// Inverted index

InvertedIndex::InvertedIndex(std::span<const Document> docs) : doc_count_(docs.size()) {
  for (std::uint32_t i = 0; i < docs.size(); ++i)
    for (const auto& [t, c] : docs[i].counts) postings_[t].push_back(i);
}

std::span<const std::uint32_t> InvertedIndex::postings(TermId term) const {
  auto it = postings_.find(term);
  if (it == postings_.end()) return {};
  return it->second;
}

std::vector<std::uint32_t> InvertedIndex::all_of(std::span<const TermId> terms) const {
  if (terms.empty()) return {};
  auto first = postings(terms[0]);
  std::vector<std::uint32_t> acc(first.begin(), first.end());
  for (std::size_t i = 1; i < terms.size() && !acc.empty(); ++i) {
    auto p = postings(terms[i]);
    std::vector<std::uint32_t> next;
    std::set_intersection(acc.begin(), acc.end(), p.begin(), p.end(), std::back_inserter(next));
    acc = std::move(next);
  }
  return acc;
}

std::vector<std::uint32_t> InvertedIndex::any_of(std::span<const TermId> terms) const {
  std::vector<std::uint32_t> acc;
  for (TermId t : terms) {
    auto p = postings(t);
    std::vector<std::uint32_t> next;
    std::set_union(acc.begin(), acc.end(), p.begin(), p.end(), std::back_inserter(next));
    acc = std::move(next);
  }
  return acc;
}

Scalar InvertedIndex::idf(TermId term) const {
  const auto df = postings(term).size();
  if (df == 0) return 0;
  return std::log(static_cast<Scalar>(doc_count_) / static_cast<Scalar>(df));
}

// ---------------------------------------------------------------------------
// Projection

ProjectionResult project(const Corpus& corpus, const KnowledgeBase& kb, const InvertedIndex& index,
                         const EmbeddingStore* store, const ProjectParams& params) {
  if (kb.docs.empty()) throw Error(ErrorCode::EmptyKb, "knowledge base has no reference documents");
  if (!(params.q > 0 && params.q <= 1)) throw Error(ErrorCode::InvalidArgument, "q must lie in (0, 1]");
  if (params.K == 0) throw Error(ErrorCode::InvalidArgument, "K must be positive");

  std::vector<const Document*> all;
  for (const auto& d : corpus.docs) all.push_back(&d);
  for (const auto& d : kb.docs) all.push_back(&d);
  TfIdfModel tfidf;
  tfidf.fit(all, corpus.vocab.size());

  auto safe_vector = [&](const Document& d) -> std::optional<Vec> {
    if (d.length == 0) return std::nullopt;
    Vec v = doc_vector(d, store, tfidf);
    if (v.norm() == 0) return std::nullopt;
    return v;
  };
  std::vector<std::optional<Vec>> kb_vec(kb.docs.size());
  for (std::size_t i = 0; i < kb.docs.size(); ++i) kb_vec[i] = safe_vector(kb.docs[i]);

  ProjectionResult out;
  std::vector<Projection> pairs;
  std::vector<Scalar> overlap(kb.docs.size(), 0);
  std::vector<std::uint32_t> touched;
  for (DocIndex d = 0; d < corpus.docs.size(); ++d) {
    const Document& doc = corpus.docs[d];
    touched.clear();
    for (const auto& [t, c] : doc.counts) {
      const Scalar w = index.idf(t);
      if (w <= 0) continue;
      for (std::uint32_t k : index.postings(t)) {
        if (overlap[k] == 0) touched.push_back(k);
        overlap[k] += w;
      }
    }
    const std::size_t take = std::min(params.K, touched.size());
    std::partial_sort(touched.begin(), touched.begin() + static_cast<std::ptrdiff_t>(take), touched.end(),
                      [&](std::uint32_t a, std::uint32_t b) { return overlap[a] != overlap[b] ? overlap[a] > overlap[b] : a < b; });
    const auto dv = safe_vector(doc);
    for (std::size_t i = 0; i < take; ++i) {
      const std::uint32_t k = touched[i];
      Scalar s = 0;
      if (dv && kb_vec[k] && dv->size() == kb_vec[k]->size()) s = std::clamp(dv->dot(*kb_vec[k]), Scalar(-1), Scalar(1));
      pairs.push_back({d, k, s});
    }
    for (std::uint32_t k : touched) overlap[k] = 0;
  }
  out.total_pairs = pairs.size();
  std::sort(pairs.begin(), pairs.end(), [](const Projection& a, const Projection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.doc != b.doc) return a.doc < b.doc;
    return a.kb_doc < b.kb_doc;
  });
  const auto keep = static_cast<std::size_t>(std::ceil(params.q * static_cast<Scalar>(pairs.size()) - 1e-9));
  pairs.resize(std::min(keep, pairs.size()));
  out.kept = std::move(pairs);
  return out;
}

// ---------------------------------------------------------------------------
// Ant colony

WalkQuality walk_quality(std::span<const KbIndex> walk, std::span<const Scalar> log_f,
                         const std::function<std::size_t(KbIndex)>& visited_children,
                         const std::function<std::size_t(KbIndex, KbIndex)>& edge_ants, const KnowledgeBase& kb,
                         Scalar gamma) {
  if (walk.empty()) throw Error(ErrorCode::DegenerateWalk, "empty walk");
  WalkQuality q;
  const std::size_t L = walk.size() - 1;
  if (L == 0) return q;
  Scalar sum = 0;
  for (std::size_t i = 0; i < L; ++i) sum += log_f[i];
  q.A = sum == 0 ? 0 : -static_cast<Scalar>(L) / sum;
  // the start node covers nothing below itself; it contributes 1
  q.R = 1;
  for (std::size_t i = 1; i < walk.size(); ++i) {
    const auto total = kb.nodes[walk[i]].children.size();
    if (total == 0) continue;
    q.R = std::min(q.R, static_cast<Scalar>(visited_children(walk[i])) / static_cast<Scalar>(total));
  }
  Scalar ants = 0;
  for (std::size_t i = 0; i < L; ++i) ants += static_cast<Scalar>(edge_ants(walk[i], walk[i + 1]));
  q.S = std::pow(static_cast<Scalar>(L), -(gamma + 1)) * ants;
  return q;
}

void PheromoneTable::init(const KnowledgeBase& kb, const std::vector<bool>& in_graph, Scalar tau0) {
  tau_.clear();
  iteration = 0;
  for (KbIndex v = 0; v < kb.nodes.size(); ++v) {
    if (!in_graph[v]) continue;
    for (KbIndex p : kb.nodes[v].parents)
      if (in_graph[p]) tau_[{v, p}] = tau0;
  }
}

Scalar PheromoneTable::tau(KbIndex child, KbIndex parent) const {
  auto it = tau_.find({child, parent});
  return it == tau_.end() ? 0 : it->second;
}

void PheromoneTable::set(KbIndex child, KbIndex parent, Scalar tau) { tau_[{child, parent}] = tau; }

std::vector<Scalar> PheromoneTable::probabilities(const KnowledgeBase& kb, KbIndex child) const {
  const auto& parents = kb.nodes[child].parents;
  std::vector<Scalar> p(parents.size());
  Scalar total = 0;
  for (std::size_t i = 0; i < parents.size(); ++i) total += p[i] = tau(child, parents[i]);
  if (total > 0)
    for (auto& x : p) x /= total;
  return p;
}

namespace {

std::vector<KbIndex> sample_walk(KbIndex start, const PheromoneTable& table, const KnowledgeBase& kb,
                                 std::mt19937_64& rng) {
  std::vector<KbIndex> walk{start};
  KbIndex cur = start;
  while (cur != kb.root) {
    const auto p = table.probabilities(kb, cur);
    const auto& parents = kb.nodes[cur].parents;
    std::size_t pick = 0;
    if (parents.size() > 1) {
      Scalar u = std::uniform_real_distribution<Scalar>(0, 1)(rng);
      pick = parents.size() - 1;
      for (std::size_t i = 0; i < p.size(); ++i) {
        if (u < p[i]) {
          pick = i;
          break;
        }
        u -= p[i];
      }
      // never step onto an edge outside the graph
      while (p[pick] == 0 && pick > 0) --pick;
    }
    cur = parents[pick];
    walk.push_back(cur);
  }
  return walk;
}

struct WalkStats {
  std::map<std::pair<KbIndex, KbIndex>, std::size_t> edge_ants;
  std::unordered_map<KbIndex, std::set<KbIndex>> visited;

  explicit WalkStats(const std::vector<std::vector<KbIndex>>& walks) {
    for (const auto& w : walks)
      for (std::size_t i = 0; i + 1 < w.size(); ++i) {
        ++edge_ants[{w[i], w[i + 1]}];
        visited[w[i + 1]].insert(w[i]);
      }
  }

  std::size_t ants(KbIndex c, KbIndex p) const {
    auto it = edge_ants.find({c, p});
    return it == edge_ants.end() ? 0 : it->second;
  }
  std::size_t children(KbIndex v) const {
    auto it = visited.find(v);
    return it == visited.end() ? 0 : it->second.size();
  }
};

WalkQuality ant_quality(std::size_t a, const std::vector<KbIndex>& walk, const WalkStats& stats,
                        const KnowledgeBase& kb, Scalar gamma, const AntScorer& log_f) {
  std::vector<Scalar> lf(walk.size());
  for (std::size_t i = 0; i + 1 < walk.size(); ++i) lf[i] = log_f(a, walk[i]);
  return walk_quality(
      walk, lf, [&](KbIndex v) { return stats.children(v); },
      [&](KbIndex c, KbIndex p) { return stats.ants(c, p); }, kb, gamma);
}

}  // namespace

void pheromone_step(PheromoneTable& table, std::vector<Ant>& ants, const KnowledgeBase& kb, Scalar rho, Scalar gamma,
                    const AntScorer& log_f, std::mt19937_64& rng) {
  if (!(rho > 0 && rho < 1)) throw Error(ErrorCode::InvalidArgument, "rho must lie in (0, 1)");
  std::vector<std::vector<KbIndex>> walks;
  walks.reserve(ants.size());
  for (const auto& a : ants) walks.push_back(a.walk);
  const WalkStats stats(walks);
  std::map<std::pair<KbIndex, KbIndex>, Scalar> deposit;
  for (std::size_t a = 0; a < ants.size(); ++a) {
    const Scalar q = ant_quality(a, ants[a].walk, stats, kb, gamma, log_f).product();
    const auto& w = ants[a].walk;
    for (std::size_t i = 0; i + 1 < w.size(); ++i) deposit[{w[i], w[i + 1]}] += q;
  }
  for (const auto& [edge, tau] : table.edges()) {
    auto it = deposit.find(edge);
    table.set(edge.first, edge.second, rho * tau + (it == deposit.end() ? 0 : it->second));
  }
  ++table.iteration;
  for (auto& a : ants) a.walk = sample_walk(a.walk.front(), table, kb, rng);
}

std::vector<bool> beam_prune(const KnowledgeBase& kb, const Corpus& corpus, std::span<const DocIndex> docs,
                             std::size_t k_beam, const DcmParams& dcm) {
  const std::size_t n = kb.nodes.size();
  std::vector<bool> survive(n, false);
  survive[kb.root] = true;
  std::vector<std::vector<KbIndex>> by_level(kb.depth + 1);
  for (KbIndex v = 0; v < n; ++v) by_level[kb.level[v]].push_back(v);
  std::vector<Scalar> lf;
  for (std::size_t level = 1; level <= kb.depth; ++level) {
    std::vector<KbIndex> cand;
    for (KbIndex v : by_level[level]) {
      const auto& ps = kb.nodes[v].parents;
      if (std::any_of(ps.begin(), ps.end(), [&](KbIndex p) { return survive[p]; })) cand.push_back(v);
    }
    if (cand.empty()) break;
    if (cand.size() <= k_beam) {
      for (KbIndex v : cand) survive[v] = true;
      continue;
    }
    std::vector<Scalar> vote(cand.size(), 0);
    lf.resize(cand.size());
    for (DocIndex d : docs) {
      const Document& doc = corpus.docs[d];
      if (doc.length == 0) continue;
      Scalar lse = -INFINITY;
      for (std::size_t i = 0; i < cand.size(); ++i) {
        lf[i] = log_dcm_counts(doc.counts, kb.nodes[cand[i]].term_counts, dcm);
        lse = log_add_exp(lse, lf[i]);
      }
      for (std::size_t i = 0; i < cand.size(); ++i) vote[i] += std::exp(lf[i] - lse);
    }
    std::vector<std::size_t> order(cand.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return vote[a] > vote[b]; });
    for (std::size_t i = 0; i < k_beam; ++i) survive[cand[order[i]]] = true;
  }
  return survive;
}

Scalar auto_gamma(const KnowledgeBase& kb) { return kb.depth > 6 ? 4 : 1; }

nlohmann::json ExtractionInfo::to_json() const {
  return {{"total_pairs", total_pairs}, {"kept_pairs", kept_pairs},   {"ants", ants},
          {"covered_docs", covered_docs}, {"coverage", coverage},       {"iterations", iterations},
          {"converged", converged},     {"degenerate", degenerate},   {"gamma", gamma},
          {"min_ants", min_ants},       {"surviving_nodes", surviving_nodes}};
}

ConstraintTree extract_constraint_tree(const Corpus& corpus, const KnowledgeBase& kb, const EmbeddingStore* store,
                                       const ExtractParams& params, const ExtractControl* control) {
  DcmParams dcm = params.dcm;
  dcm.vocab_size = std::max(dcm.vocab_size, corpus.vocab.size());
  dcm.validate();
  const InvertedIndex index(kb.docs);
  const ProjectionResult proj = project(corpus, kb, index, store, params.projection);
  if (proj.kept.empty()) throw Error(ErrorCode::NoProjectedDocuments, "no document projected onto the knowledge base");

  ConstraintTree out;
  ExtractionInfo& info = out.info;
  info.total_pairs = proj.total_pairs;
  info.kept_pairs = proj.kept.size();
  info.ants = proj.kept.size();
  info.gamma = params.gamma.value_or(auto_gamma(kb));
  info.min_ants = params.min_ants.value_or(
      std::max<std::size_t>(3, static_cast<std::size_t>(std::ceil(0.005 * static_cast<Scalar>(info.ants)))));

  std::vector<DocIndex> docs;
  for (const auto& p : proj.kept) docs.push_back(p.doc);
  std::sort(docs.begin(), docs.end());
  docs.erase(std::unique(docs.begin(), docs.end()), docs.end());
  info.covered_docs = docs.size();
  info.coverage = static_cast<Scalar>(docs.size()) / static_cast<Scalar>(corpus.docs.size());

  const std::vector<bool> survive = beam_prune(kb, corpus, docs, params.k_beam, dcm);
  info.surviving_nodes = static_cast<std::size_t>(std::count(survive.begin(), survive.end(), true));

  std::vector<Ant> ants;
  ants.reserve(proj.kept.size());
  std::vector<bool> in_graph(kb.nodes.size(), false);
  for (const auto& p : proj.kept) {
    ants.push_back({p.doc, p.kb_doc, p.score, {}});
    std::vector<KbIndex> stack{kb.doc_node[p.kb_doc]};
    while (!stack.empty()) {
      const KbIndex v = stack.back();
      stack.pop_back();
      if (in_graph[v]) continue;
      in_graph[v] = true;
      for (KbIndex u : kb.nodes[v].parents) stack.push_back(u);
    }
  }

  std::unordered_map<std::uint64_t, Scalar> cache;
  const AntScorer log_f = [&](std::size_t a, KbIndex v) -> Scalar {
    const DocIndex d = ants[a].doc;
    const std::uint64_t key = (static_cast<std::uint64_t>(d) << 32) | v;
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    const Document& doc = corpus.docs[d];
    const Scalar val = survive[v] ? log_dcm_counts(doc.counts, kb.nodes[v].term_counts, dcm)
                                  : params.floor_per_token * static_cast<Scalar>(doc.length);
    cache.emplace(key, val);
    return val;
  };

  std::mt19937_64 rng(params.seed);
  PheromoneTable table;
  table.init(kb, in_graph, 1);
  for (auto& a : ants) a.walk = sample_walk(kb.doc_node[a.kb_doc], table, kb, rng);

  std::vector<KbIndex> branching;
  for (KbIndex v = 0; v < kb.nodes.size(); ++v)
    if (in_graph[v] && kb.nodes[v].parents.size() > 1) branching.push_back(v);
  auto snapshot = [&] {
    std::vector<Scalar> p;
    for (KbIndex v : branching) {
      const auto pv = table.probabilities(kb, v);
      p.insert(p.end(), pv.begin(), pv.end());
    }
    return p;
  };

  for (std::size_t it = 0; it < params.iters; ++it) {
    if (control && control->cancel && control->cancel->load()) {
      throw Error(ErrorCode::Cancelled, "extraction cancelled");
    }
    const auto before = snapshot();
    pheromone_step(table, ants, kb, params.rho, info.gamma, log_f, rng);
    const auto after = snapshot();
    ++info.iterations;
    if (control && control->progress) control->progress(static_cast<double>(it + 1) / static_cast<double>(params.iters));
    Scalar change = 0;
    for (std::size_t i = 0; i < before.size(); ++i) change = std::max(change, std::abs(after[i] - before[i]));
    if (change < params.tolerance) {
      info.converged = true;
      break;
    }
  }

  // most probable path to the root from every node (max-product DP)
  std::vector<KbIndex> order(kb.nodes.size());
  std::iota(order.begin(), order.end(), KbIndex{0});
  std::stable_sort(order.begin(), order.end(), [&](KbIndex a, KbIndex b) { return kb.level[a] < kb.level[b]; });
  std::vector<Scalar> best(kb.nodes.size(), -INFINITY);
  std::vector<KbIndex> next(kb.nodes.size(), kb.root);
  best[kb.root] = 0;
  for (KbIndex v : order) {
    if (v == kb.root || !in_graph[v]) continue;
    const auto p = table.probabilities(kb, v);
    const auto& parents = kb.nodes[v].parents;
    for (std::size_t i = 0; i < parents.size(); ++i) {
      if (p[i] <= 0 || !in_graph[parents[i]]) continue;
      const Scalar s = std::log(p[i]) + best[parents[i]];
      if (s > best[v]) {
        best[v] = s;
        next[v] = parents[i];
      }
    }
  }
  std::vector<std::vector<KbIndex>> committed(ants.size());
  for (std::size_t a = 0; a < ants.size(); ++a) {
    KbIndex cur = kb.doc_node[ants[a].kb_doc];
    committed[a].push_back(cur);
    while (cur != kb.root) {
      cur = next[cur];
      committed[a].push_back(cur);
    }
    ants[a].walk = committed[a];
  }

  // each document follows the ant of its most similar kb document; walk
  // quality only breaks ties. Choosing by quality lets popular walks of weak
  // pairs win, so the result would drift with q.
  const WalkStats stats(committed);
  std::unordered_map<DocIndex, std::pair<std::size_t, Scalar>> chosen;
  for (std::size_t a = 0; a < ants.size(); ++a) {
    const Scalar q = ant_quality(a, committed[a], stats, kb, info.gamma, log_f).product();
    auto [it, fresh] = chosen.try_emplace(ants[a].doc, a, q);
    if (fresh) continue;
    const auto& cur = ants[it->second.first];
    if (ants[a].projection_score > cur.projection_score ||
        (ants[a].projection_score == cur.projection_score && q > it->second.second)) {
      it->second = {a, q};
    }
  }

  std::vector<std::size_t> ant_count(kb.nodes.size(), 0);
  for (const auto& w : committed)
    for (KbIndex v : w) ++ant_count[v];
  auto kept = [&](KbIndex v) { return v == kb.root || ant_count[v] >= info.min_ants; };

  // attach documents to the lowest kept node on their walk
  std::vector<std::vector<DocIndex>> node_docs(kb.nodes.size());
  for (DocIndex d : docs) {
    const auto& w = committed[chosen.at(d).first];
    for (KbIndex v : w) {
      if (kept(v)) {
        node_docs[v].push_back(d);
        break;
      }
    }
  }
  // tree parent = nearest kept node on the committed path
  std::vector<std::vector<KbIndex>> tree_children(kb.nodes.size());
  std::vector<std::size_t> docs_below(kb.nodes.size(), 0);
  for (KbIndex v : order) docs_below[v] = node_docs[v].size();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const KbIndex v = *it;
    if (v == kb.root || !kept(v) || !in_graph[v] || docs_below[v] == 0) continue;
    KbIndex p = next[v];
    while (!kept(p)) p = next[p];
    tree_children[p].push_back(v);
    docs_below[p] += docs_below[v];
  }
  for (auto& c : tree_children) std::sort(c.begin(), c.end());

  RoseTree& tree = out.tree;
  std::function<NodeId(KbIndex)> build = [&](KbIndex v) -> NodeId {
    const KbNode& kn = kb.nodes[v];
    auto label_of = [&] { return kn.virtual_root ? std::string() : kn.name; };
    if (tree_children[v].empty()) {
      const NodeId id = tree.add_leaf(node_docs[v], label_of());
      if (!kn.virtual_root) tree.node(id).kb_ref = kn.id;
      return id;
    }
    const NodeId id = tree.add_node(label_of());
    if (!kn.virtual_root) tree.node(id).kb_ref = kn.id;
    for (KbIndex c : tree_children[v]) tree.attach(id, build(c));
    for (DocIndex d : node_docs[v]) {
      const Document& doc = corpus.docs[d];
      tree.attach(id, tree.add_leaf({d}, doc.title.empty() ? doc.id : doc.title));
    }
    return id;
  };
  tree.set_root(build(kb.root));
  info.degenerate = tree_children[kb.root].empty();
  tree.contract_unary();
  return out;
}

}  // namespace steer
