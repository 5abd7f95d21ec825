#include "steer/synth.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <functional>
#include <sstream>

namespace steer {

void SynthConfig::validate() const {
  if (branching.empty()) throw Error(ErrorCode::InvalidArgument, "branching needs at least one level");
  for (auto b : branching)
    if (b == 0) throw Error(ErrorCode::InvalidArgument, "branching factors must be positive");
  if (docs_per_leaf == 0) throw Error(ErrorCode::InvalidArgument, "docs_per_leaf must be positive");
  if (vocab < 2) throw Error(ErrorCode::InvalidArgument, "vocab must be at least 2");
  if (!(concentration > 0) || !(root_concentration > 0)) {
    throw Error(ErrorCode::InvalidArgument, "concentrations must be positive");
  }
  if (!(noise >= 0 && noise <= 1)) throw Error(ErrorCode::InvalidArgument, "noise must lie in [0, 1]");
  if (doc_length == 0) throw Error(ErrorCode::InvalidArgument, "doc_length must be positive");
}

namespace {

struct GenNode {
  std::string path;  // "1.2"
  std::size_t level = 0;
  std::int64_t parent = -1;
  std::vector<std::size_t> children;
  Vec theta;
  bool distractor = false;
};

Vec dirichlet(const Vec& shape, std::mt19937_64& rng) {
  Vec out(shape.size());
  for (Eigen::Index i = 0; i < shape.size(); ++i) {
    std::gamma_distribution<Scalar> g(std::max(shape[i], 1e-12), 1.0);
    out[i] = g(rng);
  }
  const Scalar s = out.sum();
  if (s <= 0) return Vec::Constant(shape.size(), 1.0 / static_cast<Scalar>(shape.size()));
  return out / s;
}

std::string word(std::size_t t) { return "w" + std::to_string(t); }

std::string sample_text(const Vec& theta, std::size_t length, Scalar noise, std::mt19937_64& rng) {
  std::discrete_distribution<std::size_t> topic(theta.data(), theta.data() + theta.size());
  std::uniform_int_distribution<std::size_t> uniform(0, static_cast<std::size_t>(theta.size()) - 1);
  std::bernoulli_distribution is_noise(noise);
  std::string text;
  for (std::size_t k = 0; k < length; ++k) {
    if (k) text += ' ';
    text += word(is_noise(rng) ? uniform(rng) : topic(rng));
  }
  return text;
}

void grow(std::vector<GenNode>& nodes, std::size_t parent, std::size_t depth, const SynthConfig& cfg,
          bool distractor, std::mt19937_64& rng) {
  if (depth >= cfg.branching.size()) return;
  for (std::size_t c = 0; c < cfg.branching[depth]; ++c) {
    GenNode n;
    n.level = depth + 1;
    n.parent = static_cast<std::int64_t>(parent);
    n.path = (nodes[parent].path.empty() ? "" : nodes[parent].path + ".") + std::to_string(c + 1);
    n.theta = dirichlet(cfg.concentration * nodes[parent].theta, rng);
    n.distractor = distractor;
    nodes.push_back(std::move(n));
    const std::size_t id = nodes.size() - 1;
    nodes[parent].children.push_back(id);
    grow(nodes, id, depth + 1, cfg, distractor, rng);
  }
}

}  // namespace

SynthData synth(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  const auto W = static_cast<Eigen::Index>(cfg.vocab);

  std::vector<GenNode> nodes(1);
  nodes[0].theta = dirichlet(Vec::Constant(W, cfg.root_concentration), rng);
  grow(nodes, 0, 0, cfg, false, rng);
  // distractor subtrees hang off the root with the same shape below level 1
  for (std::size_t k = 0; k < cfg.distractors; ++k) {
    GenNode n;
    n.level = 1;
    n.parent = 0;
    n.path = "x" + std::to_string(k + 1);
    n.theta = dirichlet(cfg.concentration * nodes[0].theta, rng);
    n.distractor = true;
    nodes.push_back(std::move(n));
    const std::size_t id = nodes.size() - 1;
    nodes[0].children.push_back(id);
    grow(nodes, id, 1, cfg, true, rng);
  }

  SynthData out;
  std::vector<std::size_t> leaves;
  for (std::size_t i = 0; i < nodes.size(); ++i)
    if (nodes[i].children.empty() && !nodes[i].distractor && i != 0) leaves.push_back(i);
  if (cfg.disjoint_support) {
    const Eigen::Index block = W / static_cast<Eigen::Index>(leaves.size());
    if (block == 0) throw Error(ErrorCode::InvalidArgument, "vocab too small for disjoint leaf supports");
    for (std::size_t i = 0; i < leaves.size(); ++i) {
      Vec shape = Vec::Zero(W);
      shape.segment(static_cast<Eigen::Index>(i) * block, block).setOnes();
      Vec theta = dirichlet(shape, rng);
      for (Eigen::Index t = 0; t < W; ++t)
        if (shape[t] == 0) theta[t] = 0;
      nodes[leaves[i]].theta = theta / theta.sum();
    }
  }

  // documents, generated leaf by leaf, then shuffled
  struct Raw {
    std::uint32_t leaf;
    std::string text;
  };
  std::vector<Raw> raw;
  std::poisson_distribution<std::size_t> len(static_cast<double>(cfg.doc_length));
  const Scalar noise = cfg.disjoint_support ? 0 : cfg.noise;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    for (std::size_t k = 0; k < cfg.docs_per_leaf; ++k) {
      const std::size_t l = std::max<std::size_t>(1, len(rng));
      raw.push_back({static_cast<std::uint32_t>(li), sample_text(nodes[leaves[li]].theta, l, noise, rng)});
    }
  }
  std::shuffle(raw.begin(), raw.end(), rng);
  TokenizerConfig tok;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const auto& leaf = nodes[leaves[raw[i].leaf]];
    out.corpus.docs.push_back(make_document("s" + std::to_string(i), raw[i].text, out.corpus.vocab, tok,
                                            "topic " + leaf.path));
    out.doc_leaf.push_back(raw[i].leaf);
  }
  out.corpus.reindex();
  for (std::size_t li : leaves) {
    out.leaf_names.push_back("topic " + nodes[li].path);
    out.leaf_profiles.push_back(nodes[li].theta);
  }

  // ground truth mirrors the generator; each leaf holds its documents
  std::vector<std::vector<DocIndex>> leaf_docs(leaves.size());
  for (DocIndex d = 0; d < out.doc_leaf.size(); ++d) leaf_docs[out.doc_leaf[d]].push_back(d);
  std::vector<std::int64_t> leaf_slot(nodes.size(), -1);
  for (std::size_t li = 0; li < leaves.size(); ++li) leaf_slot[leaves[li]] = static_cast<std::int64_t>(li);
  std::function<NodeId(std::size_t)> build = [&](std::size_t g) -> NodeId {
    const std::string label = g == 0 ? "root" : "topic " + nodes[g].path;
    if (leaf_slot[g] >= 0) return out.truth.add_leaf(leaf_docs[static_cast<std::size_t>(leaf_slot[g])], label);
    const NodeId id = out.truth.add_node(label);
    for (std::size_t c : nodes[g].children)
      if (!nodes[c].distractor) out.truth.attach(id, build(c));
    return id;
  };
  out.truth.set_root(build(0));

  // knowledge base: every generator node with reference docs, plus extra parents
  nlohmann::json kb_nodes = nlohmann::json::array();
  std::vector<std::vector<std::size_t>> by_level;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (by_level.size() <= nodes[i].level) by_level.resize(nodes[i].level + 1);
    by_level[nodes[i].level].push_back(i);
  }
  std::bernoulli_distribution extra(cfg.dag_extra);
  auto kb_id = [&](std::size_t g) { return g == 0 ? std::string("k") : "k" + nodes[g].path; };
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    nlohmann::json o;
    o["id"] = kb_id(i);
    o["name"] = i == 0 ? std::string("All topics") : "Topic " + nodes[i].path;
    nlohmann::json parents = nlohmann::json::array();
    if (nodes[i].parent >= 0) {
      parents.push_back(kb_id(static_cast<std::size_t>(nodes[i].parent)));
      const auto& peers = by_level[nodes[i].level - 1];
      if (nodes[i].level >= 2 && peers.size() > 1 && extra(rng)) {
        std::size_t other = peers[rng() % peers.size()];
        if (other == static_cast<std::size_t>(nodes[i].parent)) other = peers[(std::find(peers.begin(), peers.end(), other) - peers.begin() + 1) % peers.size()];
        parents.push_back(kb_id(other));
      }
    }
    o["parents"] = std::move(parents);
    o["terms"] = nlohmann::json::object();
    nlohmann::json docs = nlohmann::json::array();
    for (std::size_t k = 0; k < cfg.kb_docs_per_node; ++k) {
      docs.push_back({{"id", kb_id(i) + "#" + std::to_string(k)},
                      {"text", sample_text(nodes[i].theta, cfg.kb_doc_length, noise, rng)}});
    }
    o["docs"] = std::move(docs);
    kb_nodes.push_back(std::move(o));
  }
  out.kb = {{"nodes", std::move(kb_nodes)}};
  return out;
}

std::uint64_t corpus_checksum(const Corpus& corpus) {
  std::ostringstream os;
  write_corpus_jsonl(os, corpus);
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : os.str()) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace steer
