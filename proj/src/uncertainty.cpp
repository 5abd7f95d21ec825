#include "steer/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace steer {

std::vector<Scalar> model_uncertainty(const RoseTree& tree) {
  std::vector<Scalar> out(tree.arena_size(), 0);
  if (tree.empty()) return out;
  Scalar lo = INFINITY, hi = -INFINITY;
  bool any_internal = false, any_record = false;
  for (NodeId id : tree.preorder()) {
    const auto& n = tree.node(id);
    if (n.is_leaf()) continue;
    any_internal = true;
    if (!n.merge) continue;
    any_record = true;
    const Scalar raw = -n.merge->log_posterior_ratio;
    lo = std::min(lo, raw);
    hi = std::max(hi, raw);
  }
  if (any_internal && !any_record) {
    throw Error(ErrorCode::MissingProvenance, "tree carries no merge records");
  }
  for (NodeId id : tree.preorder()) {
    const auto& n = tree.node(id);
    if (n.is_leaf()) continue;
    if (!n.merge || !(hi > lo)) {
      out[id] = 0.5;
      continue;
    }
    out[id] = std::clamp((-n.merge->log_posterior_ratio - lo) / (hi - lo), Scalar(0), Scalar(1));
  }
  return out;
}

namespace {

Scalar normalized_entropy(const std::map<NodeId, std::size_t>& counts) {
  std::size_t total = 0;
  for (const auto& [k, c] : counts) total += c;
  if (total == 0 || counts.size() < 2) return 0;
  Scalar h = 0;
  for (const auto& [k, c] : counts) {
    const Scalar p = static_cast<Scalar>(c) / static_cast<Scalar>(total);
    h -= p * std::log(p);
  }
  const Scalar m = std::max<Scalar>(2, static_cast<Scalar>(counts.size()));
  return std::clamp(h / std::log(m), Scalar(0), Scalar(1));
}

// Target node of each shared document of `node` in the other tree.
std::map<NodeId, std::size_t> targets(const RoseTree& tree, const LcaIndex& index, NodeId node,
                                      const LcaIndex& other) {
  std::map<NodeId, std::size_t> counts;
  const std::size_t depth = index.depth(node);
  for (DocIndex d : tree.docs_under(node)) {
    if (!other.has_doc(d)) continue;
    ++counts[other.ancestor_at_depth(other.leaf_of(d), depth)];
  }
  return counts;
}

}  // namespace

Scalar dispersion(const RoseTree& tree, const LcaIndex& tree_index, NodeId node, const LcaIndex& other_index) {
  return normalized_entropy(targets(tree, tree_index, node, other_index));
}

KnowledgeScores knowledge_uncertainty(const RoseTree& clustering, const RoseTree& constraint,
                                      DispersionCombine combine) {
  KnowledgeScores out;
  out.clustering.assign(clustering.arena_size(), 0);
  out.constraint.assign(constraint.arena_size(), 0);
  if (clustering.empty() || constraint.empty()) return out;
  const LcaIndex ci(clustering), ki(constraint);
  for (NodeId u : constraint.preorder()) out.constraint[u] = dispersion(constraint, ki, u, ci);
  for (NodeId v : clustering.preorder()) {
    const auto t = targets(clustering, ci, v, ki);
    if (t.empty()) continue;
    const Scalar forward = normalized_entropy(t);
    Scalar backward = 0;
    for (const auto& [u, c] : t) backward += out.constraint[u];
    backward /= static_cast<Scalar>(t.size());
    out.clustering[v] = combine == DispersionCombine::Max ? std::max(forward, backward) : (forward + backward) / 2;
  }
  return out;
}

Scalar subsethood(std::span<const Scalar> mu_child, std::span<const Scalar> mu_parent) {
  if (mu_child.size() != mu_parent.size()) throw Error(ErrorCode::DimensionMismatch, "membership lengths differ");
  Scalar num = 0, den = 0;
  for (std::size_t i = 0; i < mu_child.size(); ++i) {
    num += std::min(mu_child[i], mu_parent[i]);
    den += mu_child[i];
  }
  if (den <= 0) return 1;
  return std::clamp(num / den, Scalar(0), Scalar(1));
}

Eigen::SparseMatrix<Scalar, Eigen::RowMajor> doc_matrix(const Corpus& corpus, const EmbeddingStore* store,
                                                        const TfIdfModel& tfidf) {
  const Eigen::Index offset = store ? store->dimension : 0;
  std::vector<Eigen::Triplet<Scalar>> entries;
  for (DocIndex d = 0; d < corpus.docs.size(); ++d) {
    const Document& doc = corpus.docs[d];
    if (doc.length == 0) continue;
    const Vec v = doc_vector(doc, store, tfidf);
    const bool covered = store && !store->empty() &&
                         std::any_of(doc.counts.begin(), doc.counts.end(),
                                     [&](const auto& tc) { return store->find(tc.first) != nullptr; });
    const Eigen::Index base = covered && v.size() == store->dimension ? 0 : offset;
    for (Eigen::Index i = 0; i < v.size(); ++i)
      if (v[i] != 0) entries.emplace_back(static_cast<Eigen::Index>(d), base + i, v[i]);
  }
  Eigen::SparseMatrix<Scalar, Eigen::RowMajor> m(static_cast<Eigen::Index>(corpus.docs.size()),
                                                 offset + static_cast<Eigen::Index>(tfidf.dimension()));
  m.setFromTriplets(entries.begin(), entries.end());
  return m;
}

std::vector<Scalar> structure_uncertainty(const RoseTree& tree,
                                          const Eigen::SparseMatrix<Scalar, Eigen::RowMajor>& docs) {
  std::vector<Scalar> out(tree.arena_size(), 0);
  if (tree.empty()) return out;
  auto direction = [&](const std::vector<DocIndex>& members) {
    Vec s = Vec::Zero(docs.cols());
    for (DocIndex d : members) s += docs.row(d).transpose();
    const Scalar n = s.norm();
    if (n > 0) s /= n;
    return s;
  };
  auto memberships = [&](const std::vector<DocIndex>& over, const Vec& dir) {
    std::vector<Scalar> mu(over.size());
    for (std::size_t i = 0; i < over.size(); ++i) mu[i] = std::max<Scalar>(0, docs.row(over[i]).dot(dir));
    return mu;
  };
  for (NodeId p : tree.preorder()) {
    const auto& node = tree.node(p);
    if (node.is_leaf()) continue;
    const auto members = tree.docs_under(p);
    const auto mu_p = memberships(members, direction(members));
    for (NodeId c : node.children) {
      const auto mu_c = memberships(members, direction(tree.docs_under(c)));
      out[c] = 1 - subsethood(mu_c, mu_p);
    }
  }
  return out;
}

UncertaintyScore aggregate(Scalar model, Scalar knowledge, Scalar structure) {
  UncertaintyScore s{model, knowledge, structure, 0};
  s.overall = std::clamp((model + 3 * knowledge + 4 * structure) / 8, Scalar(0), Scalar(1));
  return s;
}

void annotate_uncertainty(RoseTree& tree, const RoseTree* constraint, const Corpus& corpus,
                          const EmbeddingStore* store, DispersionCombine combine) {
  if (tree.empty()) return;
  const auto model = model_uncertainty(tree);
  std::vector<Scalar> knowledge(tree.arena_size(), 0);
  if (constraint && !constraint->empty()) knowledge = knowledge_uncertainty(tree, *constraint, combine).clustering;
  const TfIdfModel tfidf(corpus.docs, corpus.vocab.size());
  const auto structure = structure_uncertainty(tree, doc_matrix(corpus, store, tfidf));
  for (NodeId id : tree.preorder()) tree.node(id).uncertainty = aggregate(model[id], knowledge[id], structure[id]);
}

}  // namespace steer
