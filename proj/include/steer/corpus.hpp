#ifndef STEER_CORPUS_HPP
#define STEER_CORPUS_HPP

#include "steer/common.hpp"

#include <algorithm>
#include <cmath>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace steer {

struct TokenizerConfig {
  std::unordered_set<std::string> stopwords;
  std::size_t min_length = 2;

  static TokenizerConfig english();
};

/// Lowercased alphanumeric tokens in input order. Bytes >= 0x80 are kept as
/// word characters so UTF-8 words survive segmentation intact; case folding
/// covers ASCII and Latin-1 letters.
std::vector<std::string> tokenize(std::string_view text,
                                  const TokenizerConfig& config);

class Vocabulary {
 public:
  std::optional<TermId> find(std::string_view term) const;
  TermId intern(std::string_view term);
  const std::string& term(TermId id) const { return terms_.at(id); }
  std::size_t size() const { return terms_.size(); }

 private:
  std::unordered_map<std::string, TermId> ids_;
  std::vector<std::string> terms_;
};

struct Document {
  std::string id;
  SparseCounts counts;
  std::int64_t length = 0;
  std::string title;
  std::string body;
};

SparseCounts count_terms(std::span<const std::string> tokens, Vocabulary& vocab);

Document make_document(std::string id, std::string_view text, Vocabulary& vocab,
                       const TokenizerConfig& config, std::string title = {});

/// Documents plus their shared vocabulary. Immutable once loading finishes.
struct Corpus {
  Vocabulary vocab;
  std::vector<Document> docs;

  std::optional<DocIndex> find(std::string_view id) const;
  void reindex();

 private:
  std::unordered_map<std::string, DocIndex> by_id_;
};

/// One JSON object per line: {"id": str, "title": str?, "text": str}.
/// Blank lines are skipped. Duplicate ids are a schema violation.
void read_corpus_jsonl(std::istream& in, Corpus& corpus,
                       const TokenizerConfig& config);
Corpus load_corpus_jsonl(const std::string& path, const TokenizerConfig& config);
void write_corpus_jsonl(std::ostream& out, const Corpus& corpus);

struct EmbeddingStore {
  Eigen::Index dimension = 0;
  std::unordered_map<TermId, Vec> vectors;

  bool empty() const { return vectors.empty(); }
  const Vec* find(TermId term) const {
    auto it = vectors.find(term);
    return it == vectors.end() ? nullptr : &it->second;
  }
};

/// Text vectors, "word f1 ... fd" per line with an optional "count dim"
/// header line. Words absent from the vocabulary are skipped.
EmbeddingStore read_embeddings(std::istream& in, const Vocabulary& vocab);
EmbeddingStore load_embeddings(const std::string& path, const Vocabulary& vocab);

class TfIdfModel {
 public:
  TfIdfModel() = default;
  TfIdfModel(std::span<const Document> docs, std::size_t vocab_size);
  void fit(std::span<const Document* const> docs, std::size_t vocab_size);

  Scalar idf(TermId term) const;
  std::size_t dimension() const { return static_cast<std::size_t>(idf_.size()); }
  /// L2-normalized tf-idf vector; all-zero when no term carries weight.
  Vec vector(const Document& d) const;

 private:
  Vec idf_;
};

template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar cosine_similarity(const Eigen::MatrixBase<DerivedA>& u,
                                            const Eigen::MatrixBase<DerivedB>& v) {
  if (u.size() != v.size()) {
    throw Error(ErrorCode::DimensionMismatch, "cosine of vectors with different dimension");
  }
  const auto nu = u.norm();
  const auto nv = v.norm();
  if (nu == 0 || nv == 0) throw Error(ErrorCode::ZeroVector, "cosine of a zero vector");
  const auto c = u.dot(v) / (nu * nv);
  return std::clamp(c, typename DerivedA::Scalar(-1), typename DerivedA::Scalar(1));
}

/// Count-weighted mean of the embeddings of in-store terms, L2-normalized.
/// Falls back to the tf-idf vector when no term is covered by the store.
Vec doc_vector(const Document& d, const EmbeddingStore* store, const TfIdfModel& fallback);

}  // namespace steer

#endif  // STEER_CORPUS_HPP
