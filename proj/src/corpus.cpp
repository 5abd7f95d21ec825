#include "steer/corpus.hpp"

#include "json.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

namespace steer {

namespace {

constexpr const char* kEnglishStopwords[] = {
    "a",       "about",   "above",  "after",   "again",  "against", "all",    "am",
    "an",      "and",     "any",    "are",     "as",     "at",      "be",     "because",
    "been",    "before",  "being",  "below",   "between", "both",   "but",    "by",
    "can",     "could",   "did",    "do",      "does",   "doing",   "down",   "during",
    "each",    "few",     "for",    "from",    "further", "had",    "has",    "have",
    "having",  "he",      "her",    "here",    "hers",   "herself", "him",    "himself",
    "his",     "how",     "i",      "if",      "in",     "into",    "is",     "it",
    "its",     "itself",  "just",   "me",      "more",   "most",    "my",     "myself",
    "no",      "nor",     "not",    "now",     "of",     "off",     "on",     "once",
    "only",    "or",      "other",  "our",     "ours",   "ourselves", "out",  "over",
    "own",     "same",    "she",    "should",  "so",     "some",    "such",   "than",
    "that",    "the",     "their",  "theirs",  "them",   "themselves", "then", "there",
    "these",   "they",    "this",   "those",   "through", "to",     "too",    "under",
    "until",   "up",      "very",   "was",     "we",     "were",    "what",   "when",
    "where",   "which",   "while",  "who",     "whom",   "why",     "will",   "with",
    "would",   "you",     "your",   "yours",   "yourself", "yourselves",
};

bool is_word_byte(unsigned char c) {
  return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80;
}

std::size_t utf8_length(std::string_view s) {
  return static_cast<std::size_t>(
      std::count_if(s.begin(), s.end(), [](char c) { return (static_cast<unsigned char>(c) & 0xC0) != 0x80; }));
}

}  // namespace

TokenizerConfig TokenizerConfig::english() {
  TokenizerConfig config;
  for (const char* w : kEnglishStopwords) config.stopwords.insert(w);
  return config;
}

std::vector<std::string> tokenize(std::string_view text, const TokenizerConfig& config) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty() && utf8_length(current) >= config.min_length &&
        !config.stopwords.contains(current)) {
      tokens.push_back(current);
    }
    current.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (!is_word_byte(c)) {
      flush();
    } else if (c < 0x80) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else if (c == 0xC3 && i + 1 < text.size()) {
      // Latin-1 capitals U+00C0..U+00DE (except U+00D7) fold to lower case
      auto next = static_cast<unsigned char>(text[i + 1]);
      if (next >= 0x80 && next <= 0x9E && next != 0x97) next += 0x20;
      current.push_back(static_cast<char>(c));
      current.push_back(static_cast<char>(next));
      ++i;
    } else {
      current.push_back(static_cast<char>(c));
    }
  }
  flush();
  return tokens;
}

std::optional<TermId> Vocabulary::find(std::string_view term) const {
  auto it = ids_.find(std::string(term));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

TermId Vocabulary::intern(std::string_view term) {
  auto [it, inserted] = ids_.try_emplace(std::string(term), static_cast<TermId>(terms_.size()));
  if (inserted) terms_.emplace_back(term);
  return it->second;
}

SparseCounts count_terms(std::span<const std::string> tokens, Vocabulary& vocab) {
  std::map<TermId, std::int64_t> acc;
  for (const auto& t : tokens) ++acc[vocab.intern(t)];
  return {acc.begin(), acc.end()};
}

Document make_document(std::string id, std::string_view text, Vocabulary& vocab,
                       const TokenizerConfig& config, std::string title) {
  Document d;
  d.id = std::move(id);
  d.title = std::move(title);
  d.body = std::string(text);
  const auto tokens = tokenize(text, config);
  d.counts = count_terms(tokens, vocab);
  d.length = static_cast<std::int64_t>(tokens.size());
  return d;
}

std::optional<DocIndex> Corpus::find(std::string_view id) const {
  auto it = by_id_.find(std::string(id));
  if (it == by_id_.end()) return std::nullopt;
  return it->second;
}

void Corpus::reindex() {
  by_id_.clear();
  for (DocIndex i = 0; i < docs.size(); ++i) {
    if (!by_id_.emplace(docs[i].id, i).second) {
      throw Error(ErrorCode::SchemaViolation, "duplicate document id '" + docs[i].id + "'",
                  "/" + std::to_string(i) + "/id");
    }
  }
}

void read_corpus_jsonl(std::istream& in, Corpus& corpus, const TokenizerConfig& config) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "/" + std::to_string(lineno - 1);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorCode::SchemaViolation, std::string("line is not valid JSON: ") + e.what(), where);
    }
    if (!j.is_object()) throw Error(ErrorCode::SchemaViolation, "line must be a JSON object", where);
    if (!j.contains("id") || !j["id"].is_string()) {
      throw Error(ErrorCode::SchemaViolation, "missing string field 'id'", where + "/id");
    }
    if (!j.contains("text") || !j["text"].is_string()) {
      throw Error(ErrorCode::SchemaViolation, "missing string field 'text'", where + "/text");
    }
    std::string title;
    if (j.contains("title")) {
      if (!j["title"].is_string()) throw Error(ErrorCode::SchemaViolation, "'title' must be a string", where + "/title");
      title = j["title"].get<std::string>();
    }
    corpus.docs.push_back(make_document(j["id"].get<std::string>(), j["text"].get<std::string>(),
                                        corpus.vocab, config, std::move(title)));
  }
  corpus.reindex();
}

Corpus load_corpus_jsonl(const std::string& path, const TokenizerConfig& config) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open corpus file '" + path + "'");
  Corpus corpus;
  read_corpus_jsonl(in, corpus, config);
  return corpus;
}

void write_corpus_jsonl(std::ostream& out, const Corpus& corpus) {
  for (const auto& d : corpus.docs) {
    nlohmann::json j;
    j["id"] = d.id;
    if (!d.title.empty()) j["title"] = d.title;
    j["text"] = d.body;
    out << j.dump() << '\n';
  }
}

EmbeddingStore read_embeddings(std::istream& in, const Vocabulary& vocab) {
  EmbeddingStore store;
  std::string line;
  bool first = true;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::vector<std::string> fields;
    for (std::string f; ls >> f;) fields.push_back(std::move(f));
    if (fields.empty()) continue;
    if (first) {
      first = false;
      // "count dim" header
      if (fields.size() == 2 && fields[0].find_first_not_of("0123456789") == std::string::npos &&
          fields[1].find_first_not_of("0123456789") == std::string::npos) {
        store.dimension = std::stol(fields[1]);
        continue;
      }
    }
    const auto dim = static_cast<Eigen::Index>(fields.size() - 1);
    if (dim <= 0) throw Error(ErrorCode::SchemaViolation, "embedding line without values", "/" + std::to_string(lineno - 1));
    if (store.dimension == 0) store.dimension = dim;
    if (dim != store.dimension) {
      throw Error(ErrorCode::SchemaViolation,
                  "embedding for '" + fields[0] + "' has dimension " + std::to_string(dim) +
                      ", expected " + std::to_string(store.dimension),
                  "/" + std::to_string(lineno - 1));
    }
    auto id = vocab.find(fields[0]);
    if (!id) continue;
    Vec v(dim);
    for (Eigen::Index k = 0; k < dim; ++k) v[k] = std::stod(fields[static_cast<std::size_t>(k) + 1]);
    store.vectors.emplace(*id, std::move(v));
  }
  return store;
}

EmbeddingStore load_embeddings(const std::string& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open embedding file '" + path + "'");
  return read_embeddings(in, vocab);
}

TfIdfModel::TfIdfModel(std::span<const Document> docs, std::size_t vocab_size) {
  std::vector<const Document*> ptrs;
  ptrs.reserve(docs.size());
  for (const auto& d : docs) ptrs.push_back(&d);
  fit(ptrs, vocab_size);
}

void TfIdfModel::fit(std::span<const Document* const> docs, std::size_t vocab_size) {
  Vec df = Vec::Zero(static_cast<Eigen::Index>(vocab_size));
  for (const Document* d : docs) {
    for (const auto& [t, c] : d->counts) {
      if (t < vocab_size) df[t] += 1;
    }
  }
  const auto n = static_cast<Scalar>(docs.size());
  idf_ = Vec::Zero(df.size());
  for (Eigen::Index t = 0; t < df.size(); ++t) {
    if (df[t] > 0) idf_[t] = std::log(n / df[t]);
  }
}

Scalar TfIdfModel::idf(TermId term) const {
  return term < idf_.size() ? idf_[term] : Scalar(0);
}

Vec TfIdfModel::vector(const Document& d) const {
  Vec v = Vec::Zero(idf_.size());
  for (const auto& [t, c] : d.counts) {
    if (t < idf_.size()) v[t] = static_cast<Scalar>(c) * idf_[t];
  }
  const Scalar n = v.norm();
  if (n > 0) v /= n;
  return v;
}

Vec doc_vector(const Document& d, const EmbeddingStore* store, const TfIdfModel& fallback) {
  if (d.length == 0) throw Error(ErrorCode::EmptyDocument, "document '" + d.id + "' is empty");
  if (store != nullptr && !store->empty()) {
    Vec acc = Vec::Zero(store->dimension);
    Scalar weight = 0;
    for (const auto& [t, c] : d.counts) {
      if (const Vec* v = store->find(t)) {
        acc += static_cast<Scalar>(c) * *v;
        weight += static_cast<Scalar>(c);
      }
    }
    if (weight > 0) {
      acc /= weight;
      const Scalar n = acc.norm();
      if (n > 0) return acc / n;
    }
  }
  return fallback.vector(d);
}

}  // namespace steer
