#include "steer/service.hpp"

#include "steer/edit.hpp"
#include "steer/layout.hpp"
#include "steer/uncertainty.hpp"

#include "httplib.h"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <csignal>
#include <deque>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <thread>
#include <unordered_set>

namespace steer {

namespace fs = std::filesystem;
using json = nlohmann::json;

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::SchemaViolation:
    case ErrorCode::EmptyCorpus:
    case ErrorCode::EmptyKb:
    case ErrorCode::EmptyDocument:
    case ErrorCode::DimensionMismatch:
    case ErrorCode::InvalidArgument:
      return 400;
    case ErrorCode::NotFound:
    case ErrorCode::NodeNotFound:
    case ErrorCode::DocNotInTree:
    case ErrorCode::FocusNotFound:
      return 404;
    case ErrorCode::JobAlreadyRunning:
    case ErrorCode::NothingToUndo:
      return 409;
    case ErrorCode::IllegalMerge:
    case ErrorCode::IllegalMove:
    case ErrorCode::TooFewDocuments:
    case ErrorCode::NoProjectedDocuments:
    case ErrorCode::DegenerateWalk:
    case ErrorCode::MissingProvenance:
    case ErrorCode::TooFewSharedDocs:
    case ErrorCode::ZeroVector:
    case ErrorCode::Cancelled:
      return 422;
    case ErrorCode::Io:
      return 500;
  }
  return 500;
}

json error_json(const Error& e) {
  json j = {{"code", to_string(e.code())}, {"message", e.what()}};
  if (!e.path().empty()) j["path"] = e.path();
  return j;
}

namespace {

constexpr std::size_t kUndoDepth = 50;

const TokenizerConfig& tokenizer() {
  static const TokenizerConfig t = TokenizerConfig::english();
  return t;
}

struct CorpusData {
  Corpus corpus;
  DocIdTable ids;
  std::string file;  // name under the session directory
};

std::shared_ptr<const CorpusData> make_corpus_data(Corpus corpus, std::string file) {
  auto out = std::make_shared<CorpusData>();
  std::vector<std::string> ids;
  ids.reserve(corpus.docs.size());
  for (const auto& d : corpus.docs) ids.push_back(d.id);
  out->ids = DocIdTable(std::move(ids));
  out->corpus = std::move(corpus);
  out->file = std::move(file);
  return out;
}

enum class Which { Constraint = 0, Clustering = 1 };

Which which_from(const std::string& s) {
  if (s == "constraint") return Which::Constraint;
  if (s == "clustering") return Which::Clustering;
  throw Error(ErrorCode::NotFound, "unknown tree '" + s + "'");
}

const char* name_of(Which w) { return w == Which::Constraint ? "constraint" : "clustering"; }

struct State {
  std::uint64_t version = 0;
  std::shared_ptr<const CorpusData> corpus;
  std::shared_ptr<const RoseTree> constraint = std::make_shared<RoseTree>();
  std::shared_ptr<const RoseTree> clustering = std::make_shared<RoseTree>();
  std::vector<DocIndex> pool;  // documents outside the clustering tree

  const RoseTree& tree(Which w) const { return w == Which::Constraint ? *constraint : *clustering; }
  void set(Which w, RoseTree t) {
    (w == Which::Constraint ? constraint : clustering) = std::make_shared<const RoseTree>(std::move(t));
  }
};

struct Job {
  std::uint64_t id = 0;
  std::string kind;
  std::atomic<double> progress{0};
  std::atomic<bool> cancel{false};
  std::atomic<bool> partial{false};
  // guarded by the session mutex
  std::string state = "running";
  json result = json::object();
  bool finished = false;
  std::thread worker;

  void report(double p) {
    double cur = progress.load();
    while (p > cur && !progress.compare_exchange_weak(cur, p)) {
    }
  }

  json to_json() const {
    json j = {{"id", id}, {"kind", kind}, {"state", state}, {"progress", progress.load()}};
    for (const auto& [k, v] : result.items()) j[k] = v;
    return j;
  }
};

struct View {
  RoseTree annotated;
  Ordering ordering;
};

void write_file(const fs::path& path, const std::string& content) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::Io, "cannot write '" + tmp.string() + "'");
    out << content;
    if (!out) throw Error(ErrorCode::Io, "cannot write '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json tree_record(const RoseTree& t, const DocIdTable& ids) {
  return {{"tree", tree_to_json(t, ids)}, {"arena", t.arena_size()}};
}

RoseTree tree_from_record(const json& j, DocIdTable& ids) {
  RoseTree t = tree_from_json(j.at("tree"), ids, false);
  const auto arena = j.at("arena").get<std::size_t>();
  while (t.arena_size() < arena) t.node(t.add_node()).alive = false;
  return t;
}

std::string random_id() {
  static std::mutex mu;
  static std::mt19937_64 rng{std::random_device{}()};
  std::lock_guard lock(mu);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(rng()));
  return buf;
}

}  // namespace

struct Session {
  std::string id;
  fs::path dir;
  std::mutex mu;
  State current;
  std::deque<State> undo;
  std::uint64_t last_version = 0;
  RunConfig config;
  std::optional<json> kb;
  std::string embeddings_text;
  std::shared_ptr<const EmbeddingStore> store;
  std::map<std::uint64_t, std::shared_ptr<Job>> jobs;
  std::shared_ptr<Job> running;
  std::uint64_t next_job = 1;
  std::map<std::pair<int, std::uint64_t>, std::shared_ptr<const View>> views;
  std::map<int, Ordering> shown;  // last ordering served, per tree

  // --- persistence (callers hold mu) ---

  json state_json(const State& s, const std::deque<State>& stack) const {
    json pool = json::array();
    for (DocIndex d : s.pool) pool.push_back(s.corpus->ids.id(d));
    json versions = json::array();
    for (const State& u : stack) versions.push_back(u.version);
    return {{"version", s.version},
            {"corpus_file", s.corpus->file},
            {"constraint", tree_record(*s.constraint, s.corpus->ids)},
            {"clustering", tree_record(*s.clustering, s.corpus->ids)},
            {"pool", pool},
            {"undo", versions}};
  }

  void write_corpus(const CorpusData& c) const {
    std::ostringstream out;
    write_corpus_jsonl(out, c.corpus);
    write_file(dir / c.file, out.str());
  }

  void write_config() const { write_file(dir / "config.json", config.to_json().dump(2)); }

  void write_meta() const {
    json meta = {{"id", id}};
    if (kb) meta["kb"] = *kb;
    if (!embeddings_text.empty()) meta["embeddings_file"] = "embeddings.txt";
    write_file(dir / "meta.json", meta.dump());
    if (!embeddings_text.empty()) write_file(dir / "embeddings.txt", embeddings_text);
  }

  // Snapshot first, then swap in memory: a failed write leaves the version as is.
  void commit(State next) {
    next.version = last_version + 1;
    auto stack = undo;
    stack.push_back(current);
    if (stack.size() > kUndoDepth) stack.pop_front();
    fs::create_directories(dir / "versions");
    write_file(dir / "versions" / (std::to_string(next.version) + ".json"), state_json(next, stack).dump());
    last_version = next.version;
    undo = std::move(stack);
    current = std::move(next);
  }

  void pop_undo() {
    if (undo.empty()) throw Error(ErrorCode::NothingToUndo, "nothing to undo");
    State prev = undo.back();
    auto stack = undo;
    stack.pop_back();
    prev.version = last_version + 1;
    write_file(dir / "versions" / (std::to_string(prev.version) + ".json"), state_json(prev, stack).dump());
    last_version = prev.version;
    undo = std::move(stack);
    current = std::move(prev);
  }

  State load_state(std::uint64_t version, std::map<std::string, std::shared_ptr<const CorpusData>>& corpora) const {
    const json j = json::parse(read_file(dir / "versions" / (std::to_string(version) + ".json")));
    State s;
    s.version = version;
    const auto file = j.at("corpus_file").get<std::string>();
    auto it = corpora.find(file);
    if (it == corpora.end()) {
      Corpus c = load_corpus_jsonl((dir / file).string(), tokenizer());
      it = corpora.emplace(file, make_corpus_data(std::move(c), file)).first;
    }
    s.corpus = it->second;
    DocIdTable ids = s.corpus->ids;
    s.constraint = std::make_shared<const RoseTree>(tree_from_record(j.at("constraint"), ids));
    s.clustering = std::make_shared<const RoseTree>(tree_from_record(j.at("clustering"), ids));
    for (const auto& d : j.at("pool")) s.pool.push_back(*s.corpus->corpus.find(d.get<std::string>()));
    return s;
  }

  void require_idle() const {
    if (running) {
      throw Error(ErrorCode::JobAlreadyRunning, "job " + std::to_string(running->id) + " (" + running->kind +
                                                    ") is still running");
    }
  }

  json summary() const {
    json j = {{"id", id},
              {"version", current.version},
              {"config", config.to_json()},
              {"docs", current.corpus->corpus.docs.size()},
              {"pool", current.pool.size()},
              {"has_kb", kb.has_value()},
              {"undo_depth", undo.size()}};
    j["job"] = running ? running->to_json() : json(nullptr);
    return j;
  }
};

namespace {

using Handler = std::function<std::pair<int, json>(const httplib::Request&)>;

httplib::Server::Handler wrap(Handler f) {
  return [f = std::move(f)](const httplib::Request& req, httplib::Response& res) {
    try {
      auto [status, body] = f(req);
      res.status = status;
      res.set_content(body.dump(), "application/json");
    } catch (const Error& e) {
      res.status = http_status(e.code());
      res.set_content(error_json(e).dump(), "application/json");
    } catch (const json::exception& e) {
      res.status = 400;
      res.set_content(json{{"code", "SchemaViolation"}, {"message", e.what()}}.dump(), "application/json");
    } catch (const std::exception& e) {
      res.status = 500;
      res.set_content(json{{"code", "Internal"}, {"message", e.what()}}.dump(), "application/json");
    }
  };
}

json parse_body(const httplib::Request& req) {
  if (req.body.find_first_not_of(" \t\r\n") == std::string::npos) return json::object();
  try {
    json j = json::parse(req.body);
    if (!j.is_object()) throw Error(ErrorCode::SchemaViolation, "request body must be a JSON object", "");
    return j;
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::SchemaViolation, std::string("request body is not valid JSON: ") + e.what(), "");
  }
}

NodeId node_field(const json& body, const std::string& key) {
  if (!body.contains(key)) throw Error(ErrorCode::InvalidArgument, "missing '" + key + "'", "/" + key);
  const auto& v = body[key];
  if (!v.is_number_unsigned() || v.get<std::uint64_t>() >= kNoNode) {
    throw Error(ErrorCode::InvalidArgument, "'" + key + "' must be a node id", "/" + key);
  }
  return static_cast<NodeId>(v.get<std::uint64_t>());
}

NodeId node_param(const std::string& s) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used);
    if (used == s.size() && v < kNoNode) return static_cast<NodeId>(v);
  } catch (const std::exception&) {
  }
  throw Error(ErrorCode::NodeNotFound, "node '" + s + "' not found");
}

std::size_t size_param(const httplib::Request& req, const std::string& key, std::size_t fallback) {
  if (!req.has_param(key)) return fallback;
  const auto s = req.get_param_value(key);
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw Error(ErrorCode::InvalidArgument, "query parameter '" + key + "' must be a non-negative integer", key);
}

std::vector<DocIndex> doc_list(const json& body, const CorpusData& c) {
  if (!body.contains("docs") || !body["docs"].is_array()) {
    throw Error(ErrorCode::InvalidArgument, "'docs' must be an array of document ids", "/docs");
  }
  std::vector<DocIndex> out;
  for (std::size_t i = 0; i < body["docs"].size(); ++i) {
    const auto& v = body["docs"][i];
    const std::string path = "/docs/" + std::to_string(i);
    if (!v.is_string()) throw Error(ErrorCode::InvalidArgument, "document ids must be strings", path);
    const auto d = c.corpus.find(v.get<std::string>());
    if (!d) throw Error(ErrorCode::DocNotInTree, "unknown document '" + v.get<std::string>() + "'", path);
    out.push_back(*d);
  }
  return out;
}

Corpus parse_corpus(const json& body) {
  if (!body.contains("corpus")) throw Error(ErrorCode::SchemaViolation, "missing 'corpus'", "/corpus");
  const auto& c = body["corpus"];
  std::string text;
  if (c.is_string()) {
    text = c.get<std::string>();
  } else if (c.is_array()) {
    for (const auto& d : c) text += d.dump() + "\n";
  } else {
    throw Error(ErrorCode::SchemaViolation, "'corpus' must be JSON-lines text or an array of documents", "/corpus");
  }
  Corpus corpus;
  std::istringstream in(text);
  try {
    read_corpus_jsonl(in, corpus, tokenizer());
  } catch (const Error& e) {
    throw Error(e.code(), e.what(), "/corpus" + e.path());
  }
  if (corpus.docs.empty()) throw Error(ErrorCode::EmptyCorpus, "corpus has no documents", "/corpus");
  return corpus;
}

// Uncertainty on a copy of one tree, the other tree serving as reference.
RoseTree annotate(const RoseTree& tree, const RoseTree& other, Which which, const Corpus& corpus,
                  const Eigen::SparseMatrix<Scalar, Eigen::RowMajor>& m) {
  RoseTree t = tree;
  if (t.empty()) return t;
  std::vector<Scalar> model(t.arena_size(), 0);
  if (which == Which::Clustering) {
    try {
      model = model_uncertainty(t);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::MissingProvenance) throw;
      for (NodeId id : t.preorder())
        if (!t.node(id).is_leaf()) model[id] = 0.5;
    }
  }
  std::vector<Scalar> knowledge(t.arena_size(), 0);
  if (!other.empty()) {
    knowledge = which == Which::Clustering ? knowledge_uncertainty(t, other).clustering
                                           : knowledge_uncertainty(other, t).constraint;
  }
  const auto structure = structure_uncertainty(t, m);
  (void)corpus;
  for (NodeId id : t.preorder()) t.node(id).uncertainty = aggregate(model[id], knowledge[id], structure[id]);
  return t;
}

}  // namespace

Service::Service(ServiceOptions options) : options_(std::move(options)) {
  options_.defaults.validate();
  fs::create_directories(options_.data_dir / "sessions");
  restore();
}

Service::~Service() { shutdown(); }

void Service::shutdown() {
  std::vector<std::shared_ptr<Session>> all;
  {
    std::lock_guard lock(mu_);
    for (auto& [id, s] : sessions_) all.push_back(s);
  }
  for (auto& s : all) {
    std::vector<std::shared_ptr<Job>> jobs;
    {
      std::lock_guard lock(s->mu);
      for (auto& [id, j] : s->jobs) {
        j->cancel = true;
        jobs.push_back(j);
      }
    }
    for (auto& j : jobs)
      if (j->worker.joinable()) j->worker.join();
  }
}

std::size_t Service::session_count() const {
  std::lock_guard lock(mu_);
  return sessions_.size();
}

std::shared_ptr<Session> Service::find(const std::string& id) const {
  std::lock_guard lock(mu_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) throw Error(ErrorCode::NotFound, "session '" + id + "' not found");
  return it->second;
}

void Service::restore() {
  for (const auto& entry : fs::directory_iterator(options_.data_dir / "sessions")) {
    if (!entry.is_directory()) continue;
    try {
      auto s = std::make_shared<Session>();
      s->dir = entry.path();
      const json meta = json::parse(read_file(s->dir / "meta.json"));
      s->id = meta.at("id").get<std::string>();
      if (meta.contains("kb")) s->kb = meta["kb"];
      s->config = options_.defaults;
      if (fs::exists(s->dir / "config.json")) s->config.apply(json::parse(read_file(s->dir / "config.json")));
      std::uint64_t latest = 0;
      for (const auto& v : fs::directory_iterator(s->dir / "versions")) {
        if (v.path().extension() != ".json") continue;
        latest = std::max<std::uint64_t>(latest, std::stoull(v.path().stem().string()));
      }
      if (latest == 0) continue;
      std::map<std::string, std::shared_ptr<const CorpusData>> corpora;
      s->current = s->load_state(latest, corpora);
      s->last_version = latest;
      const json top = json::parse(read_file(s->dir / "versions" / (std::to_string(latest) + ".json")));
      for (const auto& v : top.at("undo")) s->undo.push_back(s->load_state(v.get<std::uint64_t>(), corpora));
      if (meta.contains("embeddings_file")) {
        s->embeddings_text = read_file(s->dir / meta["embeddings_file"].get<std::string>());
        std::istringstream in(s->embeddings_text);
        s->store = std::make_shared<const EmbeddingStore>(read_embeddings(in, s->current.corpus->corpus.vocab));
      }
      sessions_[s->id] = s;
    } catch (const std::exception& e) {
      std::cerr << json{{"code", "Io"}, {"message", std::string("skipping session ") + entry.path().string() + ": " + e.what()}}.dump()
                << '\n';
    }
  }
}

namespace {

std::shared_ptr<const View> compute_view(Session& s, const State& st, Which which, const RunConfig& config,
                                         const Ordering* previous) {
  const Corpus& corpus = st.corpus->corpus;
  const TfIdfModel tfidf(corpus.docs, corpus.vocab.size());
  const auto m = doc_matrix(corpus, s.store.get(), tfidf);
  auto view = std::make_shared<View>();
  const RoseTree& other = st.tree(which == Which::Clustering ? Which::Constraint : Which::Clustering);
  view->annotated = annotate(st.tree(which), other, which, corpus, m);
  const RoseTree& t = view->annotated;
  if (!t.empty()) {
    std::map<DocIndex, std::size_t> categories;
    std::size_t count = 0;
    const RoseTree& c = *st.constraint;
    if (!c.empty() && !c.node(c.root()).is_leaf()) {
      const auto& first = c.node(c.root()).children;
      categories = first_level_categories(c, first);
      count = first.size();
    }
    view->ordering = optimize_ordering(t, m, categories, count, previous, LayoutWeights{}, config.seed);
  }
  return view;
}

std::shared_ptr<const View> get_view(Session& s, Which which) {
  State st;
  RunConfig config;
  std::optional<Ordering> previous;
  {
    std::lock_guard lock(s.mu);
    auto it = s.views.find({static_cast<int>(which), s.current.version});
    if (it != s.views.end()) return it->second;
    st = s.current;
    config = s.config;
    if (auto p = s.shown.find(static_cast<int>(which)); p != s.shown.end()) previous = p->second;
  }
  auto view = compute_view(s, st, which, config, previous ? &*previous : nullptr);
  std::lock_guard lock(s.mu);
  if (s.views.size() > 16) s.views.erase(s.views.begin());
  s.views[{static_cast<int>(which), st.version}] = view;
  s.shown[static_cast<int>(which)] = view->ordering;
  return view;
}

using Work = std::function<std::optional<State>(const State&, const RunConfig&, Job&)>;

json start_job(const std::shared_ptr<Session>& s, const std::string& kind, const RunConfig& config, Work work) {
  std::lock_guard lock(s->mu);
  s->require_idle();
  for (auto& [id, j] : s->jobs)
    if (j->finished && j->worker.joinable()) j->worker.join();
  auto job = std::make_shared<Job>();
  job->id = s->next_job++;
  job->kind = kind;
  s->jobs[job->id] = job;
  s->running = job;
  State snapshot = s->current;
  job->worker = std::thread([s, job, config, snapshot = std::move(snapshot), work = std::move(work)] {
    std::optional<State> next;
    std::string state = "done";
    json error;
    try {
      next = work(snapshot, config, *job);
      if (job->partial) state = "cancelled";
    } catch (const Error& e) {
      if (e.code() == ErrorCode::Cancelled) {
        state = "cancelled";
      } else {
        state = "failed";
        error = error_json(e);
      }
    } catch (const std::exception& e) {
      state = "failed";
      error = {{"code", "Internal"}, {"message", e.what()}};
    }
    std::lock_guard lock(s->mu);
    if (next) {
      try {
        s->commit(std::move(*next));
        job->result["version"] = s->current.version;
      } catch (const Error& e) {
        state = "failed";
        error = error_json(e);
      }
    }
    if (state == "done") job->report(1.0);
    job->state = state;
    if (!error.is_null()) job->result["error"] = error;
    job->finished = true;
    s->running.reset();
  });
  return job->to_json();
}

template <typename F>
json mutate(const std::shared_ptr<Session>& s, F&& edit) {
  std::lock_guard lock(s->mu);
  s->require_idle();
  State next = s->current;
  json extra = edit(next);
  s->commit(std::move(next));
  json out = {{"version", s->current.version}};
  for (const auto& [k, v] : extra.items()) out[k] = v;
  return out;
}

}  // namespace

void Service::mount(httplib::Server& server) {
  const std::string base = "/api/v1";

  server.Get(base + "/health", wrap([](const httplib::Request&) { return std::pair{200, json{{"status", "ok"}}}; }));

  server.Post(base + "/sessions", wrap([this](const httplib::Request& req) {
    const json body = parse_body(req);
    auto s = std::make_shared<Session>();
    Corpus corpus = parse_corpus(body);
    if (body.contains("kb")) {
      Vocabulary scratch = corpus.vocab;
      try {
        read_kb_json(body["kb"], scratch, tokenizer());
      } catch (const Error& e) {
        throw Error(e.code(), e.what(), "/kb" + e.path());
      }
      s->kb = body["kb"];
    }
    if (body.contains("embeddings")) {
      if (!body["embeddings"].is_string()) {
        throw Error(ErrorCode::SchemaViolation, "'embeddings' must be the text of a vector file", "/embeddings");
      }
      s->embeddings_text = body["embeddings"].get<std::string>();
      std::istringstream in(s->embeddings_text);
      try {
        s->store = std::make_shared<const EmbeddingStore>(read_embeddings(in, corpus.vocab));
      } catch (const Error& e) {
        throw Error(e.code(), e.what(), "/embeddings" + e.path());
      }
    }
    s->config = options_.defaults;
    if (body.contains("config")) s->config.apply(body["config"]);
    s->id = random_id();
    s->dir = options_.data_dir / "sessions" / s->id;
    fs::create_directories(s->dir / "versions");
    State st;
    st.corpus = make_corpus_data(std::move(corpus), "corpus-1.jsonl");
    st.pool.resize(st.corpus->corpus.docs.size());
    for (DocIndex d = 0; d < st.pool.size(); ++d) st.pool[d] = d;
    st.version = 1;
    s->write_meta();
    s->write_config();
    s->write_corpus(*st.corpus);
    write_file(s->dir / "versions" / "1.json", s->state_json(st, {}).dump());
    s->current = std::move(st);
    s->last_version = 1;
    {
      std::lock_guard lock(mu_);
      sessions_[s->id] = s;
    }
    return std::pair{201, json{{"id", s->id}, {"version", 1}, {"docs", s->current.corpus->corpus.docs.size()}}};
  }));

  server.Get(base + R"(/sessions/([^/]+))", wrap([this](const httplib::Request& req) {
    auto s = find(req.matches[1]);
    std::lock_guard lock(s->mu);
    return std::pair{200, s->summary()};
  }));

  server.Patch(base + R"(/sessions/([^/]+)/config)", wrap([this](const httplib::Request& req) {
    auto s = find(req.matches[1]);
    const json body = parse_body(req);
    std::lock_guard lock(s->mu);
    s->require_idle();
    RunConfig next = s->config;
    next.apply(body);
    s->config = next;
    s->write_config();
    return std::pair{200, json{{"config", s->config.to_json()}}};
  }));

  server.Post(base + R"(/sessions/([^/]+)/extract)", wrap([this](const httplib::Request& req) {
    auto s = find(req.matches[1]);
    const json body = parse_body(req);
    RunConfig config;
    std::optional<json> kb;
    std::string embeddings;
    {
      std::lock_guard lock(s->mu);
      config = s->config;
      kb = s->kb;
      embeddings = s->embeddings_text;
    }
    if (!kb) throw Error(ErrorCode::EmptyKb, "session has no knowledge base");
    config.apply(body);
    Work work = [kb = *kb, embeddings](const State& st, const RunConfig& cfg, Job& job) -> std::optional<State> {
      // KB terms go into a private copy of the vocabulary; the session
      // corpus keeps its own so clustering sees the same vocabulary size.
      Corpus corpus = st.corpus->corpus;
      const KnowledgeBase base = read_kb_json(kb, corpus.vocab, tokenizer());
      std::optional<EmbeddingStore> store;
      if (!embeddings.empty()) {
        std::istringstream in(embeddings);
        store = read_embeddings(in, corpus.vocab);
      }
      ExtractControl control;
      control.progress = [&job](double p) { job.report(p); };
      control.cancel = &job.cancel;
      auto result = extract_constraint_tree(corpus, base, store ? &*store : nullptr, cfg.extract(), &control);
      job.result["info"] = result.info.to_json();
      State next = st;
      next.set(Which::Constraint, std::move(result.tree));
      return next;
    };
    return std::pair{202, start_job(s, "extract", config, std::move(work))};
  }));

  server.Post(base + R"(/sessions/([^/]+)/cluster)", wrap([this](const httplib::Request& req) {
    auto s = find(req.matches[1]);
    const json body = parse_body(req);
    RunConfig config;
    {
      std::lock_guard lock(s->mu);
      config = s->config;
    }
    config.apply(body);
    Work work = [](const State& st, const RunConfig& cfg, Job& job) -> std::optional<State> {
      const Corpus& corpus = st.corpus->corpus;
      std::vector<TripleFan> constraints;
      if (cfg.lambda > 0 && !st.constraint->empty()) constraints = decompose(*st.constraint, cfg.cap, cfg.seed).items;
      ClusterControl control;
      control.progress = [&job](double p) { job.report(p); };
      control.cancel = &job.cancel;
      RoseTree t = cluster(corpus, constraints, cfg.brt(corpus.vocab.size()), &control);
      job.partial = t.partial();
      State next = st;
      next.set(Which::Clustering, std::move(t));
      next.pool.clear();
      return next;
    };
    return std::pair{202, start_job(s, "cluster", config, std::move(work))};
  }));

  server.Get(base + R"(/sessions/([^/]+)/jobs/(\d+))", wrap([this](const httplib::Request& req) {
    auto s = find(req.matches[1]);
    std::lock_guard lock(s->mu);
    auto it = s->jobs.find(std::stoull(req.matches[2]));
    if (it == s->jobs.end()) throw Error(ErrorCode::NotFound, "job " + std::string(req.matches[2]) + " not found");
    return std::pair{200, it->second->to_json()};
  }));

  auto cancel = wrap([this](const httplib::Request& req) {
    auto s = find(req.matches[1]);
    std::lock_guard lock(s->mu);
    auto it = s->jobs.find(std::stoull(req.matches[2]));
    if (it == s->jobs.end()) throw Error(ErrorCode::NotFound, "job " + std::string(req.matches[2]) + " not found");
    it->second->cancel = true;
    return std::pair{202, it->second->to_json()};
  });
  server.Post(base + R"(/sessions/([^/]+)/jobs/(\d+)/cancel)", cancel);
  server.Delete(base + R"(/sessions/([^/]+)/jobs/(\d+))", cancel);

  server.Post(base + R"(/sessions/([^/]+)/tree/([^/]+)/merge)", wrap([this](const httplib::Request& req) {
    auto s = find(req.matches[1]);
    const Which which = which_from(req.matches[2]);
    const json body = parse_body(req);
    const NodeId src = node_field(body, "src"), dst = node_field(body, "dst");
    if (!body.contains("mode") || !body["mode"].is_string()) {
      throw Error(ErrorCode::InvalidArgument, "'mode' must be one of absorb, join, collapse", "/mode");
    }
    const EditMode mode = edit_mode_from_string(body["mode"].get<std::string>());
    return std::pair{200, mutate(s, [&](State& st) {
                       st.set(which, merge_nodes(st.tree(which), src, dst, mode));
                       return json::object();
                     })};
  }));

  server.Delete(base + R"(/sessions/([^/]+)/tree/([^/]+)/nodes/(\d+))", wrap([this](const httplib::Request& req) {
    auto s = find(req.matches[1]);
    const Which which = which_from(req.matches[2]);
    const NodeId node = node_param(req.matches[3]);
    return std::pair{200, mutate(s, [&](State& st) {
                       std::vector<DocIndex> released;
                       st.set(which, remove_node(st.tree(which), node, released));
                       if (which == Which::Clustering) st.pool.insert(st.pool.end(), released.begin(), released.end());
                       return json{{"released", released.size()}};
                     })};
  }));

  server.Patch(base + R"(/sessions/([^/]+)/tree/([^/]+)/nodes/(\d+))", wrap([this](const httplib::Request& req) {
    auto s = find(req.matches[1]);
    const Which which = which_from(req.matches[2]);
    const NodeId node = node_param(req.matches[3]);
    const json body = parse_body(req);
    if (!body.contains("label") || !body["label"].is_string()) {
      throw Error(ErrorCode::InvalidArgument, "'label' must be a string", "/label");
    }
    return std::pair{200, mutate(s, [&](State& st) {
                       st.set(which, rename_node(st.tree(which), node, body["label"].get<std::string>()));
                       return json::object();
                     })};
  }));

  server.Post(base + R"(/sessions/([^/]+)/tree/([^/]+)/nodes/(\d+)/rebuild)", wrap([this](const httplib::Request& req) {
    auto s = find(req.matches[1]);
    const Which which = which_from(req.matches[2]);
    const NodeId node = node_param(req.matches[3]);
    const json body = parse_body(req);
    RunConfig config;
    {
      std::lock_guard lock(s->mu);
      config = s->config;
      const RoseTree& t = s->current.tree(which);
      if (!t.contains(node)) throw Error(ErrorCode::NodeNotFound, "node " + std::to_string(node) + " not found");
    }
    config.apply(body);
    Work work = [which, node](const State& st, const RunConfig& cfg, Job& job) -> std::optional<State> {
      const Corpus& corpus = st.corpus->corpus;
      ClusterControl control;
      control.progress = [&job](double p) { job.report(p); };
      control.cancel = &job.cancel;
      RoseTree t = rebuild_subtree(st.tree(which), node, corpus, cfg.brt(corpus.vocab.size()), &control);
      job.partial = t.partial() && !st.tree(which).partial();
      State next = st;
      next.set(which, std::move(t));
      return next;
    };
    return std::pair{202, start_job(s, "rebuild", config, std::move(work))};
  }));

  server.Post(base + R"(/sessions/([^/]+)/docs/move)", wrap([this](const httplib::Request& req) {
    auto s = find(req.matches[1]);
    const json body = parse_body(req);
    const Which which = body.contains("tree") && body["tree"].is_string() ? which_from(body["tree"].get<std::string>())
                                                                          : Which::Clustering;
    const bool to_pool = body.contains("to") && body["to"] == "pool";
    const NodeId to = to_pool ? kNoNode : node_field(body, "to");
    return std::pair{200, mutate(s, [&](State& st) {
                       const auto docs = doc_list(body, *st.corpus);
                       const RoseTree& t = st.tree(which);
                       const std::unordered_set<DocIndex> pooled(st.pool.begin(), st.pool.end());
                       std::unordered_set<DocIndex> present;
                       if (!t.empty())
                         for (DocIndex d : t.all_docs()) present.insert(d);
                       if (body.contains("from")) {
                         const auto& from = body["from"];
                         for (std::size_t i = 0; i < docs.size(); ++i) {
                           const std::string path = "/docs/" + std::to_string(i);
                           if (from == "pool") {
                             if (which != Which::Clustering || !pooled.count(docs[i])) {
                               throw Error(ErrorCode::IllegalMove, "document is not in the unassigned pool", path);
                             }
                           } else {
                             const NodeId f = node_field(body, "from");
                             if (!t.contains(f)) throw Error(ErrorCode::NodeNotFound, "node " + std::to_string(f) + " not found", "/from");
                             const auto under = t.docs_under(f);
                             if (std::find(under.begin(), under.end(), docs[i]) == under.end()) {
                               throw Error(ErrorCode::IllegalMove, "document is not under node " + std::to_string(f), path);
                             }
                           }
                         }
                       }
                       std::vector<DocIndex> inside, outside;
                       for (DocIndex d : docs) (present.count(d) ? inside : outside).push_back(d);
                       if (which == Which::Clustering)
                         for (DocIndex d : outside)
                           if (!pooled.count(d)) throw Error(ErrorCode::IllegalMove, "document is neither in the tree nor in the pool");
                       RoseTree next;
                       if (to_pool) {
                         next = remove_documents(t, inside);
                         if (which == Which::Clustering) {
                           for (DocIndex d : inside) st.pool.push_back(d);
                         }
                       } else {
                         next = move_documents(t, inside, to);
                         next = insert_documents(next, outside, to);
                         if (which == Which::Clustering) {
                           const std::unordered_set<DocIndex> gone(outside.begin(), outside.end());
                           std::erase_if(st.pool, [&](DocIndex d) { return gone.count(d) > 0; });
                         }
                       }
                       st.set(which, std::move(next));
                       return json::object();
                     })};
  }));

  server.Post(base + R"(/sessions/([^/]+)/docs/add)", wrap([this](const httplib::Request& req) {
    auto s = find(req.matches[1]);
    const json body = parse_body(req);
    if (!body.contains("docs") || !body["docs"].is_array() || body["docs"].empty()) {
      throw Error(ErrorCode::SchemaViolation, "'docs' must be a non-empty array of documents", "/docs");
    }
    std::optional<NodeId> target;
    if (body.contains("target")) target = node_field(body, "target");
    return std::pair{200, mutate(s, [&](State& st) {
                       Corpus corpus = st.corpus->corpus;
                       std::vector<DocIndex> added;
                       std::unordered_set<std::string> fresh_ids;
                       for (std::size_t i = 0; i < body["docs"].size(); ++i) {
                         const auto& d = body["docs"][i];
                         const std::string path = "/docs/" + std::to_string(i);
                         if (!d.is_object() || !d.contains("id") || !d["id"].is_string()) {
                           throw Error(ErrorCode::SchemaViolation, "document needs a string 'id'", path + "/id");
                         }
                         if (!d.contains("text") || !d["text"].is_string()) {
                           throw Error(ErrorCode::SchemaViolation, "document needs a string 'text'", path + "/text");
                         }
                         const auto id = d["id"].get<std::string>();
                         if (corpus.find(id) || !fresh_ids.insert(id).second) {
                           throw Error(ErrorCode::SchemaViolation, "duplicate document id '" + id + "'", path + "/id");
                         }
                         const std::string title = d.contains("title") && d["title"].is_string() ? d["title"].get<std::string>() : "";
                         corpus.docs.push_back(make_document(id, d["text"].get<std::string>(), corpus.vocab, tokenizer(), title));
                         if (corpus.docs.back().length == 0) {
                           throw Error(ErrorCode::EmptyDocument, "document '" + id + "' has no tokens", path + "/text");
                         }
                         added.push_back(static_cast<DocIndex>(corpus.docs.size() - 1));
                       }
                       corpus.reindex();
                       const std::uint64_t v = s->last_version + 1;
                       auto data = make_corpus_data(std::move(corpus), "corpus-" + std::to_string(v) + ".jsonl");
                       const Corpus& c = data->corpus;
                       RoseTree t = *st.clustering;
                       json placed = json::object();
                       if (target) {
                         t = insert_documents(t, added, *target);
                       } else if (t.empty()) {
                         st.pool.insert(st.pool.end(), added.begin(), added.end());
                       } else {
                         // best-posterior attachment, then a local rebuild of each touched node
                         const BrtParams params = s->config.brt(c.vocab.size());
                         std::map<NodeId, std::vector<DocIndex>> groups;
                         for (DocIndex d : added) groups[best_attachment(t, c, c.docs[d], params.dcm)].push_back(d);
                         for (const auto& [node, docs] : groups) t = insert_documents(t, docs, node);
                         for (const auto& [node, docs] : groups) {
                           if (!t.contains(node) || (node != t.root() && t.node(node).parent == kNoNode)) continue;
                           bool covered = false;
                           for (const auto& [other, unused] : groups) covered |= other != node && t.contains(other) && t.is_ancestor(other, node);
                           if (!covered && t.doc_count(node) >= 2) t = rebuild_subtree(t, node, c, params);
                         }
                       }
                       if (!t.empty()) {
                         const LcaIndex index(t);
                         for (DocIndex d : added)
                           if (index.has_doc(d)) placed[c.docs[d].id] = index.leaf_of(d);
                       }
                       s->write_corpus(*data);
                       st.corpus = data;
                       st.set(Which::Clustering, std::move(t));
                       return json{{"placed", placed}};
                     })};
  }));

  server.Post(base + R"(/sessions/([^/]+)/undo)", wrap([this](const httplib::Request& req) {
    auto s = find(req.matches[1]);
    std::lock_guard lock(s->mu);
    s->require_idle();
    s->pop_undo();
    return std::pair{200, json{{"version", s->current.version}}};
  }));

  server.Get(base + R"(/sessions/([^/]+)/pool)", wrap([this](const httplib::Request& req) {
    auto s = find(req.matches[1]);
    std::lock_guard lock(s->mu);
    json docs = json::array();
    for (DocIndex d : s->current.pool) docs.push_back(s->current.corpus->ids.id(d));
    return std::pair{200, json{{"version", s->current.version}, {"docs", docs}}};
  }));

  server.Get(base + R"(/sessions/([^/]+)/tree/([^/]+))", wrap([this](const httplib::Request& req) {
    auto s = find(req.matches[1]);
    const Which which = which_from(req.matches[2]);
    if (req.has_param("raw") && req.get_param_value("raw") != "false" && req.get_param_value("raw") != "0") {
      std::lock_guard lock(s->mu);
      return std::pair{200, json{{"version", s->current.version},
                                 {"which", name_of(which)},
                                 {"tree", tree_to_json(s->current.tree(which), s->current.corpus->ids)}}};
    }
    State st;
    {
      std::lock_guard lock(s->mu);
      st = s->current;
    }
    const auto view = get_view(*s, which);
    json out = {{"version", st.version}, {"which", name_of(which)}, {"tree", tree_to_json(view->annotated, st.corpus->ids)}};
    const RoseTree& t = view->annotated;
    if (t.empty()) {
      out["layout"] = layout_to_json({}, DoiCut{});
      return std::pair{200, out};
    }
    const NodeId focus = req.has_param("focus") ? node_param(req.get_param_value("focus")) : t.root();
    std::set<NodeId> pinned;
    if (req.has_param("pinned")) {
      std::stringstream ss(req.get_param_value("pinned"));
      for (std::string item; std::getline(ss, item, ',');)
        if (!item.empty()) pinned.insert(node_param(item));
    }
    DoiParams doi;
    doi.budget = size_param(req, "budget", doi.budget);
    out["layout"] = layout_to_json(view->ordering, doi_cut(t, focus, pinned, doi));
    return std::pair{200, out};
  }));

  server.Get(base + R"(/sessions/([^/]+)/nodes/(\d+))", wrap([this](const httplib::Request& req) {
    auto s = find(req.matches[1]);
    const NodeId node = node_param(req.matches[2]);
    const Which which = req.has_param("tree") ? which_from(req.get_param_value("tree")) : Which::Clustering;
    State st;
    {
      std::lock_guard lock(s->mu);
      st = s->current;
    }
    const RoseTree& t = st.tree(which);
    if (t.empty() || !t.contains(node)) throw Error(ErrorCode::NodeNotFound, "node " + std::to_string(node) + " not found");
    const auto view = get_view(*s, which);
    const auto& n = view->annotated.node(node);
    json terms = json::array();
    for (const auto& [term, c] : top_terms(t, node, st.corpus->corpus, size_param(req, "terms", 20))) {
      terms.push_back({{"term", term}, {"count", c}});
    }
    const auto docs = t.docs_under(node);
    const std::size_t page = size_param(req, "page", 0);
    const std::size_t page_size = std::clamp<std::size_t>(size_param(req, "page_size", 50), 1, 1000);
    json items = json::array();
    for (std::size_t i = page * page_size; i < std::min(docs.size(), (page + 1) * page_size); ++i) {
      const Document& d = st.corpus->corpus.docs[docs[i]];
      items.push_back({{"id", d.id}, {"title", d.title}});
    }
    json out = {{"id", node},
                {"label", n.label},
                {"version", st.version},
                {"doc_count", docs.size()},
                {"top_terms", terms},
                {"docs", {{"page", page}, {"page_size", page_size}, {"total", docs.size()}, {"items", items}}}};
    if (n.kb_ref) out["kb_ref"] = *n.kb_ref;
    if (n.uncertainty) {
      out["uncertainty"] = {{"model", n.uncertainty->model},
                            {"knowledge", n.uncertainty->knowledge},
                            {"structure", n.uncertainty->structure},
                            {"overall", n.uncertainty->overall}};
    }
    return std::pair{200, out};
  }));

  server.Get(base + R"(/sessions/([^/]+)/nodes/(\d+)/linked)", wrap([this](const httplib::Request& req) {
    auto s = find(req.matches[1]);
    const NodeId node = node_param(req.matches[2]);
    const Which which = req.has_param("tree") ? which_from(req.get_param_value("tree")) : Which::Clustering;
    const Which other_which = which == Which::Clustering ? Which::Constraint : Which::Clustering;
    State st;
    {
      std::lock_guard lock(s->mu);
      st = s->current;
    }
    const RoseTree& t = st.tree(which);
    const RoseTree& other = st.tree(other_which);
    if (t.empty() || !t.contains(node)) throw Error(ErrorCode::NodeNotFound, "node " + std::to_string(node) + " not found");
    json links = json::array();
    if (!other.empty()) {
      // documents grouped by the other tree's node at the same depth
      const LcaIndex ti(t), oi(other);
      const std::size_t depth = ti.depth(node);
      std::map<NodeId, std::size_t> counts;
      for (DocIndex d : t.docs_under(node))
        if (oi.has_doc(d)) ++counts[oi.ancestor_at_depth(oi.leaf_of(d), depth)];
      std::vector<std::pair<NodeId, std::size_t>> sorted(counts.begin(), counts.end());
      std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
        return a.second != b.second ? a.second > b.second : a.first < b.first;
      });
      for (const auto& [n, c] : sorted) links.push_back({{"node", n}, {"count", c}, {"label", other.node(n).label}});
    }
    return std::pair{200, json{{"version", st.version}, {"tree", name_of(other_which)}, {"links", links}}};
  }));
}

namespace {
std::atomic<bool> g_stop{false};
void on_signal(int) { g_stop = true; }
}  // namespace

void serve(const ServiceOptions& options, const std::string& host, int port) {
  Service service(options);
  httplib::Server server;
  service.mount(server);
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::thread watcher([&] {
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    server.stop();
  });
  if (!server.bind_to_port(host, port)) {
    g_stop = true;
    watcher.join();
    throw Error(ErrorCode::Io, "cannot listen on " + host + ":" + std::to_string(port));
  }
  std::cerr << json{{"listening", host + ":" + std::to_string(port)}, {"data_dir", options.data_dir.string()}}.dump()
            << '\n';
  server.listen_after_bind();
  g_stop = true;
  watcher.join();
  service.shutdown();
}

}  // namespace steer
