// steer: batch entry points (extract, cluster, eval, synth) and the HTTP service.

#include "steer/brt.hpp"
#include "steer/config.hpp"
#include "steer/kb.hpp"
#include "steer/metrics.hpp"
#include "steer/service.hpp"
#include "steer/synth.hpp"
#include "steer/uncertainty.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

using namespace steer;
using json = nlohmann::json;

namespace {

constexpr int kValidation = 2;
constexpr int kRuntime = 3;

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void fail_json(const std::string& code, const std::string& message, const std::string& path = {}) {
  json j = {{"code", code}, {"message", message}};
  if (!path.empty()) j["path"] = path;
  std::cerr << j.dump() << std::endl;
}

const TokenizerConfig& tokenizer() {
  static const TokenizerConfig t = TokenizerConfig::english();
  return t;
}

std::string read_all(std::istream& in) {
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open '" + path + "'");
  return read_all(in);
}

void write_output(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text << '\n';
    std::cout.flush();
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write '" + path + "'");
  out << text << '\n';
}

// Piped stages exchange one JSON "bundle": {"corpus": [docs], "kb"?, "truth"?,
// "constraints"?, "tree"?}.
json read_bundle() {
  if (isatty(STDIN_FILENO)) throw ValidationError("no input file given and nothing piped on stdin");
  const std::string text = read_all(std::cin);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::SchemaViolation, std::string("stdin is not a JSON bundle: ") + e.what(), "");
  }
  if (!j.is_object()) throw Error(ErrorCode::SchemaViolation, "stdin bundle must be an object", "");
  return j;
}

Corpus corpus_from_bundle(const json& bundle) {
  if (!bundle.contains("corpus") || !bundle["corpus"].is_array()) {
    throw Error(ErrorCode::SchemaViolation, "bundle lacks a 'corpus' array", "/corpus");
  }
  std::string text;
  for (const auto& d : bundle["corpus"]) text += d.dump() + "\n";
  std::istringstream in(text);
  Corpus c;
  try {
    read_corpus_jsonl(in, c, tokenizer());
  } catch (const Error& e) {
    throw Error(e.code(), e.what(), "/corpus" + e.path());
  }
  return c;
}

json corpus_to_bundle(const Corpus& c) {
  std::ostringstream out;
  write_corpus_jsonl(out, c);
  json arr = json::array();
  std::istringstream in(out.str());
  for (std::string line; std::getline(in, line);) arr.push_back(json::parse(line));
  return arr;
}

DocIdTable id_table(const Corpus& c) {
  std::vector<std::string> ids;
  for (const auto& d : c.docs) ids.push_back(d.id);
  return DocIdTable(std::move(ids));
}

struct Progress {
  bool enabled = false;
  std::string label;
  int last = -1;

  void operator()(double p) {
    if (!enabled) return;
    const int pct = static_cast<int>(p * 100);
    if (pct == last) return;
    last = pct;
    const int filled = pct / 4;
    std::fprintf(stderr, "\r%-8s [%s%s] %3d%%", label.c_str(), std::string(static_cast<std::size_t>(filled), '#').c_str(),
                 std::string(static_cast<std::size_t>(25 - filled), ' ').c_str(), pct);
    if (pct >= 100) std::fprintf(stderr, "\n");
    std::fflush(stderr);
  }
};

unsigned default_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

// --- extract ---

struct ExtractArgs {
  std::string corpus, kb, embeddings, out;
  Scalar q = 0.10, rho = 0.9;
  std::size_t K = 50, beam = 20, iters = 30;
  std::string gamma = "auto";
  std::optional<std::size_t> min_ants;
  std::uint64_t seed = 0;
  unsigned threads = default_threads();
  bool progress = false;
};

int run_extract(const ExtractArgs& a) {
  RunConfig cfg;
  cfg.q = a.q;
  cfg.K = a.K;
  cfg.rho = a.rho;
  cfg.beam = a.beam;
  cfg.iters = a.iters;
  cfg.seed = a.seed;
  if (a.gamma != "auto") {
    try {
      cfg.gamma = std::stod(a.gamma);
    } catch (const std::exception&) {
      throw ValidationError("--gamma must be a number or 'auto'");
    }
  }
  cfg.validate();

  json bundle;
  Corpus corpus;
  json kb_json;
  if (a.corpus.empty()) {
    bundle = read_bundle();
    corpus = corpus_from_bundle(bundle);
    if (!bundle.contains("kb")) throw ValidationError("no --kb given and the bundle has no 'kb'");
    kb_json = bundle["kb"];
  } else {
    if (a.kb.empty()) throw ValidationError("--kb is required with --corpus");
    corpus = load_corpus_jsonl(a.corpus, tokenizer());
    try {
      kb_json = json::parse(read_file(a.kb));
    } catch (const json::parse_error& e) {
      throw Error(ErrorCode::SchemaViolation, std::string("kb file is not valid JSON: ") + e.what(), "");
    }
  }
  if (corpus.docs.empty()) throw Error(ErrorCode::EmptyCorpus, "corpus has no documents");
  const DocIdTable ids = id_table(corpus);
  const KnowledgeBase kb = read_kb_json(kb_json, corpus.vocab, tokenizer());
  std::optional<EmbeddingStore> store;
  if (!a.embeddings.empty()) store = load_embeddings(a.embeddings, corpus.vocab);

  ExtractParams p = cfg.extract();
  p.min_ants = a.min_ants;
  Progress bar{a.progress, "extract"};
  ExtractControl control;
  control.progress = [&](double f) { bar(f); };
  const auto result = extract_constraint_tree(corpus, kb, store ? &*store : nullptr, p, &control);
  bar(1.0);

  json tree = tree_to_json(result.tree, ids);
  json meta = result.info.to_json();
  meta["q"] = cfg.q;
  meta["K"] = cfg.K;
  meta["rho"] = cfg.rho;
  meta["seed"] = cfg.seed;
  tree["metadata"] = meta;
  if (a.corpus.empty()) {
    bundle["constraints"] = tree;
    write_output(a.out, bundle.dump());
  } else {
    write_output(a.out, tree.dump());
  }
  return 0;
}

// --- cluster ---

struct ClusterArgs {
  std::string corpus, constraints, out;
  Scalar lambda = 1e-6, pi0 = 0.5, alpha = 0.01, kappa = 100;
  std::size_t cap = kDefaultTripletCap;
  std::uint64_t seed = 0;
  unsigned threads = default_threads();
  bool approx = false, uncertainty = false, progress = false;
};

int run_cluster(const ClusterArgs& a) {
  RunConfig cfg;
  cfg.lambda = a.lambda;
  cfg.pi0 = a.pi0;
  cfg.alpha = a.alpha;
  cfg.kappa = a.kappa;
  cfg.cap = a.cap;
  cfg.seed = a.seed;
  cfg.threads = a.threads;
  cfg.approx = a.approx;
  cfg.validate();

  json bundle;
  Corpus corpus;
  if (a.corpus.empty()) {
    bundle = read_bundle();
    corpus = corpus_from_bundle(bundle);
  } else {
    corpus = load_corpus_jsonl(a.corpus, tokenizer());
  }
  if (corpus.docs.empty()) throw Error(ErrorCode::EmptyCorpus, "corpus has no documents");
  DocIdTable ids = id_table(corpus);

  RoseTree constraint;
  if (!a.constraints.empty()) {
    constraint = parse_tree(read_file(a.constraints), ids, false);
  } else if (bundle.contains("constraints")) {
    constraint = tree_from_json(bundle["constraints"], ids, false);
  }
  std::vector<TripleFan> cons;
  if (cfg.lambda > 0 && !constraint.empty()) cons = decompose(constraint, cfg.cap, cfg.seed).items;

  Progress bar{a.progress, "cluster"};
  ClusterControl control;
  control.progress = [&](double f) { bar(f); };
  RoseTree tree = cluster(corpus, cons, cfg.brt(corpus.vocab.size()), &control);
  bar(1.0);
  if (a.uncertainty) annotate_uncertainty(tree, constraint.empty() ? nullptr : &constraint, corpus, nullptr);

  if (a.corpus.empty()) {
    bundle["tree"] = tree_to_json(tree, ids);
    write_output(a.out, bundle.dump());
  } else {
    write_output(a.out, serialize_tree(tree, ids));
  }
  return 0;
}

// --- eval ---

struct EvalArgs {
  std::string tree, truth, out;
  std::size_t cap = kDefaultTripletCap;
  std::uint64_t seed = 0;
};

int run_eval(const EvalArgs& a) {
  DocIdTable ids;
  RoseTree tree, truth;
  if (a.tree.empty() != a.truth.empty()) throw ValidationError("--tree and --truth go together");
  if (a.tree.empty()) {
    const json bundle = read_bundle();
    if (!bundle.contains("tree")) throw ValidationError("bundle has no 'tree'; run cluster first");
    if (!bundle.contains("truth")) throw ValidationError("bundle has no 'truth'");
    if (bundle.contains("corpus")) ids = id_table(corpus_from_bundle(bundle));
    truth = tree_from_json(bundle["truth"], ids);
    tree = tree_from_json(bundle["tree"], ids);
  } else {
    truth = parse_tree(read_file(a.truth), ids);
    tree = parse_tree(read_file(a.tree), ids);
  }
  const auto nmi = average_nmi(tree, truth);
  const json out = {{"triple_fan", triple_fan_accuracy(tree, truth, a.cap, a.seed)},
                    {"avg_nmi", nmi.average},
                    {"layers", nmi.layers}};
  write_output(a.out, out.dump());
  return 0;
}

// --- synth ---

struct SynthArgs {
  std::string out_dir;
  std::string branching = "3,3";
  SynthConfig cfg;
};

int run_synth(SynthArgs a) {
  a.cfg.branching.clear();
  std::stringstream ss(a.branching);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      std::size_t used = 0;
      const auto v = std::stoul(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      a.cfg.branching.push_back(v);
    } catch (const std::exception&) {
      throw ValidationError("--branching must be a comma-separated list of counts");
    }
  }
  try {
    a.cfg.validate();
  } catch (const Error& e) {
    throw ValidationError(e.what());
  }
  const SynthData data = synth(a.cfg);
  const DocIdTable ids = id_table(data.corpus);
  if (a.out_dir.empty()) {
    const json bundle = {{"corpus", corpus_to_bundle(data.corpus)}, {"kb", data.kb}, {"truth", tree_to_json(data.truth, ids)}};
    write_output("", bundle.dump());
    return 0;
  }
  std::filesystem::create_directories(a.out_dir);
  std::ofstream corpus_out(std::filesystem::path(a.out_dir) / "corpus.jsonl", std::ios::binary);
  if (!corpus_out) throw Error(ErrorCode::Io, "cannot write into '" + a.out_dir + "'");
  write_corpus_jsonl(corpus_out, data.corpus);
  write_output((std::filesystem::path(a.out_dir) / "kb.json").string(), data.kb.dump());
  write_output((std::filesystem::path(a.out_dir) / "truth.json").string(), serialize_tree(data.truth, ids));
  std::cout << json{{"docs", data.corpus.docs.size()}, {"checksum", corpus_checksum(data.corpus)}}.dump() << '\n';
  return 0;
}

// --- serve ---

struct ServeArgs {
  std::string host = "0.0.0.0";
  int port = 8080;
  std::string data_dir = "data";
  unsigned threads = default_threads();
  std::uint64_t seed = 0;
  Scalar lambda = 1e-6;
};

int run_serve(const ServeArgs& a) {
  ServiceOptions options;
  options.data_dir = a.data_dir;
  options.defaults.threads = a.threads;
  options.defaults.seed = a.seed;
  options.defaults.lambda = a.lambda;
  options.defaults.validate();
  serve(options, a.host, a.port);
  return 0;
}

int exit_for(const Error& e) {
  switch (e.code()) {
    case ErrorCode::SchemaViolation:
    case ErrorCode::InvalidArgument:
    case ErrorCode::EmptyCorpus:
    case ErrorCode::EmptyKb:
      return kValidation;
    default:
      return kRuntime;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Constrained hierarchical clustering with knowledge-base steering"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  ExtractArgs ex;
  auto* extract = app.add_subcommand("extract", "Extract a constraint tree from a knowledge base");
  extract->add_option("--corpus", ex.corpus, "Corpus JSON-lines file (default: bundle on stdin)")->check(CLI::ExistingFile);
  extract->add_option("--kb", ex.kb, "Knowledge-base JSON file")->check(CLI::ExistingFile);
  extract->add_option("--embeddings", ex.embeddings, "Word vector file")->check(CLI::ExistingFile);
  extract->add_option("--q", ex.q, "Fraction of projection pairs kept")->check(CLI::Range(0.0, 1.0))->capture_default_str();
  extract->add_option("--K", ex.K, "Candidate KB docs per document")->check(CLI::PositiveNumber)->capture_default_str();
  extract->add_option("--rho", ex.rho, "Pheromone persistence")->check(CLI::Range(0.0, 1.0))->capture_default_str();
  extract->add_option("--gamma", ex.gamma, "Simplicity exponent or 'auto'")->capture_default_str();
  extract->add_option("--beam", ex.beam, "Beam width per KB level")->check(CLI::PositiveNumber)->capture_default_str();
  extract->add_option("--iters", ex.iters, "Maximum ACO iterations")->check(CLI::PositiveNumber)->capture_default_str();
  extract->add_option("--min-ants", ex.min_ants, "Minimum ants per kept node");
  extract->add_option("--seed", ex.seed, "Random seed")->capture_default_str();
  extract->add_option("--threads", ex.threads, "Worker threads")->check(CLI::PositiveNumber);
  extract->add_flag("--progress", ex.progress, "Progress bar on stderr");
  extract->add_option("-o,--output", ex.out, "Output file (default: stdout)");

  ClusterArgs cl;
  auto* clus = app.add_subcommand("cluster", "Cluster a corpus into a rose tree");
  clus->add_option("--corpus", cl.corpus, "Corpus JSON-lines file (default: bundle on stdin)")->check(CLI::ExistingFile);
  clus->add_option("--constraints", cl.constraints, "Constraint tree JSON file")->check(CLI::ExistingFile);
  clus->add_option("--lambda", cl.lambda, "Constraint weight")->check(CLI::NonNegativeNumber)->capture_default_str();
  clus->add_option("--pi0", cl.pi0, "Partition prior")->check(CLI::Range(0.0, 1.0))->capture_default_str();
  clus->add_option("--alpha", cl.alpha, "DCM pseudo-count")->check(CLI::PositiveNumber)->capture_default_str();
  clus->add_option("--kappa", cl.kappa, "DCM profile weight")->check(CLI::NonNegativeNumber)->capture_default_str();
  clus->add_option("--cap", cl.cap, "Triplet sample cap for constraints")->check(CLI::PositiveNumber)->capture_default_str();
  clus->add_option("--seed", cl.seed, "Random seed")->capture_default_str();
  clus->add_option("--threads", cl.threads, "Worker threads")->check(CLI::PositiveNumber);
  clus->add_flag("--approx", cl.approx, "Nearest-neighbour candidate pruning for large corpora");
  clus->add_flag("--uncertainty", cl.uncertainty, "Annotate nodes with uncertainty scores");
  clus->add_flag("--progress", cl.progress, "Progress bar on stderr");
  clus->add_option("-o,--output", cl.out, "Output file (default: stdout)");

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Compare a tree against a ground-truth tree");
  eval->add_option("--tree", ev.tree, "Candidate tree JSON (default: bundle on stdin)")->check(CLI::ExistingFile);
  eval->add_option("--truth", ev.truth, "Ground-truth tree JSON")->check(CLI::ExistingFile);
  eval->add_option("--cap", ev.cap, "Triplet sample cap")->check(CLI::PositiveNumber)->capture_default_str();
  eval->add_option("--seed", ev.seed, "Sampling seed")->capture_default_str();
  eval->add_option("-o,--output", ev.out, "Output file (default: stdout)");

  SynthArgs sy;
  auto* syn = app.add_subcommand("synth", "Generate a synthetic corpus, knowledge base and truth tree");
  syn->add_option("--seed", sy.cfg.seed, "Random seed")->capture_default_str();
  syn->add_option("--branching", sy.branching, "Children per level, e.g. 3,3")->capture_default_str();
  syn->add_option("--docs-per-leaf", sy.cfg.docs_per_leaf, "Documents per leaf topic")->check(CLI::PositiveNumber)->capture_default_str();
  syn->add_option("--vocab", sy.cfg.vocab, "Vocabulary size")->check(CLI::PositiveNumber)->capture_default_str();
  syn->add_option("--concentration", sy.cfg.concentration, "Child Dirichlet concentration")->check(CLI::PositiveNumber)->capture_default_str();
  syn->add_option("--noise", sy.cfg.noise, "Fraction of uniform tokens")->check(CLI::Range(0.0, 1.0))->capture_default_str();
  syn->add_option("--doc-length", sy.cfg.doc_length, "Mean document length")->check(CLI::PositiveNumber)->capture_default_str();
  syn->add_option("--kb-docs", sy.cfg.kb_docs_per_node, "Reference docs per KB node")->capture_default_str();
  syn->add_option("--distractors", sy.cfg.distractors, "KB subtrees without corpus docs")->capture_default_str();
  syn->add_flag("--disjoint", sy.cfg.disjoint_support, "Leaves use disjoint vocabulary blocks");
  syn->add_option("-o,--output-dir", sy.out_dir, "Write corpus.jsonl, kb.json, truth.json here (default: bundle on stdout)");

  ServeArgs sv;
  if (const char* p = std::getenv("PORT")) sv.port = std::atoi(p);
  if (const char* d = std::getenv("DATA_DIR")) sv.data_dir = d;
  auto* srv = app.add_subcommand("serve", "Run the steering service under /api/v1");
  srv->add_option("--host", sv.host, "Bind address")->capture_default_str();
  srv->add_option("--port", sv.port, "Port (env PORT)")->check(CLI::Range(0, 65535))->capture_default_str();
  srv->add_option("--data-dir", sv.data_dir, "Session storage (env DATA_DIR)")->capture_default_str();
  srv->add_option("--threads", sv.threads, "Worker threads per job")->check(CLI::PositiveNumber);
  srv->add_option("--seed", sv.seed, "Default session seed")->capture_default_str();
  srv->add_option("--lambda", sv.lambda, "Default constraint weight")->check(CLI::NonNegativeNumber)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    fail_json("InvalidArgument", e.what());
    return kValidation;
  }

  try {
    if (*extract) return run_extract(ex);
    if (*clus) return run_cluster(cl);
    if (*eval) return run_eval(ev);
    if (*syn) return run_synth(sy);
    if (*srv) return run_serve(sv);
  } catch (const ValidationError& e) {
    fail_json("InvalidArgument", e.what());
    return kValidation;
  } catch (const Error& e) {
    fail_json(to_string(e.code()), e.what(), e.path());
    return exit_for(e);
  } catch (const std::exception& e) {
    fail_json("Internal", e.what());
    return kRuntime;
  }
  return kValidation;
}
