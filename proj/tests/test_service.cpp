#include "doctest.h"

#include "steer/brt.hpp"
#include "steer/service.hpp"
#include "steer/synth.hpp"

#include "httplib.h"

#include <chrono>
#include <filesystem>
#include <random>
#include <set>
#include <sstream>
#include <thread>

using namespace steer;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  static std::mt19937_64 rng(std::random_device{}());
  fs::path p = fs::temp_directory_path() / ("steer-test-" + std::to_string(rng()));
  fs::create_directories(p);
  return p;
}

struct Reply {
  int status = 0;
  json body;
};

// A service on an ephemeral port with its own data directory.
struct Harness {
  fs::path dir;
  std::unique_ptr<Service> service;
  httplib::Server server;
  std::thread thread;
  int port = 0;
  std::unique_ptr<httplib::Client> client;

  explicit Harness(fs::path data = temp_dir()) : dir(std::move(data)) {
    ServiceOptions opt;
    opt.data_dir = dir;
    service = std::make_unique<Service>(opt);
    service->mount(server);
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
    client = std::make_unique<httplib::Client>("127.0.0.1", port);
    client->set_read_timeout(120, 0);
  }
  ~Harness() { stop(); }

  void stop() {
    if (!thread.joinable()) return;
    service->shutdown();
    server.stop();
    thread.join();
  }

  static Reply wrap(const httplib::Result& r) {
    REQUIRE(r);
    Reply out{r->status, json()};
    if (!r->body.empty()) out.body = json::parse(r->body);
    return out;
  }
  Reply get(const std::string& path) { return wrap(client->Get("/api/v1" + path)); }
  Reply post(const std::string& path, const json& body = json::object()) {
    return wrap(client->Post("/api/v1" + path, body.dump(), "application/json"));
  }
  Reply patch(const std::string& path, const json& body) {
    return wrap(client->Patch("/api/v1" + path, body.dump(), "application/json"));
  }
  Reply del(const std::string& path) { return wrap(client->Delete("/api/v1" + path)); }

  json wait_job(const std::string& sid, const json& job) {
    const std::string path = "/sessions/" + sid + "/jobs/" + std::to_string(job["id"].get<int>());
    for (int i = 0; i < 6000; ++i) {
      const Reply r = get(path);
      REQUIRE(r.status == 200);
      if (r.body["state"] != "running") return r.body;
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
    FAIL("job did not finish");
    return {};
  }

  json raw_tree(const std::string& sid, const std::string& which = "clustering") {
    const Reply r = get("/sessions/" + sid + "/tree/" + which + "?raw=1");
    REQUIRE(r.status == 200);
    return r.body;
  }
};

std::string jsonl(const Corpus& c) {
  std::ostringstream out;
  write_corpus_jsonl(out, c);
  return out.str();
}

SynthData small_synth(std::size_t docs_per_leaf = 8, std::uint64_t seed = 3) {
  SynthConfig cfg;
  cfg.docs_per_leaf = docs_per_leaf;
  cfg.seed = seed;
  return synth(cfg);
}

std::string create(Harness& h, const SynthData& d, const json& config = json::object(), bool with_kb = false) {
  json body = {{"corpus", jsonl(d.corpus)}, {"config", config}};
  if (with_kb) body["kb"] = d.kb;
  const Reply r = h.post("/sessions", body);
  REQUIRE(r.status == 201);
  return r.body["id"].get<std::string>();
}

void cluster_now(Harness& h, const std::string& sid, const json& body = json::object()) {
  const Reply r = h.post("/sessions/" + sid + "/cluster", body);
  REQUIRE(r.status == 202);
  const json job = h.wait_job(sid, r.body);
  REQUIRE(job["state"] == "done");
}

void collect(const json& n, std::vector<std::string>& docs) {
  if (n.contains("docs"))
    for (const auto& d : n["docs"]) docs.push_back(d.get<std::string>());
  if (n.contains("children"))
    for (const auto& c : n["children"]) collect(c, docs);
}

std::multiset<std::string> tree_docs(const json& tree) {
  std::vector<std::string> v;
  if (!tree.empty()) collect(tree, v);
  return {v.begin(), v.end()};
}

const json* find_node(const json& n, int id) {
  if (n.value("id", -1) == id) return &n;
  if (n.contains("children"))
    for (const auto& c : n["children"])
      if (const json* f = find_node(c, id)) return f;
  return nullptr;
}

// Internal nodes (id, children count) in preorder.
void internals(const json& n, std::vector<const json*>& out) {
  if (!n.contains("children") || n["children"].empty()) return;
  out.push_back(&n);
  for (const auto& c : n["children"]) internals(c, out);
}

int first_leaf(const json& n) {
  if (n["children"].empty()) return n["id"].get<int>();
  return first_leaf(n["children"][0]);
}

}  // namespace

TEST_SUITE("service") {
  TEST_CASE("session creation validates the corpus") {
    Harness h;
    CHECK(h.get("/health").body["status"] == "ok");
    Reply r = h.post("/sessions", {{"corpus", ""}});
    CHECK(r.status == 400);
    CHECK(r.body["code"] == "EmptyCorpus");
    r = h.post("/sessions", {{"corpus", "{\"id\": 1}\n"}});
    CHECK(r.status == 400);
    CHECK(r.body["code"] == "SchemaViolation");
    r = h.post("/sessions", {{"corpus", json::array({{{"id", "a"}, {"text", "alpha beta"}}})}, {"config", {{"nope", 1}}}});
    CHECK(r.status == 400);
    CHECK(r.body["path"] == "/nope");
    CHECK(h.get("/sessions/missing").status == 404);

    const auto d = small_synth();
    const std::string a = create(h, d), b = create(h, d);
    CHECK(a != b);
    const Reply s = h.get("/sessions/" + a);
    CHECK(s.body["version"] == 1);
    CHECK(s.body["pool"] == d.corpus.docs.size());
    CHECK(h.get("/sessions/" + a + "/pool").body["docs"].size() == d.corpus.docs.size());

    // sessions are independent
    cluster_now(h, a);
    CHECK(h.get("/sessions/" + a).body["version"] == 2);
    CHECK(h.get("/sessions/" + b).body["version"] == 1);
    CHECK(h.raw_tree(b)["tree"].empty());
  }

  TEST_CASE("config patches are validated and atomic") {
    Harness h;
    const std::string sid = create(h, small_synth());
    Reply r = h.patch("/sessions/" + sid + "/config", {{"lambda", 0.5}, {"gamma", 2}});
    CHECK(r.status == 200);
    CHECK(r.body["config"]["lambda"] == 0.5);
    r = h.patch("/sessions/" + sid + "/config", {{"lambda", 0.1}, {"q", 7}});
    CHECK(r.status == 400);
    CHECK(r.body["path"] == "/q");
    CHECK(h.get("/sessions/" + sid).body["config"]["lambda"] == 0.5);
  }

  TEST_CASE("a lambda = 0 job reproduces plain clustering") {
    Harness h;
    const auto d = small_synth();
    const std::string sid = create(h, d, {{"lambda", 0}});
    cluster_now(h, sid);
    const json got = h.raw_tree(sid)["tree"];

    // same corpus through the English tokenizer, no constraints
    std::istringstream in(jsonl(d.corpus));
    Corpus c;
    read_corpus_jsonl(in, c, TokenizerConfig::english());
    RunConfig cfg;
    cfg.lambda = 0;
    const RoseTree want = cluster(c, {}, cfg.brt(c.vocab.size()));
    std::vector<std::string> ids;
    for (const auto& doc : c.docs) ids.push_back(doc.id);
    CHECK(got.dump() == serialize_tree(want, DocIdTable(ids)));
    CHECK(h.get("/sessions/" + sid + "/pool").body["docs"].empty());
  }

  TEST_CASE("jobs report monotone progress and can be cancelled") {
    Harness h;
    const auto d = small_synth(60, 5);
    const std::string sid = create(h, d);
    Reply r = h.post("/sessions/" + sid + "/cluster");
    REQUIRE(r.status == 202);
    const json job = r.body;
    // a second job or an edit while running is refused
    CHECK(h.post("/sessions/" + sid + "/cluster").status == 409);
    CHECK(h.post("/sessions/" + sid + "/undo").status == 409);

    double last = 0;
    const std::string path = "/sessions/" + sid + "/jobs/" + std::to_string(job["id"].get<int>());
    bool cancelled = false;
    json final;
    for (int i = 0; i < 6000; ++i) {
      const json j = h.get(path).body;
      const double p = j["progress"].get<double>();
      CHECK(p >= last);
      last = p;
      if (j["state"] != "running") {
        final = j;
        break;
      }
      if (!cancelled && p > 0.2) {
        CHECK(h.post(path + "/cancel").status == 202);
        cancelled = true;
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    REQUIRE(cancelled);
    CHECK(final["state"] == "cancelled");
    const json tree = h.raw_tree(sid)["tree"];
    CHECK(tree.value("partial", false));
    CHECK(tree_docs(tree).size() == d.corpus.docs.size());
    CHECK(h.get(path + "x").status == 404);
  }

  TEST_CASE("merge edits, undo and illegal edits") {
    Harness h;
    const auto d = small_synth();
    const std::string sid = create(h, d);
    cluster_now(h, sid);
    const json v2 = h.raw_tree(sid);
    const json& tree = v2["tree"];
    std::vector<const json*> in;
    internals(tree, in);
    REQUIRE(in.size() >= 4);

    // removing the root is illegal and changes nothing
    Reply r = h.del("/sessions/" + sid + "/tree/clustering/nodes/" + std::to_string(tree["id"].get<int>()));
    CHECK(r.status == 422);
    CHECK(h.get("/sessions/" + sid).body["version"] == 2);

    // pick two unrelated internal nodes: the root's first two children, descending to internals
    const json* a = &tree["children"][0];
    const json* b = &tree["children"][1];
    while (!a->contains("children") || (*a)["children"].empty()) a = &tree["children"][2];
    REQUIRE(!(*b)["children"].empty());
    const int ia = (*a)["id"], ib = (*b)["id"];

    r = h.post("/sessions/" + sid + "/tree/clustering/merge", {{"src", ia}, {"dst", ib}, {"mode", "absorb"}});
    REQUIRE(r.status == 200);
    CHECK(r.body["version"] == 3);
    json t3 = h.raw_tree(sid)["tree"];
    const json* nb = find_node(t3, ib);
    REQUIRE(nb);
    bool has = false;
    for (const auto& c : (*nb)["children"]) has |= c["id"] == ia;
    CHECK(has);
    CHECK(tree_docs(t3) == tree_docs(tree));

    r = h.post("/sessions/" + sid + "/undo");
    CHECK(r.status == 200);
    CHECK(r.body["version"] == 4);
    const json back = h.raw_tree(sid);
    CHECK(back["tree"].dump() == tree.dump());

    r = h.post("/sessions/" + sid + "/tree/clustering/merge", {{"src", ia}, {"dst", ib}, {"mode", "join"}});
    REQUIRE(r.status == 200);
    json t5 = h.raw_tree(sid)["tree"];
    const json* na = find_node(t5, ia);
    REQUIRE(na);
    CHECK(tree_docs(t5) == tree_docs(tree));
    h.post("/sessions/" + sid + "/undo");

    r = h.post("/sessions/" + sid + "/tree/clustering/merge", {{"src", ia}, {"dst", ib}, {"mode", "collapse"}});
    REQUIRE(r.status == 200);
    json t7 = h.raw_tree(sid)["tree"];
    CHECK(find_node(t7, ia) == nullptr);
    CHECK(tree_docs(t7) == tree_docs(tree));

    // merging into a descendant, bad mode, unknown node
    CHECK(h.post("/sessions/" + sid + "/tree/clustering/merge", {{"src", t7["id"]}, {"dst", ib}, {"mode", "absorb"}}).status == 422);
    CHECK(h.post("/sessions/" + sid + "/tree/clustering/merge", {{"src", ia}, {"dst", ib}, {"mode", "fold"}}).status == 400);
    CHECK(h.post("/sessions/" + sid + "/tree/clustering/merge", {{"src", 99999}, {"dst", ib}, {"mode", "join"}}).status == 404);

    // undo all the way down, then nothing is left
    int guard = 0;
    while (h.post("/sessions/" + sid + "/undo").status == 200 && ++guard < 100) {
    }
    CHECK(h.post("/sessions/" + sid + "/undo").status == 409);
    CHECK(h.raw_tree(sid)["tree"].empty());
  }

  TEST_CASE("document moves conserve documents") {
    Harness h;
    const auto d = small_synth();
    const std::string sid = create(h, d);
    cluster_now(h, sid);
    const json t0 = h.raw_tree(sid)["tree"];
    const auto all = tree_docs(t0);
    const int leaf = first_leaf(t0);
    const std::string doc = (*find_node(t0, leaf))["docs"][0];

    // to its own node: no change, but a new version
    Reply r = h.post("/sessions/" + sid + "/docs/move", {{"docs", {doc}}, {"to", leaf}});
    REQUIRE(r.status == 200);
    CHECK(r.body["version"] == 3);
    CHECK(h.raw_tree(sid)["tree"].dump() == t0.dump());

    // to the pool and back
    r = h.post("/sessions/" + sid + "/docs/move", {{"docs", {doc}}, {"to", "pool"}});
    REQUIRE(r.status == 200);
    CHECK(h.get("/sessions/" + sid + "/pool").body["docs"] == json::array({doc}));
    auto now = tree_docs(h.raw_tree(sid)["tree"]);
    CHECK(now.size() + 1 == all.size());
    const int target = first_leaf(h.raw_tree(sid)["tree"]["children"].back());
    r = h.post("/sessions/" + sid + "/docs/move", {{"docs", {doc}}, {"from", "pool"}, {"to", target}});
    REQUIRE(r.status == 200);
    CHECK(tree_docs(h.raw_tree(sid)["tree"]) == all);
    CHECK(h.get("/sessions/" + sid + "/pool").body["docs"].empty());

    // wrong source, unknown doc, unknown target
    CHECK(h.post("/sessions/" + sid + "/docs/move", {{"docs", {doc}}, {"from", "pool"}, {"to", target}}).status == 422);
    CHECK(h.post("/sessions/" + sid + "/docs/move", {{"docs", {"nope"}}, {"to", target}}).status == 404);
    CHECK(h.post("/sessions/" + sid + "/docs/move", {{"docs", {doc}}, {"to", 99999}}).status == 404);

    // removing a subtree sends its documents to the pool
    const int child = h.raw_tree(sid)["tree"]["children"][0]["id"];
    r = h.del("/sessions/" + sid + "/tree/clustering/nodes/" + std::to_string(child));
    REQUIRE(r.status == 200);
    const auto pool = h.get("/sessions/" + sid + "/pool").body["docs"];
    CHECK(pool.size() == r.body["released"].get<std::size_t>());
    auto merged = tree_docs(h.raw_tree(sid)["tree"]);
    for (const auto& p : pool) merged.insert(p.get<std::string>());
    CHECK(merged == all);
  }

  TEST_CASE("new documents land under their topic") {
    Harness h;
    SynthConfig cfg;
    cfg.docs_per_leaf = 22;
    cfg.noise = 0.05;
    cfg.seed = 11;
    const SynthData d = synth(cfg);
    // hold back 10 documents of generator leaf 0
    Corpus kept;
    json held = json::array();
    std::vector<std::string> topic_ids;
    for (std::size_t i = 0; i < d.corpus.docs.size(); ++i) {
      const auto& doc = d.corpus.docs[i];
      if (d.doc_leaf[i] == 0 && held.size() < 10) {
        std::string text;
        for (const auto& [t, n] : doc.counts)
          for (std::int64_t k = 0; k < n; ++k) text += d.corpus.vocab.term(t) + " ";
        held.push_back({{"id", doc.id + "-new"}, {"text", text}});
        continue;
      }
      if (d.doc_leaf[i] == 0) topic_ids.push_back(doc.id);
      kept.docs.push_back(doc);
    }
    kept.vocab = d.corpus.vocab;
    kept.reindex();
    const std::string sid = create(h, SynthData{kept, {}, {}, {}, {}, {}});
    cluster_now(h, sid, {{"lambda", 0}});
    const json t = h.raw_tree(sid)["tree"];

    // smallest subtree holding every remaining topic document
    std::function<const json*(const json&)> cover = [&](const json& n) -> const json* {
      for (const auto& c : n["children"]) {
        const auto docs = tree_docs(c);
        bool all = true;
        for (const auto& id : topic_ids) all &= docs.count(id) > 0;
        if (all) return cover(c);
      }
      return &n;
    };
    const json* topic = cover(t);
    const auto topic_docs = tree_docs(*topic);
    CHECK(topic_docs.size() < 2 * topic_ids.size());

    const Reply r = h.post("/sessions/" + sid + "/docs/add", {{"docs", held}});
    REQUIRE(r.status == 200);
    const json after = h.raw_tree(sid)["tree"];
    CHECK(tree_docs(after).size() == kept.docs.size() + 10);
    // the topic's members after the insertion: the node now covering the old ones
    const json* topic_after = cover(after);
    const auto under = tree_docs(*topic_after);
    int landed = 0;
    for (const auto& doc : held) landed += under.count(doc["id"].get<std::string>()) > 0;
    CHECK(landed >= 8);
    CHECK(under.size() <= topic_docs.size() + 10);

    // duplicate ids are refused
    CHECK(h.post("/sessions/" + sid + "/docs/add", {{"docs", held}}).status == 400);
  }

  TEST_CASE("node details, paging and linked nodes") {
    Harness h;
    const auto d = small_synth(10, 8);
    const std::string sid = create(h, d, {{"lambda", 0}, {"seed", 1}}, true);
    Reply r = h.post("/sessions/" + sid + "/extract");
    REQUIRE(r.status == 202);
    REQUIRE(h.wait_job(sid, r.body)["state"] == "done");
    cluster_now(h, sid);
    const json t = h.raw_tree(sid)["tree"];
    const int root = t["id"];

    // top terms against a recount over the subtree documents
    std::istringstream in(jsonl(d.corpus));
    Corpus c;
    read_corpus_jsonl(in, c, TokenizerConfig::english());
    const json node = t["children"][0];
    std::map<std::string, std::int64_t> counts;
    for (const auto& id : tree_docs(node)) {
      const Document& doc = c.docs[*c.find(id)];
      for (const auto& [term, n] : doc.counts) counts[c.vocab.term(term)] += n;
    }
    r = h.get("/sessions/" + sid + "/nodes/" + std::to_string(node["id"].get<int>()) + "?terms=5&page_size=7");
    REQUIRE(r.status == 200);
    REQUIRE(r.body["top_terms"].size() == 5);
    std::int64_t prev = INT64_MAX;
    for (const auto& e : r.body["top_terms"]) {
      CHECK(e["count"] == counts[e["term"]]);
      CHECK(e["count"].get<std::int64_t>() <= prev);
      prev = e["count"];
    }
    std::int64_t best = 0;
    for (const auto& [term, n] : counts) best = std::max(best, n);
    CHECK(r.body["top_terms"][0]["count"] == best);
    CHECK(r.body.contains("uncertainty"));

    // pages are disjoint and cover the node
    std::multiset<std::string> paged;
    const std::size_t total = r.body["docs"]["total"];
    for (std::size_t p = 0; p * 7 < total + 7; ++p) {
      const Reply pg = h.get("/sessions/" + sid + "/nodes/" + std::to_string(node["id"].get<int>()) +
                             "?page_size=7&page=" + std::to_string(p));
      for (const auto& item : pg.body["docs"]["items"]) paged.insert(item["id"].get<std::string>());
    }
    CHECK(paged == tree_docs(node));

    // linked nodes partition the node's documents
    r = h.get("/sessions/" + sid + "/nodes/" + std::to_string(node["id"].get<int>()) + "/linked");
    REQUIRE(r.status == 200);
    CHECK(r.body["tree"] == "constraint");
    std::size_t linked = 0;
    for (const auto& l : r.body["links"]) linked += l["count"].get<std::size_t>();
    const json ct = h.raw_tree(sid, "constraint")["tree"];
    std::set<std::string> in_constraint;
    for (const auto& id : tree_docs(ct)) in_constraint.insert(id);
    std::size_t expected = 0;
    for (const auto& id : tree_docs(node)) expected += in_constraint.count(id);
    CHECK(linked == expected);

    // layout view
    r = h.get("/sessions/" + sid + "/tree/clustering?budget=10");
    REQUIRE(r.status == 200);
    CHECK(r.body.contains("layout"));
    CHECK(h.get("/sessions/" + sid + "/tree/clustering?focus=99999").status == 404);
    CHECK(h.get("/sessions/" + sid + "/nodes/99999").status == 404);
    CHECK(h.get("/sessions/" + sid + "/tree/bogus").status >= 400);

    // rename is visible
    CHECK(h.patch("/sessions/" + sid + "/tree/clustering/nodes/" + std::to_string(root), {{"label", "all"}}).status == 200);
    CHECK(h.raw_tree(sid)["tree"]["label"] == "all");
  }

  TEST_CASE("sessions survive a restart") {
    const fs::path dir = temp_dir();
    std::string sid;
    json tree;
    std::uint64_t version = 0;
    const auto d = small_synth();
    {
      Harness h(dir);
      sid = create(h, d);
      cluster_now(h, sid);
      const json t = h.raw_tree(sid)["tree"];
      const int child = t["children"][0]["id"];
      h.del("/sessions/" + sid + "/tree/clustering/nodes/" + std::to_string(child));
      tree = h.raw_tree(sid)["tree"];
      version = h.get("/sessions/" + sid).body["version"];
    }
    Harness h(dir);
    const Reply s = h.get("/sessions/" + sid);
    REQUIRE(s.status == 200);
    CHECK(s.body["version"] == version);
    CHECK(h.raw_tree(sid)["tree"].dump() == tree.dump());
    CHECK_FALSE(h.get("/sessions/" + sid + "/pool").body["docs"].empty());
    // undo history came back too
    CHECK(h.post("/sessions/" + sid + "/undo").status == 200);
    CHECK(h.get("/sessions/" + sid + "/pool").body["docs"].empty());
    h.stop();
    fs::remove_all(dir);
  }
}
