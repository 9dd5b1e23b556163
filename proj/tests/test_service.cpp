#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "dilink/service.hpp"
#include "fixtures.hpp"

using namespace dilink;
using namespace dilink::service;
using nlohmann::json;

namespace {

struct Shared {
  eval::ExperimentData data;
  std::filesystem::path checkpoint;
};

const Shared& shared() {
  static const Shared s = [] {
    Shared out;
    out.data = fixture::small_data();
    auto cfg = fixture::tiny_config();
    cfg.train.epochs = 1;
    const auto res = eval::run_pipeline(out.data, cfg);
    out.checkpoint = std::filesystem::temp_directory_path() / "dilink_test_service.ckpt";
    model::save_checkpoint(*res.model, out.checkpoint);
    return out;
  }();
  return s;
}

/// A model whose threshold admits every candidate (unit vectors are at most 2 apart).
std::shared_ptr<const model::Model> permissive_model(double tau = 3.0) {
  std::shared_ptr<model::Model> m = model::load_checkpoint(shared().checkpoint);
  m->set_threshold(tau);
  return m;
}

std::vector<Incident> incidents_by_time(std::size_t n) {
  std::vector<Incident> v;
  for (const auto& [_, inc] : shared().data.dataset.incidents) v.push_back(inc);
  std::sort(v.begin(), v.end(), [](const Incident& a, const Incident& b) { return a.created_at < b.created_at; });
  if (v.size() > n) v.resize(n);
  return v;
}

std::filesystem::path fresh_log(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("dilink_test_" + name + ".jsonl");
  std::filesystem::remove(p);
  return p;
}

Incident at(const std::string& id, Timestamp t, const std::string& svc = "svc000") {
  return {id, "disk latency", "eastus", "m", "disk", svc, "wl0", 2, t};
}

int api_status(const std::function<void()>& f) {
  try {
    f();
  } catch (const ApiError& e) {
    return e.status;
  }
  return 0;
}

std::string api_code(const std::function<void()>& f) {
  try {
    f();
  } catch (const ApiError& e) {
    return e.code;
  }
  return "";
}

}  // namespace

TEST(Lookback, WindowIsHalfOpenAndNewestFirst) {
  std::map<std::pair<Timestamp, IncidentId>, std::size_t> by_time;
  for (auto [t, id] : std::vector<std::pair<Timestamp, std::string>>{
           {89, "a"}, {90, "b"}, {91, "c"}, {95, "d"}, {99, "e"}, {100, "f"}, {101, "g"}})
    by_time[{t, id}] = by_time.size();
  EXPECT_EQ(lookback_candidates(by_time, 100, 10), (std::vector<IncidentId>{"e", "d", "c"}));
  EXPECT_THROW(lookback_candidates(by_time, 100, 0), std::exception);
  EXPECT_EQ(lookback_candidates(by_time, 100, 2), (std::vector<IncidentId>{"e"}));
}

TEST(Lookback, ServiceHonoursTheBoundaryExactly) {
  LinkService svc(permissive_model(), 100);
  svc.ingest(at("old", 1000));
  svc.ingest(at("edge", 1001));
  const auto r = svc.ingest(at("new", 1100));
  ASSERT_EQ(r.suggestions.size(), 1u);
  EXPECT_EQ(r.suggestions[0].candidate_id, "edge");
  EXPECT_EQ(r.suggestions[0].time_delta, 99);
  // "new" shares the timestamp, so only "edge" is in the window.
  EXPECT_EQ(svc.ingest(at("same", 1100)).suggestions.size(), 1u);
}

TEST(Suggestions, CreatedOnlyBelowThreshold) {
  LinkService strict(permissive_model(1e-12), 14400);
  const auto inc = incidents_by_time(30);
  for (const auto& i : inc)
    for (const auto& s : strict.ingest(i).suggestions) EXPECT_LT(s.distance, 1e-12);
  LinkService loose(permissive_model(), 14400);
  std::size_t made = 0;
  for (const auto& i : inc)
    for (const auto& s : loose.ingest(i).suggestions) {
      ++made;
      EXPECT_LT(s.distance, 3.0);
      EXPECT_NEAR(s.confidence, std::clamp(1.0 - s.distance / 3.0, 0.0, 1.0), 1e-15);
      EXPECT_GT(s.time_delta, 0);
      EXPECT_LT(s.time_delta, 14400);
    }
  EXPECT_GT(made, 0u);
  EXPECT_EQ(loose.stats().pending, made);
}

TEST(Suggestions, ConcurrentClientsNeverDuplicateAPair) {
  LinkService svc(permissive_model(), 14400);
  const auto inc = incidents_by_time(240);
  std::atomic<std::size_t> conflicts{0};
  std::vector<std::thread> clients;
  for (int c = 0; c < 8; ++c)
    clients.emplace_back([&, c] {
      // Every client submits every incident; exactly one submission per id wins.
      for (std::size_t k = 0; k < inc.size(); ++k) {
        const auto& i = inc[(k + 30 * c) % inc.size()];
        try {
          svc.ingest(i);
        } catch (const ApiError& e) {
          if (e.status == 409) ++conflicts;
        }
      }
    });
  for (auto& t : clients) t.join();
  EXPECT_EQ(conflicts.load(), 7 * inc.size());
  EXPECT_EQ(svc.stats().incidents, inc.size());
  std::set<std::pair<std::string, std::string>> pairs;
  std::set<std::string> ids;
  for (const auto& s : svc.suggestions()) {
    EXPECT_TRUE(pairs.insert(std::minmax(s.incident_id, s.candidate_id)).second) << s.incident_id << s.candidate_id;
    EXPECT_TRUE(ids.insert(s.id).second);
  }
  EXPECT_GT(pairs.size(), 0u);
}

TEST(Feedback, RulesAndLinkCreation) {
  LinkService svc(permissive_model(), 14400);
  svc.ingest(at("a", 1000, "svc001"));
  const auto r = svc.ingest(at("b", 1500, "svc002"));
  ASSERT_EQ(r.suggestions.size(), 1u);
  const auto id = r.suggestions[0].id;
  EXPECT_EQ(api_code([&] { svc.feedback(id, "reject", std::nullopt); }), "justification_required");
  EXPECT_EQ(api_status([&] { svc.feedback(id, "reject", "   "); }), 400);
  EXPECT_EQ(api_status([&] { svc.feedback(id, "maybe", "x"); }), 400);
  EXPECT_EQ(api_status([&] { svc.feedback("sug999999", "accept", std::nullopt); }), 404);
  const auto done = svc.feedback(id, "accept", std::nullopt);
  EXPECT_EQ(done.status, Status::Accepted);
  ASSERT_TRUE(done.reviewed_at.has_value());
  EXPECT_EQ(api_code([&] { svc.feedback(id, "reject", "no"); }), "already_reviewed");
  const auto links = svc.links();
  ASSERT_EQ(links.size(), 1u);
  EXPECT_EQ(links[0].parent_id, "a");
  EXPECT_EQ(links[0].child_id, "b");
  EXPECT_EQ(svc.stats().tp, 1u);
  EXPECT_EQ(svc.suggestions(Status::Pending).size(), 0u);
  EXPECT_EQ(svc.suggestions_for("a").size(), 1u);
  EXPECT_EQ(api_status([&] { svc.suggestions_for("zz"); }), 404);
}

TEST(Ingest, ValidationAndDuplicates) {
  LinkService svc(permissive_model(), 14400);
  EXPECT_EQ(api_status([&] { svc.ingest(at("", 10)); }), 400);
  EXPECT_EQ(api_status([&] { svc.ingest(at("x", 0)); }), 400);
  auto sev4 = at("x", 10);
  sev4.severity = 4;
  EXPECT_EQ(api_status([&] { svc.ingest(sev4); }), 400);
  svc.ingest(at("x", 10));
  EXPECT_EQ(api_status([&] { svc.ingest(at("x", 11)); }), 409);
  const auto unknown = svc.ingest(at("y", 12, "brand-new-service"));
  EXPECT_TRUE(unknown.fallback);
  EXPECT_EQ(api_status([] { status_from_string("done"); }), 400);
}

TEST(Persistence, ReplayRestoresIdenticalState) {
  const auto log = fresh_log("replay");
  json before_suggestions, before_stats, before_links;
  {
    LinkService svc(permissive_model(), 14400, log);
    for (const auto& i : incidents_by_time(60)) svc.ingest(i);
    const auto all = svc.suggestions();
    ASSERT_GE(all.size(), 3u);
    svc.feedback(all[0].id, "accept", std::nullopt);
    svc.feedback(all[1].id, "reject", "different root cause");
    for (const auto& s : svc.suggestions()) before_suggestions.push_back(to_json(s));
    before_stats = {svc.stats().tp, svc.stats().fp, svc.stats().pending};
    for (const auto& l : svc.links()) before_links.push_back(dilink::to_json(l));
  }
  LinkService again(permissive_model(), 14400, log);
  json after;
  for (const auto& s : again.suggestions()) after.push_back(to_json(s));
  EXPECT_EQ(after, before_suggestions);
  EXPECT_EQ(json({again.stats().tp, again.stats().fp, again.stats().pending}), before_stats);
  json after_links;
  for (const auto& l : again.links()) after_links.push_back(dilink::to_json(l));
  EXPECT_EQ(after_links, before_links);

  // New work continues the id sequence after a restart.
  const auto next = again.ingest(at("late", incidents_by_time(60).back().created_at + 5, "svc001"));
  ASSERT_FALSE(next.suggestions.empty());
  std::set<std::string> ids;
  for (const auto& s : again.suggestions()) EXPECT_TRUE(ids.insert(s.id).second);
  std::filesystem::remove(log);
}

TEST(Persistence, TornFinalLineIsIgnoredButEarlierCorruptionIsNot) {
  const auto log = fresh_log("torn");
  {
    LinkService svc(permissive_model(), 14400, log);
    svc.ingest(at("a", 100));
  }
  { std::ofstream(log, std::ios::app) << "{\"op\":\"ingest\",\"inc"; }
  {
    LinkService svc(permissive_model(), 14400, log);
    EXPECT_TRUE(svc.has_incident("a"));
    EXPECT_EQ(svc.stats().incidents, 1u);
  }
  { std::ofstream(log, std::ios::app) << "\n{\"op\":\"ingest\"}\n"; }
  EXPECT_THROW(LinkService(permissive_model(), 14400, log), std::exception);
  std::filesystem::remove(log);
}

TEST(Config, BindParsingAndEnvironment) {
  std::string host = "h";
  int port = 1;
  parse_bind("0.0.0.0:9000", host, port);
  EXPECT_EQ(host, "0.0.0.0");
  EXPECT_EQ(port, 9000);
  parse_bind(":81", host, port);
  EXPECT_EQ(port, 81);
  parse_bind("82", host, port);
  EXPECT_EQ(port, 82);
  EXPECT_THROW(parse_bind("host:notaport", host, port), std::exception);

  ::setenv("DILINK_CHECKPOINT", "/tmp/env.ckpt", 1);
  ::setenv("DILINK_LOOKBACK_SECS", "600", 1);
  ::setenv("DILINK_BIND", "127.0.0.2:7000", 1);
  ServerConfig cfg;
  apply_environment(cfg, false, false, false);
  EXPECT_EQ(cfg.checkpoint, "/tmp/env.ckpt");
  EXPECT_EQ(cfg.lookback, 600);
  EXPECT_EQ(cfg.host, "127.0.0.2");
  EXPECT_EQ(cfg.port, 7000);
  ServerConfig flags;
  flags.lookback = 5;
  apply_environment(flags, true, true, true);
  EXPECT_EQ(flags.lookback, 5);
  EXPECT_TRUE(flags.checkpoint.empty());
  ::setenv("DILINK_LOOKBACK_SECS", "soon", 1);
  EXPECT_THROW(apply_environment(flags, false, false, true), std::invalid_argument);
  ::unsetenv("DILINK_CHECKPOINT");
  ::unsetenv("DILINK_LOOKBACK_SECS");
  ::unsetenv("DILINK_BIND");
}

TEST(FeedbackGraph, AcceptedLinkAddsOneEdgeAndSameServiceAddsNone) {
  const auto& d = shared().data;
  const auto base = graph::build_graph(d.metadata_edges, d.dataset.links, d.dataset.incidents);
  // Find two services with no edge either way.
  std::string s1, s2;
  const auto logical = base.logical_edges();
  for (const auto& [a, _] : base.nodes())
    for (const auto& [b, __] : base.nodes())
      if (s1.empty() && a != b && !logical.contains({a, b}) && !logical.contains({b, a})) s1 = a, s2 = b;
  ASSERT_FALSE(s1.empty());
  IncidentMap inc = d.dataset.incidents;
  inc["fa"] = at("fa", 1, s1);
  inc["fb"] = at("fb", 2, s2);
  inc["fc"] = at("fc", 3, s1);
  const auto grown = rebuild_graph_with_feedback(d.metadata_edges, d.dataset.links,
                                                 {{"fa", "fb", LinkType::Related, 5}}, inc);
  EXPECT_EQ(grown.logical_edge_count(), base.logical_edge_count() + 1);
  const auto same = rebuild_graph_with_feedback(d.metadata_edges, d.dataset.links,
                                                {{"fa", "fc", LinkType::Related, 5}}, inc);
  EXPECT_EQ(same.logical_edge_count(), base.logical_edge_count());
}

class HttpApi : public ::testing::Test {
 protected:
  void start(const std::filesystem::path& log) {
    service_ = std::make_unique<LinkService>(permissive_model(), 14400, log);
    server_ = std::make_unique<HttpServer>(*service_);
    port_ = server_->bind("127.0.0.1", 0);
    ASSERT_GT(port_, 0);
    thread_ = std::thread([this] { server_->run(); });
    client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
    for (int i = 0; i < 100 && !client_->Get("/api/health"); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  void stop() {
    if (server_) server_->stop();
    if (thread_.joinable()) thread_.join();
    client_.reset();
    server_.reset();
    service_.reset();
  }
  void TearDown() override { stop(); }

  std::unique_ptr<LinkService> service_;
  std::unique_ptr<HttpServer> server_;
  std::unique_ptr<httplib::Client> client_;
  std::thread thread_;
  int port_ = 0;
};

TEST_F(HttpApi, EndpointsAndErrors) {
  start({});
  auto& c = *client_;
  auto post = [&](const std::string& path, const json& body) { return c.Post(path, body.dump(), "application/json"); };
  auto error_code = [](const httplib::Result& r) { return json::parse(r->body).at("code").get<std::string>(); };

  auto r = post("/api/incidents", dilink::to_json(at("a", 1000, "svc001")));
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 201);
  EXPECT_EQ(json::parse(r->body).at("incident_id"), "a");
  r = post("/api/incidents", dilink::to_json(at("b", 1200, "svc002")));
  EXPECT_EQ(r->status, 201);
  const auto sug = json::parse(r->body).at("suggestions");
  ASSERT_EQ(sug.size(), 1u);
  for (const char* key : {"id", "incident_id", "candidate_id", "incident_title", "candidate_title", "incident_service",
                          "candidate_service", "scope", "time_delta_secs", "distance", "confidence", "created_at",
                          "status", "justification", "reviewed_at", "fallback"})
    EXPECT_TRUE(sug[0].contains(key)) << key;

  r = post("/api/incidents", dilink::to_json(at("a", 1000)));
  EXPECT_EQ(r->status, 409);
  EXPECT_EQ(error_code(r), "duplicate_incident");
  EXPECT_TRUE(json::parse(r->body).contains("message"));
  r = c.Post("/api/incidents", "{broken", "application/json");
  EXPECT_EQ(r->status, 400);
  r = post("/api/incidents", json{{"id", "q"}});
  EXPECT_EQ(r->status, 400);

  r = c.Get("/api/suggestions?status=pending");
  EXPECT_EQ(json::parse(r->body).at("suggestions").size(), 1u);
  EXPECT_EQ(c.Get("/api/suggestions?status=bogus")->status, 400);
  EXPECT_EQ(c.Get("/api/incidents/zz/suggestions")->status, 404);
  r = c.Get("/api/incidents/a/suggestions");
  EXPECT_EQ(json::parse(r->body).at("suggestions").size(), 1u);

  const std::string fb = "/api/suggestions/" + sug[0]["id"].get<std::string>() + "/feedback";
  r = post(fb, {{"verdict", "reject"}});
  EXPECT_EQ(r->status, 400);
  EXPECT_EQ(error_code(r), "justification_required");
  r = post(fb, {{"verdict", "accept"}});
  EXPECT_EQ(r->status, 200);
  EXPECT_EQ(json::parse(r->body).at("status"), "accepted");
  EXPECT_EQ(post(fb, {{"verdict", "accept"}})->status, 409);
  EXPECT_EQ(post("/api/suggestions/nope/feedback", {{"verdict", "accept"}})->status, 404);

  r = c.Get("/api/links");
  EXPECT_EQ(json::parse(r->body).at("links").size(), 1u);
  const auto stats = json::parse(c.Get("/api/stats")->body);
  EXPECT_EQ(stats.at("tp"), 1);
  EXPECT_EQ(stats.at("acceptance_rate"), 1.0);
  const auto health = json::parse(c.Get("/api/health")->body);
  EXPECT_EQ(health.at("status"), "ok");
  EXPECT_EQ(health.at("incidents"), 2);
  r = c.Get("/api/nothing-here");
  EXPECT_EQ(r->status, 404);
  EXPECT_EQ(error_code(r), "not_found");
}

TEST_F(HttpApi, RestartReplayServesIdenticalSuggestions) {
  const auto log = fresh_log("http_replay");
  start(log);
  for (const auto& i : incidents_by_time(40)) client_->Post("/api/incidents", dilink::to_json(i).dump(), "application/json");
  const auto list = json::parse(client_->Get("/api/suggestions")->body).at("suggestions");
  ASSERT_FALSE(list.empty());
  client_->Post("/api/suggestions/" + list[0]["id"].get<std::string>() + "/feedback",
                json{{"verdict", "reject"}, {"justification", "unrelated"}}.dump(), "application/json");
  const std::string before = client_->Get("/api/suggestions")->body;
  stop();
  start(log);
  EXPECT_EQ(client_->Get("/api/suggestions")->body, before);
  std::filesystem::remove(log);
}

TEST_F(HttpApi, ConcurrentHttpClientsProduceOneSuggestionPerPair) {
  start({});
  const auto inc = incidents_by_time(120);
  std::vector<std::thread> clients;
  for (int c = 0; c < 8; ++c)
    clients.emplace_back([&, c] {
      httplib::Client cl("127.0.0.1", port_);
      for (std::size_t k = 0; k < inc.size(); ++k)
        cl.Post("/api/incidents", dilink::to_json(inc[(k + 15 * c) % inc.size()]).dump(), "application/json");
    });
  for (auto& t : clients) t.join();
  const auto list = json::parse(client_->Get("/api/suggestions")->body).at("suggestions");
  std::set<std::pair<std::string, std::string>> pairs;
  for (const auto& s : list)
    EXPECT_TRUE(pairs.insert(std::minmax(s["incident_id"].get<std::string>(), s["candidate_id"].get<std::string>())).second);
  EXPECT_EQ(json::parse(client_->Get("/api/stats")->body).at("incidents"), inc.size());
}
