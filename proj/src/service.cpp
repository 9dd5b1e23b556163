#include "dilink/service.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <mutex>

#include <httplib.h>
#include <nlohmann/json.hpp>

namespace dilink::service {

using nlohmann::json;

std::string_view to_string(Status s) {
  switch (s) {
    case Status::Pending:
      return "pending";
    case Status::Accepted:
      return "accepted";
    case Status::Rejected:
      return "rejected";
  }
  return "pending";
}

Status status_from_string(std::string_view s) {
  if (s == "pending") return Status::Pending;
  if (s == "accepted") return Status::Accepted;
  if (s == "rejected") return Status::Rejected;
  throw ApiError(400, "invalid_status", "status must be pending, accepted or rejected (got '" + std::string(s) + "')");
}

double confidence(double distance, double tau) {
  if (!(tau > 0.0)) return 0.0;
  return std::clamp(1.0 - distance / tau, 0.0, 1.0);
}

json to_json(const Suggestion& s) {
  json j = {{"id", s.id},
            {"incident_id", s.incident_id},
            {"candidate_id", s.candidate_id},
            {"incident_title", s.incident_title},
            {"candidate_title", s.candidate_title},
            {"incident_service", s.incident_service},
            {"candidate_service", s.candidate_service},
            {"scope", std::string(dilink::to_string(s.scope))},
            {"time_delta_secs", s.time_delta},
            {"distance", s.distance},
            {"confidence", s.confidence},
            {"created_at", s.created_at},
            {"status", std::string(to_string(s.status))},
            {"justification", nullptr},
            {"reviewed_at", nullptr},
            {"fallback", s.fallback}};
  if (s.justification) j["justification"] = *s.justification;
  if (s.reviewed_at) j["reviewed_at"] = *s.reviewed_at;
  return j;
}

namespace {

LinkScope scope_from_string(const std::string& s) {
  for (auto scope : kAllScopes)
    if (dilink::to_string(scope) == s) return scope;
  throw DataError("unknown link scope '" + s + "'");
}

std::int64_t now_seconds() {
  return std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch()).count();
}

std::string suggestion_id(std::size_t n) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sug%06zu", n);
  return buf;
}

}  // namespace

Suggestion suggestion_from_json(const json& j) {
  Suggestion s;
  s.id = j.at("id").get<std::string>();
  s.incident_id = j.at("incident_id").get<std::string>();
  s.candidate_id = j.at("candidate_id").get<std::string>();
  s.incident_title = j.at("incident_title").get<std::string>();
  s.candidate_title = j.at("candidate_title").get<std::string>();
  s.incident_service = j.at("incident_service").get<std::string>();
  s.candidate_service = j.at("candidate_service").get<std::string>();
  s.scope = scope_from_string(j.at("scope").get<std::string>());
  s.time_delta = j.at("time_delta_secs").get<Timestamp>();
  s.distance = j.at("distance").get<double>();
  s.confidence = j.at("confidence").get<double>();
  s.created_at = j.at("created_at").get<Timestamp>();
  s.status = status_from_string(j.at("status").get<std::string>());
  if (j.contains("justification") && !j["justification"].is_null()) s.justification = j["justification"].get<std::string>();
  if (j.contains("reviewed_at") && !j["reviewed_at"].is_null()) s.reviewed_at = j["reviewed_at"].get<std::int64_t>();
  s.fallback = j.value("fallback", false);
  return s;
}

std::vector<IncidentId> lookback_candidates(const std::map<std::pair<Timestamp, IncidentId>, std::size_t>& by_time,
                                            Timestamp t, Timestamp window) {
  if (window <= 0) throw std::invalid_argument("lookback window must be positive");
  std::vector<IncidentId> out;
  // Integer seconds: created_at > t - window is created_at >= t - window + 1.
  auto it = by_time.lower_bound({t - window + 1, IncidentId{}});
  for (; it != by_time.end() && it->first.first < t; ++it) out.push_back(it->first.second);
  std::reverse(out.begin(), out.end());
  return out;
}

// --- LinkService -----------------------------------------------------------------

LinkService::LinkService(std::shared_ptr<const model::Model> model, Timestamp lookback,
                         std::filesystem::path log_path)
    : model_(std::move(model)), lookback_(lookback), log_path_(std::move(log_path)) {
  if (!model_) throw std::invalid_argument("LinkService needs a model");
  if (!model_->threshold()) throw std::invalid_argument("checkpoint has no tuned threshold; run tune-threshold first");
  if (lookback_ <= 0) throw std::invalid_argument("lookback must be positive");
  tau_ = *model_->threshold();
  if (!log_path_.empty()) {
    if (log_path_.has_parent_path()) std::filesystem::create_directories(log_path_.parent_path());
    replay();
    log_.open(log_path_, std::ios::app);
    if (!log_) throw std::runtime_error("cannot open persistence log " + log_path_.string());
  }
}

LinkService::~LinkService() = default;

LinkService::Embedded LinkService::embed(const Incident& incident) const {
  Embedded e;
  e.vector = model_->scoring_vector(incident, true, &e.fallback);
  return e;
}

IngestResult LinkService::ingest(const Incident& incident) {
  if (incident.id.empty()) throw ApiError(400, "invalid_incident", "incident id is empty");
  if (incident.owning_service.empty()) throw ApiError(400, "invalid_incident", "owning_service is empty");
  if (incident.created_at <= 0) throw ApiError(400, "invalid_incident", "created_at must be positive");
  if (incident.severity < 1 || incident.severity > 3) {
    throw ApiError(400, "invalid_incident", "severity must be 1, 2 or 3");
  }
  {
    std::shared_lock lock(mutex_);
    if (index_.contains(incident.id)) throw ApiError(409, "duplicate_incident", "incident '" + incident.id + "' already exists");
  }
  Embedded embedded = embed(incident);

  std::unique_lock lock(mutex_);
  if (index_.contains(incident.id)) throw ApiError(409, "duplicate_incident", "incident '" + incident.id + "' already exists");
  IngestResult result = insert_locked(incident, std::move(embedded));
  json record = {{"op", "ingest"}, {"incident", dilink::to_json(incident)}, {"suggestions", json::array()}};
  for (const auto& s : result.suggestions) record["suggestions"].push_back(to_json(s));
  append_log(record);
  return result;
}

IngestResult LinkService::insert_locked(const Incident& incident, Embedded embedded) {
  IngestResult result;
  result.fallback = embedded.fallback;
  for (const auto& cid : lookback_candidates(by_time_, incident.created_at, lookback_)) {
    const StoredIncident& cand = incidents_[index_.at(cid)];
    const auto key = std::minmax(incident.id, cid);
    if (suggested_pairs_.contains({key.first, key.second})) continue;
    const double d = model_->distance(embedded.vector, cand.embedding);
    if (!(d < tau_)) continue;
    Suggestion s;
    s.id = suggestion_id(suggestions_.size() + 1);
    s.incident_id = incident.id;
    s.candidate_id = cid;
    s.incident_title = incident.title;
    s.candidate_title = cand.incident.title;
    s.incident_service = incident.owning_service;
    s.candidate_service = cand.incident.owning_service;
    s.scope = pair_scope(incident, cand.incident);
    s.time_delta = incident.created_at - cand.incident.created_at;
    s.distance = d;
    s.confidence = confidence(d, tau_);
    s.created_at = incident.created_at;
    s.fallback = embedded.fallback || cand.fallback;
    suggested_pairs_.emplace(key.first, key.second);
    suggestion_index_[s.id] = suggestions_.size();
    suggestions_.push_back(s);
    result.suggestions.push_back(std::move(s));
  }
  const std::size_t slot = incidents_.size();
  incidents_.push_back({incident, std::move(embedded.vector), embedded.fallback});
  index_[incident.id] = slot;
  by_time_[{incident.created_at, incident.id}] = slot;
  return result;
}

Suggestion LinkService::feedback(const std::string& id, const std::string& verdict,
                                 const std::optional<std::string>& justification) {
  Status target;
  if (verdict == "accept") {
    target = Status::Accepted;
  } else if (verdict == "reject") {
    target = Status::Rejected;
  } else {
    throw ApiError(400, "invalid_verdict", "verdict must be 'accept' or 'reject'");
  }
  std::optional<std::string> note = justification;
  if (note && note->find_first_not_of(" \t\r\n") == std::string::npos) note.reset();
  if (target == Status::Rejected && !note) {
    throw ApiError(400, "justification_required", "rejecting a suggestion requires a justification");
  }
  std::unique_lock lock(mutex_);
  const std::int64_t at = now_seconds();
  Suggestion& s = apply_feedback_locked(id, target, note, at);
  json record = {{"op", "feedback"}, {"id", id}, {"verdict", verdict}, {"reviewed_at", at}};
  record["justification"] = note ? json(*note) : json(nullptr);
  append_log(record);
  return s;
}

Suggestion& LinkService::apply_feedback_locked(const std::string& id, Status verdict,
                                               const std::optional<std::string>& note, std::int64_t reviewed_at) {
  auto it = suggestion_index_.find(id);
  if (it == suggestion_index_.end()) throw ApiError(404, "suggestion_not_found", "no suggestion '" + id + "'");
  Suggestion& s = suggestions_[it->second];
  if (s.status != Status::Pending) {
    throw ApiError(409, "already_reviewed",
                   "suggestion '" + id + "' is already " + std::string(to_string(s.status)));
  }
  s.status = verdict;
  s.justification = note;
  s.reviewed_at = reviewed_at;
  if (verdict == Status::Accepted) {
    links_.push_back({s.candidate_id, s.incident_id, LinkType::Related, reviewed_at});
    ++tp_;
  } else {
    ++fp_;
  }
  return s;
}

std::vector<Suggestion> LinkService::suggestions(std::optional<Status> status) const {
  std::shared_lock lock(mutex_);
  std::vector<Suggestion> out;
  for (const auto& s : suggestions_)
    if (!status || s.status == *status) out.push_back(s);
  return out;
}

std::vector<Suggestion> LinkService::suggestions_for(const IncidentId& id) const {
  std::shared_lock lock(mutex_);
  if (!index_.contains(id)) throw ApiError(404, "incident_not_found", "no incident '" + id + "'");
  std::vector<Suggestion> out;
  for (const auto& s : suggestions_)
    if (s.incident_id == id || s.candidate_id == id) out.push_back(s);
  return out;
}

std::vector<IncidentLink> LinkService::links() const {
  std::shared_lock lock(mutex_);
  return links_;
}

Stats LinkService::stats() const {
  std::shared_lock lock(mutex_);
  Stats st;
  st.tp = tp_;
  st.fp = fp_;
  st.incidents = incidents_.size();
  st.suggestions = suggestions_.size();
  st.pending = static_cast<std::size_t>(std::count_if(
      suggestions_.begin(), suggestions_.end(), [](const Suggestion& s) { return s.status == Status::Pending; }));
  return st;
}

json LinkService::health() const {
  std::shared_lock lock(mutex_);
  return {{"status", "ok"},
          {"checkpoint_version", model::kCheckpointVersion},
          {"variant", std::string(model::to_string(model_->variant()))},
          {"tau", tau_},
          {"lookback_secs", lookback_},
          {"incidents", incidents_.size()}};
}

bool LinkService::has_incident(const IncidentId& id) const {
  std::shared_lock lock(mutex_);
  return index_.contains(id);
}

void LinkService::append_log(const json& record) {
  if (!log_.is_open()) return;
  log_ << record.dump() << '\n';
  log_.flush();
  if (!log_) throw std::runtime_error("failed to write persistence log " + log_path_.string());
}

void LinkService::replay() {
  std::ifstream in(log_path_);
  if (!in) return;
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) lines.push_back(line);

  std::unique_lock lock(mutex_);
  for (std::size_t n = 0; n < lines.size(); ++n) {
    json record;
    try {
      record = json::parse(lines[n]);
    } catch (const json::parse_error&) {
      // A torn final write from a crash is dropped; anything earlier is corruption.
      if (n + 1 == lines.size()) break;
      throw DataError("persistence log line " + std::to_string(n + 1) + " is not valid JSON");
    }
    const auto op = record.at("op").get<std::string>();
    if (op == "ingest") {
      const Incident incident = incident_from_json(record.at("incident"));
      Embedded embedded = embed(incident);
      const std::size_t slot = incidents_.size();
      for (const auto& sj : record.at("suggestions")) {
        Suggestion s = suggestion_from_json(sj);
        const auto key = std::minmax(s.incident_id, s.candidate_id);
        suggested_pairs_.emplace(key.first, key.second);
        suggestion_index_[s.id] = suggestions_.size();
        suggestions_.push_back(std::move(s));
      }
      incidents_.push_back({incident, std::move(embedded.vector), embedded.fallback});
      index_[incident.id] = slot;
      by_time_[{incident.created_at, incident.id}] = slot;
    } else if (op == "feedback") {
      const auto verdict = record.at("verdict").get<std::string>();
      std::optional<std::string> note;
      if (record.contains("justification") && !record["justification"].is_null()) {
        note = record["justification"].get<std::string>();
      }
      apply_feedback_locked(record.at("id").get<std::string>(),
                            verdict == "accept" ? Status::Accepted : Status::Rejected, note,
                            record.at("reviewed_at").get<std::int64_t>());
    } else {
      throw DataError("persistence log line " + std::to_string(n + 1) + ": unknown op '" + op + "'");
    }
  }
}

graph::ServiceGraph rebuild_graph_with_feedback(const std::vector<graph::ServicePair>& metadata_edges,
                                                const std::vector<IncidentLink>& original_links,
                                                const std::vector<IncidentLink>& accepted_links,
                                                const IncidentMap& incidents,
                                                const graph::GraphBuildOptions& options) {
  std::vector<IncidentLink> all = original_links;
  all.insert(all.end(), accepted_links.begin(), accepted_links.end());
  return graph::build_graph(metadata_edges, all, incidents, options);
}

// --- configuration -------------------------------------------------------------------

void parse_bind(const std::string& bind, std::string& host, int& port) {
  const auto colon = bind.rfind(':');
  std::string port_text = colon == std::string::npos ? bind : bind.substr(colon + 1);
  if (colon != std::string::npos && colon > 0) host = bind.substr(0, colon);
  try {
    std::size_t used = 0;
    const int p = std::stoi(port_text, &used);
    if (used != port_text.size() || p < 0 || p > 65535) throw std::invalid_argument("range");
    port = p;
  } catch (const std::exception&) {
    throw std::invalid_argument("bad bind address '" + bind + "' (expected host:port)");
  }
}

void apply_environment(ServerConfig& config, bool checkpoint_set, bool lookback_set, bool bind_set) {
  if (const char* v = std::getenv("DILINK_CHECKPOINT"); v && !checkpoint_set) config.checkpoint = v;
  if (const char* v = std::getenv("DILINK_LOOKBACK_SECS"); v && !lookback_set) {
    try {
      config.lookback = std::stoll(v);
    } catch (const std::exception&) {
      throw std::invalid_argument(std::string("DILINK_LOOKBACK_SECS is not an integer: '") + v + "'");
    }
  }
  if (const char* v = std::getenv("DILINK_BIND"); v && !bind_set) parse_bind(v, config.host, config.port);
}

// --- HTTP ----------------------------------------------------------------------------

struct HttpServer::Impl {
  LinkService& service;
  httplib::Server server;
  explicit Impl(LinkService& s) : service(s) {}
};

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
  send_json(res, status, {{"code", code}, {"message", message}});
}

json parse_body(const httplib::Request& req) {
  try {
    return json::parse(req.body);
  } catch (const json::parse_error& e) {
    throw ApiError(400, "invalid_json", std::string("request body is not valid JSON: ") + e.what());
  }
}

json suggestion_array(const std::vector<Suggestion>& list) {
  json arr = json::array();
  for (const auto& s : list) arr.push_back(to_json(s));
  return arr;
}

template <typename F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const ApiError& e) {
      send_error(res, e.status, e.code, e.what());
    } catch (const DataError& e) {
      send_error(res, 400, "invalid_request", e.what());
    } catch (const json::exception& e) {
      send_error(res, 400, "invalid_request", e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, "internal", e.what());
    }
  };
}

}  // namespace

HttpServer::HttpServer(LinkService& service) : impl_(std::make_unique<Impl>(service)) {
  auto& srv = impl_->server;
  LinkService& svc = impl_->service;

  srv.Post("/api/incidents", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
             const json body = parse_body(req);
             if (!body.is_object()) throw ApiError(400, "invalid_incident", "incident must be a JSON object");
             const Incident incident = incident_from_json(body);
             const IngestResult r = svc.ingest(incident);
             send_json(res, 201,
                       {{"incident_id", incident.id}, {"fallback", r.fallback},
                        {"suggestions", suggestion_array(r.suggestions)}});
           }));

  srv.Get("/api/suggestions", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
            std::optional<Status> status;
            if (req.has_param("status")) status = status_from_string(req.get_param_value("status"));
            send_json(res, 200, {{"suggestions", suggestion_array(svc.suggestions(status))}});
          }));

  srv.Get(R"(/api/incidents/([^/]+)/suggestions)",
          guarded([&svc](const httplib::Request& req, httplib::Response& res) {
            const std::string id = req.matches[1];
            send_json(res, 200, {{"incident_id", id}, {"suggestions", suggestion_array(svc.suggestions_for(id))}});
          }));

  srv.Post(R"(/api/suggestions/([^/]+)/feedback)",
           guarded([&svc](const httplib::Request& req, httplib::Response& res) {
             const std::string id = req.matches[1];
             const json body = parse_body(req);
             if (!body.is_object() || !body.contains("verdict") || !body["verdict"].is_string()) {
               throw ApiError(400, "invalid_feedback", "body must be {\"verdict\": \"accept\"|\"reject\", \"justification\"?}");
             }
             std::optional<std::string> note;
             if (body.contains("justification") && !body["justification"].is_null()) {
               if (!body["justification"].is_string()) {
                 throw ApiError(400, "invalid_feedback", "justification must be a string");
               }
               note = body["justification"].get<std::string>();
             }
             send_json(res, 200, to_json(svc.feedback(id, body["verdict"].get<std::string>(), note)));
           }));

  srv.Get("/api/links", guarded([&svc](const httplib::Request&, httplib::Response& res) {
            json arr = json::array();
            for (const auto& l : svc.links()) arr.push_back(dilink::to_json(l));
            send_json(res, 200, {{"links", arr}});
          }));

  srv.Get("/api/health",
          guarded([&svc](const httplib::Request&, httplib::Response& res) { send_json(res, 200, svc.health()); }));

  srv.Get("/api/stats", guarded([&svc](const httplib::Request&, httplib::Response& res) {
            const Stats st = svc.stats();
            const std::size_t reviewed = st.tp + st.fp;
            send_json(res, 200,
                      {{"tp", st.tp},
                       {"fp", st.fp},
                       {"pending", st.pending},
                       {"incidents", st.incidents},
                       {"suggestions", st.suggestions},
                       {"acceptance_rate", reviewed == 0 ? json(nullptr)
                                                         : json(static_cast<double>(st.tp) / static_cast<double>(reviewed))}});
          }));

  srv.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
    if (!res.body.empty()) return;
    if (res.status == 404) {
      send_error(res, 404, "not_found", "no route for " + req.method + " " + req.path);
    } else {
      send_error(res, res.status, "http_error", httplib::status_message(res.status));
    }
  });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) return impl_->server.bind_to_any_port(host);
  return impl_->server.bind_to_port(host, port) ? port : -1;
}

void HttpServer::run() { impl_->server.listen_after_bind(); }

void HttpServer::stop() {
  if (impl_) impl_->server.stop();
}

}  // namespace dilink::service
