#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dilink/graph.hpp"
#include "dilink/incident.hpp"
#include "dilink/model.hpp"

namespace dilink::service {

/// An error with an HTTP status and a short machine-readable code.
class ApiError : public std::runtime_error {
 public:
  ApiError(int status, std::string code, const std::string& message)
      : std::runtime_error(message), status(status), code(std::move(code)) {}
  int status;
  std::string code;
};

enum class Status { Pending, Accepted, Rejected };

std::string_view to_string(Status s);
/// Accepts "pending", "accepted", "rejected"; ApiError 400 otherwise.
Status status_from_string(std::string_view s);

struct Suggestion {
  std::string id;
  IncidentId incident_id;   // the incident whose ingest produced the suggestion
  IncidentId candidate_id;  // the earlier incident from the lookback window
  std::string incident_title;
  std::string candidate_title;
  ServiceId incident_service;
  ServiceId candidate_service;
  LinkScope scope = LinkScope::WithinService;
  Timestamp time_delta = 0;  // seconds between the two creation times
  double distance = 0.0;
  double confidence = 0.0;
  Timestamp created_at = 0;
  Status status = Status::Pending;
  std::optional<std::string> justification;
  std::optional<std::int64_t> reviewed_at;
  /// Either side was embedded with the isolated-node fallback.
  bool fallback = false;
};

nlohmann::json to_json(const Suggestion& s);
Suggestion suggestion_from_json(const nlohmann::json& j);

/// clamp(1 - distance / tau, 0, 1).
double confidence(double distance, double tau);

struct StoredIncident {
  Incident incident;
  std::vector<double> embedding;
  bool fallback = false;
};

struct Stats {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t pending = 0;
  std::size_t incidents = 0;
  std::size_t suggestions = 0;
};

struct IngestResult {
  std::vector<Suggestion> suggestions;
  bool fallback = false;
};

/// Incidents stored in (created_at, id) order; returns ids with created_at in
/// (t - window, t), newest first.
std::vector<IncidentId> lookback_candidates(const std::map<std::pair<Timestamp, IncidentId>, std::size_t>& by_time,
                                            Timestamp t, Timestamp window);

/// The online linking service: embedding store, suggestions, feedback and an
/// append-only JSONL log that is replayed on construction.
class LinkService {
 public:
  /// `log_path` empty means no persistence.
  LinkService(std::shared_ptr<const model::Model> model, Timestamp lookback,
              std::filesystem::path log_path = {});
  ~LinkService();

  IngestResult ingest(const Incident& incident);
  Suggestion feedback(const std::string& suggestion_id, const std::string& verdict,
                      const std::optional<std::string>& justification);

  /// Ordered by suggestion id (creation order).
  std::vector<Suggestion> suggestions(std::optional<Status> status = std::nullopt) const;
  /// Suggestions involving the incident on either side; ApiError 404 if unknown.
  std::vector<Suggestion> suggestions_for(const IncidentId& id) const;
  /// Links stored from accepted suggestions.
  std::vector<IncidentLink> links() const;
  Stats stats() const;
  nlohmann::json health() const;

  bool has_incident(const IncidentId& id) const;
  Timestamp lookback() const { return lookback_; }
  const model::Model& model() const { return *model_; }

 private:
  std::shared_ptr<const model::Model> model_;
  double tau_ = 0.0;
  Timestamp lookback_;
  std::filesystem::path log_path_;
  std::ofstream log_;

  mutable std::shared_mutex mutex_;
  std::vector<StoredIncident> incidents_;
  std::map<IncidentId, std::size_t> index_;
  std::map<std::pair<Timestamp, IncidentId>, std::size_t> by_time_;
  std::vector<Suggestion> suggestions_;
  std::map<std::string, std::size_t> suggestion_index_;
  std::set<std::pair<IncidentId, IncidentId>> suggested_pairs_;
  std::vector<IncidentLink> links_;
  std::size_t tp_ = 0;
  std::size_t fp_ = 0;

  struct Embedded {
    std::vector<double> vector;
    bool fallback = false;
  };
  Embedded embed(const Incident& incident) const;
  /// Requires the unique lock.
  IngestResult insert_locked(const Incident& incident, Embedded embedded);
  Suggestion& apply_feedback_locked(const std::string& id, Status verdict, const std::optional<std::string>& note,
                                    std::int64_t reviewed_at);
  void append_log(const nlohmann::json& record);
  void replay();
};

/// build_graph over the metadata edges, the original links and the accepted
/// feedback links.
graph::ServiceGraph rebuild_graph_with_feedback(const std::vector<graph::ServicePair>& metadata_edges,
                                                const std::vector<IncidentLink>& original_links,
                                                const std::vector<IncidentLink>& accepted_links,
                                                const IncidentMap& incidents,
                                                const graph::GraphBuildOptions& options = {});

struct ServerConfig {
  std::filesystem::path checkpoint;
  Timestamp lookback = 14400;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path log_path;
};

/// Parses "host:port" (or ":port", or "port").
void parse_bind(const std::string& bind, std::string& host, int& port);

/// Fills unset fields from DILINK_CHECKPOINT, DILINK_LOOKBACK_SECS and DILINK_BIND.
void apply_environment(ServerConfig& config, bool checkpoint_set, bool lookback_set, bool bind_set);

/// JSON HTTP front end for a LinkService.
class HttpServer {
 public:
  explicit HttpServer(LinkService& service);
  ~HttpServer();

  /// Binds (port 0 picks a free port) and returns the bound port; -1 on failure.
  int bind(const std::string& host, int port);
  /// Blocks until stop().
  void run();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace dilink::service
