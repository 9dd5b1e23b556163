#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dilink/graph.hpp"
#include "dilink/incident.hpp"

namespace dilink::synthetic {

struct WorldConfig {
  std::size_t services = 100;
  std::size_t workloads = 5;
  /// Upstream services each new service attaches to.
  std::size_t attachment = 2;
  /// Attachment weight multiplier for services of the same workload.
  double same_workload_affinity = 4.0;
  /// Root incidents per service per hour.
  double root_rate = 0.02;
  double cascade_prob = 0.6;
  double cascade_decay = 0.5;
  int max_cascade_hops = 3;
  double duplicate_prob = 0.25;
  /// Within-service follow-up incident sharing part of the title (Related link).
  double related_prob = 0.1;
  /// Per-token probability that a cascaded child reuses its parent's title tokens.
  double cross_token_leakage = 0.0;
  double duration_hours = 720.0;
  Timestamp start_time = 1640995200;  // 2022-01-01T00:00:00Z
  std::size_t service_tokens = 12;
  std::size_t workload_tokens = 8;
  std::size_t title_length = 6;
  std::size_t monitors_per_service = 3;
  std::uint64_t seed = 42;

  void validate() const;
};

nlohmann::json to_json(const WorldConfig& c);
WorldConfig world_config_from_json(const nlohmann::json& j);

struct World {
  WorldConfig config;
  std::vector<ServiceId> services;
  std::map<ServiceId, std::string> workload_of;
  /// Directed upstream -> downstream dependencies.
  std::vector<graph::ServicePair> edges;
  std::map<ServiceId, std::vector<std::string>> service_vocab;
  std::map<std::string, std::vector<std::string>> workload_vocab;
  std::vector<std::string> generic_vocab;
  std::map<ServiceId, std::vector<std::string>> monitors;
  std::vector<std::string> failure_types;
  std::vector<std::string> regions;
};

World generate_world(const WorldConfig& config);

struct Simulation {
  IncidentMap incidents;
  std::vector<IncidentLink> links;
};

Simulation simulate_incidents(const World& world);

/// Paraphrase used for duplicates: token dropout plus a synonym table.
std::string paraphrase(const std::string& title, std::uint64_t seed);

/// Writes world.json, incidents.jsonl, links.jsonl and metadata_edges.tsv.
void export_world(const World& world, const Simulation& sim, const std::filesystem::path& dir);

}  // namespace dilink::synthetic
