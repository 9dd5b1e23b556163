#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace dilink {

using IncidentId = std::string;
using ServiceId = std::string;
using Timestamp = std::int64_t;  // UTC epoch seconds

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Incident {
  IncidentId id;
  std::string title;
  std::string topology;
  std::string monitor_id;
  std::string failure_type;
  ServiceId owning_service;
  std::string workload;
  int severity = 3;
  Timestamp created_at = 0;

  friend bool operator==(const Incident&, const Incident&) = default;
};

enum class LinkType { Duplicate, Related, Responsible };

std::string_view to_string(LinkType type);
LinkType link_type_from_string(std::string_view s);

struct IncidentLink {
  IncidentId parent_id;
  IncidentId child_id;
  LinkType link_type = LinkType::Related;
  Timestamp created_at = 0;

  friend bool operator==(const IncidentLink&, const IncidentLink&) = default;
};

enum class LinkScope { WithinService, CrossService, CrossWorkload };

inline constexpr LinkScope kAllScopes[] = {LinkScope::WithinService, LinkScope::CrossService, LinkScope::CrossWorkload};

std::string_view to_string(LinkScope scope);

struct Triplet {
  IncidentId anchor;
  IncidentId positive;
  IncidentId negative;

  friend bool operator==(const Triplet&, const Triplet&) = default;
};

using IncidentMap = std::map<IncidentId, Incident>;

struct Dataset {
  IncidentMap incidents;
  std::vector<IncidentLink> links;
  Timestamp split_cutoff = 0;

  /// Throws DataError if a link endpoint is missing or a link is a self-link.
  void validate() const;
  Timestamp min_time() const;
  Timestamp max_time() const;
};

// --- JSONL ingestion ---------------------------------------------------------

Incident incident_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Incident& incident);
IncidentLink link_from_json(const nlohmann::json& j);
nlohmann::json to_json(const IncidentLink& link);

struct IncidentFile {
  std::vector<Incident> incidents;
  std::size_t skipped_severity4 = 0;
};

/// One JSON object per line; blank lines ignored. Errors name the 1-based
/// line number and, for missing keys, the field.
IncidentFile parse_incident_file(const std::filesystem::path& path);
IncidentFile parse_incident_lines(std::string_view text);
std::vector<IncidentLink> parse_link_file(const std::filesystem::path& path);
std::vector<IncidentLink> parse_link_lines(std::string_view text);

void write_incident_file(const std::filesystem::path& path, const std::vector<Incident>& incidents);
void write_link_file(const std::filesystem::path& path, const std::vector<IncidentLink>& links);

/// Loads incidents.jsonl + links.jsonl from a directory. Links whose endpoints
/// were dropped (severity 4) are discarded.
Dataset load_dataset(const std::filesystem::path& dir);

IncidentMap index_incidents(const std::vector<Incident>& incidents);

// --- Operations ------------------------------------------------------------

struct SplitLinks {
  std::vector<IncidentLink> train;
  std::vector<IncidentLink> test;
};

/// train = links created strictly before `cutoff`; the rest go to test.
SplitLinks temporal_split(const std::vector<IncidentLink>& links, Timestamp cutoff);

LinkScope pair_scope(const Incident& a, const Incident& b);
LinkScope link_scope(const IncidentLink& link, const IncidentMap& incidents);
LinkScope link_scope(const IncidentId& a, const IncidentId& b, const IncidentMap& incidents);

struct TripletConfig {
  Timestamp negative_window = 14400;
  double downsample_same_service = 0.25;
  /// Distinct negatives drawn per retained positive (fewer if the window is sparse).
  std::size_t negatives_per_positive = 1;
  std::uint64_t seed = 7;
};

struct TripletSet {
  std::vector<Triplet> triplets;
  std::size_t dropped_no_negative = 0;
  std::size_t downsampled = 0;
};

/// negatives_per_positive triplets per retained positive pair (anchor = parent). Negatives are
/// drawn uniformly from incidents within +-negative_window of the anchor that
/// are not linked to it in `known_links` (defaults to `links`).
TripletSet generate_triplets(const std::vector<IncidentLink>& links, const IncidentMap& incidents,
                             const TripletConfig& config, const std::vector<IncidentLink>* known_links = nullptr);

}  // namespace dilink
