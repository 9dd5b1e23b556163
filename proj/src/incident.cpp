#include "dilink/incident.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "dilink/rng.hpp"

namespace dilink {

using nlohmann::json;

std::string_view to_string(LinkType type) {
  switch (type) {
    case LinkType::Duplicate: return "duplicate";
    case LinkType::Related: return "related";
    case LinkType::Responsible: return "responsible";
  }
  return "related";
}

LinkType link_type_from_string(std::string_view s) {
  if (s == "duplicate") return LinkType::Duplicate;
  if (s == "related") return LinkType::Related;
  if (s == "responsible") return LinkType::Responsible;
  throw DataError("unknown link_type '" + std::string(s) + "'");
}

std::string_view to_string(LinkScope scope) {
  switch (scope) {
    case LinkScope::WithinService: return "within_service";
    case LinkScope::CrossService: return "cross_service";
    case LinkScope::CrossWorkload: return "cross_workload";
  }
  return "?";
}

void Dataset::validate() const {
  for (const auto& link : links) {
    if (link.parent_id == link.child_id) throw DataError("self-link on incident " + link.parent_id);
    for (const auto* id : {&link.parent_id, &link.child_id}) {
      if (!incidents.contains(*id)) throw DataError("link endpoint '" + *id + "' not in incident set");
    }
  }
}

Timestamp Dataset::min_time() const {
  Timestamp t = std::numeric_limits<Timestamp>::max();
  for (const auto& [_, inc] : incidents) t = std::min(t, inc.created_at);
  return incidents.empty() ? 0 : t;
}

Timestamp Dataset::max_time() const {
  Timestamp t = 0;
  for (const auto& [_, inc] : incidents) t = std::max(t, inc.created_at);
  return t;
}

namespace {

template <typename T>
T required(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end()) throw DataError(std::string("missing mandatory field '") + key + "'");
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw DataError(std::string("field '") + key + "' has the wrong type");
  }
}

template <typename Fn>
void for_each_line(std::string_view text, Fn&& fn) {
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    const bool blank = std::all_of(line.begin(), line.end(), [](char c) { return c == ' ' || c == '\t'; });
    if (!blank) {
      json j;
      try {
        j = json::parse(line);
      } catch (const json::parse_error& e) {
        throw DataError("line " + std::to_string(line_no) + ": malformed JSON (" + e.what() + ")");
      }
      if (!j.is_object()) throw DataError("line " + std::to_string(line_no) + ": expected a JSON object");
      try {
        fn(j);
      } catch (const DataError& e) {
        throw DataError("line " + std::to_string(line_no) + ": " + e.what());
      }
    }
    if (end == text.size()) break;
    pos = end + 1;
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

Incident incident_from_json(const json& j) {
  Incident inc;
  inc.id = required<std::string>(j, "id");
  inc.title = required<std::string>(j, "title");
  inc.topology = required<std::string>(j, "topology");
  inc.monitor_id = required<std::string>(j, "monitor_id");
  inc.failure_type = required<std::string>(j, "failure_type");
  inc.owning_service = required<std::string>(j, "owning_service");
  inc.workload = required<std::string>(j, "workload");
  inc.severity = required<int>(j, "severity");
  inc.created_at = required<Timestamp>(j, "created_at");
  if (inc.id.empty()) throw DataError("empty incident id");
  if (inc.owning_service.empty()) throw DataError("empty owning_service on incident " + inc.id);
  if (inc.created_at <= 0) throw DataError("non-positive created_at on incident " + inc.id);
  if (inc.severity < 1 || inc.severity > 4) throw DataError("severity out of range on incident " + inc.id);
  return inc;
}

namespace {

template <typename J>
J incident_object(const Incident& inc) {
  J j = J::object();
  j["id"] = inc.id;
  j["title"] = inc.title;
  j["topology"] = inc.topology;
  j["monitor_id"] = inc.monitor_id;
  j["failure_type"] = inc.failure_type;
  j["owning_service"] = inc.owning_service;
  j["workload"] = inc.workload;
  j["severity"] = inc.severity;
  j["created_at"] = inc.created_at;
  return j;
}

template <typename J>
J link_object(const IncidentLink& link) {
  J j = J::object();
  j["parent_id"] = link.parent_id;
  j["child_id"] = link.child_id;
  j["link_type"] = std::string(to_string(link.link_type));
  j["created_at"] = link.created_at;
  return j;
}

}  // namespace

json to_json(const Incident& inc) { return incident_object<json>(inc); }

IncidentLink link_from_json(const json& j) {
  IncidentLink link;
  link.parent_id = required<std::string>(j, "parent_id");
  link.child_id = required<std::string>(j, "child_id");
  link.link_type = link_type_from_string(required<std::string>(j, "link_type"));
  link.created_at = required<Timestamp>(j, "created_at");
  if (link.parent_id == link.child_id) throw DataError("self-link on incident " + link.parent_id);
  return link;
}

json to_json(const IncidentLink& link) { return link_object<json>(link); }

IncidentFile parse_incident_lines(std::string_view text) {
  IncidentFile out;
  for_each_line(text, [&](const json& j) {
    Incident inc = incident_from_json(j);
    if (inc.severity == 4) {
      ++out.skipped_severity4;
      return;
    }
    out.incidents.push_back(std::move(inc));
  });
  return out;
}

IncidentFile parse_incident_file(const std::filesystem::path& path) {
  try {
    return parse_incident_lines(read_file(path));
  } catch (const DataError& e) {
    throw DataError(path.filename().string() + ": " + e.what());
  }
}

std::vector<IncidentLink> parse_link_lines(std::string_view text) {
  std::vector<IncidentLink> out;
  for_each_line(text, [&](const json& j) { out.push_back(link_from_json(j)); });
  return out;
}

std::vector<IncidentLink> parse_link_file(const std::filesystem::path& path) {
  try {
    return parse_link_lines(read_file(path));
  } catch (const DataError& e) {
    throw DataError(path.filename().string() + ": " + e.what());
  }
}

void write_incident_file(const std::filesystem::path& path, const std::vector<Incident>& incidents) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& inc : incidents) out << incident_object<nlohmann::ordered_json>(inc).dump() << '\n';
}

void write_link_file(const std::filesystem::path& path, const std::vector<IncidentLink>& links) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& link : links) out << link_object<nlohmann::ordered_json>(link).dump() << '\n';
}

IncidentMap index_incidents(const std::vector<Incident>& incidents) {
  IncidentMap map;
  for (const auto& inc : incidents) {
    if (!map.emplace(inc.id, inc).second) throw DataError("duplicate incident id '" + inc.id + "'");
  }
  return map;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.incidents = index_incidents(parse_incident_file(dir / "incidents.jsonl").incidents);
  for (auto& link : parse_link_file(dir / "links.jsonl")) {
    if (ds.incidents.contains(link.parent_id) && ds.incidents.contains(link.child_id)) {
      ds.links.push_back(std::move(link));
    }
  }
  ds.validate();
  return ds;
}

SplitLinks temporal_split(const std::vector<IncidentLink>& links, Timestamp cutoff) {
  SplitLinks out;
  for (const auto& link : links) (link.created_at < cutoff ? out.train : out.test).push_back(link);
  return out;
}

LinkScope pair_scope(const Incident& a, const Incident& b) {
  if (a.owning_service == b.owning_service) return LinkScope::WithinService;
  if (a.workload != b.workload) return LinkScope::CrossWorkload;
  return LinkScope::CrossService;
}

LinkScope link_scope(const IncidentId& a, const IncidentId& b, const IncidentMap& incidents) {
  auto ia = incidents.find(a);
  auto ib = incidents.find(b);
  if (ia == incidents.end()) throw DataError("unknown incident '" + a + "'");
  if (ib == incidents.end()) throw DataError("unknown incident '" + b + "'");
  return pair_scope(ia->second, ib->second);
}

LinkScope link_scope(const IncidentLink& link, const IncidentMap& incidents) {
  return link_scope(link.parent_id, link.child_id, incidents);
}

TripletSet generate_triplets(const std::vector<IncidentLink>& links, const IncidentMap& incidents,
                             const TripletConfig& config, const std::vector<IncidentLink>* known_links) {
  if (config.negative_window <= 0) throw std::invalid_argument("negative_window must be positive");
  if (config.negatives_per_positive == 0) throw std::invalid_argument("negatives_per_positive must be >= 1");
  const auto& known = known_links ? *known_links : links;

  std::set<std::pair<std::string_view, std::string_view>> linked;
  for (const auto& l : known) {
    linked.emplace(l.parent_id, l.child_id);
    linked.emplace(l.child_id, l.parent_id);
  }

  // Incidents ordered by (created_at, id) for window lookups.
  std::vector<const Incident*> by_time;
  by_time.reserve(incidents.size());
  for (const auto& [_, inc] : incidents) by_time.push_back(&inc);
  std::stable_sort(by_time.begin(), by_time.end(),
                   [](const Incident* a, const Incident* b) { return a->created_at < b->created_at; });

  Rng rng(config.seed);
  TripletSet out;
  std::vector<const Incident*> eligible;
  for (const auto& link : links) {
    const Incident& anchor = incidents.at(link.parent_id);
    const Incident& positive = incidents.at(link.child_id);
    if (pair_scope(anchor, positive) == LinkScope::WithinService && !rng.bernoulli(config.downsample_same_service)) {
      ++out.downsampled;
      continue;
    }
    const Timestamp lo = anchor.created_at - config.negative_window;
    const Timestamp hi = anchor.created_at + config.negative_window;
    auto first = std::lower_bound(by_time.begin(), by_time.end(), lo,
                                  [](const Incident* inc, Timestamp t) { return inc->created_at < t; });
    eligible.clear();
    for (auto it = first; it != by_time.end() && (*it)->created_at <= hi; ++it) {
      const Incident* cand = *it;
      if (cand->id == anchor.id || cand->id == positive.id) continue;
      if (linked.contains({anchor.id, cand->id})) continue;
      eligible.push_back(cand);
    }
    if (eligible.empty()) {
      ++out.dropped_no_negative;
      continue;
    }
    const std::size_t draws = std::min(config.negatives_per_positive, eligible.size());
    for (std::size_t k = 0; k < draws; ++k) {
      // Partial Fisher-Yates: the first `draws` slots end up distinct.
      std::swap(eligible[k], eligible[k + rng.below(eligible.size() - k)]);
      out.triplets.push_back({anchor.id, positive.id, eligible[k]->id});
    }
  }
  return out;
}

}  // namespace dilink
