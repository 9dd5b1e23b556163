#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dilink/incident.hpp"

namespace dilink::graph {

enum class Provenance { Metadata, HistoricalLink };

std::string_view to_string(Provenance p);

struct Edge {
  ServiceId src;
  ServiceId dst;
  Provenance provenance = Provenance::Metadata;

  auto operator<=>(const Edge&) const = default;
};

using ServicePair = std::pair<ServiceId, ServiceId>;

/// Directed service dependency graph. Edges are tagged with where they came
/// from; a dependency present in both sources is one logical adjacency.
class ServiceGraph {
 public:
  /// Adds the node if absent; a non-empty workload overrides an empty one.
  void add_node(const ServiceId& id, const std::string& workload = {});

  /// Returns false for self-loops and exact duplicates. Throws if an endpoint
  /// is not a node.
  bool add_edge(const ServiceId& src, const ServiceId& dst, Provenance provenance);

  bool contains(const ServiceId& id) const { return nodes_.contains(id); }
  const std::map<ServiceId, std::string>& nodes() const { return nodes_; }
  const std::set<Edge>& edges() const { return edges_; }
  /// Provenance-collapsed directed edges.
  std::set<ServicePair> logical_edges() const;
  std::size_t logical_edge_count() const { return logical_edges().size(); }
  /// Link-derived edge multiplicities (how many historical links produced each).
  const std::map<ServicePair, std::size_t>& link_multiplicity() const { return link_multiplicity_; }
  void count_link(const ServiceId& src, const ServiceId& dst) { ++link_multiplicity_[{src, dst}]; }

  /// Neighbours in the undirected view, sorted, excluding the node itself.
  std::vector<ServiceId> undirected_neighbors(const ServiceId& id) const;

  nlohmann::json to_json() const;
  static ServiceGraph from_json(const nlohmann::json& j);

  friend bool operator==(const ServiceGraph& a, const ServiceGraph& b) {
    return a.nodes_ == b.nodes_ && a.edges_ == b.edges_;
  }

 private:
  std::map<ServiceId, std::string> nodes_;
  std::set<Edge> edges_;
  std::map<ServicePair, std::size_t> link_multiplicity_;
};

struct GraphBuildOptions {
  bool use_duplicate = true;
  bool use_related = true;
  bool use_responsible = true;
  /// Only links created in [window_start, window_end) contribute edges.
  Timestamp window_start = std::numeric_limits<Timestamp>::min();
  Timestamp window_end = std::numeric_limits<Timestamp>::max();
};

/// Metadata edges plus one parent-service -> child-service edge per historical
/// link. Every owning service of `incidents` becomes a node.
ServiceGraph build_graph(const std::vector<ServicePair>& metadata_edges, const std::vector<IncidentLink>& links,
                         const IncidentMap& incidents, const GraphBuildOptions& options = {});

/// `src<TAB>dst` per line, `#` starts a comment.
std::vector<ServicePair> parse_metadata_edges(const std::filesystem::path& path);
std::vector<ServicePair> parse_metadata_edge_lines(std::string_view text);
void write_metadata_edges(const std::filesystem::path& path, const std::vector<ServicePair>& edges);

/// N-hop neighbourhood of a service with its induced (logical) edges.
struct SubGraph {
  ServiceId center;
  int hops = 0;
  std::vector<ServiceId> nodes;  // center first, then the rest sorted
  std::vector<std::pair<std::size_t, std::size_t>> edges;  // directed, indices into nodes
  std::size_t center_index = 0;

  std::size_t size() const { return nodes.size(); }
  /// Sorted undirected neighbour lists, self excluded.
  std::vector<std::vector<std::size_t>> undirected_adjacency() const;
  /// Sorted in-neighbour lists (u with an edge u -> v).
  std::vector<std::vector<std::size_t>> incoming_adjacency() const;
  /// Isolated single-node sub-graph, for services missing from the graph.
  static SubGraph isolated(const ServiceId& id);
  /// Same nodes and edges with the node order permuted (center tracked).
  SubGraph permuted(const std::vector<std::size_t>& order) const;
};

/// Breadth-first over the undirected view up to `hops`; throws DataError for
/// an unknown center.
SubGraph extract_subgraph(const ServiceGraph& graph, const ServiceId& center, int hops);

/// Keeps exactly round(P * |E|) logical edges chosen by a seeded shuffle; all
/// provenance tags of a surviving adjacency are kept. Node set unchanged.
ServiceGraph sample_edges(const ServiceGraph& graph, double keep_fraction, std::uint64_t seed);

}  // namespace dilink::graph
