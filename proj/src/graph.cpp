#include "dilink/graph.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dilink/rng.hpp"
#include "dilink/tensor.hpp"

namespace dilink::graph {

using nlohmann::json;

std::string_view to_string(Provenance p) {
  return p == Provenance::Metadata ? "metadata" : "historical_link";
}

void ServiceGraph::add_node(const ServiceId& id, const std::string& workload) {
  auto [it, inserted] = nodes_.emplace(id, workload);
  if (!inserted && it->second.empty()) it->second = workload;
}

bool ServiceGraph::add_edge(const ServiceId& src, const ServiceId& dst, Provenance provenance) {
  if (!contains(src)) throw DataError("edge source '" + src + "' is not a node");
  if (!contains(dst)) throw DataError("edge target '" + dst + "' is not a node");
  if (src == dst) return false;
  return edges_.insert({src, dst, provenance}).second;
}

std::set<ServicePair> ServiceGraph::logical_edges() const {
  std::set<ServicePair> out;
  for (const auto& e : edges_) out.emplace(e.src, e.dst);
  return out;
}

std::vector<ServiceId> ServiceGraph::undirected_neighbors(const ServiceId& id) const {
  std::set<ServiceId> out;
  for (const auto& e : edges_) {
    if (e.src == id) out.insert(e.dst);
    if (e.dst == id) out.insert(e.src);
  }
  return {out.begin(), out.end()};
}

json ServiceGraph::to_json() const {
  json nodes = json::array();
  for (const auto& [id, wl] : nodes_) nodes.push_back({{"id", id}, {"workload", wl}});
  json edges = json::array();
  for (const auto& e : edges_) {
    edges.push_back({{"src", e.src}, {"dst", e.dst}, {"provenance", std::string(to_string(e.provenance))}});
  }
  return json{{"nodes", std::move(nodes)}, {"edges", std::move(edges)}};
}

ServiceGraph ServiceGraph::from_json(const json& j) {
  ServiceGraph g;
  for (const auto& n : j.at("nodes")) g.add_node(n.at("id").get<std::string>(), n.value("workload", ""));
  for (const auto& e : j.at("edges")) {
    const auto prov = e.at("provenance").get<std::string>();
    if (prov != "metadata" && prov != "historical_link") throw DataError("unknown edge provenance '" + prov + "'");
    g.add_edge(e.at("src").get<std::string>(), e.at("dst").get<std::string>(),
               prov == "metadata" ? Provenance::Metadata : Provenance::HistoricalLink);
  }
  return g;
}

ServiceGraph build_graph(const std::vector<ServicePair>& metadata_edges, const std::vector<IncidentLink>& links,
                         const IncidentMap& incidents, const GraphBuildOptions& options) {
  ServiceGraph g;
  for (const auto& [_, inc] : incidents) g.add_node(inc.owning_service, inc.workload);
  for (const auto& [src, dst] : metadata_edges) {
    g.add_node(src);
    g.add_node(dst);
    g.add_edge(src, dst, Provenance::Metadata);
  }
  for (const auto& link : links) {
    if (link.created_at < options.window_start || link.created_at >= options.window_end) continue;
    const bool wanted = (link.link_type == LinkType::Duplicate && options.use_duplicate) ||
                        (link.link_type == LinkType::Related && options.use_related) ||
                        (link.link_type == LinkType::Responsible && options.use_responsible);
    if (!wanted) continue;
    auto p = incidents.find(link.parent_id);
    auto c = incidents.find(link.child_id);
    if (p == incidents.end()) throw DataError("link parent '" + link.parent_id + "' not in incident set");
    if (c == incidents.end()) throw DataError("link child '" + link.child_id + "' not in incident set");
    const auto& src = p->second.owning_service;
    const auto& dst = c->second.owning_service;
    if (src == dst) continue;
    g.add_edge(src, dst, Provenance::HistoricalLink);
    g.count_link(src, dst);
  }
  return g;
}

std::vector<ServicePair> parse_metadata_edge_lines(std::string_view text) {
  std::vector<ServicePair> out;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos || tab == 0 ||
        tab + 1 == line.size()) {
      throw DataError("metadata edges line " + std::to_string(line_no) + ": expected src<TAB>dst");
    }
    out.emplace_back(line.substr(0, tab), line.substr(tab + 1));
  }
  return out;
}

std::vector<ServicePair> parse_metadata_edges(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_metadata_edge_lines(ss.str());
}

void write_metadata_edges(const std::filesystem::path& path, const std::vector<ServicePair>& edges) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "# src\tdst\n";
  for (const auto& [s, d] : edges) out << s << '\t' << d << '\n';
}

// --- SubGraph ------------------------------------------------------------------

std::vector<std::vector<std::size_t>> SubGraph::undirected_adjacency() const {
  std::vector<std::set<std::size_t>> sets(nodes.size());
  for (const auto& [a, b] : edges) {
    if (a == b) continue;
    sets[a].insert(b);
    sets[b].insert(a);
  }
  std::vector<std::vector<std::size_t>> out;
  out.reserve(sets.size());
  for (auto& s : sets) out.emplace_back(s.begin(), s.end());
  return out;
}

std::vector<std::vector<std::size_t>> SubGraph::incoming_adjacency() const {
  std::vector<std::set<std::size_t>> sets(nodes.size());
  for (const auto& [a, b] : edges)
    if (a != b) sets[b].insert(a);
  std::vector<std::vector<std::size_t>> out;
  for (auto& s : sets) out.emplace_back(s.begin(), s.end());
  return out;
}

SubGraph SubGraph::isolated(const ServiceId& id) {
  SubGraph s;
  s.center = id;
  s.nodes = {id};
  return s;
}

SubGraph SubGraph::permuted(const std::vector<std::size_t>& order) const {
  if (order.size() != nodes.size()) throw ShapeError("permutation size mismatch");
  std::vector<std::size_t> new_index(order.size());
  for (std::size_t k = 0; k < order.size(); ++k) new_index[order[k]] = k;
  SubGraph out;
  out.center = center;
  out.hops = hops;
  for (std::size_t k : order) out.nodes.push_back(nodes[k]);
  for (const auto& [a, b] : edges) out.edges.emplace_back(new_index[a], new_index[b]);
  std::sort(out.edges.begin(), out.edges.end());
  out.center_index = new_index[center_index];
  return out;
}

SubGraph extract_subgraph(const ServiceGraph& graph, const ServiceId& center, int hops) {
  if (!graph.contains(center)) throw DataError("unknown service '" + center + "'");
  if (hops < 0) throw std::invalid_argument("hops must be >= 0");

  // Undirected adjacency of the whole graph.
  std::map<ServiceId, std::set<ServiceId>> adj;
  for (const auto& [s, d] : graph.logical_edges()) {
    adj[s].insert(d);
    adj[d].insert(s);
  }
  std::map<ServiceId, int> dist{{center, 0}};
  std::deque<ServiceId> frontier{center};
  while (!frontier.empty()) {
    const ServiceId cur = frontier.front();
    frontier.pop_front();
    const int d = dist[cur];
    if (d == hops) continue;
    for (const auto& nb : adj[cur]) {
      if (dist.emplace(nb, d + 1).second) frontier.push_back(nb);
    }
  }

  SubGraph sub;
  sub.center = center;
  sub.hops = hops;
  sub.nodes.push_back(center);
  for (const auto& [id, _] : dist)
    if (id != center) sub.nodes.push_back(id);
  std::map<ServiceId, std::size_t> index;
  for (std::size_t i = 0; i < sub.nodes.size(); ++i) index[sub.nodes[i]] = i;
  for (const auto& [s, d] : graph.logical_edges()) {
    auto is = index.find(s);
    auto id = index.find(d);
    if (is != index.end() && id != index.end()) sub.edges.emplace_back(is->second, id->second);
  }
  std::sort(sub.edges.begin(), sub.edges.end());
  return sub;
}

ServiceGraph sample_edges(const ServiceGraph& graph, double keep_fraction, std::uint64_t seed) {
  if (!(keep_fraction >= 0.0 && keep_fraction <= 1.0)) throw std::invalid_argument("keep fraction must be in [0, 1]");
  const auto logical = graph.logical_edges();
  std::vector<ServicePair> order(logical.begin(), logical.end());
  Rng rng(seed);
  rng.shuffle(order.begin(), order.end());
  const auto keep = static_cast<std::size_t>(std::llround(keep_fraction * static_cast<double>(order.size())));
  std::set<ServicePair> kept(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep));

  ServiceGraph out;
  for (const auto& [id, wl] : graph.nodes()) out.add_node(id, wl);
  for (const auto& e : graph.edges()) {
    if (kept.contains({e.src, e.dst})) out.add_edge(e.src, e.dst, e.provenance);
  }
  for (const auto& [pair, n] : graph.link_multiplicity()) {
    if (kept.contains(pair))
      for (std::size_t k = 0; k < n; ++k) out.count_link(pair.first, pair.second);
  }
  return out;
}

}  // namespace dilink::graph
