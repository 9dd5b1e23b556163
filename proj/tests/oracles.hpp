#pragma once

// Independent brute-force oracles shared by the unit tests and the acceptance
// binary. Nothing here calls into the library code it is used to check.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "dilink/graph.hpp"
#include "dilink/rng.hpp"
#include "dilink/tensor.hpp"

namespace oracle {

/// Random directed graph over nodes "n0".."n{n-1}" with edge probability p.
inline dilink::graph::ServiceGraph random_graph(std::size_t n, double p, dilink::Rng& rng) {
  dilink::graph::ServiceGraph g;
  for (std::size_t i = 0; i < n; ++i) g.add_node("n" + std::to_string(i), i % 2 ? "w1" : "w0");
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j && rng.bernoulli(p))
        g.add_edge("n" + std::to_string(i), "n" + std::to_string(j),
                   rng.bernoulli(0.5) ? dilink::graph::Provenance::Metadata
                                      : dilink::graph::Provenance::HistoricalLink);
  return g;
}

/// Two k-cliques "a0".."a{k-1}" and "b0".."b{k-1}" joined by a0 - b0.
inline dilink::graph::ServiceGraph barbell(std::size_t k) {
  dilink::graph::ServiceGraph g;
  for (const char side : {'a', 'b'})
    for (std::size_t i = 0; i < k; ++i) g.add_node(std::string(1, side) + std::to_string(i));
  for (const char side : {'a', 'b'})
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = i + 1; j < k; ++j)
        g.add_edge(std::string(1, side) + std::to_string(i), std::string(1, side) + std::to_string(j),
                   dilink::graph::Provenance::Metadata);
  g.add_edge("a0", "b0", dilink::graph::Provenance::Metadata);
  return g;
}

struct ExpectedSubgraph {
  std::set<std::string> nodes;
  std::set<std::pair<std::string, std::string>> edges;
};

/// All-pairs hop distances on the undirected view (Floyd-Warshall).
struct HopDistances {
  std::vector<std::string> ids;  // sorted
  std::vector<std::vector<int>> d;
};

inline HopDistances hop_distances(const dilink::graph::ServiceGraph& g) {
  HopDistances h;
  for (const auto& [id, _] : g.nodes()) h.ids.push_back(id);
  const std::size_t n = h.ids.size();
  auto index = [&](const std::string& s) {
    return static_cast<std::size_t>(std::lower_bound(h.ids.begin(), h.ids.end(), s) - h.ids.begin());
  };
  const int inf = std::numeric_limits<int>::max() / 4;
  h.d.assign(n, std::vector<int>(n, inf));
  for (std::size_t i = 0; i < n; ++i) h.d[i][i] = 0;
  for (const auto& e : g.edges()) {
    const auto a = index(e.src), b = index(e.dst);
    h.d[a][b] = h.d[b][a] = 1;
  }
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) h.d[i][j] = std::min(h.d[i][j], h.d[i][k] + h.d[k][j]);
  return h;
}

/// Nodes within `hops` of the center and every directed edge among them.
inline ExpectedSubgraph subgraph(const dilink::graph::ServiceGraph& g, const HopDistances& h,
                                 const std::string& center, int hops) {
  ExpectedSubgraph out;
  const auto c = static_cast<std::size_t>(std::lower_bound(h.ids.begin(), h.ids.end(), center) - h.ids.begin());
  for (std::size_t i = 0; i < h.ids.size(); ++i)
    if (h.d[c][i] <= hops) out.nodes.insert(h.ids[i]);
  for (const auto& e : g.edges())
    if (out.nodes.contains(e.src) && out.nodes.contains(e.dst)) out.edges.emplace(e.src, e.dst);
  return out;
}

inline ExpectedSubgraph subgraph(const dilink::graph::ServiceGraph& g, const std::string& center, int hops) {
  return subgraph(g, hop_distances(g), center, hops);
}

inline bool matches(const dilink::graph::SubGraph& sub, const ExpectedSubgraph& want) {
  std::set<std::string> nodes(sub.nodes.begin(), sub.nodes.end());
  if (nodes.size() != sub.nodes.size() || nodes != want.nodes) return false;
  if (sub.nodes.empty() || sub.nodes[sub.center_index] != sub.center) return false;
  std::set<std::pair<std::string, std::string>> edges;
  for (const auto& [a, b] : sub.edges) edges.emplace(sub.nodes[a], sub.nodes[b]);
  return edges.size() == sub.edges.size() && edges == want.edges;
}

/// min over a rotation/reflection angle grid of ||R - M||_F for 2x2 M.
inline double best_grid_distance(const dilink::Tensor& m, double step) {
  double best = std::numeric_limits<double>::infinity();
  const auto steps = static_cast<long>(std::ceil(2.0 * std::numbers::pi / step));
  for (long k = 0; k <= steps; ++k) {
    const double t = k * step, c = std::cos(t), s = std::sin(t);
    const double rot = std::pow(c - m.at(0, 0), 2) + std::pow(-s - m.at(0, 1), 2) + std::pow(s - m.at(1, 0), 2) +
                       std::pow(c - m.at(1, 1), 2);
    const double ref = std::pow(c - m.at(0, 0), 2) + std::pow(s - m.at(0, 1), 2) + std::pow(s - m.at(1, 0), 2) +
                       std::pow(-c - m.at(1, 1), 2);
    best = std::min({best, rot, ref});
  }
  return std::sqrt(best);
}

struct Counts {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

/// Confusion counts by direct enumeration, predicting positive when d < tau.
inline Counts recount(const std::vector<double>& d, const std::vector<bool>& labels, double tau) {
  Counts c;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const bool pred = d[i] < tau;
    if (pred && labels[i]) ++c.tp;
    else if (pred) ++c.fp;
    else if (labels[i]) ++c.fn;
    else ++c.tn;
  }
  return c;
}

}  // namespace oracle
