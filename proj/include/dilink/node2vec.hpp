#pragma once

#include <cstdint>
#include <map>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dilink/graph.hpp"

namespace dilink::node2vec {

struct WalkConfig {
  std::size_t walk_length = 20;
  std::size_t walks_per_node = 100;
  double return_p = 1.0;
  double inout_q = 1.0;
  std::size_t embedding_dim = 32;
  std::size_t window = 10;
  std::size_t negatives = 5;
  std::size_t epochs = 5;
  double learning_rate = 0.025;
  /// Train once on the whole graph instead of once per sub-graph.
  bool global = false;

  void validate() const;
};

nlohmann::json to_json(const WalkConfig& c);
WalkConfig walk_config_from_json(const nlohmann::json& j);

using Adjacency = std::vector<std::vector<std::size_t>>;
using Walk = std::vector<std::size_t>;
using NodeEmbeddingTable = std::map<ServiceId, std::vector<double>>;

/// Second-order transition from `curr` having arrived from `prev`: weight 1/p
/// back to prev, 1 to neighbours of prev, 1/q otherwise, normalized. Pass
/// prev == curr for the first step (uniform). Throws if curr is isolated.
std::vector<std::pair<std::size_t, double>> transition_distribution(std::size_t prev, std::size_t curr,
                                                                     const Adjacency& adjacency, double p, double q);

/// walks_per_node walks from every node, in (node, walk) order; walk w from
/// node i is driven by derive_seed(node_seeds[i], w), so the result does not
/// depend on scheduling and a service walks the same way in every sub-graph
/// containing its neighbourhood. OpenMP-parallel over start nodes.
std::vector<Walk> generate_walks(const Adjacency& adjacency, const WalkConfig& config,
                                 const std::vector<std::uint64_t>& node_seeds);
/// Node seeds derive_seed(seed, i).
std::vector<Walk> generate_walks(const Adjacency& adjacency, const WalkConfig& config, std::uint64_t seed);
std::vector<Walk> generate_walks(const graph::SubGraph& subgraph, const WalkConfig& config, std::uint64_t seed);

namespace reference {
std::vector<Walk> generate_walks(const Adjacency& adjacency, const WalkConfig& config,
                                 const std::vector<std::uint64_t>& node_seeds);
std::vector<Walk> generate_walks(const Adjacency& adjacency, const WalkConfig& config, std::uint64_t seed);
}

struct SkipGramResult {
  std::vector<std::vector<double>> embeddings;  // indexed like the walk node ids
  std::vector<double> epoch_loss;  // mean loss per (center, context) pair
};

/// Skip-gram with negative sampling (unigram^0.75 noise) over window pairs.
/// Initial vectors come from `node_seeds[i]`, so a node starts from the same
/// point in every sub-graph it appears in.
SkipGramResult train_skipgram(const std::vector<Walk>& walks, const std::vector<std::uint64_t>& node_seeds,
                              const WalkConfig& config, std::uint64_t seed);

/// Stable per-service seed.
std::uint64_t service_seed(const ServiceId& id, std::uint64_t seed);

/// Walks + skip-gram on one sub-graph; the table covers exactly its nodes.
NodeEmbeddingTable embed_subgraph(const graph::SubGraph& subgraph, const WalkConfig& config, std::uint64_t seed);

/// Walks + skip-gram over the whole graph.
NodeEmbeddingTable embed_graph(const graph::ServiceGraph& graph, const WalkConfig& config, std::uint64_t seed);

nlohmann::json table_to_json(const NodeEmbeddingTable& table);

}  // namespace dilink::node2vec
