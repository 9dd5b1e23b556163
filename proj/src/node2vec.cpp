#include "dilink/node2vec.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "dilink/rng.hpp"
#include "dilink/tensor.hpp"

namespace dilink::node2vec {

using nlohmann::json;

void WalkConfig::validate() const {
  if (walk_length < 1 || walks_per_node < 1) throw std::invalid_argument("walk length and walk count must be >= 1");
  if (!(return_p > 0.0) || !(inout_q > 0.0)) throw std::invalid_argument("node2vec p and q must be positive");
  if (embedding_dim < 1) throw std::invalid_argument("node2vec embedding_dim must be >= 1");
  if (window < 1) throw std::invalid_argument("skip-gram window must be >= 1");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("skip-gram learning rate must be positive");
}

json to_json(const WalkConfig& c) {
  return json{{"walk_length", c.walk_length}, {"walks_per_node", c.walks_per_node}, {"p", c.return_p},
              {"q", c.inout_q},               {"embedding_dim", c.embedding_dim},   {"window", c.window},
              {"negatives", c.negatives},     {"epochs", c.epochs},                 {"learning_rate", c.learning_rate},
              {"global", c.global}};
}

WalkConfig walk_config_from_json(const json& j) {
  WalkConfig c;
  c.walk_length = j.value("walk_length", c.walk_length);
  c.walks_per_node = j.value("walks_per_node", c.walks_per_node);
  c.return_p = j.value("p", c.return_p);
  c.inout_q = j.value("q", c.inout_q);
  c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
  c.window = j.value("window", c.window);
  c.negatives = j.value("negatives", c.negatives);
  c.epochs = j.value("epochs", c.epochs);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.global = j.value("global", c.global);
  c.validate();
  return c;
}

std::vector<std::pair<std::size_t, double>> transition_distribution(std::size_t prev, std::size_t curr,
                                                                     const Adjacency& adjacency, double p, double q) {
  const auto& nbrs = adjacency.at(curr);
  if (nbrs.empty()) throw std::invalid_argument("transition_distribution: node has no neighbours");
  std::vector<std::pair<std::size_t, double>> out;
  out.reserve(nbrs.size());
  double total = 0.0;
  const bool first_step = prev == curr;
  const auto& prev_nbrs = adjacency.at(prev);
  for (std::size_t x : nbrs) {
    double w = 1.0;
    if (!first_step) {
      if (x == prev) {
        w = 1.0 / p;
      } else if (!std::binary_search(prev_nbrs.begin(), prev_nbrs.end(), x)) {
        w = 1.0 / q;
      }
    }
    out.emplace_back(x, w);
    total += w;
  }
  for (auto& [_, w] : out) w /= total;
  return out;
}

namespace {

std::size_t draw(const std::vector<std::pair<std::size_t, double>>& dist, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (const auto& [x, w] : dist) {
    acc += w;
    if (u < acc) return x;
  }
  return dist.back().first;
}

Walk one_walk(const Adjacency& adj, std::size_t start, const WalkConfig& config, std::uint64_t walk_seed) {
  Rng rng(walk_seed);
  Walk walk{start};
  walk.reserve(config.walk_length);
  while (walk.size() < config.walk_length) {
    const std::size_t curr = walk.back();
    if (adj[curr].empty()) break;
    const std::size_t prev = walk.size() >= 2 ? walk[walk.size() - 2] : curr;
    walk.push_back(draw(transition_distribution(prev, curr, adj, config.return_p, config.inout_q), rng));
  }
  return walk;
}

}  // namespace

std::vector<Walk> generate_walks(const Adjacency& adjacency, const WalkConfig& config,
                                 const std::vector<std::uint64_t>& node_seeds) {
  config.validate();
  const std::size_t n = adjacency.size();
  if (node_seeds.size() != n) throw std::invalid_argument("generate_walks: one seed per node required");
  const std::size_t r = config.walks_per_node;
  std::vector<Walk> walks(n * r);
  const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(dynamic) if (n > 8)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    const auto node = static_cast<std::size_t>(i);
    for (std::size_t w = 0; w < r; ++w)
      walks[node * r + w] = one_walk(adjacency, node, config, derive_seed(node_seeds[node], w));
  }
  return walks;
}

namespace {

std::vector<std::uint64_t> index_seeds(std::size_t n, std::uint64_t seed) {
  std::vector<std::uint64_t> seeds(n);
  for (std::size_t i = 0; i < n; ++i) seeds[i] = derive_seed(seed, i);
  return seeds;
}

}  // namespace

std::vector<Walk> generate_walks(const Adjacency& adjacency, const WalkConfig& config, std::uint64_t seed) {
  return generate_walks(adjacency, config, index_seeds(adjacency.size(), seed));
}

std::vector<Walk> generate_walks(const graph::SubGraph& subgraph, const WalkConfig& config, std::uint64_t seed) {
  return generate_walks(subgraph.undirected_adjacency(), config, seed);
}

namespace reference {

std::vector<Walk> generate_walks(const Adjacency& adjacency, const WalkConfig& config,
                                 const std::vector<std::uint64_t>& node_seeds) {
  config.validate();
  if (node_seeds.size() != adjacency.size()) throw std::invalid_argument("generate_walks: one seed per node required");
  std::vector<Walk> walks;
  walks.reserve(adjacency.size() * config.walks_per_node);
  for (std::size_t node = 0; node < adjacency.size(); ++node)
    for (std::size_t w = 0; w < config.walks_per_node; ++w)
      walks.push_back(one_walk(adjacency, node, config, derive_seed(node_seeds[node], w)));
  return walks;
}

std::vector<Walk> generate_walks(const Adjacency& adjacency, const WalkConfig& config, std::uint64_t seed) {
  return reference::generate_walks(adjacency, config, index_seeds(adjacency.size(), seed));
}

}  // namespace reference

namespace {

inline double sigmoid(double x) {
  if (x > 30.0) return 1.0;
  if (x < -30.0) return 0.0;
  return 1.0 / (1.0 + std::exp(-x));
}

}  // namespace

SkipGramResult train_skipgram(const std::vector<Walk>& walks, const std::vector<std::uint64_t>& node_seeds,
                              const WalkConfig& config, std::uint64_t seed) {
  if (walks.empty()) throw std::invalid_argument("train_skipgram: no walks");
  config.validate();
  const std::size_t n = node_seeds.size();
  const std::size_t dim = config.embedding_dim;

  SkipGramResult result;
  auto& center = result.embeddings;
  center.assign(n, std::vector<double>(dim));
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(node_seeds[i]);
    for (auto& v : center[i]) v = static_cast<double>(static_cast<float>(rng.uniform(-0.5, 0.5) / static_cast<double>(dim)));
  }
  std::vector<std::vector<double>> context(n, std::vector<double>(dim, 0.0));

  // Noise distribution: unigram counts ^ 0.75.
  std::vector<double> counts(n, 0.0);
  std::size_t pairs_per_epoch = 0;
  for (const auto& w : walks) {
    for (std::size_t node : w) {
      if (node >= n) throw std::out_of_range("walk node outside the seed table");
      counts[node] += 1.0;
    }
    const std::size_t len = w.size();
    for (std::size_t i = 0; i < len; ++i) {
      const std::size_t lo = i >= config.window ? i - config.window : 0;
      const std::size_t hi = std::min(len - 1, i + config.window);
      pairs_per_epoch += hi - lo;
    }
  }
  if (pairs_per_epoch == 0) return result;

  std::vector<double> noise_cdf(n);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += std::pow(counts[i], 0.75);
    noise_cdf[i] = acc;
  }
  Rng rng(derive_seed(seed, 0x5e6));
  auto draw_noise = [&]() {
    const double u = rng.uniform() * acc;
    const auto it = std::upper_bound(noise_cdf.begin(), noise_cdf.end(), u);
    return std::min<std::size_t>(static_cast<std::size_t>(it - noise_cdf.begin()), n - 1);
  };

  const double total = static_cast<double>(pairs_per_epoch * config.epochs);
  double processed = 0.0;
  std::vector<double> grad(dim);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    double loss = 0.0;
    for (const auto& w : walks) {
      const std::size_t len = w.size();
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t lo = i >= config.window ? i - config.window : 0;
        const std::size_t hi = std::min(len - 1, i + config.window);
        for (std::size_t j = lo; j <= hi; ++j) {
          if (j == i) continue;
          const double lr = config.learning_rate * std::max(1e-4, 1.0 - processed / total);
          processed += 1.0;
          auto& c = center[w[i]];
          std::fill(grad.begin(), grad.end(), 0.0);
          for (std::size_t k = 0; k <= config.negatives; ++k) {
            std::size_t target;
            double label;
            if (k == 0) {
              target = w[j];
              label = 1.0;
            } else {
              target = draw_noise();
              if (target == w[j]) continue;
              label = 0.0;
            }
            auto& u = context[target];
            const double s = sigmoid(dot(c, u));
            loss -= label > 0.0 ? std::log(std::max(s, 1e-12)) : std::log(std::max(1.0 - s, 1e-12));
            const double g = (label - s) * lr;
            for (std::size_t d = 0; d < dim; ++d) {
              grad[d] += g * u[d];
              u[d] += g * c[d];
            }
          }
          for (std::size_t d = 0; d < dim; ++d) c[d] += grad[d];
        }
      }
    }
    result.epoch_loss.push_back(loss / static_cast<double>(pairs_per_epoch));
  }
  for (auto& row : center)
    for (auto& v : row) v = static_cast<double>(static_cast<float>(v));
  return result;
}

std::uint64_t service_seed(const ServiceId& id, std::uint64_t seed) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char c : id) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return derive_seed(seed, h);
}

NodeEmbeddingTable embed_subgraph(const graph::SubGraph& subgraph, const WalkConfig& config, std::uint64_t seed) {
  std::vector<std::uint64_t> seeds;
  std::vector<std::uint64_t> walk_seeds;
  for (const auto& id : subgraph.nodes) {
    seeds.push_back(service_seed(id, seed));
    walk_seeds.push_back(service_seed(id, derive_seed(seed, 0x3a1c)));
  }
  const auto walks = generate_walks(subgraph.undirected_adjacency(), config, walk_seeds);
  auto trained = train_skipgram(walks, seeds, config, seed);
  NodeEmbeddingTable table;
  for (std::size_t i = 0; i < subgraph.nodes.size(); ++i) table.emplace(subgraph.nodes[i], std::move(trained.embeddings[i]));
  return table;
}

NodeEmbeddingTable embed_graph(const graph::ServiceGraph& g, const WalkConfig& config, std::uint64_t seed) {
  std::vector<ServiceId> ids;
  std::map<ServiceId, std::size_t> index;
  for (const auto& [id, _] : g.nodes()) {
    index[id] = ids.size();
    ids.push_back(id);
  }
  Adjacency adj(ids.size());
  for (const auto& [s, d] : g.logical_edges()) {
    adj[index[s]].push_back(index[d]);
    adj[index[d]].push_back(index[s]);
  }
  for (auto& a : adj) {
    std::sort(a.begin(), a.end());
    a.erase(std::unique(a.begin(), a.end()), a.end());
  }
  std::vector<std::uint64_t> seeds;
  std::vector<std::uint64_t> walk_seeds;
  for (const auto& id : ids) {
    seeds.push_back(service_seed(id, seed));
    walk_seeds.push_back(service_seed(id, derive_seed(seed, 0x3a1c)));
  }
  const auto walks = generate_walks(adj, config, walk_seeds);
  auto trained = train_skipgram(walks, seeds, config, seed);
  NodeEmbeddingTable table;
  for (std::size_t i = 0; i < ids.size(); ++i) table.emplace(ids[i], std::move(trained.embeddings[i]));
  return table;
}

json table_to_json(const NodeEmbeddingTable& table) {
  json j = json::object();
  for (const auto& [id, v] : table) j[id] = v;
  return j;
}

}  // namespace dilink::node2vec
