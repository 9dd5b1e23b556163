#include <gtest/gtest.h>

#include <map>

#include "dilink/node2vec.hpp"
#include "oracles.hpp"

using namespace dilink;
using namespace dilink::node2vec;

namespace {

const Adjacency kPath{{1}, {0, 2}, {1}};
const Adjacency kTriangle{{1, 2}, {0, 2}, {0, 1}};

std::map<std::size_t, double> as_map(const std::vector<std::pair<std::size_t, double>>& d) {
  return {d.begin(), d.end()};
}

WalkConfig small_walks() {
  WalkConfig c;
  c.walk_length = 8;
  c.walks_per_node = 6;
  c.embedding_dim = 8;
  c.window = 3;
  c.epochs = 2;
  return c;
}

}  // namespace

TEST(Transitions, PathMatchesHandComputation) {
  // From 1 having come from 0 with p = 2, q = 0.5: back to 0 weighs 1/2, on to 2 weighs 2.
  const auto d = as_map(transition_distribution(0, 1, kPath, 2.0, 0.5));
  ASSERT_EQ(d.size(), 2u);
  EXPECT_NEAR(d.at(0), 0.2, 1e-12);
  EXPECT_NEAR(d.at(2), 0.8, 1e-12);
  const auto first = as_map(transition_distribution(1, 1, kPath, 2.0, 0.5));
  EXPECT_NEAR(first.at(0), 0.5, 1e-12);
  EXPECT_NEAR(first.at(2), 0.5, 1e-12);
  const auto end = as_map(transition_distribution(1, 2, kPath, 2.0, 0.5));
  EXPECT_NEAR(end.at(1), 1.0, 1e-12);
}

TEST(Transitions, TriangleMatchesHandComputation) {
  // Node 2 neighbours the previous node 0, so it weighs 1 regardless of q.
  const auto d = as_map(transition_distribution(0, 1, kTriangle, 4.0, 0.1));
  EXPECT_NEAR(d.at(0), 0.2, 1e-12);
  EXPECT_NEAR(d.at(2), 0.8, 1e-12);
  const auto u = as_map(transition_distribution(0, 1, kTriangle, 1.0, 1.0));
  EXPECT_NEAR(u.at(0), 0.5, 1e-12);
  EXPECT_NEAR(u.at(2), 0.5, 1e-12);
}

TEST(Transitions, IsolatedNodeThrows) {
  EXPECT_THROW(transition_distribution(0, 0, Adjacency{{}}, 1.0, 1.0), std::invalid_argument);
}

TEST(Walks, FollowEdgesAndHaveConfiguredShape) {
  Rng rng(1);
  const auto g = oracle::random_graph(15, 0.2, rng);
  const auto sub = graph::extract_subgraph(g, "n0", 5);
  const auto adj = sub.undirected_adjacency();
  const auto cfg = small_walks();
  const auto walks = generate_walks(adj, cfg, 3);
  ASSERT_EQ(walks.size(), adj.size() * cfg.walks_per_node);
  for (std::size_t w = 0; w < walks.size(); ++w) {
    const auto& walk = walks[w];
    EXPECT_EQ(walk.front(), w / cfg.walks_per_node);
    if (!adj[walk.front()].empty()) EXPECT_EQ(walk.size(), cfg.walk_length);
    for (std::size_t k = 1; k < walk.size(); ++k) {
      const auto& nb = adj[walk[k - 1]];
      EXPECT_TRUE(std::binary_search(nb.begin(), nb.end(), walk[k]));
    }
  }
}

TEST(Walks, ParallelEqualsSerialReferenceAndIsSeeded) {
  Rng rng(2);
  const auto g = oracle::random_graph(30, 0.1, rng);
  const auto adj = graph::extract_subgraph(g, "n1", 5).undirected_adjacency();
  auto cfg = small_walks();
  cfg.return_p = 0.5;
  cfg.inout_q = 2.0;
  EXPECT_EQ(generate_walks(adj, cfg, 9), reference::generate_walks(adj, cfg, 9));
  EXPECT_EQ(generate_walks(adj, cfg, 9), generate_walks(adj, cfg, 9));
  EXPECT_NE(generate_walks(adj, cfg, 9), generate_walks(adj, cfg, 10));
}

TEST(Walks, EmpiricalSecondStepMatchesDistribution) {
  WalkConfig cfg;
  cfg.walk_length = 3;
  cfg.walks_per_node = 40000;
  cfg.return_p = 2.0;
  cfg.inout_q = 0.5;
  const auto walks = generate_walks(kPath, cfg, 4);
  std::size_t from1 = 0, back = 0;
  for (const auto& w : walks)
    if (w[0] == 0) {
      ++from1;
      if (w[2] == 0) ++back;
    }
  EXPECT_NEAR(static_cast<double>(back) / from1, 0.2, 0.01);
}

TEST(SkipGram, DeterministicAndLossDecreases) {
  Rng rng(3);
  const auto g = oracle::random_graph(20, 0.15, rng);
  const auto adj = graph::extract_subgraph(g, "n0", 5).undirected_adjacency();
  auto cfg = small_walks();
  cfg.epochs = 4;
  const auto walks = generate_walks(adj, cfg, 1);
  std::vector<std::uint64_t> seeds(adj.size());
  for (std::size_t i = 0; i < seeds.size(); ++i) seeds[i] = i + 100;
  const auto a = train_skipgram(walks, seeds, cfg, 5);
  const auto b = train_skipgram(walks, seeds, cfg, 5);
  EXPECT_EQ(a.embeddings, b.embeddings);
  ASSERT_EQ(a.epoch_loss.size(), cfg.epochs);
  EXPECT_LT(a.epoch_loss.back(), a.epoch_loss.front());
  for (const auto& e : a.embeddings) EXPECT_EQ(e.size(), cfg.embedding_dim);
}

TEST(SkipGram, BarbellCliquesSeparate) {
  const auto g = oracle::barbell(6);
  const auto table = embed_graph(g, WalkConfig{}, 11);
  double intra = 0, inter = 0;
  std::size_t ni = 0, nx = 0;
  for (const auto& [u, eu] : table)
    for (const auto& [v, ev] : table) {
      if (u >= v) continue;
      const double c = cosine_similarity(eu, ev);
      if (u[0] == v[0]) intra += c, ++ni;
      else inter += c, ++nx;
    }
  EXPECT_GT(intra / ni, inter / nx);
}

TEST(EmbedSubgraph, CoversExactlyTheSubgraphNodes) {
  Rng rng(4);
  const auto g = oracle::random_graph(12, 0.2, rng);
  const auto sub = graph::extract_subgraph(g, "n2", 1);
  const auto table = embed_subgraph(sub, small_walks(), 3);
  EXPECT_EQ(table.size(), sub.size());
  for (const auto& id : sub.nodes) EXPECT_TRUE(table.contains(id));
  EXPECT_EQ(service_seed("svc", 1), service_seed("svc", 1));
  EXPECT_NE(service_seed("svc", 1), service_seed("svd", 1));
  const auto iso = embed_subgraph(graph::SubGraph::isolated("lonely"), small_walks(), 3);
  EXPECT_EQ(iso.size(), 1u);
}
