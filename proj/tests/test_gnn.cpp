#include <gtest/gtest.h>

#include <cmath>

#include "dilink/gnn.hpp"
#include "oracles.hpp"

using namespace dilink;
using namespace dilink::gnn;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, Rng& rng) {
  Tensor t({r, c});
  for (auto& v : t.data()) v = rng.uniform(-1.0, 1.0);
  return t;
}

GraphView random_view(Rng& rng, std::size_t n = 7) {
  const auto g = oracle::random_graph(n, 0.3, rng);
  return GraphView::from_subgraph(graph::extract_subgraph(g, "n0", 3));
}

nn::GradCheckReport check_layer(GraphLayer& layer, const GraphView& g, const Tensor& h, std::uint64_t seed) {
  std::unique_ptr<nn::Tape> tape;
  nn::GradCheckTarget target;
  target.forward = [&](const Tensor& x) { return layer.run(g, x, &tape); };
  target.backward = [&](const Tensor& up) { return layer.run_backward(g, *tape, up); };
  target.parameters = layer.parameters();
  return nn::grad_check(target, h, 1e-5, 1e-4, seed);
}

const GraphView kPath3{{{1}, {0, 2}, {1}}, 0};

}  // namespace

class GnnGrad : public ::testing::TestWithParam<int> {};

TEST_P(GnnGrad, GcnLayer) {
  Rng rng(GetParam());
  const auto g = random_view(rng);
  GcnLayer layer(4, 3, rng);
  const auto r = check_layer(layer, g, random_tensor(g.size(), 4, rng), GetParam());
  EXPECT_TRUE(r.passed) << r.worst_entry << " " << r.max_relative_error;
}

TEST_P(GnnGrad, GatLayerConcatAndAverage) {
  Rng rng(GetParam());
  const auto g = random_view(rng);
  GatLayer concat(4, 4, 2, false, 0.2, rng);
  GatLayer avg(4, 3, 2, true, 0.2, rng);
  const Tensor h = random_tensor(g.size(), 4, rng);
  auto r = check_layer(concat, g, h, GetParam());
  EXPECT_TRUE(r.passed) << r.worst_entry << " " << r.max_relative_error;
  r = check_layer(avg, g, h, GetParam());
  EXPECT_TRUE(r.passed) << r.worst_entry << " " << r.max_relative_error;
}

TEST_P(GnnGrad, SageLayerPlainAndNormalized) {
  Rng rng(GetParam());
  const auto g = random_view(rng);
  SageLayer plain(4, 3, false, rng);
  SageLayer norm(4, 3, true, rng);
  const Tensor h = random_tensor(g.size(), 4, rng);
  EXPECT_TRUE(check_layer(plain, g, h, GetParam()).passed);
  EXPECT_TRUE(check_layer(norm, g, h, GetParam()).passed);
}

TEST_P(GnnGrad, WholeEncoderEachKind) {
  for (auto kind : {EncoderKind::GCN, EncoderKind::GAT, EncoderKind::GraphSAGE}) {
    Rng rng(GetParam());
    const auto g = random_view(rng);
    GraphEncoderConfig cfg;
    cfg.kind = kind;
    cfg.input_dim = 4;
    cfg.hidden_dim = 4;
    cfg.output_dim = 3;
    cfg.readout = GetParam() % 2 ? Readout::Mean : Readout::Center;
    GraphEncoder enc(cfg, rng);
    std::unique_ptr<GraphEncoder::Tape> tape;
    nn::GradCheckTarget target;
    target.forward = [&](const Tensor& x) { return enc.encode(g, x, &tape); };
    target.backward = [&](const Tensor& up) { return enc.backward(g, *tape, up); };
    target.parameters = enc.parameters();
    const auto r = nn::grad_check(target, random_tensor(g.size(), 4, rng), 1e-5, 1e-4, GetParam());
    EXPECT_TRUE(r.passed) << to_string(kind) << " " << r.worst_entry << " " << r.max_relative_error;
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, GnnGrad, ::testing::Range(0, 10));

TEST(Gcn, NormalizedAdjacencyOfPathByHand) {
  const Tensor a = GcnLayer::normalized_adjacency(kPath3);
  // Degrees with self loops: 2, 3, 2.
  EXPECT_NEAR(a.at(0, 0), 1.0 / 2.0, 1e-15);
  EXPECT_NEAR(a.at(0, 1), 1.0 / std::sqrt(6.0), 1e-15);
  EXPECT_NEAR(a.at(1, 1), 1.0 / 3.0, 1e-15);
  EXPECT_EQ(a.at(0, 2), 0.0);
  EXPECT_EQ(a.at(1, 0), a.at(0, 1));
}

TEST(Gcn, LayerMatchesDenseFormula) {
  Rng rng(1);
  GcnLayer layer(2, 2, rng);
  const Tensor h = random_tensor(3, 2, rng);
  const Tensor y = layer.run(kPath3, h, nullptr);
  const Tensor a = GcnLayer::normalized_adjacency(kPath3);
  const Tensor& w = layer.weight().value;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t o = 0; o < 2; ++o) {
      double s = 0;
      for (std::size_t j = 0; j < 3; ++j)
        for (std::size_t k = 0; k < 2; ++k) s += a.at(i, j) * h.at(j, k) * w.at(k, o);
      EXPECT_NEAR(y.at(i, o), std::max(0.0, s), 1e-14);
    }
}

TEST(Sage, NeighborMeanAndIsolatedNode) {
  const Tensor h = Tensor::matrix(3, 1, {1.0, 2.0, 6.0});
  const Tensor m = SageLayer::neighbor_mean(kPath3, h);
  EXPECT_DOUBLE_EQ(m.at(1, 0), 3.5);
  EXPECT_DOUBLE_EQ(m.at(0, 0), 2.0);
  const GraphView lonely{{{}}, 0};
  EXPECT_EQ(SageLayer::neighbor_mean(lonely, Tensor::matrix(1, 1, {5.0})).at(0, 0), 0.0);
}

TEST(Gat, AttentionRowsAreDistributions) {
  Rng rng(2);
  const auto g = random_view(rng, 9);
  GatLayer layer(3, 4, 2, false, 0.2, rng);
  const Tensor h = random_tensor(g.size(), 3, rng);
  for (std::size_t head = 0; head < 2; ++head) {
    const auto att = layer.attention(g, h, head);
    ASSERT_EQ(att.size(), g.size());
    for (std::size_t i = 0; i < att.size(); ++i) {
      EXPECT_EQ(att[i].size(), g.neighbors[i].size() + 1);
      double s = 0;
      for (double a : att[i]) {
        EXPECT_GE(a, 0.0);
        s += a;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Encoder, CenterReadoutIsPermutationInvariant) {
  Rng rng(3);
  const auto g = oracle::random_graph(8, 0.35, rng);
  const auto sub = graph::extract_subgraph(g, "n0", 2);
  std::vector<std::size_t> order(sub.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = (i * 3 + 1) % order.size();
  std::sort(order.begin(), order.end());
  std::reverse(order.begin(), order.end());
  const auto perm = sub.permuted(order);

  node2vec::NodeEmbeddingTable table;
  for (const auto& id : sub.nodes) table[id] = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
  for (auto kind : {EncoderKind::GCN, EncoderKind::GAT, EncoderKind::GraphSAGE}) {
    GraphEncoderConfig cfg;
    cfg.kind = kind;
    cfg.input_dim = 3;
    cfg.hidden_dim = 4;
    cfg.output_dim = 4;
    Rng wrng(4);
    GraphEncoder enc(cfg, wrng);
    const Tensor a = enc.encode(GraphView::from_subgraph(sub), feature_matrix(sub, table, 3), nullptr);
    const Tensor b = enc.encode(GraphView::from_subgraph(perm), feature_matrix(perm, table, 3), nullptr);
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(a[k], b[k], 1e-12) << to_string(kind);
  }
}

TEST(Encoder, IsolatedNodeIsFiniteAndMissingFeaturesAreReported) {
  const auto iso = graph::SubGraph::isolated("solo");
  node2vec::NodeEmbeddingTable table{{"solo", {0.5, -0.5}}};
  for (auto kind : {EncoderKind::GCN, EncoderKind::GAT, EncoderKind::GraphSAGE}) {
    GraphEncoderConfig cfg;
    cfg.kind = kind;
    cfg.input_dim = 2;
    cfg.hidden_dim = 4;
    cfg.output_dim = 4;
    Rng rng(5);
    GraphEncoder enc(cfg, rng);
    EXPECT_TRUE(enc.encode(GraphView::from_subgraph(iso), feature_matrix(iso, table, 2), nullptr).all_finite());
  }
  EXPECT_THROW(feature_matrix(iso, {}, 2), DataError);
  EXPECT_EQ(feature_matrix(iso, {}, 2, true), Tensor({1, 2}));
}

TEST(Encoder, DirectedViewUsesIncomingEdgesOnly) {
  graph::ServiceGraph g;
  for (auto id : {"a", "b", "c"}) g.add_node(id);
  g.add_edge("a", "b", graph::Provenance::Metadata);
  g.add_edge("b", "c", graph::Provenance::Metadata);
  const auto sub = graph::extract_subgraph(g, "b", 1);
  const auto dir = GraphView::from_subgraph(sub, true);
  const auto und = GraphView::from_subgraph(sub, false);
  EXPECT_EQ(dir.neighbors[dir.center].size(), 1u);
  EXPECT_EQ(sub.nodes[dir.neighbors[dir.center][0]], "a");
  EXPECT_EQ(und.neighbors[und.center].size(), 2u);
}
