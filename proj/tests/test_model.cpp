#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "dilink/model.hpp"
#include "dilink/procrustes.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace dilink;
using namespace dilink::model;

namespace {

struct Trained {
  eval::ExperimentData data;
  eval::PipelineResult result;
};

const Trained& trained_gcn() {
  static const Trained t = [] {
    Trained out;
    out.data = fixture::small_data();
    out.result = eval::run_pipeline(out.data, fixture::tiny_config());
    return out;
  }();
  return t;
}

std::vector<const Incident*> first_incidents(const IncidentMap& m, std::size_t n) {
  std::vector<const Incident*> out;
  for (const auto& [_, inc] : m) {
    if (out.size() == n) break;
    out.push_back(&inc);
  }
  return out;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("dilink_test_" + name);
}

}  // namespace

TEST(TripletLoss, MatchesFormulaAndHinge) {
  const std::vector<double> a{0, 0}, p{3, 4}, n{1, 0};
  EXPECT_DOUBLE_EQ(triplet_loss(a, p, n, 0.5), 5.0 - 1.0 + 0.5);
  EXPECT_DOUBLE_EQ(triplet_loss(a, n, p, 0.5), 0.0);
  const auto g = triplet_loss_grad(a, n, p, 0.5);
  EXPECT_EQ(g.loss, 0.0);
  for (double v : g.da) EXPECT_EQ(v, 0.0);
}

class TripletGradSeeds : public ::testing::TestWithParam<int> {};

TEST_P(TripletGradSeeds, AnalyticMatchesFiniteDifference) {
  Rng rng(GetParam());
  const std::size_t d = 5;
  Tensor x({3 * d});
  for (auto& v : x.data()) v = rng.uniform(-1, 1);
  const double margin = 10.0;  // keeps the hinge active
  auto split = [d](const Tensor& t, std::size_t k) { return std::span<const double>(t.data().data() + k * d, d); };
  std::vector<double> grad;
  nn::GradCheckTarget target;
  target.forward = [&](const Tensor& t) {
    const auto r = triplet_loss_grad(split(t, 0), split(t, 1), split(t, 2), margin);
    grad.clear();
    grad.insert(grad.end(), r.da.begin(), r.da.end());
    grad.insert(grad.end(), r.dp.begin(), r.dp.end());
    grad.insert(grad.end(), r.dn.begin(), r.dn.end());
    return Tensor::vector({r.loss});
  };
  target.backward = [&](const Tensor& up) {
    Tensor g({3 * d});
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = up[0] * grad[i];
    return g;
  };
  const auto r = nn::grad_check(target, x, 1e-5, 1e-4, GetParam());
  EXPECT_TRUE(r.passed) << r.worst_entry << " " << r.max_relative_error;
}

INSTANTIATE_TEST_SUITE_P(Seeds, TripletGradSeeds, ::testing::Range(0, 10));

class ComposedGrad : public ::testing::TestWithParam<Variant> {};

TEST_P(ComposedGrad, ForwardWithFrozenAlignment) {
  const auto data = fixture::small_data(9);
  auto cfg = fixture::tiny_config(GetParam());
  cfg.model.dim = 4;
  cfg.model.head_hidden = 4;
  cfg.model.walk.embedding_dim = 3;
  cfg.model.graph.hidden_dim = 4;
  std::vector<const Incident*> all;
  for (const auto& [_, inc] : data.dataset.incidents) all.push_back(&inc);
  const auto g = graph::build_graph(data.metadata_edges, data.dataset.links, data.dataset.incidents);
  auto model = make_model(cfg.model, all, g);
  const auto batch = first_incidents(data.dataset.incidents, 3);
  Rng rng(3);
  Tensor m({4, 4});
  for (auto& v : m.data()) v = rng.uniform(-1, 1);
  const Tensor r = procrustes::nearest_orthogonal(m);

  BatchForward fwd;
  nn::GradCheckTarget target;
  target.forward = [&](const Tensor&) {
    fwd = model->forward_batch(batch, Tower::Joint, nn::Mode::train, 17, &r);
    return fwd.embeddings;
  };
  target.backward = [&](const Tensor& up) {
    model->backward_batch(fwd, up);
    return Tensor();
  };
  target.parameters = model->parameters();
  target.check_input = false;
  const auto rep = nn::grad_check(target, Tensor({1}), 1e-5, 1e-4, 1);
  EXPECT_TRUE(rep.passed) << rep.worst_entry << " " << rep.max_relative_error;
}

INSTANTIATE_TEST_SUITE_P(Variants, ComposedGrad,
                         ::testing::Values(Variant::BaselineText, Variant::Concatenation, Variant::DiLinkGCN,
                                           Variant::DiLinkGAT, Variant::DiLinkGSAGE));

TEST(Model, TwinsShareWeightsAcrossBatchPositions) {
  const auto& t = trained_gcn();
  auto& model = *t.result.model;
  const auto batch = first_incidents(t.data.dataset.incidents, 4);
  std::vector<const Incident*> reversed(batch.rbegin(), batch.rend());
  const Tensor r = model.alignment();
  const auto a = model.forward_batch(batch, Tower::Joint, nn::Mode::eval, 0, &r);
  const auto b = model.forward_batch(reversed, Tower::Joint, nn::Mode::eval, 0, &r);
  for (std::size_t i = 0; i < 4; ++i) {
    const auto row = model.joint_embedding(*batch[i]);
    for (std::size_t k = 0; k < row.size(); ++k) {
      EXPECT_NEAR(a.embeddings.at(i, k), row[k], 1e-12);
      EXPECT_NEAR(b.embeddings.at(3 - i, k), row[k], 1e-12);
    }
  }
}

TEST(Model, EmbeddingsAreUnitNormAndAlignmentOrthogonal) {
  const auto& t = trained_gcn();
  for (const auto* inc : first_incidents(t.data.dataset.incidents, 10))
    EXPECT_NEAR(l2_norm(t.result.model->joint_embedding(*inc).data()), 1.0, 1e-9);
  EXPECT_LT(procrustes::orthogonality_error(t.result.model->alignment()), 1e-6);
}

TEST(Model, UnknownServiceNeedsFallback) {
  const auto& t = trained_gcn();
  Incident inc = t.data.dataset.incidents.begin()->second;
  inc.owning_service = "never-seen";
  EXPECT_THROW(t.result.model->joint_embedding(inc), UnknownService);
  bool fell_back = false;
  EXPECT_TRUE(t.result.model->joint_embedding(inc, true, &fell_back).all_finite());
  EXPECT_TRUE(fell_back);
}

TEST(Training, LossFallsAndLogStartsAtEpochZero) {
  const auto& t = trained_gcn();
  const auto& tr = t.result.training;
  ASSERT_FALSE(tr.log.empty());
  EXPECT_EQ(tr.log.front().epoch, 0u);
  EXPECT_DOUBLE_EQ(tr.initial_loss, tr.log.front().mean_loss);
  EXPECT_LT(tr.final_loss, tr.initial_loss);
}

TEST(Training, IsDeterministicForAFixedSeed) {
  const auto data = fixture::small_data(3);
  auto cfg = fixture::tiny_config();
  cfg.train.epochs = 1;
  const auto a = eval::run_pipeline(data, cfg);
  const auto b = eval::run_pipeline(data, cfg);
  EXPECT_EQ(a.training.final_loss, b.training.final_loss);
  EXPECT_EQ(a.tau, b.tau);
}

TEST(TuneThreshold, MaximizesF1AgainstBruteForce) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.below(40);
    std::vector<double> d(n);
    std::vector<bool> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      d[i] = std::round(rng.uniform(0, 2) * 8) / 8;  // ties on purpose
      y[i] = rng.bernoulli(0.5);
    }
    y[0] = true;
    y[1] = false;
    auto f1_at = [&](double tau) {
      const auto c = oracle::recount(d, y, tau);
      return 2.0 * c.tp / static_cast<double>(2 * c.tp + c.fp + c.fn);
    };
    std::vector<double> candidates{-1.0, 10.0};
    for (double a : d)
      for (double b : d) candidates.push_back(0.5 * (a + b));
    double best = 0;
    for (double c : candidates) best = std::max(best, f1_at(c));
    const double tau = tune_threshold(d, y);
    EXPECT_NEAR(f1_at(tau), best, 1e-12);
  }
  EXPECT_THROW(tune_threshold({0.1, 0.2}, {true, true}), std::invalid_argument);
}

TEST(Checkpoint, RoundTripIsBitIdentical) {
  const auto& t = trained_gcn();
  const auto path = temp_file("roundtrip.ckpt");
  save_checkpoint(*t.result.model, path);
  const auto loaded = load_checkpoint(path);
  EXPECT_EQ(loaded->threshold(), t.result.model->threshold());
  EXPECT_EQ(loaded->alignment(), t.result.model->alignment());
  for (const auto* inc : first_incidents(t.data.dataset.incidents, 10))
    EXPECT_EQ(loaded->joint_embedding(*inc), t.result.model->joint_embedding(*inc));
  const auto header = read_checkpoint_header(path);
  EXPECT_EQ(header.at("version"), kCheckpointVersion);
  std::filesystem::remove(path);
}

TEST(Checkpoint, EveryVariantRoundTrips) {
  const auto data = fixture::small_data(2);
  for (auto v : kAllVariants) {
    auto cfg = fixture::tiny_config(v);
    cfg.train.epochs = 1;
    const auto res = eval::run_pipeline(data, cfg);
    const auto path = temp_file("variant.ckpt");
    save_checkpoint(*res.model, path);
    const auto loaded = load_checkpoint(path);
    EXPECT_EQ(loaded->variant(), v);
    for (const auto* inc : first_incidents(data.dataset.incidents, 3))
      EXPECT_EQ(loaded->scoring_vector(*inc), res.model->scoring_vector(*inc)) << to_string(v);
    std::filesystem::remove(path);
  }
}

TEST(Checkpoint, CorruptMagicAndTruncationRejected) {
  const auto& t = trained_gcn();
  const auto path = temp_file("corrupt.ckpt");
  save_checkpoint(*t.result.model, path);
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& b) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << b;
  };
  std::string bad = bytes;
  bad[0] = 'X';
  write(bad);
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
  write(bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
  write(bytes.substr(0, 5));
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
}

TEST(Variants, NamesRoundTrip) {
  for (auto v : kAllVariants) EXPECT_EQ(variant_from_string(to_string(v)), v);
  EXPECT_THROW(variant_from_string("nope"), std::exception);
  EXPECT_FALSE(uses_graph(Variant::BaselineText));
  EXPECT_TRUE(uses_alignment(Variant::DiLinkGAT));
}

TEST(Variants, LidarHasNoJointEmbedding) {
  const auto data = fixture::small_data(2);
  auto cfg = fixture::tiny_config(Variant::LiDAR);
  cfg.train.epochs = 1;
  const auto res = eval::run_pipeline(data, cfg);
  const auto& inc = data.dataset.incidents.begin()->second;
  EXPECT_THROW(res.model->joint_embedding(inc), VariantError);
  const auto v = res.model->scoring_vector(inc);
  EXPECT_DOUBLE_EQ(res.model->distance(v, v), 0.0);
}
