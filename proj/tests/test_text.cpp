#include <gtest/gtest.h>

#include <cmath>

#include <nlohmann/json.hpp>

#include "dilink/text.hpp"

using namespace dilink;
using namespace dilink::text;

namespace {

Incident incident(const std::string& id, const std::string& title, const std::string& svc) {
  return {id, title, "frontend api db", "mon-" + svc, "timeout", svc, "wl", 2, 0};
}

std::vector<Incident> corpus() {
  return {incident("a", "Disk full on node-7", "storage"), incident("b", "API latency spike", "api"),
          incident("c", "disk latency high", "storage"), incident("d", "Login errors 500", "auth")};
}

std::vector<const Incident*> pointers(const std::vector<Incident>& v) {
  std::vector<const Incident*> out;
  for (const auto& i : v) out.push_back(&i);
  return out;
}

TextTowerConfig small_config() {
  TextTowerConfig c;
  c.title_dim = 3;
  c.topology_dim = 3;
  c.monitor_dim = 2;
  c.failure_dim = 2;
  c.team_dim = 2;
  c.output_dim = 4;
  c.lstm_layers = 2;
  c.lstm_hidden = 3;
  c.max_sequence_len = 5;
  return c;
}

}  // namespace

TEST(Tokenize, LowercasesAndSplitsOnNonAlphanumerics) {
  EXPECT_EQ(tokenize("Disk FULL on node-7!"), (std::vector<std::string>{"disk", "full", "on", "node", "7"}));
  EXPECT_TRUE(tokenize("  --- ").empty());
}

TEST(Vocabulary, SmoothedIdfMatchesHandComputation) {
  const auto v = Vocabulary::fit({"a b", "a c", "a"});
  EXPECT_EQ(v.tokens(), (std::vector<std::string>{"a", "b", "c"}));
  EXPECT_NEAR(v.idf("a"), std::log(4.0 / 4.0) + 1.0, 1e-15);
  EXPECT_NEAR(v.idf("b"), std::log(4.0 / 2.0) + 1.0, 1e-15);
  EXPECT_EQ(v.index_of("zzz"), v.oov_index());
  EXPECT_DOUBLE_EQ(v.idf("zzz"), v.idf("b"));
}

TEST(Vocabulary, TfidfIsUnitNormAndCountsRepeats) {
  const auto v = Vocabulary::fit({"a b", "a c", "a"});
  const auto s = v.tfidf("b b a");
  ASSERT_EQ(s.size(), 2u);
  double norm = 0;
  for (const auto& [_, w] : s) norm += w * w;
  EXPECT_NEAR(norm, 1.0, 1e-12);
  const double wa = 1.0 * v.idf("a"), wb = 2.0 * v.idf("b");
  EXPECT_NEAR(s[0].second / s[1].second, wa / wb, 1e-12);
}

TEST(Vocabulary, JsonRoundTrip) {
  const auto v = Vocabulary::fit({"x y", "y z"});
  EXPECT_EQ(Vocabulary::from_json(v.to_json()), v);
  EXPECT_THROW(Vocabulary::fit({}), std::invalid_argument);
}

TEST(SequenceTower, PrePadsAndTruncates) {
  const auto items = corpus();
  const auto vocabs = TextVocabularies::fit(pointers(items));
  Rng rng(1);
  const auto cfg = small_config();
  SequenceTower tower("title", vocabs.title, 3, cfg, rng);
  const Tensor x = tower.sequence_input("disk full");
  ASSERT_EQ(x.rows(), 5u);
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(x.at(t, k), 0.0);
  double last = 0;
  for (std::size_t k = 0; k < 3; ++k) last += std::abs(x.at(4, k));
  EXPECT_GT(last, 0.0);
  const Tensor long_x = tower.sequence_input("a b c d e f g h");
  EXPECT_EQ(long_x.rows(), 5u);
}

TEST(TextEncoder, DeterministicInEvalAndShaped) {
  const auto items = corpus();
  Rng rng(2);
  TextEncoder enc(small_config(), TextVocabularies::fit(pointers(items)), rng);
  const Tensor a = enc.embed(items[0], nn::Mode::eval, 0, nullptr);
  EXPECT_EQ(a.size(), 4u);
  EXPECT_EQ(a, enc.embed(items[0], nn::Mode::eval, 99, nullptr));
  EXPECT_NE(a, enc.embed(items[1], nn::Mode::eval, 0, nullptr));
}

class TextGrad : public ::testing::TestWithParam<int> {};

TEST_P(TextGrad, WholeEncoderParameters) {
  const auto items = corpus();
  Rng rng(GetParam());
  TextEncoder enc(small_config(), TextVocabularies::fit(pointers(items)), rng);
  const Incident& inc = items[GetParam() % items.size()];
  std::unique_ptr<TextEncoder::Tape> tape;
  nn::GradCheckTarget target;
  target.forward = [&](const Tensor&) { return enc.embed(inc, nn::Mode::train, 5, &tape); };
  target.backward = [&](const Tensor& up) {
    enc.backward(*tape, up);
    return Tensor();
  };
  target.parameters = enc.parameters();
  target.check_input = false;
  const auto r = nn::grad_check(target, Tensor({1}), 1e-5, 1e-4, GetParam());
  EXPECT_TRUE(r.passed) << r.worst_entry << " " << r.max_relative_error;
}

INSTANTIATE_TEST_SUITE_P(Seeds, TextGrad, ::testing::Range(0, 4));
