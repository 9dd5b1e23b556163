#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include <nlohmann/json.hpp>

#include "dilink/eval.hpp"
#include "dilink/synthetic.hpp"
#include "dilink/text.hpp"

using namespace dilink;
using namespace dilink::synthetic;

namespace {

WorldConfig small(double leakage = 0.0, std::uint64_t seed = 42) {
  WorldConfig c;
  c.services = 25;
  c.duration_hours = 300;
  c.cross_token_leakage = leakage;
  c.seed = seed;
  return c;
}

std::set<std::string> tokens(const std::string& s) {
  const auto t = text::tokenize(s);
  return {t.begin(), t.end()};
}

}  // namespace

TEST(World, DeterministicForASeed) {
  const auto a = generate_world(small()), b = generate_world(small());
  EXPECT_EQ(a.edges, b.edges);
  const auto sa = simulate_incidents(a), sb = simulate_incidents(b);
  EXPECT_EQ(sa.incidents, sb.incidents);
  EXPECT_EQ(sa.links, sb.links);
  EXPECT_NE(generate_world(small(0.0, 43)).edges, a.edges);
}

TEST(World, DependencyGraphIsAcyclicAndEveryServiceAttaches) {
  const auto w = generate_world(small());
  std::map<ServiceId, std::size_t> order;
  for (std::size_t i = 0; i < w.services.size(); ++i) order[w.services[i]] = i;
  std::set<ServiceId> downstream;
  for (const auto& [up, down] : w.edges) {
    EXPECT_LT(order.at(up), order.at(down));
    downstream.insert(down);
  }
  EXPECT_EQ(downstream.size(), w.services.size() - 1);
  EXPECT_EQ(w.workload_of.size(), w.services.size());
}

TEST(Simulation, ChildrenFollowParentsAndLinksAreValid) {
  const auto w = generate_world(small());
  const auto sim = simulate_incidents(w);
  Dataset ds{sim.incidents, sim.links, 0};
  EXPECT_NO_THROW(ds.validate());
  for (const auto& l : sim.links) {
    const auto& p = sim.incidents.at(l.parent_id);
    const auto& c = sim.incidents.at(l.child_id);
    EXPECT_LT(p.created_at, c.created_at);
    EXPECT_GT(l.created_at, c.created_at);
    if (l.link_type == LinkType::Responsible) EXPECT_NE(p.owning_service, c.owning_service);
    else EXPECT_EQ(p.owning_service, c.owning_service);
  }
  for (const auto& [_, inc] : sim.incidents) {
    EXPECT_GE(inc.severity, 1);
    EXPECT_LE(inc.severity, 3);
  }
}

TEST(Simulation, ZeroLeakageKeepsCrossServiceTitlesDisjoint) {
  const auto sim = simulate_incidents(generate_world(small(0.0)));
  std::size_t checked = 0;
  for (const auto& l : sim.links) {
    if (l.link_type != LinkType::Responsible) continue;
    const auto a = tokens(sim.incidents.at(l.parent_id).title), b = tokens(sim.incidents.at(l.child_id).title);
    for (const auto& t : a) EXPECT_FALSE(b.contains(t)) << t;
    ++checked;
  }
  EXPECT_GT(checked, 10u);
}

TEST(Simulation, FullLeakageCopiesParentTokens) {
  const auto sim = simulate_incidents(generate_world(small(1.0)));
  for (const auto& l : sim.links) {
    if (l.link_type != LinkType::Responsible) continue;
    const auto a = tokens(sim.incidents.at(l.parent_id).title), b = tokens(sim.incidents.at(l.child_id).title);
    for (const auto& t : b) EXPECT_TRUE(a.contains(t)) << t;
  }
}

TEST(Simulation, DefaultWorldHasEveryScopeAndDeskScale) {
  const auto sim = simulate_incidents(generate_world(WorldConfig{}));
  std::map<LinkScope, std::size_t> count;
  for (const auto& l : sim.links) ++count[link_scope(l, sim.incidents)];
  for (auto s : kAllScopes) EXPECT_GT(count[s], sim.links.size() / 10) << to_string(s);
  EXPECT_GT(sim.incidents.size(), 4000u);
  EXPECT_LT(sim.incidents.size(), 7000u);
}

TEST(Paraphrase, SeededAndNonEmpty) {
  const std::string t = "database connection timeout spike error";
  EXPECT_EQ(paraphrase(t, 3), paraphrase(t, 3));
  EXPECT_FALSE(text::tokenize(paraphrase(t, 3)).empty());
}

TEST(Export, WritesLoadableFiles) {
  const auto w = generate_world(small());
  const auto sim = simulate_incidents(w);
  const auto dir = std::filesystem::temp_directory_path() / "dilink_test_export";
  std::filesystem::remove_all(dir);
  export_world(w, sim, dir);
  const auto data = eval::load_experiment_data(dir);
  EXPECT_EQ(data.dataset.incidents, sim.incidents);
  EXPECT_EQ(data.dataset.links, sim.links);
  EXPECT_EQ(data.metadata_edges, w.edges);
  EXPECT_TRUE(std::filesystem::exists(dir / "world.json"));
  std::filesystem::remove_all(dir);
}

TEST(WorldConfig, JsonRoundTripAndValidation) {
  auto c = small(0.3, 9);
  EXPECT_EQ(to_json(world_config_from_json(to_json(c))), to_json(c));
  c.cross_token_leakage = 1.5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}
