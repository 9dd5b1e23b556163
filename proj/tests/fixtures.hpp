#pragma once

#include "dilink/eval.hpp"
#include "dilink/synthetic.hpp"

namespace fixture {

/// A small synthetic world, cheap enough for unit tests.
inline dilink::eval::ExperimentData small_data(std::uint64_t seed = 5) {
  dilink::synthetic::WorldConfig wc;
  wc.services = 16;
  wc.workloads = 3;
  wc.duration_hours = 240.0;
  wc.root_rate = 0.05;
  wc.seed = seed;
  const auto world = dilink::synthetic::generate_world(wc);
  auto sim = dilink::synthetic::simulate_incidents(world);
  dilink::eval::ExperimentData d;
  d.dataset.incidents = std::move(sim.incidents);
  d.dataset.links = std::move(sim.links);
  d.metadata_edges = world.edges;
  return d;
}

/// Tiny model and training settings on top of the desk preset.
inline dilink::eval::PipelineConfig tiny_config(dilink::model::Variant v = dilink::model::Variant::DiLinkGCN) {
  auto c = dilink::eval::desk_preset();
  c.model.variant = v;
  c.model.dim = 6;
  c.model.head_hidden = 8;
  c.model.text.title_dim = 4;
  c.model.text.topology_dim = 4;
  c.model.text.monitor_dim = 3;
  c.model.text.failure_dim = 3;
  c.model.text.team_dim = 3;
  c.model.text.lstm_hidden = 4;
  c.model.text.max_sequence_len = 6;
  c.model.graph.hidden_dim = 6;
  c.model.walk.embedding_dim = 6;
  c.model.walk.walks_per_node = 10;
  c.model.walk.walk_length = 8;
  c.model.walk.epochs = 2;
  c.train.epochs = 2;
  c.replicas = 2;
  return c;
}

}  // namespace fixture
