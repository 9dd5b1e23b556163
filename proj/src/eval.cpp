#include "dilink/eval.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "dilink/rng.hpp"

namespace dilink::eval {

using nlohmann::json;

Metrics metrics_from_counts(std::size_t tp, std::size_t fp, std::size_t fn, std::size_t tn) {
  Metrics m;
  m.tp = tp;
  m.fp = fp;
  m.fn = fn;
  m.tn = tn;
  m.precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  m.recall = tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
  m.f1 = m.precision + m.recall == 0.0 ? 0.0 : 2.0 * m.precision * m.recall / (m.precision + m.recall);
  const std::size_t total = tp + fp + fn + tn;
  m.accuracy = total == 0 ? 0.0 : static_cast<double>(tp + tn) / static_cast<double>(total);
  return m;
}

Metrics confusion_metrics(const std::vector<bool>& predictions, const std::vector<bool>& labels) {
  if (predictions.size() != labels.size()) {
    throw std::invalid_argument("confusion_metrics: " + std::to_string(predictions.size()) + " predictions vs " +
                                std::to_string(labels.size()) + " labels");
  }
  if (predictions.empty()) throw std::invalid_argument("confusion_metrics: no predictions");
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (predictions[i]) {
      labels[i] ? ++tp : ++fp;
    } else {
      labels[i] ? ++fn : ++tn;
    }
  }
  return metrics_from_counts(tp, fp, fn, tn);
}

json to_json(const Metrics& m) {
  return {{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}, {"accuracy", m.accuracy},
          {"tp", m.tp},               {"fp", m.fp},         {"fn", m.fn}, {"tn", m.tn}};
}

std::vector<LabeledPair> make_pairs(const std::vector<IncidentLink>& links, const IncidentMap& incidents,
                                    Timestamp window, std::uint64_t seed,
                                    const std::vector<IncidentLink>& known_links) {
  if (window <= 0) throw std::invalid_argument("pair window must be positive");
  std::set<std::pair<IncidentId, IncidentId>> linked;
  for (const auto& l : known_links) {
    linked.emplace(l.parent_id, l.child_id);
    linked.emplace(l.child_id, l.parent_id);
  }
  for (const auto& l : links) {
    linked.emplace(l.parent_id, l.child_id);
    linked.emplace(l.child_id, l.parent_id);
  }

  std::vector<const Incident*> by_time;
  by_time.reserve(incidents.size());
  for (const auto& [_, inc] : incidents) by_time.push_back(&inc);
  std::stable_sort(by_time.begin(), by_time.end(),
                   [](const Incident* a, const Incident* b) { return a->created_at < b->created_at; });

  Rng rng(seed);
  std::set<std::pair<IncidentId, IncidentId>> seen;
  std::vector<LabeledPair> out;
  std::vector<const Incident*> eligible;
  for (const auto& link : links) {
    const Incident& parent = incidents.at(link.parent_id);
    const Incident& child = incidents.at(link.child_id);
    auto key = std::minmax(parent.id, child.id);
    if (!seen.emplace(key.first, key.second).second) continue;
    out.push_back({parent.id, child.id, true, pair_scope(parent, child)});

    // The negative is what a reviewer would see for the parent: an unlinked
    // incident reported around the same time.
    const Timestamp lo = parent.created_at - window;
    const Timestamp hi = parent.created_at + window;
    auto first = std::lower_bound(by_time.begin(), by_time.end(), lo,
                                  [](const Incident* inc, Timestamp t) { return inc->created_at < t; });
    eligible.clear();
    for (auto it = first; it != by_time.end() && (*it)->created_at <= hi; ++it) {
      const Incident* cand = *it;
      if (cand->id == parent.id || linked.contains({parent.id, cand->id})) continue;
      eligible.push_back(cand);
    }
    if (eligible.empty()) continue;
    const Incident* negative = eligible[rng.below(eligible.size())];
    out.push_back({parent.id, negative->id, false, pair_scope(parent, *negative)});
  }
  return out;
}

std::vector<double> pair_distances(const model::Model& model, const std::vector<LabeledPair>& pairs,
                                   const IncidentMap& incidents) {
  std::vector<IncidentId> ids;
  for (const auto& p : pairs) {
    ids.push_back(p.a);
    ids.push_back(p.b);
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());

  std::vector<std::vector<double>> vectors(ids.size());
  std::exception_ptr error;
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < ids.size(); ++i) {
    try {
      vectors[i] = model.scoring_vector(incidents.at(ids[i]), true);
    } catch (...) {
#pragma omp critical
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);

  auto index_of = [&](const IncidentId& id) {
    return static_cast<std::size_t>(std::lower_bound(ids.begin(), ids.end(), id) - ids.begin());
  };
  std::vector<double> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(model.distance(vectors[index_of(p.a)], vectors[index_of(p.b)]));
  return out;
}

// --- scoped evaluation -----------------------------------------------------------

namespace {

std::string scope_key(LinkScope s) {
  switch (s) {
    case LinkScope::WithinService:
      return "within_service";
    case LinkScope::CrossService:
      return "cross_service";
    case LinkScope::CrossWorkload:
      return "cross_workload";
  }
  return "unknown";
}

struct Accumulator {
  std::vector<Metrics> replicas;

  ScopeSummary summarize(std::size_t total_replicas) const {
    ScopeSummary s;
    s.replicas_present = replicas.size();
    if (replicas.empty()) return s;
    s.present = true;
    const double n = static_cast<double>(replicas.size());
    auto field_stats = [&](double Metrics::*field, double& mean, double& sd) {
      double sum = 0.0;
      for (const auto& m : replicas) sum += m.*field;
      mean = sum / n;
      double sq = 0.0;
      for (const auto& m : replicas) sq += (m.*field - mean) * (m.*field - mean);
      sd = replicas.size() > 1 ? std::sqrt(sq / (n - 1.0)) : 0.0;
    };
    field_stats(&Metrics::precision, s.mean.precision, s.stddev.precision);
    field_stats(&Metrics::recall, s.mean.recall, s.stddev.recall);
    field_stats(&Metrics::f1, s.mean.f1, s.stddev.f1);
    field_stats(&Metrics::accuracy, s.mean.accuracy, s.stddev.accuracy);
    double tp = 0, fp = 0, fn = 0, tn = 0;
    for (const auto& m : replicas) {
      tp += static_cast<double>(m.tp);
      fp += static_cast<double>(m.fp);
      fn += static_cast<double>(m.fn);
      tn += static_cast<double>(m.tn);
    }
    s.mean.tp = static_cast<std::size_t>(std::llround(tp / n));
    s.mean.fp = static_cast<std::size_t>(std::llround(fp / n));
    s.mean.fn = static_cast<std::size_t>(std::llround(fn / n));
    s.mean.tn = static_cast<std::size_t>(std::llround(tn / n));
    // Replicas where the scope is empty contribute zero support.
    s.mean_support = (tp + fp + fn + tn) / static_cast<double>(total_replicas);
    return s;
  }
};

}  // namespace

EvalReport scoped_eval(const std::vector<double>& distances, const std::vector<bool>& labels,
                       const std::vector<LinkScope>& scopes, double tau, std::size_t replicas, std::uint64_t seed) {
  if (distances.size() != labels.size() || labels.size() != scopes.size()) {
    throw std::invalid_argument("scoped_eval: distances, labels and scopes differ in length");
  }
  if (replicas == 0) throw std::invalid_argument("scoped_eval: replicas must be >= 1");
  const std::size_t n = labels.size();

  std::map<std::string, Accumulator> acc;
  Rng rng(seed);
  for (std::size_t r = 0; r < replicas; ++r) {
    std::map<std::string, std::array<std::size_t, 4>> counts;  // tp fp fn tn
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t i = rng.below(n);
      const bool predicted = distances[i] < tau;
      const std::size_t slot = predicted ? (labels[i] ? 0 : 1) : (labels[i] ? 2 : 3);
      ++counts[scope_key(scopes[i])][slot];
      ++counts[kOverall][slot];
    }
    for (const auto& [key, c] : counts) acc[key].replicas.push_back(metrics_from_counts(c[0], c[1], c[2], c[3]));
  }

  EvalReport report;
  report.replicas = replicas;
  report.tau = tau;
  report.scopes[kOverall] = acc[kOverall].summarize(replicas);
  for (auto s : kAllScopes) report.scopes[scope_key(s)] = acc[scope_key(s)].summarize(replicas);
  return report;
}

EvalReport scoped_eval(const model::Model& model, const std::vector<LabeledPair>& pairs, const IncidentMap& incidents,
                       std::size_t replicas, std::uint64_t seed) {
  if (!model.threshold()) throw std::invalid_argument("scoped_eval: model has no tuned threshold");
  std::vector<bool> labels;
  std::vector<LinkScope> scopes;
  for (const auto& p : pairs) {
    labels.push_back(p.label);
    scopes.push_back(p.scope);
  }
  return scoped_eval(pair_distances(model, pairs, incidents), labels, scopes, *model.threshold(), replicas, seed);
}

json to_json(const EvalReport& r) {
  json scopes = json::object();
  for (const auto& [name, s] : r.scopes) {
    if (!s.present) {
      scopes[name] = {{"present", false}};
      continue;
    }
    scopes[name] = {{"present", true},
                    {"mean", to_json(s.mean)},
                    {"std",
                     {{"precision", s.stddev.precision},
                      {"recall", s.stddev.recall},
                      {"f1", s.stddev.f1},
                      {"accuracy", s.stddev.accuracy}}},
                    {"mean_support", s.mean_support},
                    {"replicas_present", s.replicas_present}};
  }
  return {{"replicas", r.replicas}, {"tau", r.tau}, {"scopes", scopes}};
}

std::string report_csv(const EvalReport& r) {
  std::ostringstream out;
  out << std::setprecision(6);
  out << "scope,present,precision,precision_std,recall,recall_std,f1,f1_std,accuracy,accuracy_std,support\n";
  auto row = [&](const std::string& name) {
    const auto& s = r.scopes.at(name);
    out << name << ',' << (s.present ? 1 : 0);
    if (s.present) {
      out << ',' << s.mean.precision << ',' << s.stddev.precision << ',' << s.mean.recall << ',' << s.stddev.recall
          << ',' << s.mean.f1 << ',' << s.stddev.f1 << ',' << s.mean.accuracy << ',' << s.stddev.accuracy << ','
          << s.mean_support;
    } else {
      out << ",,,,,,,,,";
    }
    out << '\n';
  };
  row(kOverall);
  for (auto s : kAllScopes) row(scope_key(s));
  return out.str();
}

// --- experiment pipeline ---------------------------------------------------------

ExperimentData load_experiment_data(const std::filesystem::path& dir) {
  ExperimentData data;
  data.dataset = load_dataset(dir);
  const auto edges = dir / "metadata_edges.tsv";
  if (std::filesystem::exists(edges)) data.metadata_edges = graph::parse_metadata_edges(edges);
  return data;
}

Timestamp default_cutoff(const std::vector<IncidentLink>& links, double train_fraction) {
  if (links.empty()) throw std::invalid_argument("default_cutoff: no links");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw std::invalid_argument("train_fraction must be in (0,1)");
  std::vector<Timestamp> times;
  for (const auto& l : links) times.push_back(l.created_at);
  std::sort(times.begin(), times.end());
  const auto k = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(times.size())));
  return times[std::min(k, times.size() - 1)];
}

json PipelineConfig::to_json() const {
  return {{"model", model::to_json(model)},
          {"train", model::to_json(train)},
          {"triplets",
           {{"negative_window", triplets.negative_window},
            {"downsample_same_service", triplets.downsample_same_service},
            {"negatives_per_positive", triplets.negatives_per_positive},
            {"seed", triplets.seed}}},
          {"validation_fraction", validation_fraction},
          {"cutoff", cutoff},
          {"edge_keep", edge_keep},
          {"replicas", replicas},
          {"seed", seed},
          {"pair_window", pair_window}};
}

PipelineConfig pipeline_config_from_json(const json& j) {
  PipelineConfig c = desk_preset();
  if (!j.is_object()) throw std::invalid_argument("pipeline config must be a JSON object");
  if (j.contains("model")) c.model = model::model_config_from_json(j.at("model"));
  if (j.contains("train")) c.train = model::train_config_from_json(j.at("train"));
  if (j.contains("triplets")) {
    const auto& t = j.at("triplets");
    c.triplets.negative_window = t.value("negative_window", c.triplets.negative_window);
    c.triplets.downsample_same_service = t.value("downsample_same_service", c.triplets.downsample_same_service);
    c.triplets.negatives_per_positive = t.value("negatives_per_positive", c.triplets.negatives_per_positive);
    c.triplets.seed = t.value("seed", c.triplets.seed);
  }
  c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
  c.cutoff = j.value("cutoff", c.cutoff);
  c.edge_keep = j.value("edge_keep", c.edge_keep);
  c.replicas = j.value("replicas", c.replicas);
  c.seed = j.value("seed", c.seed);
  c.pair_window = j.value("pair_window", c.pair_window);
  c.model.sync();
  c.model.validate();
  c.train.validate();
  return c;
}

PipelineConfig desk_preset() {
  PipelineConfig c;
  c.model.dim = 16;
  c.model.head_hidden = 32;
  c.model.hops = 2;
  c.model.text.title_dim = 16;
  c.model.text.topology_dim = 16;
  c.model.text.monitor_dim = 8;
  c.model.text.failure_dim = 8;
  c.model.text.team_dim = 8;
  c.model.text.lstm_layers = 1;
  c.model.text.lstm_hidden = 16;
  c.model.text.max_sequence_len = 12;
  c.model.graph.hidden_dim = 16;
  c.model.graph.layers = 2;
  // One node2vec fit on the whole graph instead of one per sub-graph.
  c.model.walk.global = true;
  c.model.walk.embedding_dim = 16;
  c.model.walk.window = 3;
  c.model.sync();
  c.train.epochs = 5;
  c.train.batch_size = 64;
  c.train.optimizer.learning_rate = 3e-3;
  return c;
}

SplitPlan plan_split(const Dataset& dataset, const PipelineConfig& config) {
  if (!(config.validation_fraction > 0.0 && config.validation_fraction < 1.0)) {
    throw std::invalid_argument("validation_fraction must be in (0,1)");
  }
  SplitPlan plan;
  plan.cutoff = config.cutoff != 0 ? config.cutoff : default_cutoff(dataset.links);
  auto split = temporal_split(dataset.links, plan.cutoff);
  if (split.train.empty() || split.test.empty()) throw DataError("temporal split leaves an empty side");
  plan.validation_cutoff = default_cutoff(split.train, 1.0 - config.validation_fraction);
  auto fit = temporal_split(split.train, plan.validation_cutoff);
  if (fit.train.empty() || fit.test.empty()) throw DataError("validation split leaves an empty side");
  plan.train = std::move(split.train);
  plan.test = std::move(split.test);
  plan.fit = std::move(fit.train);
  plan.validation = std::move(fit.test);
  return plan;
}

std::vector<LabeledPair> validation_pairs(const Dataset& dataset, const SplitPlan& plan, const PipelineConfig& config) {
  return make_pairs(plan.validation, dataset.incidents, config.pair_window, derive_seed(config.seed, 0x7a11),
                    plan.train);
}

std::vector<LabeledPair> test_pairs(const Dataset& dataset, const SplitPlan& plan, const PipelineConfig& config) {
  return make_pairs(plan.test, dataset.incidents, config.pair_window, derive_seed(config.seed, 0x7e57),
                    dataset.links);
}

graph::ServiceGraph training_graph(const ExperimentData& data, const SplitPlan& plan, const PipelineConfig& config) {
  if (!(config.edge_keep >= 0.0 && config.edge_keep <= 1.0)) throw std::invalid_argument("edge_keep must be in [0,1]");
  graph::GraphBuildOptions options;
  options.window_end = plan.cutoff;
  auto graph = graph::build_graph(data.metadata_edges, plan.train, data.dataset.incidents, options);
  if (config.edge_keep < 1.0) graph = graph::sample_edges(graph, config.edge_keep, derive_seed(config.seed, 0xed6e));
  return graph;
}

TripletSet training_triplets(const Dataset& dataset, const SplitPlan& plan, const PipelineConfig& config) {
  TripletConfig tcfg = config.triplets;
  tcfg.seed = derive_seed(config.seed, tcfg.seed);
  return generate_triplets(plan.fit, dataset.incidents, tcfg, &plan.train);
}

double tune_on_validation(model::Model& model, const Dataset& dataset, const SplitPlan& plan,
                          const PipelineConfig& config, EvalReport* report) {
  const auto pairs = validation_pairs(dataset, plan, config);
  std::vector<bool> labels;
  std::vector<LinkScope> scopes;
  for (const auto& p : pairs) {
    labels.push_back(p.label);
    scopes.push_back(p.scope);
  }
  const auto distances = pair_distances(model, pairs, dataset.incidents);
  const double tau = model::tune_threshold(distances, labels);
  model.set_threshold(tau);
  if (report) *report = scoped_eval(distances, labels, scopes, tau, 1, config.seed);
  return tau;
}

PipelineResult run_pipeline(const ExperimentData& data, const PipelineConfig& config,
                            const std::function<void(const std::string&)>& progress) {
  auto say = [&](const std::string& msg) {
    if (progress) progress(msg);
  };
  const auto& ds = data.dataset;
  PipelineResult result;
  const SplitPlan plan = plan_split(ds, config);
  result.cutoff = plan.cutoff;

  std::vector<const Incident*> training_incidents;
  for (const auto& [_, inc] : ds.incidents) {
    if (inc.created_at < plan.cutoff) training_incidents.push_back(&inc);
  }

  const auto graph = training_graph(data, plan, config);
  result.graph_edges = graph.logical_edge_count();
  say("graph: " + std::to_string(graph.nodes().size()) + " services, " + std::to_string(result.graph_edges) +
      " edges");

  const auto triplets = training_triplets(ds, plan, config);
  result.triplet_count = triplets.triplets.size();
  if (triplets.triplets.empty()) throw DataError("no training triplets");
  say("triplets: " + std::to_string(result.triplet_count));

  model::ModelConfig mcfg = config.model;
  mcfg.sync();
  result.model = model::make_model(mcfg, training_incidents, graph);
  result.training = model::train(*result.model, config.train, triplets.triplets, ds.incidents,
                                 [&](const model::EpochLog& e) {
                                   say("epoch " + std::to_string(e.epoch) + " [" + e.tower + "] loss " +
                                       std::to_string(e.mean_loss));
                                 });

  result.tau = tune_on_validation(*result.model, ds, plan, config, &result.validation);
  say("tau " + std::to_string(result.tau));

  result.report = scoped_eval(*result.model, test_pairs(ds, plan, config), ds.incidents, config.replicas,
                              derive_seed(config.seed, 0xb007));
  return result;
}

namespace {

template <typename T, typename Apply>
std::vector<SweepRow> sweep(const ExperimentData& data, const PipelineConfig& base, const std::vector<T>& values,
                            const std::string& label, Apply apply,
                            const std::function<void(const std::string&)>& progress) {
  std::vector<SweepRow> rows;
  for (const T& v : values) {
    PipelineConfig cfg = base;
    apply(cfg, v);
    cfg.model.sync();
    if (progress) progress(label + "=" + std::to_string(v));
    auto result = run_pipeline(data, cfg, progress);
    rows.push_back({static_cast<double>(v), result.report, result.training.final_loss});
  }
  return rows;
}

}  // namespace

std::vector<SweepRow> edge_sensitivity(const ExperimentData& data, const PipelineConfig& base,
                                       const std::vector<double>& keep_fractions,
                                       const std::function<void(const std::string&)>& progress) {
  for (double p : keep_fractions) {
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("edge keep fraction must be in [0,1]");
  }
  return sweep(
      data, base, keep_fractions, "P", [](PipelineConfig& c, double p) { c.edge_keep = p; }, progress);
}

std::vector<SweepRow> dim_sensitivity(const ExperimentData& data, const PipelineConfig& base,
                                      const std::vector<std::size_t>& dims,
                                      const std::function<void(const std::string&)>& progress) {
  for (auto d : dims) {
    if (d < 1) throw std::invalid_argument("embedding size must be positive");
  }
  return sweep(
      data, base, dims, "dim", [](PipelineConfig& c, std::size_t d) { c.model.walk.embedding_dim = d; }, progress);
}

std::vector<SweepRow> hop_sensitivity(const ExperimentData& data, const PipelineConfig& base,
                                      const std::vector<int>& hops,
                                      const std::function<void(const std::string&)>& progress) {
  for (int h : hops) {
    if (h < 0) throw std::invalid_argument("hops must be >= 0");
  }
  return sweep(
      data, base, hops, "hops", [](PipelineConfig& c, int h) { c.model.hops = h; }, progress);
}

std::string sweep_csv(const std::string& x_name, const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out << std::setprecision(6);
  out << x_name << ",scope,precision,recall,f1,accuracy,f1_std\n";
  for (const auto& row : rows) {
    for (const auto& [name, s] : row.report.scopes) {
      if (!s.present) continue;
      out << row.x << ',' << name << ',' << s.mean.precision << ',' << s.mean.recall << ',' << s.mean.f1 << ','
          << s.mean.accuracy << ',' << s.stddev.f1 << '\n';
    }
  }
  return out.str();
}

json sweep_json(const std::string& x_name, const std::vector<SweepRow>& rows) {
  json arr = json::array();
  for (const auto& row : rows) {
    arr.push_back({{x_name, row.x}, {"final_loss", row.final_loss}, {"report", to_json(row.report)}});
  }
  return {{"parameter", x_name}, {"rows", arr}};
}

}  // namespace dilink::eval
