#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dilink/incident.hpp"
#include "dilink/model.hpp"

namespace dilink::eval {

struct Metrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double accuracy = 0.0;
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::size_t support() const { return tp + fp + fn + tn; }
};

/// Precision is 0 when nothing is predicted positive, recall 0 when there are
/// no positives, F1 0 when both are 0.
Metrics metrics_from_counts(std::size_t tp, std::size_t fp, std::size_t fn, std::size_t tn);
Metrics confusion_metrics(const std::vector<bool>& predictions, const std::vector<bool>& labels);

nlohmann::json to_json(const Metrics& m);

struct LabeledPair {
  IncidentId a;
  IncidentId b;
  bool label = false;
  LinkScope scope = LinkScope::WithinService;
};

/// One positive per distinct (unordered) linked pair, plus one negative per
/// positive: the parent paired with an incident reported within `window`
/// seconds that no link in `known_links` connects to it. Seeded.
std::vector<LabeledPair> make_pairs(const std::vector<IncidentLink>& links, const IncidentMap& incidents,
                                    Timestamp window, std::uint64_t seed,
                                    const std::vector<IncidentLink>& known_links);

/// Model distances of the pairs; embeddings are computed once per incident.
std::vector<double> pair_distances(const model::Model& model, const std::vector<LabeledPair>& pairs,
                                   const IncidentMap& incidents);

inline constexpr const char* kOverall = "overall";

struct ScopeSummary {
  bool present = false;
  Metrics mean;  // tp/fp/fn/tn rounded means
  Metrics stddev;  // precision/recall/f1/accuracy only
  double mean_support = 0.0;
  std::size_t replicas_present = 0;
};

struct EvalReport {
  std::size_t replicas = 0;
  double tau = 0.0;
  /// Keys: overall, within_service, cross_service, cross_workload.
  std::map<std::string, ScopeSummary> scopes;

  const ScopeSummary& scope(const std::string& name) const { return scopes.at(name); }
};

nlohmann::json to_json(const EvalReport& r);
/// One row per scope: mean and standard deviation of each metric.
std::string report_csv(const EvalReport& r);

/// Bootstrap `replicas` resamples of the pool (with replacement, seeded),
/// metrics per scope per replica, mean and sample standard deviation. A scope
/// with no pairs is reported absent.
EvalReport scoped_eval(const std::vector<double>& distances, const std::vector<bool>& labels,
                       const std::vector<LinkScope>& scopes, double tau, std::size_t replicas, std::uint64_t seed);
EvalReport scoped_eval(const model::Model& model, const std::vector<LabeledPair>& pairs, const IncidentMap& incidents,
                       std::size_t replicas, std::uint64_t seed);

// --- experiment pipeline ---------------------------------------------------------

struct ExperimentData {
  Dataset dataset;
  std::vector<graph::ServicePair> metadata_edges;
};

/// Loads incidents.jsonl, links.jsonl and metadata_edges.tsv from `dir`.
ExperimentData load_experiment_data(const std::filesystem::path& dir);

/// Link timestamp at quantile `train_fraction` of the link creation times.
Timestamp default_cutoff(const std::vector<IncidentLink>& links, double train_fraction = 0.8);

struct PipelineConfig {
  model::ModelConfig model;
  model::TrainConfig train;
  TripletConfig triplets;
  /// Latest share of the training links held out for threshold tuning.
  double validation_fraction = 0.15;
  /// 0 means default_cutoff.
  Timestamp cutoff = 0;
  double edge_keep = 1.0;
  std::size_t replicas = 5;
  std::uint64_t seed = 7;
  Timestamp pair_window = 14400;

  nlohmann::json to_json() const;
};

PipelineConfig pipeline_config_from_json(const nlohmann::json& j);

/// Reduced configuration for desk-scale sweeps: D = 16, 5 epochs, short
/// sequences, graph-wide node2vec.
PipelineConfig desk_preset();

/// Temporal split shared by training, threshold tuning and evaluation.
struct SplitPlan {
  Timestamp cutoff = 0;
  Timestamp validation_cutoff = 0;
  std::vector<IncidentLink> train;       // links created before cutoff
  std::vector<IncidentLink> fit;         // train links before validation_cutoff (triplets)
  std::vector<IncidentLink> validation;  // remaining train links (threshold)
  std::vector<IncidentLink> test;        // links created at or after cutoff
};

SplitPlan plan_split(const Dataset& dataset, const PipelineConfig& config);

/// Labeled pairs for threshold tuning and for evaluation.
std::vector<LabeledPair> validation_pairs(const Dataset& dataset, const SplitPlan& plan, const PipelineConfig& config);
std::vector<LabeledPair> test_pairs(const Dataset& dataset, const SplitPlan& plan, const PipelineConfig& config);

/// Metadata edges plus training-period links, edge-sampled when edge_keep < 1.
graph::ServiceGraph training_graph(const ExperimentData& data, const SplitPlan& plan, const PipelineConfig& config);

/// Triplets from the fit links.
TripletSet training_triplets(const Dataset& dataset, const SplitPlan& plan, const PipelineConfig& config);

/// Tunes the model's threshold on the validation pairs and returns it.
double tune_on_validation(model::Model& model, const Dataset& dataset, const SplitPlan& plan,
                          const PipelineConfig& config, EvalReport* report = nullptr);

struct PipelineResult {
  std::unique_ptr<model::Model> model;
  model::TrainResult training;
  EvalReport report;
  EvalReport validation;
  double tau = 0.0;
  std::size_t triplet_count = 0;
  std::size_t graph_edges = 0;
  Timestamp cutoff = 0;
};

/// Split, graph build (training-period links only, optionally edge-sampled),
/// triplets, training, threshold tuning on held-out training-period pairs and
/// scoped evaluation on the test period.
PipelineResult run_pipeline(const ExperimentData& data, const PipelineConfig& config,
                            const std::function<void(const std::string&)>& progress = {});

struct SweepRow {
  double x = 0.0;
  EvalReport report;
  double final_loss = 0.0;
};

std::vector<SweepRow> edge_sensitivity(const ExperimentData& data, const PipelineConfig& base,
                                       const std::vector<double>& keep_fractions,
                                       const std::function<void(const std::string&)>& progress = {});
/// Varies the node2vec input embedding width.
std::vector<SweepRow> dim_sensitivity(const ExperimentData& data, const PipelineConfig& base,
                                      const std::vector<std::size_t>& dims,
                                      const std::function<void(const std::string&)>& progress = {});
std::vector<SweepRow> hop_sensitivity(const ExperimentData& data, const PipelineConfig& base,
                                      const std::vector<int>& hops,
                                      const std::function<void(const std::string&)>& progress = {});

/// `x,scope,precision,recall,f1,accuracy,f1_std` rows for plotting.
std::string sweep_csv(const std::string& x_name, const std::vector<SweepRow>& rows);
nlohmann::json sweep_json(const std::string& x_name, const std::vector<SweepRow>& rows);

}  // namespace dilink::eval
