#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dilink/gnn.hpp"
#include "dilink/graph.hpp"
#include "dilink/incident.hpp"
#include "dilink/nn.hpp"
#include "dilink/node2vec.hpp"
#include "dilink/text.hpp"

namespace dilink::model {

enum class Variant { BaselineText, Concatenation, LiDAR, DiLinkGCN, DiLinkGAT, DiLinkGSAGE };

inline constexpr Variant kAllVariants[] = {Variant::BaselineText, Variant::Concatenation, Variant::LiDAR,
                                           Variant::DiLinkGCN,    Variant::DiLinkGAT,     Variant::DiLinkGSAGE};

std::string_view to_string(Variant v);
Variant variant_from_string(std::string_view s);
bool uses_graph(Variant v);
bool uses_alignment(Variant v);

/// An operation that the checkpoint's variant does not support.
class VariantError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class UnknownService : public DataError {
 public:
  explicit UnknownService(const ServiceId& id) : DataError("unknown owning service '" + id + "'"), service(id) {}
  ServiceId service;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  Variant variant = Variant::DiLinkGCN;
  /// Shared text/graph dimension entering the alignment.
  std::size_t dim = 32;
  std::size_t head_hidden = 32;
  int hops = 3;
  text::TextTowerConfig text;
  gnn::GraphEncoderConfig graph;
  node2vec::WalkConfig walk;
  std::uint64_t seed = 7;

  /// Copies `dim` and the walk width into the tower configs.
  void sync();
  void validate() const;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct TrainConfig {
  std::size_t batch_size = 200;
  std::size_t epochs = 20;
  nn::OptimizerConfig optimizer;
  double margin = 0.5;
  std::uint64_t seed = 7;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Everything the graph encoder sees for one owning service.
struct ServiceInput {
  graph::SubGraph subgraph;
  gnn::GraphView view;
  Tensor features;  // [subgraph size x walk dim], f32-representable
};

/// Sub-graphs and node2vec features for every service of a graph.
class GraphContext {
 public:
  GraphContext() = default;
  /// OpenMP-parallel over services in per-sub-graph mode.
  static GraphContext build(const graph::ServiceGraph& graph, int hops, const node2vec::WalkConfig& walk,
                            bool directed, std::uint64_t seed);

  const graph::ServiceGraph& graph() const { return graph_; }
  const std::map<ServiceId, ServiceInput>& inputs() const { return inputs_; }
  const ServiceInput* find(const ServiceId& id) const;
  /// Isolated node with zero features, for services the graph does not know.
  static ServiceInput fallback(const ServiceId& id, std::size_t feature_dim);

  void insert(ServiceInput input);
  void set_graph(graph::ServiceGraph g) { graph_ = std::move(g); }

 private:
  graph::ServiceGraph graph_;
  std::map<ServiceId, ServiceInput> inputs_;
};

/// Linear -> ReLU -> Linear -> L2Normalize over row batches.
class JointHead {
 public:
  struct Tape;

  JointHead(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng, const std::string& prefix);
  ~JointHead();
  JointHead(JointHead&&) noexcept;

  Tensor run(const Tensor& x, std::unique_ptr<Tape>* tape) const;
  Tensor backward(const Tape& tape, const Tensor& upstream);
  std::vector<nn::Parameter*> parameters();
  std::size_t in_dim() const { return first_.in_dim(); }

 private:
  nn::Linear first_;
  nn::ReLU relu_;
  nn::Linear second_;
  nn::L2Normalize norm_;
};

/// max(d(a,p) - d(a,n) + margin, 0) with Euclidean d.
double triplet_loss(std::span<const double> a, std::span<const double> p, std::span<const double> n, double margin);

struct TripletGrad {
  double loss = 0.0;
  std::vector<double> da, dp, dn;
};
/// Loss and its gradient; zero gradient when the hinge is inactive.
TripletGrad triplet_loss_grad(std::span<const double> a, std::span<const double> p, std::span<const double> n,
                              double margin);

/// Which part of the model a training loop or forward pass drives. LiDAR
/// trains its text and graph towers separately.
enum class Tower { Joint, Text, Graph };

/// Embeddings of a batch of incidents plus what backward needs.
struct BatchForward {
  struct Impl;
  std::vector<const Incident*> incidents;
  Tensor embeddings;  // [N x out]
  Tensor s;  // text rows [N x dim]
  Tensor g;  // graph rows [N x dim]
  Tensor r;  // alignment used
  std::shared_ptr<Impl> impl;
};

struct PairScore {
  double distance = 0.0;
  bool linked = false;
};

struct EpochLog {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  std::size_t batches = 0;
  std::string tower;
};

class Model {
 public:
  Model(ModelConfig config, text::TextVocabularies vocabs, GraphContext context);
  ~Model();
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return config_; }
  Variant variant() const { return config_.variant; }
  const text::TextVocabularies& vocabularies() const { return text_->vocabularies(); }
  const GraphContext& context() const { return context_; }

  const Tensor& alignment() const { return r_; }
  void set_alignment(Tensor r);
  std::optional<double> threshold() const { return tau_; }
  void set_threshold(double tau);

  const std::optional<TrainConfig>& train_config() const { return train_config_; }
  void set_train_config(TrainConfig c) { train_config_ = std::move(c); }

  std::vector<EpochLog>& training_log() { return log_; }
  const std::vector<EpochLog>& training_log() const { return log_; }

  /// All parameters, or only those a tower trains.
  std::vector<nn::Parameter*> parameters(Tower tower = Tower::Joint);
  std::map<std::string, const nn::Parameter*> named_parameters() const;

  /// Text row S (eval mode) and graph row G for one incident.
  Tensor text_row(const Incident& incident) const;
  /// Throws UnknownService unless `allow_fallback`.
  Tensor graph_row(const Incident& incident, bool allow_fallback = false, bool* fell_back = nullptr) const;

  /// Final L2-normalized joint embedding in eval mode. VariantError for LiDAR.
  Tensor joint_embedding(const Incident& incident, bool allow_fallback = false, bool* fell_back = nullptr) const;

  /// Scoring vector: the joint embedding, or for LiDAR the text tower output
  /// followed by the graph tower output.
  std::vector<double> scoring_vector(const Incident& incident, bool allow_fallback = false,
                                     bool* fell_back = nullptr) const;
  /// Distance between two scoring vectors (LiDAR: 0.5 d_text + 0.5 d_graph).
  double distance(std::span<const double> a, std::span<const double> b) const;
  /// Needs a threshold; linked iff distance < tau.
  PairScore score_pair(const Incident& a, const Incident& b) const;

  /// Batch forward. `fixed_r` overrides the per-batch alignment fit (which is
  /// otherwise computed on this batch's S and G when the variant aligns).
  BatchForward forward_batch(const std::vector<const Incident*>& incidents, Tower tower, nn::Mode mode,
                             std::uint64_t seed, const Tensor* fixed_r = nullptr);
  /// Accumulates parameter grads from dL/d(embeddings); R is a constant.
  void backward_batch(const BatchForward& fwd, const Tensor& d_embeddings);

  /// Fits R on S and G of the given incidents (eval mode) and stores it.
  void fit_final_alignment(const std::vector<const Incident*>& incidents);

  /// Rounds every parameter to f32.
  void snap_parameters();

 private:
  ModelConfig config_;
  GraphContext context_;
  std::unique_ptr<text::TextEncoder> text_;
  std::unique_ptr<gnn::GraphEncoder> graph_;
  std::unique_ptr<JointHead> head_;  // joint (or LiDAR text tower) head
  std::unique_ptr<JointHead> graph_head_;  // LiDAR graph tower head
  Tensor r_;
  std::optional<double> tau_;
  std::optional<TrainConfig> train_config_;
  std::vector<EpochLog> log_;

  const ServiceInput& service_input(const ServiceId& id, bool allow_fallback, bool* fell_back,
                                    ServiceInput& scratch) const;
};

/// Fits vocabularies on the training incidents and builds the graph context.
std::unique_ptr<Model> make_model(const ModelConfig& config, const std::vector<const Incident*>& training_incidents,
                                  const graph::ServiceGraph& graph);

struct TrainResult {
  /// Starts with epoch 0: the loss of the untrained model, no updates.
  std::vector<EpochLog> log;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

/// Siamese triplet training: batches of `batch_size` triplets, per-batch R
/// (stop-gradient) for aligning variants, per-epoch mean loss, then R fitted
/// once on every training incident. LiDAR trains both towers in turn.
/// Throws NumericError on a non-finite loss.
TrainResult train(Model& model, const TrainConfig& config, const std::vector<Triplet>& triplets,
                  const IncidentMap& incidents, const std::function<void(const EpochLog&)>& on_epoch = {});

/// Threshold maximizing F1 over midpoints of the sorted distinct distances
/// (plus one point beyond each end); ties go to the smaller threshold. Throws
/// std::invalid_argument unless both classes are present.
double tune_threshold(const std::vector<double>& distances, const std::vector<bool>& labels);

inline constexpr char kCheckpointMagic[8] = {'D', 'I', 'L', 'I', 'N', 'K', '0', '1'};
inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const Model& model, const std::filesystem::path& path);
std::unique_ptr<Model> load_checkpoint(const std::filesystem::path& path);
/// Header JSON only (for inspection and health reporting).
nlohmann::json read_checkpoint_header(const std::filesystem::path& path);

}  // namespace dilink::model
