#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dilink/graph.hpp"
#include "dilink/nn.hpp"
#include "dilink/node2vec.hpp"

namespace dilink::gnn {

enum class EncoderKind { GCN, GAT, GraphSAGE };

std::string_view to_string(EncoderKind kind);
EncoderKind encoder_kind_from_string(std::string_view s);

enum class Readout { Center, Mean };

struct GraphEncoderConfig {
  EncoderKind kind = EncoderKind::GCN;
  std::size_t input_dim = 32;
  std::size_t hidden_dim = 32;
  std::size_t output_dim = 32;
  std::size_t layers = 2;
  std::size_t attention_heads = 2;
  double leaky_relu_slope = 0.2;
  Readout readout = Readout::Center;
  /// Aggregate over incoming edges only instead of the undirected view.
  bool directed = false;
  /// Per-layer L2 normalization of GraphSAGE outputs.
  bool sage_normalize = false;

  void validate() const;
};

nlohmann::json to_json(const GraphEncoderConfig& c);
GraphEncoderConfig encoder_config_from_json(const nlohmann::json& j);

/// Neighbour lists (self excluded) the layers aggregate over.
struct GraphView {
  std::vector<std::vector<std::size_t>> neighbors;
  std::size_t center = 0;

  std::size_t size() const { return neighbors.size(); }
  static GraphView from_subgraph(const graph::SubGraph& sub, bool directed = false);
};

/// Row-stacked node features in sub-graph node order. Throws DataError when a
/// node has no feature row; `missing_ok` substitutes zeros instead.
Tensor feature_matrix(const graph::SubGraph& sub, const node2vec::NodeEmbeddingTable& table, std::size_t dim,
                      bool missing_ok = false);

class GraphLayer {
 public:
  virtual ~GraphLayer() = default;
  virtual Tensor run(const GraphView& g, const Tensor& h, std::unique_ptr<nn::Tape>* tape) const = 0;
  /// Accumulates parameter grads; returns the gradient w.r.t. `h`.
  virtual Tensor run_backward(const GraphView& g, const nn::Tape& tape, const Tensor& upstream) = 0;
  virtual std::vector<nn::Parameter*> parameters() = 0;
  virtual std::size_t in_dim() const = 0;
  virtual std::size_t out_dim() const = 0;
};

/// H' = ReLU(D^-1/2 (A + I) D^-1/2 H W).
class GcnLayer : public GraphLayer {
 public:
  GcnLayer(std::size_t in, std::size_t out, Rng& rng, std::string name = "gcn");

  Tensor run(const GraphView& g, const Tensor& h, std::unique_ptr<nn::Tape>* tape) const override;
  Tensor run_backward(const GraphView& g, const nn::Tape& tape, const Tensor& upstream) override;
  std::vector<nn::Parameter*> parameters() override { return {&weight_}; }
  std::size_t in_dim() const override { return weight_.value.rows(); }
  std::size_t out_dim() const override { return weight_.value.cols(); }

  nn::Parameter& weight() { return weight_; }
  /// The symmetric normalized propagation matrix for `g`.
  static Tensor normalized_adjacency(const GraphView& g);

 private:
  nn::Parameter weight_;  // [in x out]
};

/// Multi-head masked attention over N(i) + {i}. Heads are concatenated, or
/// averaged when `average_heads` is set (output layer).
class GatLayer : public GraphLayer {
 public:
  GatLayer(std::size_t in, std::size_t out, std::size_t heads, bool average_heads, double slope, Rng& rng,
           std::string name = "gat");

  Tensor run(const GraphView& g, const Tensor& h, std::unique_ptr<nn::Tape>* tape) const override;
  Tensor run_backward(const GraphView& g, const nn::Tape& tape, const Tensor& upstream) override;
  std::vector<nn::Parameter*> parameters() override;
  std::size_t in_dim() const override { return in_; }
  std::size_t out_dim() const override { return out_; }

  /// Attention coefficients of head `head`: row i holds alpha_ij over
  /// [i, neighbours...] in GraphView order.
  std::vector<std::vector<double>> attention(const GraphView& g, const Tensor& h, std::size_t head) const;

  std::vector<nn::Parameter>& weights() { return weights_; }
  std::vector<nn::Parameter>& attention_params() { return attn_; }

 private:
  std::size_t in_;
  std::size_t out_;
  std::size_t heads_;
  std::size_t head_dim_;
  bool average_;
  double slope_;
  std::vector<nn::Parameter> weights_;  // per head [in x head_dim]
  std::vector<nn::Parameter> attn_;  // per head [2 * head_dim]
};

/// h'_i = ReLU(W_self h_i + W_neigh mean_{j in N(i)} h_j), empty mean = 0.
class SageLayer : public GraphLayer {
 public:
  SageLayer(std::size_t in, std::size_t out, bool normalize, Rng& rng, std::string name = "sage");

  Tensor run(const GraphView& g, const Tensor& h, std::unique_ptr<nn::Tape>* tape) const override;
  Tensor run_backward(const GraphView& g, const nn::Tape& tape, const Tensor& upstream) override;
  std::vector<nn::Parameter*> parameters() override { return {&w_self_, &w_neigh_}; }
  std::size_t in_dim() const override { return w_self_.value.rows(); }
  std::size_t out_dim() const override { return w_self_.value.cols(); }

  nn::Parameter& w_self() { return w_self_; }
  nn::Parameter& w_neigh() { return w_neigh_; }
  /// Mean of neighbour rows, zero for an empty neighbourhood.
  static Tensor neighbor_mean(const GraphView& g, const Tensor& h);

 private:
  bool normalize_;
  nn::Parameter w_self_;  // [in x out]
  nn::Parameter w_neigh_;
};

/// Stack of `layers` encoder layers (input -> hidden ... -> output) with a
/// center or mean readout.
class GraphEncoder {
 public:
  struct Tape;

  GraphEncoder(GraphEncoderConfig config, Rng& rng, const std::string& prefix = "graph");
  ~GraphEncoder();
  GraphEncoder(GraphEncoder&&) noexcept;

  Tensor encode(const GraphView& g, const Tensor& features, std::unique_ptr<Tape>* tape) const;
  /// Returns the gradient w.r.t. the feature matrix.
  Tensor backward(const GraphView& g, const Tape& tape, const Tensor& upstream);

  std::vector<nn::Parameter*> parameters();
  const GraphEncoderConfig& config() const { return config_; }
  std::vector<std::unique_ptr<GraphLayer>>& layers() { return layers_; }

 private:
  GraphEncoderConfig config_;
  std::vector<std::unique_ptr<GraphLayer>> layers_;
};

struct GraphEncoder::Tape {
  std::vector<std::unique_ptr<nn::Tape>> layers;
  std::size_t rows = 0;
};

}  // namespace dilink::gnn
