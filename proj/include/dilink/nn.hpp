#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "dilink/rng.hpp"
#include "dilink/tensor.hpp"

namespace dilink::nn {

enum class Mode { train, eval };

enum class LayerKind { Linear, ReLU, Dropout, LSTM, Softmax, L2Normalize };

const char* to_string(LayerKind kind);

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros_like(value)) {}

  void zero_grad() { grad.fill(0.0); }
};

/// Rounds every value to the nearest 32-bit float. Checkpoints store f32, so a
/// model whose parameters are snapped survives save/load bit-identically.
void snap_to_f32(Tensor& t);

/// Glorot-uniform fill: U(-a, a), a = sqrt(6 / (fan_in + fan_out)), snapped to f32.
void glorot_uniform(Tensor& t, std::size_t fan_in, std::size_t fan_out, Rng& rng);

/// Activations cached by a forward pass for the matching backward pass.
struct Tape {
  virtual ~Tape() = default;
};

struct LayerGradients {
  Tensor input;
  std::map<std::string, Tensor> parameters;
};

/// A differentiable layer. `run` / `run_backward` are the stateless pair used
/// when one layer is applied to many inputs (shared twin weights); `forward` /
/// `backward` keep the last tape internally.
class Layer {
 public:
  Layer() = default;
  virtual ~Layer() = default;
  Layer(Layer&&) noexcept = default;
  Layer& operator=(Layer&&) noexcept = default;

  virtual LayerKind kind() const = 0;

  /// Pure in eval mode; train-mode randomness comes only from `seed`.
  /// `tape` may be null when no backward pass will follow.
  virtual Tensor run(const Tensor& input, Mode mode, std::uint64_t seed, std::unique_ptr<Tape>* tape) const = 0;

  /// Accumulates into each Parameter::grad and returns the input gradient.
  virtual Tensor run_backward(const Tape& tape, const Tensor& upstream) = 0;

  virtual std::vector<Parameter*> parameters() { return {}; }

  Tensor forward(const Tensor& input, Mode mode = Mode::eval, std::uint64_t seed = 0);

  /// Gradients of this call only; throws std::logic_error before any forward.
  LayerGradients backward(const Tensor& upstream);

 private:
  std::unique_ptr<Tape> last_tape_;
};

/// y = x W^T + b. Accepts a vector [in] or a row batch [N x in].
class Linear : public Layer {
 public:
  Linear(std::size_t in, std::size_t out, Rng& rng, std::string name = "linear", bool bias = true);

  LayerKind kind() const override { return LayerKind::Linear; }
  Tensor run(const Tensor& input, Mode mode, std::uint64_t seed, std::unique_ptr<Tape>* tape) const override;
  Tensor run_backward(const Tape& tape, const Tensor& upstream) override;
  std::vector<Parameter*> parameters() override;

  std::size_t in_dim() const { return in_; }
  std::size_t out_dim() const { return out_; }
  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }
  const Parameter& weight() const { return weight_; }
  const Parameter& bias() const { return bias_; }
  bool has_bias() const { return has_bias_; }

 private:
  std::size_t in_;
  std::size_t out_;
  bool has_bias_;
  Parameter weight_;
  Parameter bias_;
};

class ReLU : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::ReLU; }
  Tensor run(const Tensor& input, Mode mode, std::uint64_t seed, std::unique_ptr<Tape>* tape) const override;
  Tensor run_backward(const Tape& tape, const Tensor& upstream) override;
};

/// Inverted dropout: in train mode entries are zeroed with probability p and
/// survivors scaled by 1/(1-p); eval mode is the identity.
class Dropout : public Layer {
 public:
  explicit Dropout(double drop_probability = 0.3);

  LayerKind kind() const override { return LayerKind::Dropout; }
  Tensor run(const Tensor& input, Mode mode, std::uint64_t seed, std::unique_ptr<Tape>* tape) const override;
  Tensor run_backward(const Tape& tape, const Tensor& upstream) override;

  double drop_probability() const { return p_; }

 private:
  double p_;
};

/// Row-wise softmax.
class Softmax : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::Softmax; }
  Tensor run(const Tensor& input, Mode mode, std::uint64_t seed, std::unique_ptr<Tape>* tape) const override;
  Tensor run_backward(const Tape& tape, const Tensor& upstream) override;
};

/// Row-wise x / ||x||. A zero row passes through unchanged.
class L2Normalize : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::L2Normalize; }
  Tensor run(const Tensor& input, Mode mode, std::uint64_t seed, std::unique_ptr<Tape>* tape) const override;
  Tensor run_backward(const Tape& tape, const Tensor& upstream) override;
};

/// Single LSTM layer over a [T x in] sequence, gate order (i, f, g, o), zero
/// initial state. Returns the final hidden state [hidden], or every hidden
/// state [T x hidden] when `return_sequence` is set.
class Lstm : public Layer {
 public:
  Lstm(std::size_t in, std::size_t hidden, Rng& rng, std::string name = "lstm", bool return_sequence = false);

  LayerKind kind() const override { return LayerKind::LSTM; }
  Tensor run(const Tensor& input, Mode mode, std::uint64_t seed, std::unique_ptr<Tape>* tape) const override;
  Tensor run_backward(const Tape& tape, const Tensor& upstream) override;
  std::vector<Parameter*> parameters() override;

  std::size_t in_dim() const { return in_; }
  std::size_t hidden_dim() const { return hidden_; }
  bool return_sequence() const { return return_sequence_; }

  Parameter& w_input() { return w_ih_; }
  Parameter& w_hidden() { return w_hh_; }
  Parameter& bias() { return b_; }

 private:
  std::size_t in_;
  std::size_t hidden_;
  bool return_sequence_;
  Parameter w_ih_;
  Parameter w_hh_;
  Parameter b_;
};

std::unique_ptr<Layer> make_layer(LayerKind kind, std::size_t in, std::size_t out, Rng& rng);

// ---------------------------------------------------------------------------

enum class OptimizerKind { SGD, Adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Optimizer {
 public:
  Optimizer(OptimizerConfig config, std::vector<Parameter*> parameters);

  /// Applies one update from each Parameter::grad.
  void step();
  void zero_grad();

  std::uint64_t step_count() const { return steps_; }
  const OptimizerConfig& config() const { return config_; }

 private:
  OptimizerConfig config_;
  std::vector<Parameter*> params_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::uint64_t steps_ = 0;
};

// ---------------------------------------------------------------------------

/// Any differentiable function of one input tensor plus parameters.
/// `backward` must return the input gradient and accumulate parameter grads.
struct GradCheckTarget {
  std::function<Tensor(const Tensor&)> forward;
  std::function<Tensor(const Tensor&)> backward;
  std::vector<Parameter*> parameters;
  bool check_input = true;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst_entry;
  std::size_t entries_checked = 0;
  bool passed = false;
};

/// Central finite differences over every parameter and input entry of the
/// scalar L = sum_k c_k y_k (c seeded). Relative error is
/// |analytic - numeric| / max(1, |numeric|).
GradCheckReport grad_check(GradCheckTarget& target, const Tensor& input, double epsilon, double tolerance,
                           std::uint64_t seed = 0);

/// Layer overload. Train-mode checks reuse the same seed for every pass.
GradCheckReport grad_check(Layer& layer, const Tensor& input, double epsilon, double tolerance,
                           Mode mode = Mode::eval, std::uint64_t seed = 0);

}  // namespace dilink::nn
