#include "dilink/nn.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace dilink::nn {

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Linear: return "Linear";
    case LayerKind::ReLU: return "ReLU";
    case LayerKind::Dropout: return "Dropout";
    case LayerKind::LSTM: return "LSTM";
    case LayerKind::Softmax: return "Softmax";
    case LayerKind::L2Normalize: return "L2Normalize";
  }
  return "?";
}

void snap_to_f32(Tensor& t) {
  for (auto& v : t.data()) v = static_cast<double>(static_cast<float>(v));
}

void glorot_uniform(Tensor& t, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : t.data()) v = rng.uniform(-a, a);
  snap_to_f32(t);
}

Tensor Layer::forward(const Tensor& input, Mode mode, std::uint64_t seed) {
  last_tape_.reset();
  return run(input, mode, seed, &last_tape_);
}

LayerGradients Layer::backward(const Tensor& upstream) {
  if (!last_tape_) throw std::logic_error(std::string(to_string(kind())) + ": backward called before forward");
  auto params = parameters();
  for (auto* p : params) p->zero_grad();
  LayerGradients out;
  out.input = run_backward(*last_tape_, upstream);
  for (auto* p : params) out.parameters.emplace(p->name, p->grad);
  return out;
}

// --- Linear ----------------------------------------------------------------

namespace {

struct InputTape : Tape {
  Tensor input;
};

struct OutputTape : Tape {
  Tensor output;
};

struct MaskTape : Tape {
  Tensor mask;
};

Tensor as_batch(const Tensor& t, std::size_t cols, const char* where) {
  if (t.rank() == 1) {
    if (t.size() != cols) t.require_shape({cols}, where);
    return t.reshaped({1, cols});
  }
  if (t.rank() != 2 || t.cols() != cols) t.require_shape({t.rank() == 2 ? t.rows() : 1, cols}, where);
  return t;
}

}  // namespace

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, std::string name, bool bias)
    : in_(in),
      out_(out),
      has_bias_(bias),
      weight_(name + ".weight", Tensor({out, in})),
      bias_(name + ".bias", Tensor({out})) {
  glorot_uniform(weight_.value, in, out, rng);
}

Tensor Linear::run(const Tensor& input, Mode, std::uint64_t, std::unique_ptr<Tape>* tape) const {
  const Tensor x = as_batch(input, in_, "Linear input");
  const std::size_t n = x.rows();
  Tensor y({n, out_});
  for (std::size_t r = 0; r < n; ++r) {
    const auto xr = x.row(r);
    for (std::size_t o = 0; o < out_; ++o) {
      y.at(r, o) = dot(weight_.value.row(o), xr) + (has_bias_ ? bias_.value[o] : 0.0);
    }
  }
  if (tape) {
    auto t = std::make_unique<InputTape>();
    t->input = input;
    *tape = std::move(t);
  }
  return input.rank() == 1 ? y.reshaped({out_}) : y;
}

Tensor Linear::run_backward(const Tape& tape, const Tensor& upstream) {
  const auto& input = static_cast<const InputTape&>(tape).input;
  const Tensor x = as_batch(input, in_, "Linear input");
  const Tensor up = as_batch(upstream, out_, "Linear upstream");
  if (up.rows() != x.rows()) throw ShapeError("Linear upstream batch size mismatch");
  Tensor dx({x.rows(), in_});
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto xr = x.row(r);
    auto dxr = dx.row(r);
    for (std::size_t o = 0; o < out_; ++o) {
      const double g = up.at(r, o);
      if (g == 0.0) continue;
      auto wrow = weight_.value.row(o);
      auto grow = weight_.grad.row(o);
      for (std::size_t i = 0; i < in_; ++i) {
        grow[i] += g * xr[i];
        dxr[i] += g * wrow[i];
      }
      if (has_bias_) bias_.grad[o] += g;
    }
  }
  return input.rank() == 1 ? dx.reshaped({in_}) : dx;
}

std::vector<Parameter*> Linear::parameters() {
  if (has_bias_) return {&weight_, &bias_};
  return {&weight_};
}

// --- ReLU ------------------------------------------------------------------

Tensor ReLU::run(const Tensor& input, Mode, std::uint64_t, std::unique_ptr<Tape>* tape) const {
  Tensor y = input;
  for (auto& v : y.data()) v = v > 0.0 ? v : 0.0;
  if (tape) {
    auto t = std::make_unique<InputTape>();
    t->input = input;
    *tape = std::move(t);
  }
  return y;
}

Tensor ReLU::run_backward(const Tape& tape, const Tensor& upstream) {
  const auto& x = static_cast<const InputTape&>(tape).input;
  upstream.require_shape(x.shape(), "ReLU upstream");
  Tensor dx = upstream;
  for (std::size_t i = 0; i < dx.size(); ++i)
    if (x[i] <= 0.0) dx[i] = 0.0;
  return dx;
}

// --- Dropout ---------------------------------------------------------------

Dropout::Dropout(double drop_probability) : p_(drop_probability) {
  if (!(p_ >= 0.0 && p_ < 1.0)) throw std::invalid_argument("dropout probability must be in [0, 1)");
}

Tensor Dropout::run(const Tensor& input, Mode mode, std::uint64_t seed, std::unique_ptr<Tape>* tape) const {
  auto t = std::make_unique<MaskTape>();
  t->mask = Tensor(input.shape(), 1.0);
  Tensor y = input;
  if (mode == Mode::train && p_ > 0.0) {
    Rng rng(seed);
    const double scale = 1.0 / (1.0 - p_);
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double m = rng.uniform() < p_ ? 0.0 : scale;
      t->mask[i] = m;
      y[i] *= m;
    }
  }
  if (tape) *tape = std::move(t);
  return y;
}

Tensor Dropout::run_backward(const Tape& tape, const Tensor& upstream) {
  const auto& mask = static_cast<const MaskTape&>(tape).mask;
  upstream.require_shape(mask.shape(), "Dropout upstream");
  Tensor dx = upstream;
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= mask[i];
  return dx;
}

// --- Softmax ---------------------------------------------------------------

Tensor Softmax::run(const Tensor& input, Mode, std::uint64_t, std::unique_ptr<Tape>* tape) const {
  Tensor y = input;
  const std::size_t n = input.rows();
  const std::size_t c = input.cols();
  for (std::size_t r = 0; r < n; ++r) {
    auto row = y.row(r);
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (auto& v : row) {
      v = std::exp(v - mx);
      s += v;
    }
    for (auto& v : row) v /= s;
  }
  if (tape) {
    auto t = std::make_unique<OutputTape>();
    t->output = y;
    *tape = std::move(t);
  }
  return y;
}

Tensor Softmax::run_backward(const Tape& tape, const Tensor& upstream) {
  const auto& y = static_cast<const OutputTape&>(tape).output;
  upstream.require_shape(y.shape(), "Softmax upstream");
  Tensor dx = upstream;
  for (std::size_t r = 0; r < y.rows(); ++r) {
    const double s = dot(y.row(r), upstream.row(r));
    auto drow = dx.row(r);
    auto yrow = y.row(r);
    for (std::size_t j = 0; j < drow.size(); ++j) drow[j] = yrow[j] * (drow[j] - s);
  }
  return dx;
}

// --- L2Normalize -------------------------------------------------------------

namespace {

struct NormTape : Tape {
  Tensor output;
  std::vector<double> norms;
};

}  // namespace

Tensor L2Normalize::run(const Tensor& input, Mode, std::uint64_t, std::unique_ptr<Tape>* tape) const {
  Tensor y = input;
  std::vector<double> norms(input.rows());
  for (std::size_t r = 0; r < input.rows(); ++r) {
    auto row = y.row(r);
    const double n = l2_norm(row);
    norms[r] = n;
    if (n > 0.0)
      for (auto& v : row) v /= n;
  }
  if (tape) {
    auto t = std::make_unique<NormTape>();
    t->output = y;
    t->norms = std::move(norms);
    *tape = std::move(t);
  }
  return y;
}

Tensor L2Normalize::run_backward(const Tape& tape, const Tensor& upstream) {
  const auto& t = static_cast<const NormTape&>(tape);
  upstream.require_shape(t.output.shape(), "L2Normalize upstream");
  Tensor dx = upstream;
  for (std::size_t r = 0; r < dx.rows(); ++r) {
    const double n = t.norms[r];
    if (n == 0.0) continue;
    const auto y = t.output.row(r);
    const double proj = dot(y, upstream.row(r));
    auto drow = dx.row(r);
    for (std::size_t j = 0; j < drow.size(); ++j) drow[j] = (drow[j] - y[j] * proj) / n;
  }
  return dx;
}

// --- LSTM ------------------------------------------------------------------

namespace {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct LstmTape : Tape {
  Tensor input;  // [T x in]
  Tensor gates;  // [T x 4H], activated i, f, g, o
  Tensor cells;  // [T x H]
  Tensor hidden;  // [T x H]
};

}  // namespace

Lstm::Lstm(std::size_t in, std::size_t hidden, Rng& rng, std::string name, bool return_sequence)
    : in_(in),
      hidden_(hidden),
      return_sequence_(return_sequence),
      w_ih_(name + ".w_ih", Tensor({4 * hidden, in})),
      w_hh_(name + ".w_hh", Tensor({4 * hidden, hidden})),
      b_(name + ".bias", Tensor({4 * hidden})) {
  glorot_uniform(w_ih_.value, in, 4 * hidden, rng);
  glorot_uniform(w_hh_.value, hidden, 4 * hidden, rng);
}

Tensor Lstm::run(const Tensor& input, Mode, std::uint64_t, std::unique_ptr<Tape>* tape) const {
  if (input.rank() != 2 || input.cols() != in_) {
    throw ShapeError("LSTM input: expected shape [T x " + std::to_string(in_) + "], got " +
                     shape_to_string(input.shape()));
  }
  const std::size_t steps = input.rows();
  const std::size_t h = hidden_;
  Tensor gates({steps, 4 * h});
  Tensor cells({steps, h});
  Tensor hidden({steps, h});
  std::vector<double> z(4 * h);
  std::vector<double> h_prev(h, 0.0);
  std::vector<double> c_prev(h, 0.0);
  for (std::size_t t = 0; t < steps; ++t) {
    const auto x = input.row(t);
    for (std::size_t k = 0; k < 4 * h; ++k) {
      z[k] = b_.value[k] + dot(w_ih_.value.row(k), x) + dot(w_hh_.value.row(k), h_prev);
    }
    auto g = gates.row(t);
    for (std::size_t j = 0; j < h; ++j) {
      const double ig = sigmoid(z[j]);
      const double fg = sigmoid(z[h + j]);
      const double gg = std::tanh(z[2 * h + j]);
      const double og = sigmoid(z[3 * h + j]);
      g[j] = ig;
      g[h + j] = fg;
      g[2 * h + j] = gg;
      g[3 * h + j] = og;
      const double c = fg * c_prev[j] + ig * gg;
      cells.at(t, j) = c;
      hidden.at(t, j) = og * std::tanh(c);
    }
    for (std::size_t j = 0; j < h; ++j) {
      c_prev[j] = cells.at(t, j);
      h_prev[j] = hidden.at(t, j);
    }
  }
  Tensor out = return_sequence_ ? hidden : Tensor({h}, std::vector<double>(h_prev));
  if (tape) {
    auto tp = std::make_unique<LstmTape>();
    tp->input = input;
    tp->gates = std::move(gates);
    tp->cells = std::move(cells);
    tp->hidden = std::move(hidden);
    *tape = std::move(tp);
  }
  return out;
}

Tensor Lstm::run_backward(const Tape& tape, const Tensor& upstream) {
  const auto& tp = static_cast<const LstmTape&>(tape);
  const std::size_t steps = tp.input.rows();
  const std::size_t h = hidden_;
  if (return_sequence_) {
    upstream.require_shape({steps, h}, "LSTM upstream");
  } else {
    upstream.require_shape({h}, "LSTM upstream");
  }
  Tensor dx({steps, in_});
  std::vector<double> dh_next(h, 0.0);
  std::vector<double> dc_next(h, 0.0);
  std::vector<double> dz(4 * h);
  for (std::size_t t = steps; t-- > 0;) {
    const auto g = tp.gates.row(t);
    for (std::size_t j = 0; j < h; ++j) {
      double dh = dh_next[j];
      if (return_sequence_) {
        dh += upstream.at(t, j);
      } else if (t + 1 == steps) {
        dh += upstream[j];
      }
      const double c = tp.cells.at(t, j);
      const double tc = std::tanh(c);
      const double c_prev = t > 0 ? tp.cells.at(t - 1, j) : 0.0;
      const double ig = g[j], fg = g[h + j], gg = g[2 * h + j], og = g[3 * h + j];
      const double dc = dh * og * (1.0 - tc * tc) + dc_next[j];
      dz[j] = dc * gg * ig * (1.0 - ig);
      dz[h + j] = dc * c_prev * fg * (1.0 - fg);
      dz[2 * h + j] = dc * ig * (1.0 - gg * gg);
      dz[3 * h + j] = dh * tc * og * (1.0 - og);
      dc_next[j] = dc * fg;
    }
    const auto x = tp.input.row(t);
    auto dxr = dx.row(t);
    std::fill(dh_next.begin(), dh_next.end(), 0.0);
    for (std::size_t k = 0; k < 4 * h; ++k) {
      const double d = dz[k];
      if (d == 0.0) continue;
      b_.grad[k] += d;
      auto wi = w_ih_.value.row(k);
      auto gwi = w_ih_.grad.row(k);
      for (std::size_t i = 0; i < in_; ++i) {
        gwi[i] += d * x[i];
        dxr[i] += d * wi[i];
      }
      auto wh = w_hh_.value.row(k);
      auto gwh = w_hh_.grad.row(k);
      for (std::size_t j = 0; j < h; ++j) {
        const double hp = t > 0 ? tp.hidden.at(t - 1, j) : 0.0;
        gwh[j] += d * hp;
        dh_next[j] += d * wh[j];
      }
    }
  }
  return dx;
}

std::vector<Parameter*> Lstm::parameters() { return {&w_ih_, &w_hh_, &b_}; }

std::unique_ptr<Layer> make_layer(LayerKind kind, std::size_t in, std::size_t out, Rng& rng) {
  switch (kind) {
    case LayerKind::Linear: return std::make_unique<Linear>(in, out, rng);
    case LayerKind::ReLU: return std::make_unique<ReLU>();
    case LayerKind::Dropout: return std::make_unique<Dropout>();
    case LayerKind::LSTM: return std::make_unique<Lstm>(in, out, rng);
    case LayerKind::Softmax: return std::make_unique<Softmax>();
    case LayerKind::L2Normalize: return std::make_unique<L2Normalize>();
  }
  throw std::invalid_argument("unknown layer kind");
}

// --- Optimizer ---------------------------------------------------------------

Optimizer::Optimizer(OptimizerConfig config, std::vector<Parameter*> parameters)
    : config_(config), params_(std::move(parameters)) {
  if (!(config_.learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
  for (auto* p : params_) {
    m_.emplace_back(Tensor::zeros_like(p->value));
    v_.emplace_back(Tensor::zeros_like(p->value));
  }
}

void Optimizer::step() {
  ++steps_;
  const double lr = config_.learning_rate;
  if (config_.kind == OptimizerKind::SGD) {
    for (auto* p : params_)
      for (std::size_t i = 0; i < p->value.size(); ++i) p->value[i] -= lr * p->grad[i];
    return;
  }
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = *params_[k];
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p.value[i] -= lr * mhat / (std::sqrt(vhat) + config_.epsilon);
    }
  }
}

void Optimizer::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

// --- Gradient check ------------------------------------------------------------

namespace {

double projected_loss(const Tensor& y, const Tensor& c) {
  y.require_finite("grad_check forward");
  return dot(y.span(), c.span());
}

}  // namespace

GradCheckReport grad_check(GradCheckTarget& target, const Tensor& input, double epsilon, double tolerance,
                           std::uint64_t seed) {
  if (!(epsilon > 0.0 && epsilon <= 1e-3)) throw std::invalid_argument("grad_check epsilon must be in (0, 1e-3]");
  input.require_finite("grad_check input");

  for (auto* p : target.parameters) p->zero_grad();
  const Tensor y0 = target.forward(input);
  Rng rng(derive_seed(seed, 0x9c7d));
  Tensor c(y0.shape());
  for (auto& v : c.data()) v = rng.uniform(-1.0, 1.0);
  projected_loss(y0, c);
  const Tensor dinput = target.backward(c);
  dinput.require_finite("grad_check input gradient");

  GradCheckReport report;
  auto consider = [&](double analytic, double numeric, const std::string& label) {
    if (!std::isfinite(analytic) || !std::isfinite(numeric)) throw NumericError("grad_check: non-finite gradient at " + label);
    const double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
    ++report.entries_checked;
    if (report.worst_entry.empty() || err > report.max_relative_error) {
      report.max_relative_error = err;
      report.worst_entry = label;
    }
  };

  for (auto* p : target.parameters) {
    const Tensor analytic = p->grad;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double saved = p->value[i];
      p->value[i] = saved + epsilon;
      const double lp = projected_loss(target.forward(input), c);
      p->value[i] = saved - epsilon;
      const double lm = projected_loss(target.forward(input), c);
      p->value[i] = saved;
      consider(analytic[i], (lp - lm) / (2.0 * epsilon), p->name + "[" + std::to_string(i) + "]");
    }
  }
  if (target.check_input) {
    Tensor x = input;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double saved = x[i];
      x[i] = saved + epsilon;
      const double lp = projected_loss(target.forward(x), c);
      x[i] = saved - epsilon;
      const double lm = projected_loss(target.forward(x), c);
      x[i] = saved;
      consider(dinput[i], (lp - lm) / (2.0 * epsilon), "input[" + std::to_string(i) + "]");
    }
  }
  report.passed = report.max_relative_error < tolerance;
  return report;
}

GradCheckReport grad_check(Layer& layer, const Tensor& input, double epsilon, double tolerance, Mode mode,
                           std::uint64_t seed) {
  std::unique_ptr<Tape> tape;
  GradCheckTarget target;
  target.forward = [&](const Tensor& x) { return layer.run(x, mode, seed, &tape); };
  target.backward = [&](const Tensor& up) { return layer.run_backward(*tape, up); };
  target.parameters = layer.parameters();
  return grad_check(target, input, epsilon, tolerance, seed);
}

}  // namespace dilink::nn
