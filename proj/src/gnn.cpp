#include "dilink/gnn.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "dilink/kernels.hpp"

namespace dilink::gnn {

using nlohmann::json;

std::string_view to_string(EncoderKind kind) {
  switch (kind) {
    case EncoderKind::GCN: return "gcn";
    case EncoderKind::GAT: return "gat";
    case EncoderKind::GraphSAGE: return "graphsage";
  }
  return "gcn";
}

EncoderKind encoder_kind_from_string(std::string_view s) {
  if (s == "gcn") return EncoderKind::GCN;
  if (s == "gat") return EncoderKind::GAT;
  if (s == "graphsage" || s == "gsage" || s == "sage") return EncoderKind::GraphSAGE;
  throw std::invalid_argument("unknown graph encoder '" + std::string(s) + "'");
}

void GraphEncoderConfig::validate() const {
  if (input_dim == 0 || hidden_dim == 0 || output_dim == 0) throw std::invalid_argument("graph encoder dims must be > 0");
  if (layers < 1) throw std::invalid_argument("graph encoder needs at least one layer");
  if (attention_heads < 1) throw std::invalid_argument("attention_heads must be >= 1");
  if (kind == EncoderKind::GAT && layers > 1 && hidden_dim % attention_heads != 0) {
    throw std::invalid_argument("GAT hidden_dim must be divisible by attention_heads");
  }
}

json to_json(const GraphEncoderConfig& c) {
  return json{{"kind", std::string(to_string(c.kind))},
              {"input_dim", c.input_dim},
              {"hidden_dim", c.hidden_dim},
              {"output_dim", c.output_dim},
              {"layers", c.layers},
              {"attention_heads", c.attention_heads},
              {"leaky_relu_slope", c.leaky_relu_slope},
              {"readout", c.readout == Readout::Center ? "center" : "mean"},
              {"directed", c.directed},
              {"sage_normalize", c.sage_normalize}};
}

GraphEncoderConfig encoder_config_from_json(const json& j) {
  GraphEncoderConfig c;
  if (j.contains("kind")) c.kind = encoder_kind_from_string(j.at("kind").get<std::string>());
  c.input_dim = j.value("input_dim", c.input_dim);
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.output_dim = j.value("output_dim", c.output_dim);
  c.layers = j.value("layers", c.layers);
  c.attention_heads = j.value("attention_heads", c.attention_heads);
  c.leaky_relu_slope = j.value("leaky_relu_slope", c.leaky_relu_slope);
  c.readout = j.value("readout", std::string("center")) == "mean" ? Readout::Mean : Readout::Center;
  c.directed = j.value("directed", c.directed);
  c.sage_normalize = j.value("sage_normalize", c.sage_normalize);
  c.validate();
  return c;
}

GraphView GraphView::from_subgraph(const graph::SubGraph& sub, bool directed) {
  GraphView v;
  v.neighbors = directed ? sub.incoming_adjacency() : sub.undirected_adjacency();
  v.center = sub.center_index;
  return v;
}

Tensor feature_matrix(const graph::SubGraph& sub, const node2vec::NodeEmbeddingTable& table, std::size_t dim,
                      bool missing_ok) {
  Tensor f({sub.size(), dim});
  for (std::size_t i = 0; i < sub.size(); ++i) {
    auto it = table.find(sub.nodes[i]);
    if (it == table.end()) {
      if (missing_ok) continue;
      throw DataError("no node feature row for service '" + sub.nodes[i] + "'");
    }
    if (it->second.size() != dim) {
      throw ShapeError("feature row for '" + sub.nodes[i] + "' has width " + std::to_string(it->second.size()) +
                       ", expected " + std::to_string(dim));
    }
    std::copy(it->second.begin(), it->second.end(), f.row(i).begin());
  }
  return f;
}

namespace {

void check_features(const GraphView& g, const Tensor& h, std::size_t in, const char* who) {
  if (h.rank() != 2 || h.rows() != g.size() || h.cols() != in) {
    throw ShapeError(std::string(who) + " input: expected shape [" + std::to_string(g.size()) + " x " +
                     std::to_string(in) + "], got " + shape_to_string(h.shape()));
  }
}

void relu_inplace(Tensor& t) {
  for (auto& v : t.data()) v = std::max(v, 0.0);
}

Tensor relu_mask(const Tensor& pre, const Tensor& upstream) {
  Tensor d = upstream;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (pre[i] <= 0.0) d[i] = 0.0;
  return d;
}

struct GcnTape : nn::Tape {
  Tensor propagated;  // A_hat H
  Tensor pre;  // A_hat H W
};

struct SageTape : nn::Tape {
  Tensor input;
  Tensor mean;
  Tensor pre;
  Tensor activated;
  std::vector<double> norms;
};

struct GatHeadCache {
  Tensor z;  // [n x F]
  std::vector<std::vector<double>> pre;  // s_i + t_j before LeakyReLU, per i over [i, N(i)...]
  std::vector<std::vector<double>> alpha;
};

struct GatTape : nn::Tape {
  Tensor input;
  std::vector<GatHeadCache> heads;
  Tensor pre;  // combined output before ReLU
};

// Row i's attention support: itself first, then its neighbours.
std::vector<std::size_t> support(const GraphView& g, std::size_t i) {
  std::vector<std::size_t> s{i};
  s.insert(s.end(), g.neighbors[i].begin(), g.neighbors[i].end());
  return s;
}

}  // namespace

// --- GCN -----------------------------------------------------------------------

GcnLayer::GcnLayer(std::size_t in, std::size_t out, Rng& rng, std::string name)
    : weight_(name + ".weight", Tensor({in, out})) {
  nn::glorot_uniform(weight_.value, in, out, rng);
}

Tensor GcnLayer::normalized_adjacency(const GraphView& g) {
  const std::size_t n = g.size();
  std::vector<double> deg(n);
  for (std::size_t i = 0; i < n; ++i) deg[i] = static_cast<double>(g.neighbors[i].size()) + 1.0;
  Tensor a({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    a.at(i, i) = 1.0 / deg[i];
    for (std::size_t j : g.neighbors[i]) a.at(i, j) = 1.0 / std::sqrt(deg[i] * deg[j]);
  }
  return a;
}

Tensor GcnLayer::run(const GraphView& g, const Tensor& h, std::unique_ptr<nn::Tape>* tape) const {
  check_features(g, h, in_dim(), "GCN");
  const Tensor a = normalized_adjacency(g);
  Tensor p = kernels::matmul(a, h);
  Tensor pre = kernels::matmul(p, weight_.value);
  Tensor y = pre;
  relu_inplace(y);
  if (tape) {
    auto t = std::make_unique<GcnTape>();
    t->propagated = std::move(p);
    t->pre = std::move(pre);
    *tape = std::move(t);
  }
  return y;
}

Tensor GcnLayer::run_backward(const GraphView& g, const nn::Tape& tape, const Tensor& upstream) {
  const auto& t = static_cast<const GcnTape&>(tape);
  upstream.require_shape(t.pre.shape(), "GCN upstream");
  const Tensor dz = relu_mask(t.pre, upstream);
  weight_.grad += kernels::matmul_tn(t.propagated, dz);
  const Tensor dp = kernels::matmul_nt(dz, weight_.value);
  return kernels::matmul_tn(normalized_adjacency(g), dp);
}

// --- GAT -----------------------------------------------------------------------

GatLayer::GatLayer(std::size_t in, std::size_t out, std::size_t heads, bool average_heads, double slope, Rng& rng,
                   std::string name)
    : in_(in), out_(out), heads_(heads), average_(average_heads), slope_(slope) {
  if (heads == 0) throw std::invalid_argument("GAT needs at least one head");
  if (!average_ && out % heads != 0) throw std::invalid_argument("GAT concat width must be divisible by heads");
  head_dim_ = average_ ? out : out / heads;
  for (std::size_t k = 0; k < heads; ++k) {
    const std::string hn = name + ".head" + std::to_string(k);
    weights_.emplace_back(hn + ".weight", Tensor({in, head_dim_}));
    nn::glorot_uniform(weights_.back().value, in, head_dim_, rng);
    attn_.emplace_back(hn + ".attention", Tensor({2 * head_dim_}));
    nn::glorot_uniform(attn_.back().value, 2 * head_dim_, 1, rng);
  }
}

std::vector<nn::Parameter*> GatLayer::parameters() {
  std::vector<nn::Parameter*> out;
  for (std::size_t k = 0; k < heads_; ++k) {
    out.push_back(&weights_[k]);
    out.push_back(&attn_[k]);
  }
  return out;
}

namespace {

GatHeadCache gat_head_forward(const GraphView& g, const Tensor& h, const Tensor& w, const Tensor& a, double slope) {
  GatHeadCache c;
  c.z = kernels::matmul(h, w);
  const std::size_t n = g.size();
  const std::size_t f = w.cols();
  std::vector<double> s(n), t(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto zi = c.z.row(i);
    s[i] = dot(zi, std::span<const double>(a.data().data(), f));
    t[i] = dot(zi, std::span<const double>(a.data().data() + f, f));
  }
  c.pre.resize(n);
  c.alpha.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto sup = support(g, i);
    auto& pre = c.pre[i];
    auto& alpha = c.alpha[i];
    pre.resize(sup.size());
    alpha.resize(sup.size());
    double mx = -INFINITY;
    for (std::size_t k = 0; k < sup.size(); ++k) {
      pre[k] = s[i] + t[sup[k]];
      const double e = pre[k] > 0.0 ? pre[k] : slope * pre[k];
      alpha[k] = e;
      mx = std::max(mx, e);
    }
    double sum = 0.0;
    for (auto& v : alpha) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (auto& v : alpha) v /= sum;
  }
  return c;
}

}  // namespace

std::vector<std::vector<double>> GatLayer::attention(const GraphView& g, const Tensor& h, std::size_t head) const {
  check_features(g, h, in_, "GAT");
  return gat_head_forward(g, h, weights_.at(head).value, attn_.at(head).value, slope_).alpha;
}

Tensor GatLayer::run(const GraphView& g, const Tensor& h, std::unique_ptr<nn::Tape>* tape) const {
  check_features(g, h, in_, "GAT");
  const std::size_t n = g.size();
  auto t = std::make_unique<GatTape>();
  t->pre = Tensor({n, out_});
  const double head_scale = average_ ? 1.0 / static_cast<double>(heads_) : 1.0;
  for (std::size_t k = 0; k < heads_; ++k) {
    GatHeadCache c = gat_head_forward(g, h, weights_[k].value, attn_[k].value, slope_);
    const std::size_t col0 = average_ ? 0 : k * head_dim_;
    for (std::size_t i = 0; i < n; ++i) {
      const auto sup = support(g, i);
      for (std::size_t m = 0; m < sup.size(); ++m) {
        const double w = c.alpha[i][m] * head_scale;
        const auto zj = c.z.row(sup[m]);
        for (std::size_t d = 0; d < head_dim_; ++d) t->pre.at(i, col0 + d) += w * zj[d];
      }
    }
    t->heads.push_back(std::move(c));
  }
  Tensor y = t->pre;
  relu_inplace(y);
  if (tape) {
    t->input = h;
    *tape = std::move(t);
  }
  return y;
}

Tensor GatLayer::run_backward(const GraphView& g, const nn::Tape& tape, const Tensor& upstream) {
  const auto& t = static_cast<const GatTape&>(tape);
  upstream.require_shape(t.pre.shape(), "GAT upstream");
  const Tensor dout = relu_mask(t.pre, upstream);
  const std::size_t n = g.size();
  const std::size_t f = head_dim_;
  const double head_scale = average_ ? 1.0 / static_cast<double>(heads_) : 1.0;
  Tensor dh({n, in_});
  for (std::size_t k = 0; k < heads_; ++k) {
    const auto& c = t.heads[k];
    const auto& a = attn_[k].value;
    const std::size_t col0 = average_ ? 0 : k * head_dim_;
    Tensor dz({n, f});
    std::vector<double> ds(n, 0.0), dt(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto sup = support(g, i);
      std::vector<double> dalpha(sup.size());
      for (std::size_t m = 0; m < sup.size(); ++m) {
        const auto zj = c.z.row(sup[m]);
        double da = 0.0;
        for (std::size_t d = 0; d < f; ++d) {
          const double go = dout.at(i, col0 + d) * head_scale;
          da += go * zj[d];
          dz.at(sup[m], d) += c.alpha[i][m] * go;
        }
        dalpha[m] = da;
      }
      double weighted = 0.0;
      for (std::size_t m = 0; m < sup.size(); ++m) weighted += c.alpha[i][m] * dalpha[m];
      for (std::size_t m = 0; m < sup.size(); ++m) {
        const double de = c.alpha[i][m] * (dalpha[m] - weighted);
        const double dpre = de * (c.pre[i][m] > 0.0 ? 1.0 : slope_);
        ds[i] += dpre;
        dt[sup[m]] += dpre;
      }
    }
    auto& ga = attn_[k].grad;
    for (std::size_t i = 0; i < n; ++i) {
      const auto zi = c.z.row(i);
      auto dzi = dz.row(i);
      for (std::size_t d = 0; d < f; ++d) {
        ga[d] += ds[i] * zi[d];
        ga[f + d] += dt[i] * zi[d];
        dzi[d] += ds[i] * a[d] + dt[i] * a[f + d];
      }
    }
    weights_[k].grad += kernels::matmul_tn(t.input, dz);
    dh += kernels::matmul_nt(dz, weights_[k].value);
  }
  return dh;
}

// --- GraphSAGE -----------------------------------------------------------------

SageLayer::SageLayer(std::size_t in, std::size_t out, bool normalize, Rng& rng, std::string name)
    : normalize_(normalize), w_self_(name + ".w_self", Tensor({in, out})), w_neigh_(name + ".w_neigh", Tensor({in, out})) {
  nn::glorot_uniform(w_self_.value, in, out, rng);
  nn::glorot_uniform(w_neigh_.value, in, out, rng);
}

Tensor SageLayer::neighbor_mean(const GraphView& g, const Tensor& h) {
  Tensor m({g.size(), h.cols()});
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto& nb = g.neighbors[i];
    if (nb.empty()) continue;
    auto mi = m.row(i);
    for (std::size_t j : nb) {
      const auto hj = h.row(j);
      for (std::size_t d = 0; d < mi.size(); ++d) mi[d] += hj[d];
    }
    const double inv = 1.0 / static_cast<double>(nb.size());
    for (auto& v : mi) v *= inv;
  }
  return m;
}

Tensor SageLayer::run(const GraphView& g, const Tensor& h, std::unique_ptr<nn::Tape>* tape) const {
  check_features(g, h, in_dim(), "GraphSAGE");
  Tensor mean = neighbor_mean(g, h);
  Tensor pre = kernels::matmul(h, w_self_.value);
  pre += kernels::matmul(mean, w_neigh_.value);
  Tensor y = pre;
  relu_inplace(y);
  Tensor activated = y;
  std::vector<double> norms;
  if (normalize_) {
    norms.resize(y.rows());
    for (std::size_t i = 0; i < y.rows(); ++i) {
      auto r = y.row(i);
      norms[i] = l2_norm(r);
      if (norms[i] > 0.0)
        for (auto& v : r) v /= norms[i];
    }
  }
  if (tape) {
    auto t = std::make_unique<SageTape>();
    t->input = h;
    t->mean = std::move(mean);
    t->pre = std::move(pre);
    t->activated = std::move(activated);
    t->norms = std::move(norms);
    *tape = std::move(t);
  }
  return y;
}

Tensor SageLayer::run_backward(const GraphView& g, const nn::Tape& tape, const Tensor& upstream) {
  const auto& t = static_cast<const SageTape&>(tape);
  upstream.require_shape(t.pre.shape(), "GraphSAGE upstream");
  Tensor dy = upstream;
  if (normalize_) {
    for (std::size_t i = 0; i < dy.rows(); ++i) {
      const double n = t.norms[i];
      if (n == 0.0) continue;
      const auto a = t.activated.row(i);
      auto d = dy.row(i);
      double proj = 0.0;
      for (std::size_t k = 0; k < d.size(); ++k) proj += a[k] * d[k];
      for (std::size_t k = 0; k < d.size(); ++k) d[k] = (d[k] - a[k] * proj / (n * n)) / n;
    }
  }
  const Tensor dz = relu_mask(t.pre, dy);
  w_self_.grad += kernels::matmul_tn(t.input, dz);
  w_neigh_.grad += kernels::matmul_tn(t.mean, dz);
  Tensor dh = kernels::matmul_nt(dz, w_self_.value);
  const Tensor dmean = kernels::matmul_nt(dz, w_neigh_.value);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto& nb = g.neighbors[i];
    if (nb.empty()) continue;
    const double inv = 1.0 / static_cast<double>(nb.size());
    const auto dm = dmean.row(i);
    for (std::size_t j : nb) {
      auto dj = dh.row(j);
      for (std::size_t d = 0; d < dj.size(); ++d) dj[d] += dm[d] * inv;
    }
  }
  return dh;
}

// --- Encoder -------------------------------------------------------------------

GraphEncoder::GraphEncoder(GraphEncoderConfig config, Rng& rng, const std::string& prefix)
    : config_((config.validate(), config)) {
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const std::size_t in = l == 0 ? config_.input_dim : config_.hidden_dim;
    const bool last = l + 1 == config_.layers;
    const std::size_t out = last ? config_.output_dim : config_.hidden_dim;
    const std::string name = prefix + ".layer" + std::to_string(l);
    switch (config_.kind) {
      case EncoderKind::GCN: layers_.push_back(std::make_unique<GcnLayer>(in, out, rng, name)); break;
      case EncoderKind::GAT:
        layers_.push_back(
            std::make_unique<GatLayer>(in, out, config_.attention_heads, last, config_.leaky_relu_slope, rng, name));
        break;
      case EncoderKind::GraphSAGE:
        layers_.push_back(std::make_unique<SageLayer>(in, out, config_.sage_normalize, rng, name));
        break;
    }
  }
}

GraphEncoder::~GraphEncoder() = default;
GraphEncoder::GraphEncoder(GraphEncoder&&) noexcept = default;

Tensor GraphEncoder::encode(const GraphView& g, const Tensor& features, std::unique_ptr<Tape>* tape) const {
  auto tp = std::make_unique<Tape>();
  tp->layers.resize(layers_.size());
  tp->rows = g.size();
  Tensor h = features;
  for (std::size_t l = 0; l < layers_.size(); ++l) h = layers_[l]->run(g, h, tape ? &tp->layers[l] : nullptr);
  Tensor out({config_.output_dim});
  if (config_.readout == Readout::Center) {
    std::copy(h.row(g.center).begin(), h.row(g.center).end(), out.data().begin());
  } else {
    for (std::size_t i = 0; i < h.rows(); ++i)
      for (std::size_t d = 0; d < out.size(); ++d) out[d] += h.at(i, d) / static_cast<double>(h.rows());
  }
  if (tape) *tape = std::move(tp);
  return out;
}

Tensor GraphEncoder::backward(const GraphView& g, const Tape& tape, const Tensor& upstream) {
  upstream.require_shape({config_.output_dim}, "graph encoder upstream");
  Tensor d({tape.rows, config_.output_dim});
  if (config_.readout == Readout::Center) {
    std::copy(upstream.data().begin(), upstream.data().end(), d.row(g.center).begin());
  } else {
    for (std::size_t i = 0; i < tape.rows; ++i)
      for (std::size_t k = 0; k < upstream.size(); ++k) d.at(i, k) = upstream[k] / static_cast<double>(tape.rows);
  }
  for (std::size_t l = layers_.size(); l-- > 0;) d = layers_[l]->run_backward(g, *tape.layers[l], d);
  return d;
}

std::vector<nn::Parameter*> GraphEncoder::parameters() {
  std::vector<nn::Parameter*> out;
  for (auto& l : layers_)
    for (auto* p : l->parameters()) out.push_back(p);
  return out;
}

}  // namespace dilink::gnn
