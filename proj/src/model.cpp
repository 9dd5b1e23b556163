#include "dilink/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "dilink/kernels.hpp"
#include "dilink/procrustes.hpp"

namespace dilink::model {

using nlohmann::json;

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::BaselineText: return "baseline-text";
    case Variant::Concatenation: return "concatenation";
    case Variant::LiDAR: return "lidar";
    case Variant::DiLinkGCN: return "dilink-gcn";
    case Variant::DiLinkGAT: return "dilink-gat";
    case Variant::DiLinkGSAGE: return "dilink-gsage";
  }
  return "dilink-gcn";
}

Variant variant_from_string(std::string_view s) {
  for (Variant v : kAllVariants)
    if (to_string(v) == s) return v;
  if (s == "baseline" || s == "text") return Variant::BaselineText;
  if (s == "dilink-graphsage" || s == "dilink-sage") return Variant::DiLinkGSAGE;
  throw std::invalid_argument("unknown model variant '" + std::string(s) +
                              "' (expected baseline-text, concatenation, lidar, dilink-gcn, dilink-gat, dilink-gsage)");
}

bool uses_graph(Variant v) { return v != Variant::BaselineText; }

bool uses_alignment(Variant v) {
  return v == Variant::DiLinkGCN || v == Variant::DiLinkGAT || v == Variant::DiLinkGSAGE;
}

// --- configs -------------------------------------------------------------------

void ModelConfig::sync() {
  text.output_dim = dim;
  graph.output_dim = dim;
  graph.input_dim = walk.embedding_dim;
  switch (variant) {
    case Variant::DiLinkGCN: graph.kind = gnn::EncoderKind::GCN; break;
    case Variant::DiLinkGAT: graph.kind = gnn::EncoderKind::GAT; break;
    case Variant::DiLinkGSAGE: graph.kind = gnn::EncoderKind::GraphSAGE; break;
    default: break;
  }
}

void ModelConfig::validate() const {
  if (dim == 0 || head_hidden == 0) throw std::invalid_argument("model dim and head_hidden must be > 0");
  if (hops < 0) throw std::invalid_argument("hops must be >= 0");
  if (text.output_dim != dim || graph.output_dim != dim || graph.input_dim != walk.embedding_dim) {
    throw std::invalid_argument("tower dimensions disagree with the model dim; call sync()");
  }
  text.validate();
  graph.validate();
  walk.validate();
}

json to_json(const ModelConfig& c) {
  return json{{"variant", std::string(to_string(c.variant))},
              {"dim", c.dim},
              {"head_hidden", c.head_hidden},
              {"hops", c.hops},
              {"seed", c.seed},
              {"text", text::to_json(c.text)},
              {"graph", gnn::to_json(c.graph)},
              {"walk", node2vec::to_json(c.walk)}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  if (j.contains("variant")) c.variant = variant_from_string(j.at("variant").get<std::string>());
  c.dim = j.value("dim", c.dim);
  c.head_hidden = j.value("head_hidden", c.head_hidden);
  c.hops = j.value("hops", c.hops);
  c.seed = j.value("seed", c.seed);
  if (j.contains("text")) c.text = text::text_config_from_json(j.at("text"));
  if (j.contains("walk")) c.walk = node2vec::walk_config_from_json(j.at("walk"));
  if (j.contains("graph")) {
    // Dimensions are derived from dim and the walk width; only the
    // architectural knobs are taken from the file.
    json g = j.at("graph");
    g["input_dim"] = c.walk.embedding_dim;
    g["output_dim"] = c.dim;
    c.graph = gnn::encoder_config_from_json(g);
  }
  c.sync();
  c.validate();
  return c;
}

void TrainConfig::validate() const {
  if (batch_size < 2) throw std::invalid_argument("batch_size must be >= 2");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (!(optimizer.learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (!(margin >= 0.0)) throw std::invalid_argument("margin must be >= 0");
}

json to_json(const TrainConfig& c) {
  return json{{"batch_size", c.batch_size},
              {"epochs", c.epochs},
              {"optimizer", c.optimizer.kind == nn::OptimizerKind::Adam ? "adam" : "sgd"},
              {"learning_rate", c.optimizer.learning_rate},
              {"margin", c.margin},
              {"seed", c.seed}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  const std::string opt = j.value("optimizer", std::string("adam"));
  if (opt == "adam") {
    c.optimizer.kind = nn::OptimizerKind::Adam;
  } else if (opt == "sgd") {
    c.optimizer.kind = nn::OptimizerKind::SGD;
  } else {
    throw std::invalid_argument("unknown optimizer '" + opt + "'");
  }
  c.optimizer.learning_rate = j.value("learning_rate", c.optimizer.learning_rate);
  c.margin = j.value("margin", c.margin);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

// --- graph context -------------------------------------------------------------

GraphContext GraphContext::build(const graph::ServiceGraph& g, int hops, const node2vec::WalkConfig& walk,
                                 bool directed, std::uint64_t seed) {
  GraphContext ctx;
  ctx.graph_ = g;
  std::vector<ServiceId> ids;
  for (const auto& [id, _] : g.nodes()) ids.push_back(id);
  std::vector<ServiceInput> built(ids.size());

  node2vec::NodeEmbeddingTable global;
  if (walk.global) global = node2vec::embed_graph(g, walk, seed);

  std::exception_ptr failure;
  const auto count = static_cast<std::ptrdiff_t>(ids.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    try {
      auto& in = built[static_cast<std::size_t>(i)];
      in.subgraph = graph::extract_subgraph(g, ids[static_cast<std::size_t>(i)], hops);
      in.view = gnn::GraphView::from_subgraph(in.subgraph, directed);
      const auto table = walk.global ? global : node2vec::embed_subgraph(in.subgraph, walk, seed);
      in.features = gnn::feature_matrix(in.subgraph, table, walk.embedding_dim);
    } catch (...) {
#pragma omp critical
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  for (std::size_t i = 0; i < ids.size(); ++i) ctx.inputs_.emplace(ids[i], std::move(built[i]));
  return ctx;
}

const ServiceInput* GraphContext::find(const ServiceId& id) const {
  auto it = inputs_.find(id);
  return it == inputs_.end() ? nullptr : &it->second;
}

ServiceInput GraphContext::fallback(const ServiceId& id, std::size_t feature_dim) {
  ServiceInput in;
  in.subgraph = graph::SubGraph::isolated(id);
  in.view = gnn::GraphView::from_subgraph(in.subgraph);
  in.features = Tensor({1, feature_dim});
  return in;
}

void GraphContext::insert(ServiceInput input) {
  const ServiceId id = input.subgraph.center;
  inputs_.insert_or_assign(id, std::move(input));
}

// --- joint head ----------------------------------------------------------------

struct JointHead::Tape {
  std::unique_ptr<nn::Tape> first, relu, second, norm;
};

JointHead::JointHead(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng, const std::string& prefix)
    : first_(in, hidden, rng, prefix + ".fc1"), second_(hidden, out, rng, prefix + ".fc2") {}

JointHead::~JointHead() = default;
JointHead::JointHead(JointHead&&) noexcept = default;

Tensor JointHead::run(const Tensor& x, std::unique_ptr<Tape>* tape) const {
  auto t = std::make_unique<Tape>();
  const bool keep = tape != nullptr;
  Tensor h = first_.run(x, nn::Mode::eval, 0, keep ? &t->first : nullptr);
  h = relu_.run(h, nn::Mode::eval, 0, keep ? &t->relu : nullptr);
  h = second_.run(h, nn::Mode::eval, 0, keep ? &t->second : nullptr);
  h = norm_.run(h, nn::Mode::eval, 0, keep ? &t->norm : nullptr);
  if (keep) *tape = std::move(t);
  return h;
}

Tensor JointHead::backward(const Tape& tape, const Tensor& upstream) {
  Tensor g = norm_.run_backward(*tape.norm, upstream);
  g = second_.run_backward(*tape.second, g);
  g = relu_.run_backward(*tape.relu, g);
  return first_.run_backward(*tape.first, g);
}

std::vector<nn::Parameter*> JointHead::parameters() {
  auto out = first_.parameters();
  for (auto* p : second_.parameters()) out.push_back(p);
  return out;
}

// --- triplet loss --------------------------------------------------------------

double triplet_loss(std::span<const double> a, std::span<const double> p, std::span<const double> n, double margin) {
  return std::max(euclidean_distance(a, p) - euclidean_distance(a, n) + margin, 0.0);
}

TripletGrad triplet_loss_grad(std::span<const double> a, std::span<const double> p, std::span<const double> n,
                              double margin) {
  if (a.size() != p.size() || a.size() != n.size()) throw ShapeError("triplet_loss: embedding widths differ");
  TripletGrad out;
  const std::size_t d = a.size();
  out.da.assign(d, 0.0);
  out.dp.assign(d, 0.0);
  out.dn.assign(d, 0.0);
  const double dap = euclidean_distance(a, p);
  const double dan = euclidean_distance(a, n);
  const double z = dap - dan + margin;
  if (z <= 0.0) return out;
  out.loss = z;
  // d|x - y| / dx = (x - y) / |x - y|, taken as 0 at x == y.
  for (std::size_t k = 0; k < d; ++k) {
    if (dap > 0.0) {
      const double g = (a[k] - p[k]) / dap;
      out.da[k] += g;
      out.dp[k] -= g;
    }
    if (dan > 0.0) {
      const double g = (a[k] - n[k]) / dan;
      out.da[k] -= g;
      out.dn[k] += g;
    }
  }
  return out;
}

// --- model ---------------------------------------------------------------------

Model::Model(ModelConfig config, text::TextVocabularies vocabs, GraphContext context)
    : config_((config.validate(), std::move(config))), context_(std::move(context)) {
  Rng rng(config_.seed);
  text_ = std::make_unique<text::TextEncoder>(config_.text, std::move(vocabs), rng, "text");
  const std::size_t d = config_.dim;
  if (uses_graph(config_.variant)) graph_ = std::make_unique<gnn::GraphEncoder>(config_.graph, rng, "graph");
  switch (config_.variant) {
    case Variant::BaselineText:
      head_ = std::make_unique<JointHead>(d, config_.head_hidden, d, rng, "head");
      break;
    case Variant::LiDAR:
      head_ = std::make_unique<JointHead>(d, config_.head_hidden, d, rng, "head");
      graph_head_ = std::make_unique<JointHead>(d, config_.head_hidden, d, rng, "graph_head");
      break;
    default:
      head_ = std::make_unique<JointHead>(2 * d, config_.head_hidden, d, rng, "head");
      break;
  }
  r_ = identity(d);
}

Model::~Model() = default;

void Model::set_alignment(Tensor r) {
  r.require_shape({config_.dim, config_.dim}, "alignment map");
  r.require_finite("alignment map");
  r_ = std::move(r);
}

void Model::set_threshold(double tau) {
  if (!std::isfinite(tau)) throw std::invalid_argument("threshold must be finite");
  tau_ = tau;
}

std::vector<nn::Parameter*> Model::parameters(Tower tower) {
  std::vector<nn::Parameter*> out;
  auto add = [&](std::vector<nn::Parameter*> ps) { out.insert(out.end(), ps.begin(), ps.end()); };
  const bool lidar = config_.variant == Variant::LiDAR;
  if (tower == Tower::Joint || tower == Tower::Text) {
    add(text_->parameters());
    add(head_->parameters());
  }
  if (graph_ && (tower == Tower::Graph || (tower == Tower::Joint))) {
    add(graph_->parameters());
    if (lidar) add(graph_head_->parameters());
  }
  return out;
}

std::map<std::string, const nn::Parameter*> Model::named_parameters() const {
  std::map<std::string, const nn::Parameter*> out;
  for (auto* p : const_cast<Model*>(this)->parameters(Tower::Joint)) {
    if (!out.emplace(p->name, p).second) throw std::logic_error("duplicate parameter name " + p->name);
  }
  return out;
}

void Model::snap_parameters() {
  for (auto* p : parameters(Tower::Joint)) nn::snap_to_f32(p->value);
}

const ServiceInput& Model::service_input(const ServiceId& id, bool allow_fallback, bool* fell_back,
                                         ServiceInput& scratch) const {
  if (const auto* in = context_.find(id)) {
    if (fell_back) *fell_back = false;
    return *in;
  }
  if (!allow_fallback) throw UnknownService(id);
  if (fell_back) *fell_back = true;
  scratch = GraphContext::fallback(id, config_.walk.embedding_dim);
  return scratch;
}

Tensor Model::text_row(const Incident& incident) const { return text_->embed(incident, nn::Mode::eval, 0, nullptr); }

Tensor Model::graph_row(const Incident& incident, bool allow_fallback, bool* fell_back) const {
  if (!graph_) throw VariantError(std::string(to_string(config_.variant)) + " has no graph tower");
  ServiceInput scratch;
  const auto& in = service_input(incident.owning_service, allow_fallback, fell_back, scratch);
  return graph_->encode(in.view, in.features, nullptr);
}

namespace {

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows()) throw ShapeError("concat_rows: row counts differ");
  Tensor out({a.rows(), a.cols() + b.cols()});
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto o = out.row(r);
    std::copy(a.row(r).begin(), a.row(r).end(), o.begin());
    std::copy(b.row(r).begin(), b.row(r).end(), o.begin() + static_cast<std::ptrdiff_t>(a.cols()));
  }
  return out;
}

Tensor as_row(const Tensor& v) { return v.reshaped({1, v.size()}); }

}  // namespace

Tensor Model::joint_embedding(const Incident& incident, bool allow_fallback, bool* fell_back) const {
  const Tensor s = as_row(text_row(incident));
  Tensor x;
  switch (config_.variant) {
    case Variant::LiDAR:
      throw VariantError("lidar checkpoints have no joint embedding; score pairs with the two towers");
    case Variant::BaselineText:
      if (fell_back) *fell_back = false;
      x = s;
      break;
    case Variant::Concatenation:
      x = concat_rows(s, as_row(graph_row(incident, allow_fallback, fell_back)));
      break;
    default:
      x = concat_rows(as_row(graph_row(incident, allow_fallback, fell_back)), procrustes::project(s, r_));
      break;
  }
  return head_->run(x, nullptr).reshaped({config_.dim});
}

std::vector<double> Model::scoring_vector(const Incident& incident, bool allow_fallback, bool* fell_back) const {
  if (config_.variant != Variant::LiDAR) return joint_embedding(incident, allow_fallback, fell_back).data();
  std::vector<double> out = head_->run(as_row(text_row(incident)), nullptr).data();
  const Tensor g = graph_head_->run(as_row(graph_row(incident, allow_fallback, fell_back)), nullptr);
  out.insert(out.end(), g.data().begin(), g.data().end());
  return out;
}

double Model::distance(std::span<const double> a, std::span<const double> b) const {
  if (a.size() != b.size()) throw ShapeError("distance: vector widths differ");
  if (config_.variant != Variant::LiDAR) return euclidean_distance(a, b);
  const std::size_t h = a.size() / 2;
  return 0.5 * euclidean_distance(a.first(h), b.first(h)) + 0.5 * euclidean_distance(a.subspan(h), b.subspan(h));
}

PairScore Model::score_pair(const Incident& a, const Incident& b) const {
  if (!tau_) throw std::logic_error("score_pair: the model has no tuned threshold");
  const auto va = scoring_vector(a);
  const auto vb = scoring_vector(b);
  PairScore s;
  s.distance = distance(va, vb);
  s.linked = s.distance < *tau_;
  return s;
}

struct BatchForward::Impl {
  Tower tower = Tower::Joint;
  std::vector<std::unique_ptr<text::TextEncoder::Tape>> text_tapes;
  std::vector<ServiceId> services;  // distinct services in the batch
  std::vector<std::size_t> service_of;  // row -> index into services
  std::vector<std::unique_ptr<gnn::GraphEncoder::Tape>> graph_tapes;
  std::unique_ptr<JointHead::Tape> head_tape;
};

BatchForward Model::forward_batch(const std::vector<const Incident*>& incidents, Tower tower, nn::Mode mode,
                                  std::uint64_t seed, const Tensor* fixed_r) {
  const bool lidar = config_.variant == Variant::LiDAR;
  if (lidar == (tower == Tower::Joint)) {
    throw VariantError(lidar ? "lidar trains its text and graph towers separately"
                             : "only lidar has separate text and graph towers");
  }
  if (incidents.empty()) throw std::invalid_argument("forward_batch: empty batch");
  const std::size_t n = incidents.size();
  const std::size_t d = config_.dim;
  const bool need_text = tower != Tower::Graph;
  const bool need_graph = tower == Tower::Graph || (tower == Tower::Joint && uses_graph(config_.variant));

  BatchForward out;
  out.incidents = incidents;
  out.impl = std::make_shared<BatchForward::Impl>();
  auto& impl = *out.impl;
  impl.tower = tower;

  if (need_text) {
    out.s = Tensor({n, d});
    impl.text_tapes.resize(n);
    std::exception_ptr failure;
    const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < count; ++i) {
      const auto k = static_cast<std::size_t>(i);
      try {
        const Tensor row = text_->embed(*incidents[k], mode, derive_seed(seed, k), &impl.text_tapes[k]);
        std::copy(row.data().begin(), row.data().end(), out.s.row(k).begin());
      } catch (...) {
#pragma omp critical
        if (!failure) failure = std::current_exception();
      }
    }
    if (failure) std::rethrow_exception(failure);
  }

  if (need_graph) {
    out.g = Tensor({n, d});
    std::map<ServiceId, std::size_t> index;
    impl.service_of.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      auto [it, fresh] = index.emplace(incidents[k]->owning_service, impl.services.size());
      if (fresh) impl.services.push_back(incidents[k]->owning_service);
      impl.service_of[k] = it->second;
    }
    impl.graph_tapes.resize(impl.services.size());
    std::vector<Tensor> rows(impl.services.size());
    for (std::size_t s = 0; s < impl.services.size(); ++s) {
      const auto* in = context_.find(impl.services[s]);
      if (!in) throw UnknownService(impl.services[s]);
      rows[s] = graph_->encode(in->view, in->features, &impl.graph_tapes[s]);
    }
    for (std::size_t k = 0; k < n; ++k) {
      const auto& r = rows[impl.service_of[k]];
      std::copy(r.data().begin(), r.data().end(), out.g.row(k).begin());
    }
  }

  Tensor x;
  const JointHead* head = head_.get();
  if (tower == Tower::Graph) {
    x = out.g;
    head = graph_head_.get();
  } else if (tower == Tower::Text || config_.variant == Variant::BaselineText) {
    x = out.s;
  } else if (config_.variant == Variant::Concatenation) {
    x = concat_rows(out.s, out.g);
  } else {
    out.r = fixed_r ? *fixed_r : procrustes::fit(out.s, out.g);
    x = concat_rows(out.g, procrustes::project(out.s, out.r));
  }
  out.embeddings = head->run(x, &impl.head_tape);
  return out;
}

void Model::backward_batch(const BatchForward& fwd, const Tensor& d_embeddings) {
  const auto& impl = *fwd.impl;
  const std::size_t n = fwd.incidents.size();
  const std::size_t d = config_.dim;
  d_embeddings.require_shape(fwd.embeddings.shape(), "embedding gradient");
  JointHead& head = impl.tower == Tower::Graph ? *graph_head_ : *head_;
  const Tensor dx = head.backward(*impl.head_tape, d_embeddings);

  Tensor ds, dg;
  auto slice = [&](std::size_t offset) {
    Tensor t({n, d});
    for (std::size_t r = 0; r < n; ++r)
      std::copy_n(dx.row(r).begin() + static_cast<std::ptrdiff_t>(offset), d, t.row(r).begin());
    return t;
  };
  if (impl.tower == Tower::Graph) {
    dg = dx;
  } else if (impl.tower == Tower::Text || config_.variant == Variant::BaselineText) {
    ds = dx;
  } else if (config_.variant == Variant::Concatenation) {
    ds = slice(0);
    dg = slice(d);
  } else {
    dg = slice(0);
    ds = kernels::matmul_nt(slice(d), fwd.r);  // R is a constant
  }

  if (!ds.empty()) {
    for (std::size_t k = 0; k < n; ++k) {
      Tensor row({d});
      std::copy(ds.row(k).begin(), ds.row(k).end(), row.data().begin());
      text_->backward(*impl.text_tapes[k], row);
    }
  }
  if (!dg.empty()) {
    std::vector<Tensor> per_service(impl.services.size(), Tensor({d}));
    for (std::size_t k = 0; k < n; ++k) {
      auto& acc = per_service[impl.service_of[k]];
      const auto g = dg.row(k);
      for (std::size_t c = 0; c < d; ++c) acc[c] += g[c];
    }
    for (std::size_t s = 0; s < impl.services.size(); ++s) {
      const auto* in = context_.find(impl.services[s]);
      graph_->backward(in->view, *impl.graph_tapes[s], per_service[s]);
    }
  }
}

void Model::fit_final_alignment(const std::vector<const Incident*>& incidents) {
  if (!uses_alignment(config_.variant)) return;
  if (incidents.empty()) throw std::invalid_argument("fit_final_alignment: no incidents");
  const std::size_t n = incidents.size();
  const std::size_t d = config_.dim;
  Tensor s({n, d});
  Tensor g({n, d});
  std::map<ServiceId, Tensor> graph_rows;
  for (const auto* inc : incidents)
    if (!graph_rows.contains(inc->owning_service)) graph_rows.emplace(inc->owning_service, graph_row(*inc));
  const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    const auto k = static_cast<std::size_t>(i);
    const Tensor row = text_row(*incidents[k]);
    std::copy(row.data().begin(), row.data().end(), s.row(k).begin());
    const auto& gr = graph_rows.at(incidents[k]->owning_service);
    std::copy(gr.data().begin(), gr.data().end(), g.row(k).begin());
  }
  r_ = procrustes::fit(s, g);
}

std::unique_ptr<Model> make_model(const ModelConfig& config, const std::vector<const Incident*>& training_incidents,
                                  const graph::ServiceGraph& graph) {
  ModelConfig c = config;
  c.sync();
  c.validate();
  auto vocabs = text::TextVocabularies::fit(training_incidents);
  GraphContext ctx;
  if (uses_graph(c.variant)) {
    ctx = GraphContext::build(graph, c.hops, c.walk, c.graph.directed, derive_seed(c.seed, 0x6e32));
  } else {
    ctx.set_graph(graph);
  }
  return std::make_unique<Model>(std::move(c), std::move(vocabs), std::move(ctx));
}

// --- training ------------------------------------------------------------------

namespace {

const char* tower_name(Tower t) {
  switch (t) {
    case Tower::Joint: return "joint";
    case Tower::Text: return "text";
    case Tower::Graph: return "graph";
  }
  return "joint";
}

const Incident& lookup(const IncidentMap& incidents, const IncidentId& id) {
  auto it = incidents.find(id);
  if (it == incidents.end()) throw DataError("triplet references unknown incident '" + id + "'");
  return it->second;
}

}  // namespace

TrainResult train(Model& model, const TrainConfig& config, const std::vector<Triplet>& triplets,
                  const IncidentMap& incidents, const std::function<void(const EpochLog&)>& on_epoch) {
  config.validate();
  if (triplets.empty()) throw std::invalid_argument("train: no triplets");
  const bool lidar = model.variant() == Variant::LiDAR;
  const std::vector<Tower> towers = lidar ? std::vector<Tower>{Tower::Text, Tower::Graph} : std::vector<Tower>{Tower::Joint};

  model.set_train_config(config);
  TrainResult result;
  bool first_epoch = true;
  for (Tower tower : towers) {
    nn::Optimizer opt(config.optimizer, model.parameters(tower));
    opt.zero_grad();
    std::vector<std::size_t> order(triplets.size());
    std::iota(order.begin(), order.end(), 0);
    // Epoch 0 measures the untrained loss without updating.
    for (std::size_t epoch = 0; epoch <= config.epochs; ++epoch) {
      const bool update = epoch > 0;
      Rng shuffle_rng(derive_seed(config.seed, static_cast<std::uint64_t>(tower), epoch));
      shuffle_rng.shuffle(order.begin(), order.end());
      double epoch_loss = 0.0;
      std::size_t batches = 0;
      for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
        const std::size_t end = std::min(order.size(), start + config.batch_size);
        // Distinct incidents of the batch, each embedded once (shared twins).
        std::map<IncidentId, std::size_t> slot;
        std::vector<const Incident*> members;
        std::vector<std::array<std::size_t, 3>> rows;
        for (std::size_t t = start; t < end; ++t) {
          const Triplet& tr = triplets[order[t]];
          std::array<std::size_t, 3> r{};
          const IncidentId* ids[3] = {&tr.anchor, &tr.positive, &tr.negative};
          for (int k = 0; k < 3; ++k) {
            auto [it, fresh] = slot.emplace(*ids[k], members.size());
            if (fresh) members.push_back(&lookup(incidents, *ids[k]));
            r[static_cast<std::size_t>(k)] = it->second;
          }
          rows.push_back(r);
        }
        const auto step_seed = derive_seed(config.seed, static_cast<std::uint64_t>(tower) * 1000003 + epoch, batches);
        const BatchForward fwd = model.forward_batch(members, tower, nn::Mode::train, step_seed);
        Tensor grad = Tensor::zeros_like(fwd.embeddings);
        const double scale = 1.0 / static_cast<double>(rows.size());
        double batch_loss = 0.0;
        for (const auto& r : rows) {
          const auto tg = triplet_loss_grad(fwd.embeddings.row(r[0]), fwd.embeddings.row(r[1]),
                                            fwd.embeddings.row(r[2]), config.margin);
          batch_loss += tg.loss;
          for (std::size_t c = 0; c < tg.da.size(); ++c) {
            grad.at(r[0], c) += scale * tg.da[c];
            grad.at(r[1], c) += scale * tg.dp[c];
            grad.at(r[2], c) += scale * tg.dn[c];
          }
        }
        if (!std::isfinite(batch_loss)) {
          throw NumericError("training diverged: non-finite loss in epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batches + 1) + " (" + tower_name(tower) + " tower)");
        }
        if (update) {
          model.backward_batch(fwd, grad);
          opt.step();
          opt.zero_grad();
          for (auto* p : model.parameters(tower)) {
            if (!p->value.all_finite()) {
              throw NumericError("training diverged: parameter " + p->name + " became non-finite in epoch " +
                                 std::to_string(epoch));
            }
          }
        }
        epoch_loss += batch_loss;
        ++batches;
      }
      EpochLog log{epoch, epoch_loss / static_cast<double>(triplets.size()), batches, tower_name(tower)};
      if (first_epoch) {
        result.initial_loss = log.mean_loss;
        first_epoch = false;
      }
      if (tower == towers.front() && update) result.final_loss = log.mean_loss;
      result.log.push_back(log);
      model.training_log().push_back(log);
      if (on_epoch) on_epoch(log);
    }
  }

  model.snap_parameters();
  std::set<IncidentId> seen;
  std::vector<const Incident*> all;
  for (const auto& tr : triplets)
    for (const auto* id : {&tr.anchor, &tr.positive, &tr.negative})
      if (seen.insert(*id).second) all.push_back(&lookup(incidents, *id));
  model.fit_final_alignment(all);
  return result;
}

double tune_threshold(const std::vector<double>& distances, const std::vector<bool>& labels) {
  if (distances.size() != labels.size()) throw std::invalid_argument("tune_threshold: length mismatch");
  const auto positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), true));
  if (positives == 0 || positives == labels.size()) {
    throw std::invalid_argument("tune_threshold: validation pairs must contain both classes");
  }
  for (double d : distances)
    if (!std::isfinite(d)) throw NumericError("tune_threshold: non-finite distance");

  std::vector<std::size_t> order(distances.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return distances[a] < distances[b]; });

  // Sweep: after consuming every pair with distance <= v, the threshold just
  // above v predicts exactly those as linked.
  double best_f1 = -1.0;
  double best_tau = 0.0;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double v = distances[order[i]];
    while (i < order.size() && distances[order[i]] == v) {
      (labels[order[i]] ? tp : fp) += 1;
      ++i;
    }
    const double tau = i < order.size() ? 0.5 * (v + distances[order[i]]) : v + 1e-6 * std::max(1.0, std::abs(v));
    const std::size_t fn = positives - tp;
    const double f1 = 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
    if (f1 > best_f1) {
      best_f1 = f1;
      best_tau = tau;
    }
  }
  return best_tau;
}

// --- checkpoint ----------------------------------------------------------------

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(const unsigned char* b) {
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void append_f32(std::string& out, const Tensor& t) {
  for (double v : t.data()) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((bits >> (8 * k)) & 0xffu));
  }
}

Tensor read_f32(const std::string& payload, std::size_t offset, Shape shape, std::size_t length) {
  Tensor t(std::move(shape));
  if (length != t.size() * 4) throw CheckpointError("tensor byte length does not match its shape");
  if (offset + length > payload.size()) throw CheckpointError("checkpoint truncated: tensor payload out of range");
  const auto* b = reinterpret_cast<const unsigned char*>(payload.data() + offset);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(std::bit_cast<float>(get_u32(b + 4 * i)));
  return t;
}

json matrix_json(const Tensor& m) {
  json rows = json::array();
  for (std::size_t r = 0; r < m.rows(); ++r) rows.push_back(std::vector<double>(m.row(r).begin(), m.row(r).end()));
  return rows;
}

std::string features_name(const ServiceId& id) { return "features/" + id; }

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  std::string payload;
  json directory = json::array();
  auto add = [&](const std::string& name, const Tensor& t) {
    const std::size_t offset = payload.size();
    append_f32(payload, t);
    directory.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"length", payload.size() - offset}});
  };
  for (const auto& [name, p] : model.named_parameters()) add(name, p->value);
  for (const auto& [id, in] : model.context().inputs()) add(features_name(id), in.features);

  json log = json::array();
  for (const auto& e : model.training_log())
    log.push_back({{"epoch", e.epoch}, {"tower", e.tower}, {"mean_loss", e.mean_loss}, {"batches", e.batches}});

  json header{{"version", kCheckpointVersion},
              {"variant", std::string(to_string(model.variant()))},
              {"config",
               {{"model", to_json(model.config())},
                {"train", model.train_config() ? to_json(*model.train_config()) : json(nullptr)}}},
              {"vocabularies", model.vocabularies().to_json()},
              {"graph", model.context().graph().to_json()},
              {"tensors", directory},
              {"R", matrix_json(model.alignment())},
              {"tau", model.threshold() ? json(*model.threshold()) : json(nullptr)},
              {"training_log", log}};
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  put_u32(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!os) throw std::runtime_error("failed writing checkpoint " + path.string());
}

namespace {

struct RawCheckpoint {
  json header;
  std::string payload;
};

RawCheckpoint read_raw(const std::filesystem::path& path, bool want_payload) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[8] = {};
  is.read(magic, 8);
  if (is.gcount() != 8) throw CheckpointError("checkpoint truncated: missing magic");
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0) throw CheckpointError("not a DiLink checkpoint (bad magic)");
  unsigned char len_bytes[4];
  is.read(reinterpret_cast<char*>(len_bytes), 4);
  if (is.gcount() != 4) throw CheckpointError("checkpoint truncated: missing header length");
  const std::uint32_t len = get_u32(len_bytes);
  std::string text(len, '\0');
  is.read(text.data(), len);
  if (static_cast<std::uint32_t>(is.gcount()) != len) throw CheckpointError("checkpoint truncated: short header");
  RawCheckpoint raw;
  try {
    raw.header = json::parse(text);
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("unsupported checkpoint version: header is not valid JSON (") + e.what() + ")");
  }
  if (!raw.header.is_object() || !raw.header.contains("version") || !raw.header["version"].is_number_integer() ||
      raw.header["version"].get<int>() != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  if (want_payload) raw.payload.assign(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
  return raw;
}

}  // namespace

json read_checkpoint_header(const std::filesystem::path& path) { return read_raw(path, false).header; }

std::unique_ptr<Model> load_checkpoint(const std::filesystem::path& path) {
  RawCheckpoint raw = read_raw(path, true);
  const json& h = raw.header;
  try {
    ModelConfig config = model_config_from_json(h.at("config").at("model"));
    auto vocabs = text::TextVocabularies::from_json(h.at("vocabularies"));
    auto graph = graph::ServiceGraph::from_json(h.at("graph"));

    std::map<std::string, Tensor> tensors;
    for (const auto& entry : h.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      tensors.emplace(name, read_f32(raw.payload, entry.at("offset").get<std::size_t>(),
                                     entry.at("shape").get<Shape>(), entry.at("length").get<std::size_t>()));
    }

    GraphContext ctx;
    ctx.set_graph(graph);
    if (uses_graph(config.variant)) {
      for (const auto& [id, _] : graph.nodes()) {
        auto it = tensors.find(features_name(id));
        if (it == tensors.end()) throw CheckpointError("checkpoint lacks node features for service '" + id + "'");
        ServiceInput in;
        in.subgraph = graph::extract_subgraph(graph, id, config.hops);
        in.view = gnn::GraphView::from_subgraph(in.subgraph, config.graph.directed);
        if (it->second.shape() != Shape{in.subgraph.size(), config.walk.embedding_dim}) {
          throw CheckpointError("node features for '" + id + "' do not match the stored graph");
        }
        in.features = std::move(it->second);
        ctx.insert(std::move(in));
      }
    }

    auto model = std::make_unique<Model>(std::move(config), std::move(vocabs), std::move(ctx));
    for (auto* p : model->parameters(Tower::Joint)) {
      auto it = tensors.find(p->name);
      if (it == tensors.end()) throw CheckpointError("checkpoint lacks tensor " + p->name);
      if (it->second.shape() != p->value.shape()) {
        throw CheckpointError("tensor " + p->name + " has shape " + shape_to_string(it->second.shape()) +
                              ", model expects " + shape_to_string(p->value.shape()));
      }
      p->value = it->second;
    }
    const auto& rj = h.at("R");
    const std::size_t d = model->config().dim;
    Tensor r({d, d});
    if (rj.size() != d) throw CheckpointError("alignment map has wrong size");
    for (std::size_t i = 0; i < d; ++i) {
      const auto row = rj.at(i).get<std::vector<double>>();
      if (row.size() != d) throw CheckpointError("alignment map has wrong size");
      std::copy(row.begin(), row.end(), r.row(i).begin());
    }
    model->set_alignment(std::move(r));
    if (!h.at("config").at("train").is_null()) model->set_train_config(train_config_from_json(h["config"]["train"]));
    if (!h.at("tau").is_null()) model->set_threshold(h.at("tau").get<double>());
    for (const auto& e : h.value("training_log", json::array())) {
      model->training_log().push_back({e.at("epoch").get<std::size_t>(), e.at("mean_loss").get<double>(),
                                       e.at("batches").get<std::size_t>(), e.at("tower").get<std::string>()});
    }
    return model;
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
  }
}

}  // namespace dilink::model
