#include "dilink/text.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>

#include <nlohmann/json.hpp>

namespace dilink::text {

using nlohmann::json;

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 128 && std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

// --- Vocabulary --------------------------------------------------------------

Vocabulary Vocabulary::fit(const std::vector<std::string>& corpus) {
  if (corpus.empty()) throw std::invalid_argument("fit_vocabulary: empty corpus");
  std::map<std::string, std::size_t> df;
  for (const auto& doc : corpus) {
    auto toks = tokenize(doc);
    std::set<std::string> unique(toks.begin(), toks.end());
    for (const auto& t : unique) ++df[t];
  }
  Vocabulary v;
  v.document_count_ = corpus.size();
  const double n = static_cast<double>(corpus.size());
  for (const auto& [tok, count] : df) {
    v.tokens_.push_back(tok);
    v.idf_.push_back(std::log((1.0 + n) / (1.0 + static_cast<double>(count))) + 1.0);
  }
  v.rebuild_index();
  return v;
}

void Vocabulary::rebuild_index() {
  index_.clear();
  for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], i);
  max_idf_ = idf_.empty() ? 1.0 : *std::max_element(idf_.begin(), idf_.end());
}

std::size_t Vocabulary::index_of(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? oov_index() : it->second;
}

double Vocabulary::idf(std::size_t index) const { return index < idf_.size() ? idf_[index] : max_idf_; }

SparseVector Vocabulary::tfidf(std::string_view text) const {
  std::map<std::size_t, double> counts;
  for (const auto& tok : tokenize(text)) counts[index_of(tok)] += 1.0;
  SparseVector out;
  double norm = 0.0;
  for (const auto& [idx, c] : counts) {
    const double w = c * idf(idx);
    out.emplace_back(idx, w);
    norm += w * w;
  }
  norm = std::sqrt(norm);
  for (auto& [_, w] : out) w /= norm;
  return out;
}

json Vocabulary::to_json() const {
  return json{{"tokens", tokens_}, {"idf", idf_}, {"document_count", document_count_}};
}

Vocabulary Vocabulary::from_json(const json& j) {
  Vocabulary v;
  v.tokens_ = j.at("tokens").get<std::vector<std::string>>();
  v.idf_ = j.at("idf").get<std::vector<double>>();
  v.document_count_ = j.at("document_count").get<std::size_t>();
  if (v.tokens_.size() != v.idf_.size()) throw DataError("vocabulary: token/idf length mismatch");
  v.rebuild_index();
  return v;
}

// --- Config ------------------------------------------------------------------

void TextTowerConfig::validate() const {
  for (std::size_t d : {title_dim, topology_dim, monitor_dim, failure_dim, team_dim, output_dim, lstm_layers,
                        lstm_hidden, max_sequence_len}) {
    if (d == 0) throw std::invalid_argument("text tower dimensions must be positive");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("text dropout must be in [0, 1)");
}

json to_json(const TextTowerConfig& c) {
  return json{{"title_dim", c.title_dim},       {"topology_dim", c.topology_dim}, {"monitor_dim", c.monitor_dim},
              {"failure_dim", c.failure_dim},   {"team_dim", c.team_dim},         {"output_dim", c.output_dim},
              {"lstm_layers", c.lstm_layers},   {"lstm_hidden", c.lstm_hidden},   {"dropout", c.dropout},
              {"max_sequence_len", c.max_sequence_len}};
}

TextTowerConfig text_config_from_json(const json& j) {
  TextTowerConfig c;
  c.title_dim = j.value("title_dim", c.title_dim);
  c.topology_dim = j.value("topology_dim", c.topology_dim);
  c.monitor_dim = j.value("monitor_dim", c.monitor_dim);
  c.failure_dim = j.value("failure_dim", c.failure_dim);
  c.team_dim = j.value("team_dim", c.team_dim);
  c.output_dim = j.value("output_dim", c.output_dim);
  c.lstm_layers = j.value("lstm_layers", c.lstm_layers);
  c.lstm_hidden = j.value("lstm_hidden", c.lstm_hidden);
  c.dropout = j.value("dropout", c.dropout);
  c.max_sequence_len = j.value("max_sequence_len", c.max_sequence_len);
  c.validate();
  return c;
}

// --- SequenceTower -------------------------------------------------------------

namespace {
constexpr std::size_t kPad = static_cast<std::size_t>(-1);
}

SequenceTower::SequenceTower(std::string name, const Vocabulary& vocab, std::size_t embed_dim,
                             const TextTowerConfig& config, Rng& rng)
    : vocab_(&vocab),
      embed_dim_(embed_dim),
      hidden_(config.lstm_hidden),
      max_len_(config.max_sequence_len),
      embedding_(name + ".embedding", Tensor({vocab.size() + 1, embed_dim})),
      dropout_(config.dropout) {
  nn::glorot_uniform(embedding_.value, vocab.size() + 1, embed_dim, rng);
  std::size_t in = embed_dim;
  for (std::size_t l = 0; l < config.lstm_layers; ++l) {
    const bool last = l + 1 == config.lstm_layers;
    lstms_.emplace_back(in, hidden_, rng, name + ".lstm" + std::to_string(l), !last);
    in = hidden_;
  }
}

SequenceTower::~SequenceTower() = default;
SequenceTower::SequenceTower(SequenceTower&&) noexcept = default;

namespace {

// Token positions and tf-idf weights after truncation and pre-padding.
void layout_sequence(const Vocabulary& vocab, std::string_view text, std::size_t max_len,
                     std::vector<std::size_t>& indices, std::vector<double>& weights) {
  auto toks = tokenize(text);
  if (toks.size() > max_len) toks.resize(max_len);
  const SparseVector tfidf = vocab.tfidf(text);
  indices.assign(max_len, kPad);
  weights.assign(max_len, 0.0);
  const std::size_t offset = max_len - toks.size();
  for (std::size_t k = 0; k < toks.size(); ++k) {
    const std::size_t idx = vocab.index_of(toks[k]);
    auto it = std::lower_bound(tfidf.begin(), tfidf.end(), idx,
                               [](const auto& e, std::size_t v) { return e.first < v; });
    indices[offset + k] = idx;
    weights[offset + k] = it->second;
  }
}

}  // namespace

Tensor SequenceTower::sequence_input(std::string_view text) const {
  std::vector<std::size_t> idx;
  std::vector<double> w;
  layout_sequence(*vocab_, text, max_len_, idx, w);
  Tensor x({max_len_, embed_dim_});
  for (std::size_t t = 0; t < max_len_; ++t) {
    if (idx[t] == kPad) continue;
    const auto row = embedding_.value.row(idx[t]);
    auto out = x.row(t);
    for (std::size_t k = 0; k < embed_dim_; ++k) out[k] = w[t] * row[k];
  }
  return x;
}

Tensor SequenceTower::encode(std::string_view text, nn::Mode mode, std::uint64_t seed,
                             std::unique_ptr<Tape>* tape) const {
  auto tp = std::make_unique<Tape>();
  layout_sequence(*vocab_, text, max_len_, tp->indices, tp->weights);
  Tensor h = sequence_input(text);
  tp->lstm_tapes.resize(lstms_.size());
  for (std::size_t l = 0; l < lstms_.size(); ++l) {
    h = lstms_[l].run(h, mode, seed, tape ? &tp->lstm_tapes[l] : nullptr);
  }
  h = dropout_.run(h, mode, derive_seed(seed, 0xd0), tape ? &tp->dropout_tape : nullptr);
  if (tape) *tape = std::move(tp);
  return h;
}

void SequenceTower::backward(const Tape& tape, const Tensor& upstream) {
  Tensor g = const_cast<nn::Dropout&>(dropout_).run_backward(*tape.dropout_tape, upstream);
  for (std::size_t l = lstms_.size(); l-- > 0;) g = lstms_[l].run_backward(*tape.lstm_tapes[l], g);
  for (std::size_t t = 0; t < max_len_; ++t) {
    if (tape.indices[t] == kPad) continue;
    auto grow = embedding_.grad.row(tape.indices[t]);
    const auto gx = g.row(t);
    for (std::size_t k = 0; k < embed_dim_; ++k) grow[k] += tape.weights[t] * gx[k];
  }
}

std::vector<nn::Parameter*> SequenceTower::parameters() {
  std::vector<nn::Parameter*> out{&embedding_};
  for (auto& l : lstms_)
    for (auto* p : l.parameters()) out.push_back(p);
  return out;
}

// --- CategoricalTower ----------------------------------------------------------

CategoricalTower::CategoricalTower(std::string name, const Vocabulary& vocab, std::size_t dim, Rng& rng)
    : vocab_(&vocab), dense_(vocab.size() + 1, dim, rng, std::move(name)) {}

CategoricalTower::~CategoricalTower() = default;
CategoricalTower::CategoricalTower(CategoricalTower&&) noexcept = default;

Tensor CategoricalTower::encode(std::string_view value, std::unique_ptr<Tape>* tape) const {
  const SparseVector x = vocab_->tfidf(value);
  const std::size_t dim = dense_.out_dim();
  Tensor pre({dim});
  const auto& w = dense_.weight().value;
  for (std::size_t o = 0; o < dim; ++o) {
    double s = dense_.has_bias() ? dense_.bias().value[o] : 0.0;
    for (const auto& [idx, v] : x) s += w.at(o, idx) * v;
    pre[o] = s;
  }
  Tensor y = pre;
  for (auto& v : y.data()) v = std::max(v, 0.0);
  if (tape) {
    auto tp = std::make_unique<Tape>();
    tp->input = x;
    tp->pre_activation = std::move(pre);
    *tape = std::move(tp);
  }
  return y;
}

void CategoricalTower::backward(const Tape& tape, const Tensor& upstream) {
  const std::size_t dim = dense_.out_dim();
  upstream.require_shape({dim}, "categorical tower upstream");
  auto& gw = dense_.weight().grad;
  for (std::size_t o = 0; o < dim; ++o) {
    if (tape.pre_activation[o] <= 0.0) continue;
    const double g = upstream[o];
    if (dense_.has_bias()) dense_.bias().grad[o] += g;
    for (const auto& [idx, v] : tape.input) gw.at(o, idx) += g * v;
  }
}

// --- TextEncoder ---------------------------------------------------------------

TextVocabularies TextVocabularies::fit(const std::vector<const Incident*>& corpus) {
  std::vector<std::string> title, topo, mon, fail, team;
  for (const auto* inc : corpus) {
    title.push_back(inc->title);
    topo.push_back(inc->topology);
    mon.push_back(inc->monitor_id);
    fail.push_back(inc->failure_type);
    team.push_back(inc->owning_service);
  }
  return {Vocabulary::fit(title), Vocabulary::fit(topo), Vocabulary::fit(mon), Vocabulary::fit(fail),
          Vocabulary::fit(team)};
}

json TextVocabularies::to_json() const {
  return json{{"title", title.to_json()},
              {"topology", topology.to_json()},
              {"monitor", monitor.to_json()},
              {"failure", failure.to_json()},
              {"team", team.to_json()}};
}

TextVocabularies TextVocabularies::from_json(const json& j) {
  return {Vocabulary::from_json(j.at("title")), Vocabulary::from_json(j.at("topology")),
          Vocabulary::from_json(j.at("monitor")), Vocabulary::from_json(j.at("failure")),
          Vocabulary::from_json(j.at("team"))};
}

TextEncoder::TextEncoder(TextTowerConfig config, TextVocabularies vocabs, Rng& rng, const std::string& prefix)
    : config_((config.validate(), config)),
      vocabs_(std::make_unique<TextVocabularies>(std::move(vocabs))),
      title_(prefix + ".title", vocabs_->title, config_.title_dim, config_, rng),
      topology_(prefix + ".topology", vocabs_->topology, config_.topology_dim, config_, rng),
      monitor_(prefix + ".monitor", vocabs_->monitor, config_.monitor_dim, rng),
      failure_(prefix + ".failure", vocabs_->failure, config_.failure_dim, rng),
      team_(prefix + ".team", vocabs_->team, config_.team_dim, rng),
      projection_(config_.concat_dim(), config_.output_dim, rng, prefix + ".projection") {}

TextEncoder::~TextEncoder() = default;

Tensor TextEncoder::embed(const Incident& incident, nn::Mode mode, std::uint64_t seed,
                          std::unique_ptr<Tape>* tape) const {
  auto tp = std::make_unique<Tape>();
  const bool keep = tape != nullptr;
  const Tensor parts[] = {
      title_.encode(incident.title, mode, derive_seed(seed, 1), keep ? &tp->title : nullptr),
      topology_.encode(incident.topology, mode, derive_seed(seed, 2), keep ? &tp->topology : nullptr),
      monitor_.encode(incident.monitor_id, keep ? &tp->monitor : nullptr),
      failure_.encode(incident.failure_type, keep ? &tp->failure : nullptr),
      team_.encode(incident.owning_service, keep ? &tp->team : nullptr),
  };
  std::vector<double> concat;
  concat.reserve(config_.concat_dim());
  for (const auto& p : parts) concat.insert(concat.end(), p.data().begin(), p.data().end());
  if (concat.size() != projection_.in_dim()) {
    throw ShapeError("text concat width " + std::to_string(concat.size()) + " != projection input " +
                     std::to_string(projection_.in_dim()));
  }
  Tensor out = projection_.run(Tensor::vector(std::move(concat)), mode, 0, keep ? &tp->projection : nullptr);
  if (keep) *tape = std::move(tp);
  return out;
}

void TextEncoder::backward(const Tape& tape, const Tensor& upstream) {
  const Tensor g = projection_.run_backward(*tape.projection, upstream);
  std::size_t off = 0;
  auto slice = [&](std::size_t n) {
    Tensor s({n});
    std::copy_n(g.data().begin() + static_cast<std::ptrdiff_t>(off), n, s.data().begin());
    off += n;
    return s;
  };
  title_.backward(*tape.title, slice(title_.output_dim()));
  topology_.backward(*tape.topology, slice(topology_.output_dim()));
  monitor_.backward(*tape.monitor, slice(monitor_.output_dim()));
  failure_.backward(*tape.failure, slice(failure_.output_dim()));
  team_.backward(*tape.team, slice(team_.output_dim()));
}

std::vector<nn::Parameter*> TextEncoder::parameters() {
  std::vector<nn::Parameter*> out;
  for (auto* p : title_.parameters()) out.push_back(p);
  for (auto* p : topology_.parameters()) out.push_back(p);
  for (auto* p : monitor_.parameters()) out.push_back(p);
  for (auto* p : failure_.parameters()) out.push_back(p);
  for (auto* p : team_.parameters()) out.push_back(p);
  for (auto* p : projection_.parameters()) out.push_back(p);
  return out;
}

}  // namespace dilink::text
