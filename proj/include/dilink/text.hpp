#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dilink/incident.hpp"
#include "dilink/nn.hpp"

namespace dilink::text {

/// Lowercased runs of ASCII letters and digits.
std::vector<std::string> tokenize(std::string_view text);

/// Sparse (index, weight) vector.
using SparseVector = std::vector<std::pair<std::size_t, double>>;

/// Token index with smoothed idf: ln((1 + n) / (1 + df)) + 1. Tokens are
/// indexed in lexicographic order; index size() is the out-of-vocabulary slot.
class Vocabulary {
 public:
  Vocabulary() = default;

  static Vocabulary fit(const std::vector<std::string>& corpus);

  std::size_t size() const { return tokens_.size(); }
  std::size_t oov_index() const { return tokens_.size(); }
  std::size_t document_count() const { return document_count_; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::size_t index_of(std::string_view token) const;
  /// idf of an index; the OOV slot uses the maximum idf.
  double idf(std::size_t index) const;
  double idf(std::string_view token) const { return idf(index_of(token)); }

  /// tf-idf weights (raw count x idf, L2-normalized) keyed by token index.
  SparseVector tfidf(std::string_view text) const;

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.tokens_ == b.tokens_ && a.idf_ == b.idf_ && a.document_count_ == b.document_count_;
  }

 private:
  void rebuild_index();

  std::vector<std::string> tokens_;
  std::vector<double> idf_;
  double max_idf_ = 1.0;
  std::size_t document_count_ = 0;
  std::unordered_map<std::string, std::size_t> index_;
};

struct TextTowerConfig {
  std::size_t title_dim = 25;     // title token embedding width
  std::size_t topology_dim = 25;  // topology token embedding width
  std::size_t monitor_dim = 25;
  std::size_t failure_dim = 25;
  std::size_t team_dim = 25;
  std::size_t output_dim = 32;  // shared text/graph dimension
  std::size_t lstm_layers = 2;
  std::size_t lstm_hidden = 16;
  double dropout = 0.3;
  std::size_t max_sequence_len = 48;

  void validate() const;
  /// Width of the concatenated tower outputs before projection.
  std::size_t concat_dim() const { return 2 * lstm_hidden + monitor_dim + failure_dim + team_dim; }
};

nlohmann::json to_json(const TextTowerConfig& c);
TextTowerConfig text_config_from_json(const nlohmann::json& j);

/// Token sequence encoder: tf-idf-scaled learned token rows, pre-padded with
/// zero rows to max_sequence_len, through stacked LSTMs and dropout. Returns
/// the final hidden state.
class SequenceTower {
 public:
  struct Tape;

  SequenceTower(std::string name, const Vocabulary& vocab, std::size_t embed_dim, const TextTowerConfig& config,
                Rng& rng);
  ~SequenceTower();
  SequenceTower(SequenceTower&&) noexcept;

  /// The [max_sequence_len x embed_dim] LSTM input for `text`.
  Tensor sequence_input(std::string_view text) const;

  Tensor encode(std::string_view text, nn::Mode mode, std::uint64_t seed, std::unique_ptr<Tape>* tape) const;
  void backward(const Tape& tape, const Tensor& upstream);

  std::vector<nn::Parameter*> parameters();
  nn::Parameter& embedding() { return embedding_; }
  std::vector<nn::Lstm>& lstms() { return lstms_; }
  std::size_t output_dim() const { return hidden_; }

 private:
  const Vocabulary* vocab_;
  std::size_t embed_dim_;
  std::size_t hidden_;
  std::size_t max_len_;
  nn::Parameter embedding_;  // [(|V| + 1) x embed_dim]
  std::vector<nn::Lstm> lstms_;
  nn::Dropout dropout_;
};

/// Categorical feature: sparse tf-idf of the value -> linear -> ReLU.
class CategoricalTower {
 public:
  struct Tape;

  CategoricalTower(std::string name, const Vocabulary& vocab, std::size_t dim, Rng& rng);
  ~CategoricalTower();
  CategoricalTower(CategoricalTower&&) noexcept;

  Tensor encode(std::string_view value, std::unique_ptr<Tape>* tape) const;
  void backward(const Tape& tape, const Tensor& upstream);

  std::vector<nn::Parameter*> parameters() { return dense_.parameters(); }
  nn::Linear& dense() { return dense_; }
  std::size_t output_dim() const { return dense_.out_dim(); }

 private:
  const Vocabulary* vocab_;
  nn::Linear dense_;  // input width |V| + 1
};

struct TextVocabularies {
  Vocabulary title;
  Vocabulary topology;
  Vocabulary monitor;
  Vocabulary failure;
  Vocabulary team;

  static TextVocabularies fit(const std::vector<const Incident*>& corpus);
  nlohmann::json to_json() const;
  static TextVocabularies from_json(const nlohmann::json& j);
};

/// All five towers plus the projection to the shared dimension. Produces one
/// row of the text embedding matrix per incident.
class TextEncoder {
 public:
  struct Tape;

  TextEncoder(TextTowerConfig config, TextVocabularies vocabs, Rng& rng, const std::string& prefix = "text");
  ~TextEncoder();
  TextEncoder(const TextEncoder&) = delete;
  TextEncoder& operator=(const TextEncoder&) = delete;

  Tensor embed(const Incident& incident, nn::Mode mode, std::uint64_t seed, std::unique_ptr<Tape>* tape) const;
  void backward(const Tape& tape, const Tensor& upstream);

  std::vector<nn::Parameter*> parameters();
  const TextTowerConfig& config() const { return config_; }
  const TextVocabularies& vocabularies() const { return *vocabs_; }
  std::size_t output_dim() const { return config_.output_dim; }

  SequenceTower& title() { return title_; }
  SequenceTower& topology() { return topology_; }
  CategoricalTower& monitor() { return monitor_; }
  CategoricalTower& failure() { return failure_; }
  CategoricalTower& team() { return team_; }
  nn::Linear& projection() { return projection_; }

 private:
  TextTowerConfig config_;
  std::unique_ptr<TextVocabularies> vocabs_;  // stable address for the towers
  SequenceTower title_;
  SequenceTower topology_;
  CategoricalTower monitor_;
  CategoricalTower failure_;
  CategoricalTower team_;
  nn::Linear projection_;
};

struct SequenceTower::Tape {
  // Token index per timestep (SIZE_MAX = padding) and its tf-idf weight.
  std::vector<std::size_t> indices;
  std::vector<double> weights;
  std::vector<std::unique_ptr<nn::Tape>> lstm_tapes;
  std::unique_ptr<nn::Tape> dropout_tape;
};
struct CategoricalTower::Tape {
  SparseVector input;
  Tensor pre_activation;
};
struct TextEncoder::Tape {
  std::unique_ptr<SequenceTower::Tape> title;
  std::unique_ptr<SequenceTower::Tape> topology;
  std::unique_ptr<CategoricalTower::Tape> monitor;
  std::unique_ptr<CategoricalTower::Tape> failure;
  std::unique_ptr<CategoricalTower::Tape> team;
  std::unique_ptr<nn::Tape> projection;
};

}  // namespace dilink::text
