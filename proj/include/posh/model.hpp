#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "posh/corpus.hpp"

namespace posh::model {

struct ModelConfig {
  int hidden_size = 512;
  int n_heads = 8;
  int n_layers = 4;
  int ffn_dim = 2048;
  int vocab_size = 32768;
  int context_len = 512;
  double dropout_rate = 0.1;

  int head_dim() const { return hidden_size / n_heads; }
  void validate() const;  // throws std::invalid_argument

  // mini, xs, xxs, small
  static ModelConfig preset(const std::string& name);
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
  bool operator==(const ModelConfig&) const = default;
};

enum class BiasKind { none, recency, tree_planted };

std::string to_string(BiasKind k);
BiasKind bias_kind_from_string(const std::string& s);

struct AttentionBiasMode {
  BiasKind kind = BiasKind::none;
  double decay_base = 0.6;           // recency: r
  bool recency_before_scale = false;  // add the bias before the 1/sqrt(d) scaling
  double weight = 1.0;               // tree-planted: lambda
  int supervised_heads = 1;          // tree-planted: heads 0..k-1 of every layer

  static AttentionBiasMode none() { return {}; }
  static AttentionBiasMode recency(double r) {
    AttentionBiasMode m;
    m.kind = BiasKind::recency;
    m.decay_base = r;
    return m;
  }
  static AttentionBiasMode tree_planted(double lambda, int heads = 1) {
    AttentionBiasMode m;
    m.kind = BiasKind::tree_planted;
    m.weight = lambda;
    m.supervised_heads = heads;
    return m;
  }
  void validate(int n_heads) const;
};

// Additive recency bias for the i-th query (1-based): r^t * (-(i-1), ..., -1, 0).
std::vector<double> recency_bias(int i, double r, double t);

// Symmetric shortest-path distances between the words of one parse.
struct TreeDistanceMatrix {
  int n = 0;
  std::vector<int> d;  // row-major n*n
  int at(int i, int j) const { return d[static_cast<std::size_t>(i) * n + j]; }
};

TreeDistanceMatrix tree_distances_from_parse(const corpus::SentenceRecord& s);
TreeDistanceMatrix tree_distances_from_heads(const std::vector<int>& heads);  // 1-based heads, 0 = root

// Target distribution of one query row: proportional to exp(-d(i, j)) over
// keys j <= i that belong to a word; zero elsewhere. Empty when row i has no word.
std::vector<double> tree_target_row(const TreeDistanceMatrix& tree,
                                    const std::vector<int>& word_of_position, int i);

// One training or scoring sequence. word_of_position and tree are needed for
// tree-planted supervision; -1 marks positions without a word (BOS, EOS).
struct Sequence {
  std::vector<int> ids;
  std::vector<int> word_of_position;
  const TreeDistanceMatrix* tree = nullptr;
  // Positions whose next-token prediction counts toward the LM loss; empty = all.
  std::vector<char> predict;
};

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
struct LayerWeights {
  Mat<T> ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_1, b_1, w_2, b_2;
};

template <typename T>
struct Weights {
  Mat<T> tok_emb;  // V x H, tied with the output projection
  Mat<T> pos_emb;  // C x H
  std::vector<LayerWeights<T>> layers;
  Mat<T> lnf_g, lnf_b;

  // Visits every tensor in a fixed order with its name.
  void for_each(const std::function<void(const std::string&, Mat<T>&)>& fn);
  void for_each(const std::function<void(const std::string&, const Mat<T>&)>& fn) const;
  std::size_t parameter_count() const;
  Weights zeros_like() const;
  void set_zero();
};

// Given the two parameter sets in the same traversal order.
template <typename T>
void for_each_pair(Weights<T>& a, Weights<T>& b,
                   const std::function<void(const std::string&, Mat<T>&, Mat<T>&)>& fn);

template <typename T>
struct ForwardResult {
  Mat<T> logits;  // (sum of lengths) x V, sequences stacked
  std::vector<int> offsets;  // first row of each sequence
  double lm_loss = 0.0;      // mean NLL over predicted positions (nats/token)
  double tree_loss = 0.0;    // mean KL over supervised (head, query) rows
  double total_loss = 0.0;   // lm_loss + lambda * tree_loss
  std::size_t n_predictions = 0;
  std::size_t n_tree_rows = 0;
  // attention[layer][sequence][head] is L x L, rows over keys <= query
  std::vector<std::vector<std::vector<Mat<T>>>> attention;
};

struct RunOptions {
  double epoch = 0.0;          // t in r^t
  bool train = false;          // enables dropout
  std::mt19937_64* dropout_rng = nullptr;
  bool keep_attention = false;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
class Transformer {
 public:
  Transformer(const ModelConfig& cfg, std::uint64_t seed);
  Transformer(const ModelConfig& cfg, Weights<T> w);

  const ModelConfig& config() const { return cfg_; }
  Weights<T>& weights() { return w_; }
  const Weights<T>& weights() const { return w_; }

  // Loss terms and logits; accumulates gradients into *grads when non-null.
  ForwardResult<T> run(const std::vector<Sequence>& batch, const AttentionBiasMode& mode,
                       const RunOptions& opt, Weights<T>* grads = nullptr) const;

  // log p(ids[k] | ids[<k]) for k = 1..n-1 of each sequence, without dropout.
  // Recency bias applies as in training; tree supervision has no effect here.
  std::vector<std::vector<double>> token_logprobs(const std::vector<std::vector<int>>& seqs,
                                                  const AttentionBiasMode& mode = {},
                                                  double epoch = 0.0) const;

  template <typename U>
  Transformer<U> cast() const;

 private:
  ModelConfig cfg_;
  Weights<T> w_;
};

// Mean NLL (nats/token) of targets under softmax(logits); rows with target < 0 skipped.
double lm_loss(const Eigen::MatrixXd& logits, const std::vector<int>& targets);

// Mean KL(target || attention) over rows with a target.
double tree_planting_loss(const std::vector<Eigen::MatrixXd>& attention_heads,
                          const TreeDistanceMatrix& tree,
                          const std::vector<int>& word_of_position);

// --- checkpoints ---
// Layout: "POSHCKPT" | u32 version | u64 header length | header JSON |
// float32 little-endian tensor data in header order. The header holds the
// model config, tensor index (name, rows, cols, offset) and free-form metadata.
struct Checkpoint {
  ModelConfig config;
  Weights<float> weights;
  std::vector<std::pair<std::string, Mat<float>>> extra;  // e.g. optimizer moments
  std::string tokenizer_vocab;   // embedded tokenizer files, may be empty
  std::string tokenizer_merges;
  std::string metadata = "{}";   // JSON text
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

template <typename T>
Weights<float> to_float(const Weights<T>& w);

// Central finite differences against the analytic gradient.
struct GradCheckReport {
  std::size_t checked = 0;
  std::size_t within_tol = 0;  // relative error <= tol
  double max_rel_error = 0.0;
  std::string worst_param;
  double fraction_within() const { return checked ? double(within_tol) / double(checked) : 1.0; }
};

// Relative error |a - n| / max(|a|, |n|, floor); 0 when both vanish.
double relative_error(double analytic, double numeric, double floor = 1e-8);

GradCheckReport gradient_check(Transformer<double>& model, const std::vector<Sequence>& batch,
                               const AttentionBiasMode& mode, double epoch, double step = 1e-4,
                               double tol = 1e-4, std::size_t max_per_tensor = 0);

}  // namespace posh::model
