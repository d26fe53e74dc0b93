#include "posh/model.hpp"

#include <algorithm>
#include <bit>
#include <map>
#include <cmath>
#include <cstring>
#include <deque>
#include <fstream>
#include <limits>
#include <sstream>

#include "json.hpp"
#include "posh/util.hpp"

namespace posh::model {

using nlohmann::json;

// ---------------------------------------------------------------- config

void ModelConfig::validate() const {
  if (hidden_size <= 0 || n_heads <= 0 || n_layers <= 0 || ffn_dim <= 0 || vocab_size <= 0 ||
      context_len <= 0) {
    throw std::invalid_argument("model config: all sizes must be positive");
  }
  if (hidden_size % n_heads != 0) {
    throw std::invalid_argument("model config: hidden_size must be divisible by n_heads");
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw std::invalid_argument("model config: dropout_rate must be in [0, 1)");
  }
}

ModelConfig ModelConfig::preset(const std::string& name) {
  ModelConfig c;
  if (name == "mini") {
    c.hidden_size = 512, c.n_heads = 8, c.n_layers = 4, c.ffn_dim = 2048;
  } else if (name == "xs") {
    c.hidden_size = 512, c.n_heads = 8, c.n_layers = 6, c.ffn_dim = 2048;
  } else if (name == "xxs") {
    c.hidden_size = 512, c.n_heads = 4, c.n_layers = 6, c.ffn_dim = 2048;
  } else if (name == "small") {
    c.hidden_size = 768, c.n_heads = 12, c.n_layers = 12, c.ffn_dim = 3072;
  } else {
    throw std::invalid_argument("unknown model preset '" + name + "'");
  }
  return c;
}

std::string ModelConfig::to_json() const {
  json j{{"hidden_size", hidden_size}, {"n_heads", n_heads},         {"n_layers", n_layers},
         {"ffn_dim", ffn_dim},         {"vocab_size", vocab_size},   {"context_len", context_len},
         {"dropout_rate", dropout_rate}};
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  auto j = json::parse(text);
  ModelConfig c;
  c.hidden_size = j.at("hidden_size");
  c.n_heads = j.at("n_heads");
  c.n_layers = j.at("n_layers");
  c.ffn_dim = j.at("ffn_dim");
  c.vocab_size = j.at("vocab_size");
  c.context_len = j.at("context_len");
  c.dropout_rate = j.at("dropout_rate");
  c.validate();
  return c;
}

std::string to_string(BiasKind k) {
  switch (k) {
    case BiasKind::none: return "none";
    case BiasKind::recency: return "recency";
    case BiasKind::tree_planted: return "tree_planted";
  }
  return "none";
}

BiasKind bias_kind_from_string(const std::string& s) {
  if (s == "none" || s == "vanilla") return BiasKind::none;
  if (s == "recency") return BiasKind::recency;
  if (s == "tree_planted" || s == "tpt") return BiasKind::tree_planted;
  throw std::invalid_argument("unknown bias mode '" + s + "'");
}

void AttentionBiasMode::validate(int n_heads) const {
  if (kind == BiasKind::recency && !(decay_base > 0.0 && decay_base < 1.0)) {
    throw std::invalid_argument("recency decay base must be in (0, 1)");
  }
  if (kind == BiasKind::tree_planted) {
    if (!(weight >= 0.0)) throw std::invalid_argument("tree-planting weight must be >= 0");
    if (supervised_heads < 1 || supervised_heads > n_heads) {
      throw std::invalid_argument("supervised head count must be in [1, n_heads]");
    }
  }
}

std::vector<double> recency_bias(int i, double r, double t) {
  const double c = std::pow(r, t);
  std::vector<double> b(static_cast<std::size_t>(i));
  for (int j = 0; j < i; ++j) b[j] = c * -static_cast<double>(i - 1 - j);
  return b;
}

// ---------------------------------------------------------------- trees

TreeDistanceMatrix tree_distances_from_heads(const std::vector<int>& heads) {
  const int n = static_cast<int>(heads.size());
  std::vector<std::vector<int>> adj(n);
  if (std::count(heads.begin(), heads.end(), 0) != 1) {
    throw std::invalid_argument("dependency parse must have exactly one root");
  }
  for (int i = 0; i < n; ++i) {
    const int h = heads[i];
    if (h < 0 || h > n || h == i + 1) {
      throw std::invalid_argument("invalid head " + std::to_string(h) + " for token " +
                                  std::to_string(i + 1));
    }
    if (h > 0) {
      adj[i].push_back(h - 1);
      adj[h - 1].push_back(i);
    }
  }
  TreeDistanceMatrix m;
  m.n = n;
  m.d.assign(static_cast<std::size_t>(n) * n, -1);
  std::deque<int> queue;
  for (int s = 0; s < n; ++s) {
    int* row = &m.d[static_cast<std::size_t>(s) * n];
    row[s] = 0;
    queue.assign(1, s);
    while (!queue.empty()) {
      const int u = queue.front();
      queue.pop_front();
      for (int v : adj[u]) {
        if (row[v] < 0) {
          row[v] = row[u] + 1;
          queue.push_back(v);
        }
      }
    }
    for (int j = 0; j < n; ++j) {
      if (row[j] < 0) throw std::invalid_argument("disconnected dependency parse");
    }
  }
  return m;
}

TreeDistanceMatrix tree_distances_from_parse(const corpus::SentenceRecord& s) {
  std::vector<int> heads;
  for (const auto& t : s.tokens) heads.push_back(t.head);
  try {
    return tree_distances_from_heads(heads);
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument("sentence " + s.id + ": " + e.what());
  }
}

std::vector<double> tree_target_row(const TreeDistanceMatrix& tree,
                                    const std::vector<int>& word_of_position, int i) {
  const int wi = word_of_position.at(i);
  if (wi < 0) return {};
  std::vector<double> row(static_cast<std::size_t>(i) + 1, 0.0);
  double z = 0.0;
  for (int j = 0; j <= i; ++j) {
    const int wj = word_of_position[j];
    if (wj < 0) continue;
    row[j] = std::exp(-static_cast<double>(tree.at(wi, wj)));
    z += row[j];
  }
  for (auto& v : row) v /= z;
  return row;
}

// ---------------------------------------------------------------- weights

template <typename T>
void Weights<T>::for_each(const std::function<void(const std::string&, Mat<T>&)>& fn) {
  fn("tok_emb", tok_emb);
  fn("pos_emb", pos_emb);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& L = layers[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    fn(p + "ln1_g", L.ln1_g);
    fn(p + "ln1_b", L.ln1_b);
    fn(p + "w_qkv", L.w_qkv);
    fn(p + "b_qkv", L.b_qkv);
    fn(p + "w_o", L.w_o);
    fn(p + "b_o", L.b_o);
    fn(p + "ln2_g", L.ln2_g);
    fn(p + "ln2_b", L.ln2_b);
    fn(p + "w_1", L.w_1);
    fn(p + "b_1", L.b_1);
    fn(p + "w_2", L.w_2);
    fn(p + "b_2", L.b_2);
  }
  fn("lnf_g", lnf_g);
  fn("lnf_b", lnf_b);
}

template <typename T>
void Weights<T>::for_each(
    const std::function<void(const std::string&, const Mat<T>&)>& fn) const {
  const_cast<Weights<T>*>(this)->for_each(
      [&](const std::string& name, Mat<T>& m) { fn(name, m); });
}

template <typename T>
std::size_t Weights<T>::parameter_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Mat<T>& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

template <typename T>
Weights<T> Weights<T>::zeros_like() const {
  Weights<T> z = *this;
  z.set_zero();
  return z;
}

template <typename T>
void Weights<T>::set_zero() {
  for_each([](const std::string&, Mat<T>& m) { m.setZero(); });
}

template <typename T>
void for_each_pair(Weights<T>& a, Weights<T>& b,
                   const std::function<void(const std::string&, Mat<T>&, Mat<T>&)>& fn) {
  std::vector<Mat<T>*> bs;
  b.for_each([&](const std::string&, Mat<T>& m) { bs.push_back(&m); });
  std::size_t k = 0;
  a.for_each([&](const std::string& name, Mat<T>& m) {
    if (k >= bs.size() || bs[k]->rows() != m.rows() || bs[k]->cols() != m.cols()) {
      throw std::invalid_argument("parameter sets differ at " + name);
    }
    fn(name, m, *bs[k++]);
  });
}

template <typename T>
Weights<float> to_float(const Weights<T>& w) {
  Weights<float> out;
  out.tok_emb = w.tok_emb.template cast<float>();
  out.pos_emb = w.pos_emb.template cast<float>();
  for (const auto& L : w.layers) {
    LayerWeights<float> f;
    f.ln1_g = L.ln1_g.template cast<float>();
    f.ln1_b = L.ln1_b.template cast<float>();
    f.w_qkv = L.w_qkv.template cast<float>();
    f.b_qkv = L.b_qkv.template cast<float>();
    f.w_o = L.w_o.template cast<float>();
    f.b_o = L.b_o.template cast<float>();
    f.ln2_g = L.ln2_g.template cast<float>();
    f.ln2_b = L.ln2_b.template cast<float>();
    f.w_1 = L.w_1.template cast<float>();
    f.b_1 = L.b_1.template cast<float>();
    f.w_2 = L.w_2.template cast<float>();
    f.b_2 = L.b_2.template cast<float>();
    out.layers.push_back(std::move(f));
  }
  out.lnf_g = w.lnf_g.template cast<float>();
  out.lnf_b = w.lnf_b.template cast<float>();
  return out;
}

// ---------------------------------------------------------------- transformer

namespace {

template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

constexpr double kLnEps = 1e-5;

template <typename T>
struct LnCache {
  Mat<T> xhat;
  Eigen::Matrix<T, Eigen::Dynamic, 1> rstd;
};

template <typename T>
Mat<T> ln_forward(const Mat<T>& x, const Mat<T>& g, const Mat<T>& b, LnCache<T>& c) {
  const Eigen::Index n = x.rows(), h = x.cols();
  c.xhat.resize(n, h);
  c.rstd.resize(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const T mu = x.row(r).mean();
    const T var = (x.row(r).array() - mu).square().mean();
    const T rstd = T(1) / std::sqrt(var + T(kLnEps));
    c.rstd(r) = rstd;
    c.xhat.row(r) = (x.row(r).array() - mu) * rstd;
  }
  Mat<T> y = (c.xhat.array().rowwise() * g.row(0).array()).rowwise() + b.row(0).array();
  return y;
}

template <typename T>
Mat<T> ln_backward(const Mat<T>& dy, const Mat<T>& g, const LnCache<T>& c, Mat<T>* dg,
                   Mat<T>* db) {
  if (dg) *dg += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  if (db) *db += dy.colwise().sum();
  Mat<T> dxhat = dy.array().rowwise() * g.row(0).array();
  Mat<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const T m1 = dxhat.row(r).mean();
    const T m2 = (dxhat.row(r).array() * c.xhat.row(r).array()).mean();
    dx.row(r) = c.rstd(r) * (dxhat.row(r).array() - m1 - c.xhat.row(r).array() * m2);
  }
  return dx;
}

template <typename T>
T gelu(T x) {
  const T k = T(0.7978845608028654);  // sqrt(2/pi)
  return T(0.5) * x * (T(1) + std::tanh(k * (x + T(0.044715) * x * x * x)));
}

template <typename T>
T gelu_grad(T x) {
  const T k = T(0.7978845608028654);
  const T u = k * (x + T(0.044715) * x * x * x);
  const T th = std::tanh(u);
  return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * k * (T(1) + T(3 * 0.044715) * x * x);
}

template <typename T>
void init_normal(Mat<T>& m, Eigen::Index rows, Eigen::Index cols, double std,
                 std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std);
  m.resize(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng));
}

template <typename T>
Mat<T> constant(Eigen::Index rows, Eigen::Index cols, T v) {
  return Mat<T>::Constant(rows, cols, v);
}

template <typename T>
struct LayerCache {
  Mat<T> x_in, h1, qkv, attn_out, x_mid, h2, f, g, g_drop;
  LnCache<T> ln1, ln2;
  Mat<T> g_mask;  // dropout scale per element, empty when no dropout
  // per sequence, per head
  std::vector<std::vector<Mat<T>>> p, p_mask, target;
  std::vector<std::vector<std::vector<char>>> has_target;
};

}  // namespace

template <typename T>
Transformer<T>::Transformer(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  auto rng = make_rng(seed, "init");
  const int H = cfg_.hidden_size, F = cfg_.ffn_dim;
  const double std = 0.02;
  const double proj_std = 0.02 / std::sqrt(2.0 * cfg_.n_layers);
  init_normal(w_.tok_emb, cfg_.vocab_size, H, std, rng);
  init_normal(w_.pos_emb, cfg_.context_len, H, std, rng);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    LayerWeights<T> L;
    L.ln1_g = constant<T>(1, H, T(1));
    L.ln1_b = constant<T>(1, H, T(0));
    init_normal(L.w_qkv, H, 3 * H, std, rng);
    L.b_qkv = constant<T>(1, 3 * H, T(0));
    init_normal(L.w_o, H, H, proj_std, rng);
    L.b_o = constant<T>(1, H, T(0));
    L.ln2_g = constant<T>(1, H, T(1));
    L.ln2_b = constant<T>(1, H, T(0));
    init_normal(L.w_1, H, F, std, rng);
    L.b_1 = constant<T>(1, F, T(0));
    init_normal(L.w_2, F, H, proj_std, rng);
    L.b_2 = constant<T>(1, H, T(0));
    w_.layers.push_back(std::move(L));
  }
  w_.lnf_g = constant<T>(1, H, T(1));
  w_.lnf_b = constant<T>(1, H, T(0));
}

template <typename T>
Transformer<T>::Transformer(const ModelConfig& cfg, Weights<T> w) : cfg_(cfg), w_(std::move(w)) {
  cfg_.validate();
  const auto H = cfg_.hidden_size;
  if (w_.tok_emb.rows() != cfg_.vocab_size || w_.tok_emb.cols() != H ||
      w_.pos_emb.rows() != cfg_.context_len ||
      static_cast<int>(w_.layers.size()) != cfg_.n_layers) {
    throw std::invalid_argument("weights do not match model config");
  }
}

template <typename T>
template <typename U>
Transformer<U> Transformer<T>::cast() const {
  Weights<U> out;
  auto& src = const_cast<Weights<T>&>(w_);
  std::vector<Mat<T>*> mats;
  src.for_each([&](const std::string&, Mat<T>& m) { mats.push_back(&m); });
  out.layers.resize(w_.layers.size());
  std::size_t k = 0;
  out.for_each([&](const std::string&, Mat<U>& m) { m = mats[k++]->template cast<U>(); });
  return Transformer<U>(cfg_, std::move(out));
}

template <typename T>
ForwardResult<T> Transformer<T>::run(const std::vector<Sequence>& batch,
                                     const AttentionBiasMode& mode, const RunOptions& opt,
                                     Weights<T>* grads) const {
  mode.validate(cfg_.n_heads);
  const int H = cfg_.hidden_size, nh = cfg_.n_heads, dh = cfg_.head_dim();
  const int V = cfg_.vocab_size;
  const T scale = T(1) / std::sqrt(T(dh));
  const double p_drop = opt.train ? cfg_.dropout_rate : 0.0;
  if (p_drop > 0.0 && !opt.dropout_rng) throw std::invalid_argument("dropout needs an rng");
  const T keep_scale = T(1.0 / (1.0 - p_drop));
  const bool recency = mode.kind == BiasKind::recency;
  const bool planted = mode.kind == BiasKind::tree_planted;
  const double bias_coef = recency ? std::pow(mode.decay_base, opt.epoch) : 0.0;

  ForwardResult<T> res;
  if (batch.empty()) throw std::invalid_argument("empty batch");
  int N = 0;
  for (const auto& s : batch) {
    const int L = static_cast<int>(s.ids.size());
    if (L == 0) throw std::invalid_argument("empty sequence");
    if (L > cfg_.context_len) {
      throw std::invalid_argument("sequence length " + std::to_string(L) +
                                  " exceeds context length " + std::to_string(cfg_.context_len));
    }
    for (int id : s.ids) {
      if (id < 0 || id >= V) throw std::invalid_argument("token id out of range");
    }
    if (!s.predict.empty() && static_cast<int>(s.predict.size()) != L) {
      throw std::invalid_argument("predict mask length mismatch");
    }
    if (planted) {
      if (!s.tree) throw std::invalid_argument("tree-planted mode requires tree distances");
      if (static_cast<int>(s.word_of_position.size()) != L) {
        throw std::invalid_argument("word_of_position length mismatch");
      }
      for (int w : s.word_of_position) {
        if (w >= s.tree->n) throw std::invalid_argument("distance matrix size mismatch");
      }
    }
    res.offsets.push_back(N);
    N += L;
  }
  const auto S = batch.size();

  auto bernoulli_mask = [&](Eigen::Index rows, Eigen::Index cols) {
    Mat<T> m(rows, cols);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      m.data()[i] = u(*opt.dropout_rng) < p_drop ? T(0) : keep_scale;
    }
    return m;
  };

  // Embeddings.
  Mat<T> x(N, H);
  for (std::size_t s = 0; s < S; ++s) {
    const auto& ids = batch[s].ids;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      x.row(res.offsets[s] + p) = w_.tok_emb.row(ids[p]) + w_.pos_emb.row(p);
    }
  }

  std::vector<LayerCache<T>> cache(cfg_.n_layers);
  double tree_kl_sum = 0.0;
  std::size_t tree_rows = 0;
  if (opt.keep_attention) res.attention.resize(cfg_.n_layers);

  for (int l = 0; l < cfg_.n_layers; ++l) {
    const auto& W = w_.layers[l];
    auto& C = cache[l];
    C.x_in = x;
    C.h1 = ln_forward(x, W.ln1_g, W.ln1_b, C.ln1);
    C.qkv = (C.h1 * W.w_qkv).rowwise() + W.b_qkv.row(0);
    C.attn_out.resize(N, H);
    C.p.assign(S, std::vector<Mat<T>>(nh));
    if (p_drop > 0.0) C.p_mask.assign(S, std::vector<Mat<T>>(nh));
    if (planted) {
      C.target.assign(S, std::vector<Mat<T>>(nh));
      C.has_target.assign(S, std::vector<std::vector<char>>(nh));
    }
    if (opt.keep_attention) res.attention[l].assign(S, std::vector<Mat<T>>(nh));

    for (std::size_t s = 0; s < S; ++s) {
      const int o = res.offsets[s];
      const int L = static_cast<int>(batch[s].ids.size());
      for (int h = 0; h < nh; ++h) {
        auto Q = C.qkv.block(o, h * dh, L, dh);
        auto K = C.qkv.block(o, H + h * dh, L, dh);
        auto Vv = C.qkv.block(o, 2 * H + h * dh, L, dh);
        Mat<T> sc = Q * K.transpose();
        Mat<T>& P = C.p[s][h];
        P.setZero(L, L);
        for (int i = 0; i < L; ++i) {
          T mx = -std::numeric_limits<T>::infinity();
          for (int j = 0; j <= i; ++j) {
            T v = sc(i, j);
            if (recency) {
              const T b = T(bias_coef * -static_cast<double>(i - j));
              v = mode.recency_before_scale ? (v + b) * scale : v * scale + b;
            } else {
              v *= scale;
            }
            sc(i, j) = v;
            mx = std::max(mx, v);
          }
          T z = 0;
          for (int j = 0; j <= i; ++j) {
            P(i, j) = std::exp(sc(i, j) - mx);
            z += P(i, j);
          }
          for (int j = 0; j <= i; ++j) P(i, j) /= z;
        }
        if (planted && h < mode.supervised_heads) {
          Mat<T>& tgt = C.target[s][h];
          tgt.setZero(L, L);
          auto& has = C.has_target[s][h];
          has.assign(L, 0);
          for (int i = 0; i < L; ++i) {
            auto row = tree_target_row(*batch[s].tree, batch[s].word_of_position, i);
            if (row.empty()) continue;
            has[i] = 1;
            double kl = 0.0;
            for (int j = 0; j <= i; ++j) {
              tgt(i, j) = T(row[j]);
              if (row[j] > 0.0) kl += row[j] * (std::log(row[j]) - std::log(double(P(i, j))));
            }
            tree_kl_sum += kl;
            ++tree_rows;
          }
        }
        if (opt.keep_attention) res.attention[l][s][h] = P;
        if (p_drop > 0.0) {
          C.p_mask[s][h] = bernoulli_mask(L, L);
          C.attn_out.block(o, h * dh, L, dh) = (P.array() * C.p_mask[s][h].array()).matrix() * Vv;
        } else {
          C.attn_out.block(o, h * dh, L, dh) = P * Vv;
        }
      }
    }
    x += (C.attn_out * W.w_o).rowwise() + W.b_o.row(0);
    C.x_mid = x;
    C.h2 = ln_forward(x, W.ln2_g, W.ln2_b, C.ln2);
    C.f = (C.h2 * W.w_1).rowwise() + W.b_1.row(0);
    C.g = C.f.unaryExpr([](T v) { return gelu(v); });
    if (p_drop > 0.0) {
      C.g_mask = bernoulli_mask(C.g.rows(), C.g.cols());
      C.g_drop = C.g.cwiseProduct(C.g_mask);
    } else {
      C.g_drop = C.g;
    }
    x += (C.g_drop * W.w_2).rowwise() + W.b_2.row(0);
  }

  LnCache<T> lnf;
  Mat<T> hf = ln_forward(x, w_.lnf_g, w_.lnf_b, lnf);
  res.logits = hf * w_.tok_emb.transpose();

  // LM loss over predicted positions.
  Mat<T> dlogits;
  if (grads) dlogits.setZero(N, V);
  double nll = 0.0;
  std::size_t n_pred = 0;
  for (std::size_t s = 0; s < S; ++s) {
    const auto& seq = batch[s];
    for (std::size_t p = 0; p + 1 < seq.ids.size(); ++p) {
      if (!seq.predict.empty() && !seq.predict[p]) continue;
      ++n_pred;
    }
  }
  for (std::size_t s = 0; s < S; ++s) {
    const auto& seq = batch[s];
    for (std::size_t p = 0; p + 1 < seq.ids.size(); ++p) {
      if (!seq.predict.empty() && !seq.predict[p]) continue;
      const int r = res.offsets[s] + static_cast<int>(p);
      const auto row = res.logits.row(r);
      const T mx = row.maxCoeff();
      const T lse = mx + std::log((row.array() - mx).exp().sum());
      const int target = seq.ids[p + 1];
      nll += static_cast<double>(lse - row(target));
      if (grads) {
        dlogits.row(r) = (row.array() - lse).exp() / T(n_pred);
        dlogits(r, target) -= T(1) / T(n_pred);
      }
    }
  }
  res.n_predictions = n_pred;
  res.lm_loss = n_pred ? nll / static_cast<double>(n_pred) : 0.0;
  res.n_tree_rows = tree_rows;
  res.tree_loss = tree_rows ? tree_kl_sum / static_cast<double>(tree_rows) : 0.0;
  res.total_loss = res.lm_loss + (planted ? mode.weight * res.tree_loss : 0.0);
  if (!std::isfinite(res.total_loss)) {
    std::ostringstream msg;
    msg << "non-finite loss (lm " << res.lm_loss << ", tree " << res.tree_loss << ", "
        << n_pred << " predictions, " << tree_rows << " supervised rows)";
    throw NonFiniteError(msg.str());
  }
  if (!grads) return res;

  // ------------------------------------------------------------ backward
  Weights<T>& G = *grads;
  if (G.layers.size() != w_.layers.size()) *grads = w_.zeros_like();
  const T tree_coef =
      planted && tree_rows ? T(mode.weight / static_cast<double>(tree_rows)) : T(0);

  G.tok_emb += dlogits.transpose() * hf;
  Mat<T> dx = ln_backward<T>(dlogits * w_.tok_emb, w_.lnf_g, lnf, &G.lnf_g, &G.lnf_b);

  for (int l = cfg_.n_layers - 1; l >= 0; --l) {
    const auto& W = w_.layers[l];
    auto& GW = G.layers[l];
    auto& C = cache[l];

    // FFN
    GW.w_2 += C.g_drop.transpose() * dx;
    GW.b_2 += dx.colwise().sum();
    Mat<T> dg = dx * W.w_2.transpose();
    if (p_drop > 0.0) dg = dg.cwiseProduct(C.g_mask);
    Mat<T> df = dg.cwiseProduct(C.f.unaryExpr([](T v) { return gelu_grad(v); }));
    GW.w_1 += C.h2.transpose() * df;
    GW.b_1 += df.colwise().sum();
    dx += ln_backward<T>(df * W.w_1.transpose(), W.ln2_g, C.ln2, &GW.ln2_g, &GW.ln2_b);

    // attention
    GW.w_o += C.attn_out.transpose() * dx;
    GW.b_o += dx.colwise().sum();
    Mat<T> d_attn = dx * W.w_o.transpose();
    Mat<T> dqkv = Mat<T>::Zero(N, 3 * H);
    for (std::size_t s = 0; s < S; ++s) {
      const int o = res.offsets[s];
      const int L = static_cast<int>(batch[s].ids.size());
      for (int h = 0; h < nh; ++h) {
        auto Q = C.qkv.block(o, h * dh, L, dh);
        auto K = C.qkv.block(o, H + h * dh, L, dh);
        auto Vv = C.qkv.block(o, 2 * H + h * dh, L, dh);
        const Mat<T>& P = C.p[s][h];
        Mat<T> dO = d_attn.block(o, h * dh, L, dh);
        Mat<T> dP = dO * Vv.transpose();
        if (p_drop > 0.0) {
          Mat<T> Pd = P.cwiseProduct(C.p_mask[s][h]);
          dqkv.block(o, 2 * H + h * dh, L, dh) = Pd.transpose() * dO;
          dP = dP.cwiseProduct(C.p_mask[s][h]);
        } else {
          dqkv.block(o, 2 * H + h * dh, L, dh) = P.transpose() * dO;
        }
        Mat<T> dS(L, L);
        for (int i = 0; i < L; ++i) {
          const T dot = P.row(i).dot(dP.row(i));
          dS.row(i) = P.row(i).array() * (dP.row(i).array() - dot);
        }
        if (planted && h < mode.supervised_heads) {
          const auto& has = C.has_target[s][h];
          for (int i = 0; i < L; ++i) {
            if (has[i]) dS.row(i) += tree_coef * (P.row(i) - C.target[s][h].row(i));
          }
        }
        dS *= scale;
        dqkv.block(o, h * dh, L, dh) = dS * K;
        dqkv.block(o, H + h * dh, L, dh) = dS.transpose() * Q;
      }
    }
    GW.w_qkv += C.h1.transpose() * dqkv;
    GW.b_qkv += dqkv.colwise().sum();
    dx += ln_backward<T>(dqkv * W.w_qkv.transpose(), W.ln1_g, C.ln1, &GW.ln1_g, &GW.ln1_b);
  }

  for (std::size_t s = 0; s < S; ++s) {
    const auto& ids = batch[s].ids;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      const auto r = res.offsets[s] + static_cast<Eigen::Index>(p);
      G.tok_emb.row(ids[p]) += dx.row(r);
      G.pos_emb.row(p) += dx.row(r);
    }
  }
  return res;
}

template <typename T>
std::vector<std::vector<double>> Transformer<T>::token_logprobs(
    const std::vector<std::vector<int>>& seqs, const AttentionBiasMode& mode,
    double epoch) const {
  std::vector<std::vector<double>> out;
  if (seqs.empty()) return out;
  std::vector<Sequence> batch;
  for (const auto& ids : seqs) batch.push_back(Sequence{ids, {}, nullptr, {}});
  AttentionBiasMode eval_mode = mode;
  if (eval_mode.kind == BiasKind::tree_planted) eval_mode = AttentionBiasMode::none();
  RunOptions opt;
  opt.epoch = epoch;
  auto res = run(batch, eval_mode, opt);
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    std::vector<double> lp;
    for (std::size_t p = 0; p + 1 < seqs[s].size(); ++p) {
      const auto row = res.logits.row(res.offsets[s] + p);
      const double mx = static_cast<double>(row.maxCoeff());
      double z = 0.0;
      for (Eigen::Index v = 0; v < row.size(); ++v) z += std::exp(double(row(v)) - mx);
      lp.push_back(double(row(seqs[s][p + 1])) - mx - std::log(z));
    }
    out.push_back(std::move(lp));
  }
  return out;
}

// ---------------------------------------------------------------- standalone losses

double lm_loss(const Eigen::MatrixXd& logits, const std::vector<int>& targets) {
  if (static_cast<Eigen::Index>(targets.size()) != logits.rows()) {
    throw std::invalid_argument("lm_loss: target count mismatch");
  }
  double sum = 0.0;
  std::size_t n = 0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    if (targets[r] < 0) continue;
    const double mx = logits.row(r).maxCoeff();
    const double lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
    sum += lse - logits(r, targets[r]);
    ++n;
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

double tree_planting_loss(const std::vector<Eigen::MatrixXd>& attention_heads,
                          const TreeDistanceMatrix& tree,
                          const std::vector<int>& word_of_position) {
  double sum = 0.0;
  std::size_t rows = 0;
  for (const auto& A : attention_heads) {
    if (A.rows() != static_cast<Eigen::Index>(word_of_position.size()) || A.cols() != A.rows()) {
      throw std::invalid_argument("tree_planting_loss: attention size mismatch");
    }
    for (int w : word_of_position) {
      if (w >= tree.n) throw std::invalid_argument("tree_planting_loss: distance matrix size mismatch");
    }
    for (Eigen::Index i = 0; i < A.rows(); ++i) {
      auto t = tree_target_row(tree, word_of_position, static_cast<int>(i));
      if (t.empty()) continue;
      for (Eigen::Index j = 0; j <= i; ++j) {
        if (t[j] > 0.0) sum += t[j] * (std::log(t[j]) - std::log(A(i, j)));
      }
      ++rows;
    }
  }
  return rows ? sum / static_cast<double>(rows) : 0.0;
}

// ---------------------------------------------------------------- gradient check

double relative_error(double analytic, double numeric, double floor) {
  const double diff = std::abs(analytic - numeric);
  if (diff == 0.0) return 0.0;
  return diff / std::max({std::abs(analytic), std::abs(numeric), floor});
}

GradCheckReport gradient_check(Transformer<double>& model, const std::vector<Sequence>& batch,
                               const AttentionBiasMode& mode, double epoch, double step,
                               double tol, std::size_t max_per_tensor) {
  RunOptions opt;
  opt.epoch = epoch;
  Weights<double> grads = model.weights().zeros_like();
  model.run(batch, mode, opt, &grads);
  GradCheckReport rep;
  for_each_pair<double>(model.weights(), grads,
                        [&](const std::string& name, Mat<double>& w, Mat<double>& g) {
    const Eigen::Index n = w.size();
    const Eigen::Index stride =
        max_per_tensor && static_cast<std::size_t>(n) > max_per_tensor
            ? (n + static_cast<Eigen::Index>(max_per_tensor) - 1) /
                  static_cast<Eigen::Index>(max_per_tensor)
            : 1;
    for (Eigen::Index k = 0; k < n; k += stride) {
      const double orig = w.data()[k];
      w.data()[k] = orig + step;
      const double up = model.run(batch, mode, opt).total_loss;
      w.data()[k] = orig - step;
      const double down = model.run(batch, mode, opt).total_loss;
      w.data()[k] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double err = relative_error(g.data()[k], numeric);
      ++rep.checked;
      if (err <= tol) ++rep.within_tol;
      if (err > rep.max_rel_error) {
        rep.max_rel_error = err;
        rep.worst_param = name + "[" + std::to_string(k) + "]";
      }
    }
  });
  return rep;
}

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr char kMagic[8] = {'P', 'O', 'S', 'H', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;
static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

template <typename V>
void put(std::string& out, V v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename V>
V get(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(V) > in.size()) throw std::runtime_error("checkpoint truncated");
  V v;
  std::memcpy(&v, in.data() + pos, sizeof v);
  pos += sizeof v;
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  json header;
  header["config"] = json::parse(ckpt.config.to_json());
  header["metadata"] = json::parse(ckpt.metadata.empty() ? "{}" : ckpt.metadata);
  if (!ckpt.tokenizer_vocab.empty()) {
    header["tokenizer"] = {{"vocab", ckpt.tokenizer_vocab}, {"merges", ckpt.tokenizer_merges}};
  }
  std::vector<const Mat<float>*> tensors;
  json index = json::array();
  std::uint64_t offset = 0;
  auto add = [&](const std::string& name, const Mat<float>& m) {
    index.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(m.size()) * sizeof(float);
    tensors.push_back(&m);
  };
  ckpt.weights.for_each(add);
  for (const auto& [name, m] : ckpt.extra) add("extra." + name, m);
  header["tensors"] = index;
  const std::string text = header.dump();

  std::string out(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kVersion);
  put<std::uint64_t>(out, text.size());
  out += text;
  for (const auto* m : tensors) {
    out.append(reinterpret_cast<const char*>(m->data()), m->size() * sizeof(float));
  }
  const std::string tmp = path + ".tmp";
  write_file(tmp, out);
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw std::runtime_error("cannot move checkpoint into place: " + path);
  }
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path);
  std::string in((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (in.size() < sizeof kMagic || std::memcmp(in.data(), kMagic, sizeof kMagic) != 0) {
    throw std::runtime_error(path + " is not a checkpoint");
  }
  std::size_t pos = sizeof kMagic;
  const auto version = get<std::uint32_t>(in, pos);
  if (version != kVersion) throw std::runtime_error("unsupported checkpoint version");
  const auto len = get<std::uint64_t>(in, pos);
  if (pos + len > in.size()) throw std::runtime_error("checkpoint truncated");
  auto header = json::parse(in.substr(pos, len));
  pos += len;
  const std::size_t data_begin = pos;

  Checkpoint ck;
  ck.config = ModelConfig::from_json(header.at("config").dump());
  ck.metadata = header.value("metadata", json::object()).dump();
  if (header.contains("tokenizer")) {
    ck.tokenizer_vocab = header["tokenizer"].at("vocab");
    ck.tokenizer_merges = header["tokenizer"].at("merges");
  }
  std::map<std::string, json> by_name;
  for (const auto& t : header.at("tensors")) by_name[t.at("name")] = t;
  auto read_tensor = [&](const json& t) {
    const Eigen::Index rows = t.at("rows"), cols = t.at("cols");
    const std::uint64_t off = t.at("offset");
    const std::size_t bytes = static_cast<std::size_t>(rows * cols) * sizeof(float);
    if (data_begin + off + bytes > in.size()) throw std::runtime_error("checkpoint truncated");
    Mat<float> m(rows, cols);
    std::memcpy(m.data(), in.data() + data_begin + off, bytes);
    return m;
  };
  ck.weights.layers.resize(ck.config.n_layers);
  ck.weights.for_each([&](const std::string& name, Mat<float>& m) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint lacks tensor " + name);
    m = read_tensor(it->second);
    by_name.erase(it);
  });
  for (const auto& [name, t] : by_name) {
    if (name.rfind("extra.", 0) == 0) ck.extra.emplace_back(name.substr(6), read_tensor(t));
  }
  Transformer<float> check(ck.config, ck.weights);  // validates shapes
  (void)check;
  return ck;
}

template struct Weights<float>;
template struct Weights<double>;
template void for_each_pair<float>(Weights<float>&, Weights<float>&,
                                   const std::function<void(const std::string&, Mat<float>&,
                                                            Mat<float>&)>&);
template void for_each_pair<double>(Weights<double>&, Weights<double>&,
                                    const std::function<void(const std::string&, Mat<double>&,
                                                             Mat<double>&)>&);
template Weights<float> to_float<float>(const Weights<float>&);
template Weights<float> to_float<double>(const Weights<double>&);
template class Transformer<float>;
template class Transformer<double>;
template Transformer<double> Transformer<float>::cast<double>() const;
template Transformer<float> Transformer<double>::cast<float>() const;
template Transformer<float> Transformer<float>::cast<float>() const;
template Transformer<double> Transformer<double>::cast<double>() const;

}  // namespace posh::model
