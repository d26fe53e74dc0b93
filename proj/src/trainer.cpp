#include "posh/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <limits>
#include <stdexcept>

#include "json.hpp"
#include "posh/util.hpp"

namespace posh::trainer {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;
using model::AttentionBiasMode;
using model::BiasKind;
using model::Mat;
using model::Transformer;
using model::Weights;

// ---------------------------------------------------------------- config

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  if (!(learning_rate > 0)) fail("learning_rate must be > 0");
  if (batch_size <= 0) fail("batch_size must be > 0");
  if (context_len < 2) fail("context_len must be >= 2");
  if (warmup_steps < 0) fail("warmup_steps must be >= 0");
  if (patience_steps <= 0) fail("patience_steps must be > 0");
  if (eval_interval <= 0) fail("eval_interval must be > 0");
  if (weight_decay < 0) fail("weight_decay must be >= 0");
  if (grad_clip < 0) fail("grad_clip must be >= 0");
  if (!(dev_fraction > 0 && dev_fraction < 1)) fail("dev_fraction must be in (0, 1)");
  if (pretrain.steps < 0) fail("pretrain.steps must be >= 0");
  if (pretrain.steps > 0) {
    pretrain.dyck.validate();
    if (pretrain.n_strings == 0) fail("pretrain.n_strings must be > 0");
  }
  if (mode == Mode::epochs) {
    if (epochs <= 0) fail("epochs must be > 0 in epoch mode");
    if (max_steps < 0) fail("max_steps must be >= 0");
    if (max_steps > 0 && warmup_steps > max_steps) fail("warmup_steps exceeds max_steps");
  } else {
    if (max_steps <= 0) fail("max_steps must be > 0");
    if (warmup_steps > max_steps) fail("warmup_steps exceeds max_steps");
  }
}

std::string bias_to_json(const AttentionBiasMode& m) {
  ordered_json j;
  j["kind"] = model::to_string(m.kind);
  j["decay_base"] = m.decay_base;
  j["recency_before_scale"] = m.recency_before_scale;
  j["weight"] = m.weight;
  j["supervised_heads"] = m.supervised_heads;
  return j.dump();
}

AttentionBiasMode bias_from_json(const std::string& text) {
  auto j = json::parse(text);
  AttentionBiasMode m;
  m.kind = model::bias_kind_from_string(j.value("kind", std::string("none")));
  m.decay_base = j.value("decay_base", m.decay_base);
  m.recency_before_scale = j.value("recency_before_scale", m.recency_before_scale);
  m.weight = j.value("weight", m.weight);
  m.supervised_heads = j.value("supervised_heads", m.supervised_heads);
  return m;
}

std::string TrainConfig::to_json() const {
  ordered_json j;
  j["mode"] = mode == Mode::epochs ? "epochs" : "steps";
  j["learning_rate"] = learning_rate;
  j["batch_size"] = batch_size;
  j["context_len"] = context_len;
  j["warmup_steps"] = warmup_steps;
  j["max_steps"] = max_steps;
  j["patience_steps"] = patience_steps;
  j["eval_interval"] = eval_interval;
  j["weight_decay"] = weight_decay;
  j["grad_clip"] = grad_clip;
  j["scheduler"] = scheduler == Scheduler::linear ? "linear" : "constant";
  j["epochs"] = epochs;
  j["epoch_start"] = epoch_start;
  j["pack"] = pack;
  j["dev_fraction"] = dev_fraction;
  j["seed"] = seed;
  j["bias"] = ordered_json::parse(bias_to_json(bias));
  j["pretrain"] = {{"steps", pretrain.steps},
                   {"k", pretrain.dyck.k},
                   {"max_depth", pretrain.dyck.max_depth},
                   {"min_length", pretrain.dyck.min_length},
                   {"max_length", pretrain.dyck.max_length},
                   {"open_prob", pretrain.dyck.open_prob},
                   {"n_strings", pretrain.n_strings}};
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  auto j = json::parse(text);
  TrainConfig c;
  const std::string mode = j.value("mode", std::string(j.contains("epochs") ? "epochs" : "steps"));
  if (mode == "epochs") {
    // Epoch mode: constant lr, no warmup, no step budget unless configured.
    c.mode = Mode::epochs;
    c.scheduler = Scheduler::constant;
    c.warmup_steps = 0;
    c.max_steps = 0;
    c.pack = false;
  } else if (mode != "steps") {
    throw std::invalid_argument("train config: unknown mode '" + mode + "'");
  }
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.context_len = j.value("context_len", c.context_len);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.patience_steps = j.value("patience_steps", c.patience_steps);
  c.eval_interval = j.value("eval_interval", c.eval_interval);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  if (j.contains("scheduler")) {
    const std::string s = j["scheduler"];
    if (s == "linear") c.scheduler = Scheduler::linear;
    else if (s == "constant") c.scheduler = Scheduler::constant;
    else throw std::invalid_argument("train config: unknown scheduler '" + s + "'");
  }
  c.epochs = j.value("epochs", c.epochs);
  c.epoch_start = j.value("epoch_start", c.epoch_start);
  c.pack = j.value("pack", c.pack);
  c.dev_fraction = j.value("dev_fraction", c.dev_fraction);
  c.seed = j.value("seed", c.seed);
  if (j.contains("bias")) c.bias = bias_from_json(j["bias"].dump());
  if (j.contains("pretrain")) {
    const auto& p = j["pretrain"];
    c.pretrain.steps = p.value("steps", 0);
    c.pretrain.dyck.k = p.value("k", c.pretrain.dyck.k);
    c.pretrain.dyck.max_depth = p.value("max_depth", c.pretrain.dyck.max_depth);
    c.pretrain.dyck.min_length = p.value("min_length", c.pretrain.dyck.min_length);
    c.pretrain.dyck.max_length = p.value("max_length", c.pretrain.dyck.max_length);
    c.pretrain.dyck.open_prob = p.value("open_prob", c.pretrain.dyck.open_prob);
    c.pretrain.n_strings = p.value("n_strings", c.pretrain.n_strings);
  }
  c.validate();
  return c;
}

double lr_at(int step, const TrainConfig& cfg, int total_steps) {
  const double lr = cfg.learning_rate;
  if (step < cfg.warmup_steps) return lr * step / cfg.warmup_steps;
  if (cfg.scheduler == Scheduler::constant || total_steps <= 0) return lr;
  if (step >= total_steps) return 0.0;
  const int decay = total_steps - cfg.warmup_steps;
  if (decay <= 0) return 0.0;
  return lr * static_cast<double>(total_steps - step) / decay;
}

// ---------------------------------------------------------------- data

std::vector<Example> encode_records(const tokenizer::BpeModel& tok,
                                    const std::vector<corpus::SentenceRecord>& records,
                                    int context_len, bool with_trees) {
  std::vector<Example> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    std::vector<std::string> words;
    for (const auto& t : r.tokens) words.push_back(t.form);
    auto enc = tok.encode_words(words);
    Example e;
    e.ids.push_back(tok.bos_id());
    e.word_of_position.push_back(-1);
    e.ids.insert(e.ids.end(), enc.ids.begin(), enc.ids.end());
    e.word_of_position.insert(e.word_of_position.end(), enc.word_of_token.begin(),
                              enc.word_of_token.end());
    e.ids.push_back(tok.eos_id());
    e.word_of_position.push_back(-1);
    if (static_cast<int>(e.ids.size()) > context_len) {
      e.ids.resize(static_cast<std::size_t>(context_len));
      e.word_of_position.resize(static_cast<std::size_t>(context_len));
    }
    if (with_trees)
      e.tree = std::make_shared<model::TreeDistanceMatrix>(model::tree_distances_from_parse(r));
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<Example> encode_lines(const tokenizer::BpeModel& tok,
                                  const std::vector<std::string>& lines, int context_len) {
  std::vector<Example> out;
  for (const auto& line : lines) {
    auto words = split_whitespace(line);
    if (words.empty()) continue;
    auto enc = tok.encode_words(words);
    Example e;
    e.ids.push_back(tok.bos_id());
    e.ids.insert(e.ids.end(), enc.ids.begin(), enc.ids.end());
    e.ids.push_back(tok.eos_id());
    if (static_cast<int>(e.ids.size()) > context_len) e.ids.resize(static_cast<std::size_t>(context_len));
    e.word_of_position.assign(e.ids.size(), -1);
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<Example> pack(const std::vector<Example>& items, int context_len) {
  if (context_len < 2) throw std::invalid_argument("pack: context_len must be >= 2");
  std::vector<Example> out;
  Example cur;
  auto flush = [&] {
    if (cur.ids.size() >= 2) {
      cur.word_of_position.assign(cur.ids.size(), -1);
      out.push_back(std::move(cur));
    }
    cur = Example{};
  };
  for (const auto& it : items) {
    for (int id : it.ids) {
      cur.ids.push_back(id);
      if (static_cast<int>(cur.ids.size()) == context_len) flush();
    }
  }
  flush();
  return out;
}

Split split_dev(const std::vector<corpus::SentenceRecord>& records, double fraction) {
  if (records.size() < 2) throw std::invalid_argument("split_dev: need at least two records");
  Split s;
  const auto threshold = static_cast<std::uint64_t>(fraction * 1e6);
  std::size_t min_idx = 0;
  std::uint64_t min_h = UINT64_MAX;
  std::vector<std::uint64_t> h(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    h[i] = derive_seed(0, "dev-split:" + records[i].id + "\n" + records[i].surface());
    if (h[i] < min_h) min_h = h[i], min_idx = i;
  }
  for (std::size_t i = 0; i < records.size(); ++i) {
    const bool dev = h[i] % 1000000 < threshold;
    (dev ? s.dev : s.train).push_back(records[i]);
  }
  if (s.dev.empty()) {
    s.train.clear();
    for (std::size_t i = 0; i < records.size(); ++i)
      (i == min_idx ? s.dev : s.train).push_back(records[i]);
  }
  if (s.train.empty()) throw std::invalid_argument("split_dev: fraction leaves no training data");
  return s;
}

std::vector<std::string> dyck_reserved_tokens(int k) {
  std::vector<std::string> out;
  for (int i = 0; i < k; ++i) {
    out.push_back(dyck::open_token(i));
    out.push_back(dyck::close_token(i));
  }
  return out;
}

std::vector<Example> encode_dyck(const tokenizer::BpeModel& tok,
                                 const std::vector<std::string>& strings, int k) {
  for (const auto& t : dyck_reserved_tokens(k))
    if (!tok.contains(t)) throw std::invalid_argument("bracket token " + t + " is not in the vocabulary");
  // Phase 1 packs its stream, so nothing is truncated here.
  return encode_lines(tok, strings, std::numeric_limits<int>::max());
}

// ---------------------------------------------------------------- early stop

bool EarlyStopper::update(int step, double dev_loss) {
  improved_ = best_step_ < 0 || dev_loss < best_;
  if (improved_) {
    best_ = dev_loss;
    best_step_ = step;
    return false;
  }
  return step - best_step_ >= patience_;
}

// ---------------------------------------------------------------- manifest

std::string RunManifest::to_json(bool with_timing) const {
  ordered_json j;
  j["config"] = ordered_json::parse(config_json.empty() ? "{}" : config_json);
  j["model_config"] = ordered_json::parse(model_config_json.empty() ? "{}" : model_config_json);
  j["stopping_reason"] = stopping_reason;
  j["best_dev_loss"] = best_dev_loss;
  j["best_step"] = best_step;
  j["final_train_loss"] = final_train_loss;
  j["final_epoch"] = final_epoch;
  ordered_json ph = ordered_json::array();
  for (const auto& p : phases)
    ph.push_back({{"name", p.name},
                  {"first_step", p.first_step},
                  {"steps", p.steps},
                  {"stopping_reason", p.stopping_reason}});
  j["phases"] = ph;
  j["eval_steps"] = eval_steps;
  j["eval_epochs"] = eval_epochs;
  j["dev_loss"] = dev_loss;
  j["train_loss"] = train_loss;
  j["tree_loss"] = tree_loss;
  j["best_checkpoint"] = best_checkpoint;
  j["final_checkpoint"] = final_checkpoint;
  if (with_timing) j["wall_clock_seconds"] = wall_clock_seconds;
  return j.dump(1);
}

RunManifest RunManifest::from_json(const std::string& text) {
  auto j = ordered_json::parse(text);
  RunManifest m;
  m.config_json = j.at("config").dump();
  m.model_config_json = j.at("model_config").dump();
  m.stopping_reason = j.at("stopping_reason");
  m.best_dev_loss = j.at("best_dev_loss");
  m.best_step = j.at("best_step");
  m.final_train_loss = j.at("final_train_loss");
  m.final_epoch = j.at("final_epoch");
  for (const auto& p : j.at("phases"))
    m.phases.push_back({p.at("name"), p.at("first_step"), p.at("steps"), p.at("stopping_reason")});
  m.eval_steps = j.at("eval_steps").get<std::vector<int>>();
  m.eval_epochs = j.at("eval_epochs").get<std::vector<double>>();
  m.dev_loss = j.at("dev_loss").get<std::vector<double>>();
  m.train_loss = j.at("train_loss").get<std::vector<double>>();
  m.tree_loss = j.at("tree_loss").get<std::vector<double>>();
  m.best_checkpoint = j.at("best_checkpoint");
  m.final_checkpoint = j.at("final_checkpoint");
  m.wall_clock_seconds = j.value("wall_clock_seconds", 0.0);
  return m;
}

// ---------------------------------------------------------------- training

namespace {

std::vector<model::Sequence> make_batch(const std::vector<Example>& items,
                                        const std::vector<std::size_t>& idx) {
  std::vector<model::Sequence> batch;
  batch.reserve(idx.size());
  for (std::size_t i : idx) {
    const auto& e = items[i];
    batch.push_back(model::Sequence{e.ids, e.word_of_position, e.tree.get(), {}});
  }
  return batch;
}

// LM loss is unaffected by tree supervision, so evaluation runs without it.
AttentionBiasMode eval_mode(const AttentionBiasMode& m) {
  return m.kind == BiasKind::tree_planted ? AttentionBiasMode::none() : m;
}

// Decoupled weight decay Adam; 1-row tensors (biases, norm parameters) are not decayed.
class AdamW {
 public:
  explicit AdamW(const Weights<float>& w) : m_(w.zeros_like()), v_(w.zeros_like()) {}

  void reset() {
    m_.set_zero();
    v_.set_zero();
    t_ = 0;
  }

  void step(Weights<float>& params, Weights<float>& grads, double lr, double wd, double clip) {
    ++t_;
    double scale = 1.0;
    if (clip > 0) {
      double sq = 0.0;
      grads.for_each([&](const std::string&, const Mat<float>& g) {
        sq += g.cast<double>().squaredNorm();
      });
      const double norm = std::sqrt(sq);
      if (!std::isfinite(norm)) throw model::NonFiniteError("non-finite gradient norm");
      if (norm > clip) scale = clip / norm;
    }
    const float b1 = 0.9f, b2 = 0.999f, eps = 1e-8f;
    const float c1 = 1.0f - static_cast<float>(std::pow(0.9, t_));
    const float c2 = 1.0f - static_cast<float>(std::pow(0.999, t_));
    std::vector<Mat<float>*> ms, vs;
    m_.for_each([&](const std::string&, Mat<float>& x) { ms.push_back(&x); });
    v_.for_each([&](const std::string&, Mat<float>& x) { vs.push_back(&x); });
    std::size_t k = 0;
    const float flr = static_cast<float>(lr), fscale = static_cast<float>(scale);
    model::for_each_pair<float>(params, grads, [&](const std::string&, Mat<float>& p, Mat<float>& g) {
      Mat<float>& m = *ms[k];
      Mat<float>& v = *vs[k];
      ++k;
      const bool decay = p.rows() > 1 && wd > 0;
      if (decay) p *= 1.0f - flr * static_cast<float>(wd);
      m = b1 * m + (1.0f - b1) * fscale * g;
      v = b2 * v + (1.0f - b2) * (fscale * g).cwiseAbs2();
      p.array() -= flr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
    });
  }

 private:
  Weights<float> m_, v_;
  long t_ = 0;
};

// Cycles through shuffled passes of the items.
class BatchStream {
 public:
  BatchStream(std::size_t n, int batch, std::uint64_t seed, std::string stream)
      : n_(n), batch_(static_cast<std::size_t>(batch)), seed_(seed), stream_(std::move(stream)) {
    reshuffle();
  }
  std::vector<std::size_t> next() {
    std::vector<std::size_t> out;
    while (out.size() < std::min(batch_, n_)) {
      if (pos_ == order_.size()) {
        ++pass_;
        reshuffle();
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }
  int pass() const { return pass_; }

 private:
  void reshuffle() {
    order_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
    auto rng = make_rng(seed_, stream_, static_cast<std::uint64_t>(pass_));
    std::shuffle(order_.begin(), order_.end(), rng);
    pos_ = 0;
  }
  std::size_t n_, batch_;
  std::uint64_t seed_;
  std::string stream_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  int pass_ = 0;
};

std::string checkpoint_metadata(const TrainConfig& cfg, double eval_epoch, int step,
                                const std::string& kind) {
  ordered_json j;
  j["kind"] = kind;
  j["bias"] = ordered_json::parse(bias_to_json(cfg.bias));
  j["eval_epoch"] = eval_epoch;
  j["step"] = step;
  j["train_config"] = ordered_json::parse(cfg.to_json());
  return j.dump();
}

}  // namespace

double evaluate_loss(const Transformer<float>& m, const std::vector<Example>& items,
                     const AttentionBiasMode& bias, double epoch, int batch_size) {
  if (items.empty()) throw std::invalid_argument("evaluate_loss: no items");
  double nll = 0.0;
  std::size_t count = 0;
  model::RunOptions opt;
  opt.epoch = epoch;
  const auto mode = eval_mode(bias);
  for (std::size_t b = 0; b < items.size(); b += static_cast<std::size_t>(batch_size)) {
    std::vector<std::size_t> idx;
    for (std::size_t i = b; i < std::min(items.size(), b + batch_size); ++i) idx.push_back(i);
    auto r = m.run(make_batch(items, idx), mode, opt);
    nll += r.lm_loss * static_cast<double>(r.n_predictions);
    count += r.n_predictions;
  }
  if (count == 0) throw std::invalid_argument("evaluate_loss: no predicted tokens");
  return nll / static_cast<double>(count);
}

TrainResult train(const model::ModelConfig& mcfg_in, const TrainConfig& cfg, const TrainInputs& in) {
  cfg.validate();
  model::ModelConfig mcfg = mcfg_in;
  mcfg.validate();
  if (cfg.context_len > mcfg.context_len)
    throw std::invalid_argument("train context_len exceeds the model context length");
  if (in.train.empty()) throw std::invalid_argument("training corpus is empty");
  if (in.dev.empty()) throw std::invalid_argument("dev corpus is empty");
  cfg.bias.validate(mcfg.n_heads);
  if (cfg.bias.kind == BiasKind::tree_planted) {
    for (const auto& e : in.train)
      if (!e.tree) throw std::invalid_argument("tree-planted training needs parsed sentences");
  }
  if (cfg.pretrain.steps > 0 && in.dyck.empty())
    throw std::invalid_argument("Dyck phase requested without Dyck data");

  const auto t_begin = std::chrono::steady_clock::now();
  Transformer<float> net(mcfg, cfg.seed);
  Weights<float> grads = net.weights().zeros_like();
  AdamW opt(net.weights());

  RunManifest man;
  man.config_json = cfg.to_json();
  man.model_config_json = mcfg.to_json();
  const bool planted = cfg.bias.kind == BiasKind::tree_planted;
  int global = 0;

  auto update = [&](const std::vector<Example>& items, const std::vector<std::size_t>& idx,
                    const AttentionBiasMode& mode, double epoch, double lr,
                    std::mt19937_64& drng) {
    grads.set_zero();
    model::RunOptions ro;
    ro.epoch = epoch;
    ro.train = mcfg.dropout_rate > 0;
    ro.dropout_rng = &drng;
    auto r = net.run(make_batch(items, idx), mode, ro, &grads);
    opt.step(net.weights(), grads, lr, cfg.weight_decay, cfg.grad_clip);
    man.train_loss.push_back(r.lm_loss);
    if (planted) man.tree_loss.push_back(r.tree_loss);
    ++global;
  };

  // Phase 1: Dyck strings, packed, no bias, constant learning rate.
  if (cfg.pretrain.steps > 0) {
    auto items = pack(in.dyck, cfg.context_len);
    BatchStream bs(items.size(), cfg.batch_size, cfg.seed, "dyck-data");
    auto drng = make_rng(cfg.seed, "dyck-dropout");
    PhaseRecord ph{"dyck", global, 0, "max_steps"};
    for (int s = 0; s < cfg.pretrain.steps; ++s)
      update(items, bs.next(), AttentionBiasMode::none(), 0.0, cfg.learning_rate, drng);
    ph.steps = cfg.pretrain.steps;
    man.phases.push_back(ph);
    opt.reset();
  }

  // Phase 2: the main corpus.
  const int main_first = global;
  std::vector<Example> packed;
  const bool do_pack = cfg.mode == Mode::steps && cfg.pack && !planted;
  if (do_pack) packed = pack(in.train, cfg.context_len);
  const std::vector<Example>& items = do_pack ? packed : in.train;
  for (const auto& e : items)
    if (static_cast<int>(e.ids.size()) > cfg.context_len)
      throw std::invalid_argument("training item longer than context_len");

  auto drng = make_rng(cfg.seed, "dropout");
  EarlyStopper stopper(cfg.patience_steps);
  Weights<float> best_w = net.weights();
  double best_epoch = cfg.epoch_start;
  std::string reason;
  double t_epoch = cfg.epoch_start;

  auto evaluate = [&](int main_step) -> bool {
    const double dl = evaluate_loss(net, in.dev, cfg.bias, t_epoch, cfg.batch_size);
    man.eval_steps.push_back(global);
    man.eval_epochs.push_back(t_epoch);
    man.dev_loss.push_back(dl);
    const bool stop = stopper.update(main_step, dl);
    if (stopper.improved()) {
      best_w = net.weights();
      best_epoch = t_epoch;
      man.best_step = global;
      man.best_dev_loss = dl;
    }
    return stop;
  };

  int main_steps = 0;
  if (cfg.mode == Mode::steps) {
    BatchStream bs(items.size(), cfg.batch_size, cfg.seed, "data");
    reason = "max_steps";
    while (main_steps < cfg.max_steps) {
      auto idx = bs.next();
      t_epoch = cfg.epoch_start + bs.pass();
      update(items, idx, cfg.bias, t_epoch, lr_at(main_steps, cfg, cfg.max_steps), drng);
      ++main_steps;
      if (main_steps % cfg.eval_interval == 0 && evaluate(main_steps)) {
        reason = "early_stop";
        break;
      }
    }
    if (man.eval_steps.empty() || man.eval_steps.back() != global) evaluate(main_steps);
  } else {
    const std::size_t per_epoch =
        (items.size() + static_cast<std::size_t>(cfg.batch_size) - 1) / cfg.batch_size;
    const int total = cfg.max_steps > 0 ? cfg.max_steps : static_cast<int>(per_epoch) * cfg.epochs;
    reason = "epochs_done";
    bool budget_hit = false;
    for (int e = 0; e < cfg.epochs && !budget_hit; ++e) {
      t_epoch = cfg.epoch_start + e;
      std::vector<std::size_t> order(items.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      auto rng = make_rng(cfg.seed, "data", static_cast<std::uint64_t>(e));
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
        std::vector<std::size_t> idx(order.begin() + static_cast<long>(b),
                                     order.begin() + static_cast<long>(std::min(order.size(), b + cfg.batch_size)));
        update(items, idx, cfg.bias, t_epoch, lr_at(main_steps, cfg, total), drng);
        ++main_steps;
        if (main_steps % cfg.eval_interval == 0) evaluate(main_steps);
        if (cfg.max_steps > 0 && main_steps >= cfg.max_steps) {
          budget_hit = true;
          reason = "max_steps";
          break;
        }
      }
      if (man.eval_steps.empty() || man.eval_steps.back() != global) evaluate(main_steps);
    }
  }
  man.phases.push_back({"main", main_first, main_steps, reason});
  man.stopping_reason = reason;
  man.final_epoch = t_epoch;
  man.final_train_loss = evaluate_loss(net, items, cfg.bias, t_epoch, cfg.batch_size);

  TrainResult res{man, Transformer<float>(mcfg, best_w), net};
  if (!in.output_dir.empty()) {
    fs::create_directories(in.output_dir);
    auto save = [&](const std::string& name, const Weights<float>& w, double epoch, int step,
                    const std::string& kind) {
      model::Checkpoint ck;
      ck.config = mcfg;
      ck.weights = w;
      if (in.tokenizer) {
        ck.tokenizer_vocab = in.tokenizer->vocab_json();
        ck.tokenizer_merges = in.tokenizer->merges_text();
      }
      ck.metadata = checkpoint_metadata(cfg, epoch, step, kind);
      const auto path = (fs::path(in.output_dir) / name).string();
      model::save_checkpoint(path, ck);
      return path;
    };
    res.manifest.best_checkpoint = save("best.ckpt", best_w, best_epoch, man.best_step, "best");
    res.manifest.final_checkpoint = save("final.ckpt", net.weights(), t_epoch, global, "final");
  }
  res.manifest.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_begin).count();
  if (!in.output_dir.empty())
    write_file((fs::path(in.output_dir) / "manifest.json").string(), res.manifest.to_json());
  return res;
}

CheckpointInfo checkpoint_info(const model::Checkpoint& ck) {
  auto j = json::parse(ck.metadata.empty() ? "{}" : ck.metadata);
  CheckpointInfo info;
  if (j.contains("bias")) info.bias = bias_from_json(j["bias"].dump());
  info.eval_epoch = j.value("eval_epoch", 0.0);
  return info;
}

// ---------------------------------------------------------------- jobs

TrainJob TrainJob::from_json(const std::string& text, const std::string& base_dir) {
  auto j = json::parse(text);
  TrainJob job;
  auto resolve = [&](const std::string& p) {
    if (p.empty() || fs::path(p).is_absolute()) return p;
    return (fs::path(base_dir) / p).lexically_normal().string();
  };
  const auto m = j.value("model", json::object());
  job.model = model::ModelConfig::preset(m.value("preset", std::string("mini")));
  job.model.hidden_size = m.value("hidden_size", job.model.hidden_size);
  job.model.n_heads = m.value("n_heads", job.model.n_heads);
  job.model.n_layers = m.value("n_layers", job.model.n_layers);
  job.model.ffn_dim = m.value("ffn_dim", job.model.ffn_dim);
  job.model.dropout_rate = m.value("dropout_rate", job.model.dropout_rate);
  job.train = TrainConfig::from_json(j.value("train", json::object()).dump());
  job.model.context_len = m.value("context_len", job.train.context_len);
  const auto d = j.value("data", json::object());
  job.train_path = resolve(d.value("train", std::string()));
  job.dev_path = resolve(d.value("dev", std::string()));
  job.tokenizer_vocab = resolve(d.value("vocab", std::string()));
  job.tokenizer_merges = resolve(d.value("merges", std::string()));
  job.output_dir = resolve(d.value("output_dir", std::string()));
  if (job.train_path.empty()) throw std::invalid_argument("train job: data.train is required");
  if (job.tokenizer_vocab.empty() || job.tokenizer_merges.empty())
    throw std::invalid_argument("train job: data.vocab and data.merges are required");
  return job;
}

TrainJob TrainJob::from_file(const std::string& path) {
  return from_json(read_config_json(path), fs::path(path).parent_path().string());
}

namespace {

bool is_record_file(const std::string& path) {
  return ends_with(path, ".conllu") || ends_with(path, ".conllu.gz") || ends_with(path, ".jsonl") ||
         ends_with(path, ".conll");
}

std::vector<std::string> read_lines(const std::string& path) {
  std::vector<std::string> lines;
  std::string text = read_file(path), line;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    line = text.substr(start, end - start);
    if (!split_whitespace(line).empty()) lines.push_back(line);
    start = end + 1;
  }
  return lines;
}

}  // namespace

RunManifest run_job(const TrainJob& job) {
  auto tok = tokenizer::BpeModel::load(job.tokenizer_vocab, job.tokenizer_merges);
  model::ModelConfig mcfg = job.model;
  mcfg.vocab_size = tok.size();
  const TrainConfig& cfg = job.train;
  const bool trees = cfg.bias.kind == BiasKind::tree_planted;
  TrainInputs in;
  in.tokenizer = &tok;
  in.output_dir = job.output_dir;
  if (is_record_file(job.train_path)) {
    auto records = corpus::load_records(job.train_path);
    if (job.dev_path.empty()) {
      auto split = split_dev(records, cfg.dev_fraction);
      in.train = encode_records(tok, split.train, cfg.context_len, trees);
      in.dev = encode_records(tok, split.dev, cfg.context_len, false);
    } else {
      in.train = encode_records(tok, records, cfg.context_len, trees);
      in.dev = encode_records(tok, corpus::load_records(job.dev_path), cfg.context_len, false);
    }
  } else {
    if (trees) throw std::invalid_argument("tree-planted training needs a parsed corpus");
    auto lines = read_lines(job.train_path);
    if (job.dev_path.empty()) {
      std::vector<corpus::SentenceRecord> recs;
      for (std::size_t i = 0; i < lines.size(); ++i) {
        corpus::SentenceRecord r;
        r.id = std::to_string(i);
        r.text = lines[i];
        recs.push_back(r);
      }
      auto split = split_dev(recs, cfg.dev_fraction);
      std::vector<std::string> tr, dv;
      for (const auto& r : split.train) tr.push_back(r.text);
      for (const auto& r : split.dev) dv.push_back(r.text);
      in.train = encode_lines(tok, tr, cfg.context_len);
      in.dev = encode_lines(tok, dv, cfg.context_len);
    } else {
      in.train = encode_lines(tok, lines, cfg.context_len);
      in.dev = encode_lines(tok, read_lines(job.dev_path), cfg.context_len);
    }
  }
  if (cfg.pretrain.steps > 0) {
    auto strings = dyck::generate_dyck(cfg.pretrain.dyck, cfg.pretrain.n_strings,
                                       derive_seed(cfg.seed, "dyck-corpus"));
    in.dyck = encode_dyck(tok, strings, cfg.pretrain.dyck.k);
  }
  return train(mcfg, cfg, in).manifest;
}

}  // namespace posh::trainer
