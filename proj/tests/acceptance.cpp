// Acceptance suite: one PASS/FAIL line per criterion.
// Usage: posh_acceptance [criterion ids...]   (default: all)

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "posh/cli.hpp"
#include "posh/corpus.hpp"
#include "posh/dyck.hpp"
#include "posh/eval.hpp"
#include "posh/model.hpp"
#include "posh/synth.hpp"
#include "posh/templates.hpp"
#include "posh/tokenizer.hpp"
#include "posh/trainer.hpp"
#include "posh/util.hpp"

using namespace posh;
namespace fs = std::filesystem;

namespace {

const std::string kRoot = POSH_SOURCE_DIR;
const std::string kData = kRoot + "/data";

struct Outcome {
  bool pass = true;
  std::ostringstream detail;
  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

// ---- 1: filter soundness ----
void filter_soundness(Outcome& o) {
  const auto g = synth::Grammar::load(kData + "/lexicon.json");
  auto qf = synth::generate(g, 1000, synth::Mix::only(synth::Kind::qf_evidence), 101, "qf");
  auto bind = synth::generate(g, 1000, synth::Mix::only(synth::Kind::binding_evidence), 102, "bind");
  auto distract = synth::generate(g, 1000, synth::Mix::distractors(), 103, "dist");
  std::vector<corpus::SentenceRecord> all;
  for (auto* v : {&qf, &bind, &distract}) all.insert(all.end(), v->begin(), v->end());
  auto res = corpus::filter_corpus(
      all, {corpus::Phenomenon::question_formation, corpus::Phenomenon::binding});
  std::set<std::string> removed;
  for (const auto& r : res.removed) removed.insert(r.id);
  std::size_t qf_hit = 0, bind_hit = 0, fp = 0;
  for (const auto& r : qf) qf_hit += removed.count(r.id);
  for (const auto& r : bind) bind_hit += removed.count(r.id);
  for (const auto& r : distract) fp += removed.count(r.id);
  o.detail << "qf removed " << qf_hit << "/1000, binding removed " << bind_hit
           << "/1000, distractor false positives " << fp << "/1000 (" << fmt("%.1f", fp / 10.0) << "%)";
  o.require(qf_hit == 1000 && bind_hit == 1000, "evidence recall 100%");
  o.require(res.kept.size() + res.removed.size() == all.size(), "partition");
}

// ---- 2: benchmark generation ----
void benchmark_generation(Outcome& o) {
  const auto dir = fs::temp_directory_path() / "posh_acceptance_bench";
  fs::create_directories(dir);
  cli::BenchArgs a;
  a.templates = kData + "/templates.txt";
  a.lexicon = kData + "/lexicon.json";
  a.vocab = kData + "/shared_vocab.txt";
  a.n = 500;
  a.seed = 2024;
  a.out = (dir / "bench.jsonl").string();
  a.manifest = (dir / "manifest.json").string();
  auto b = cli::cmd_bench_generate(a);
  auto check = cli::cmd_bench_check(a.out, a);
  std::size_t full = 0;
  for (const auto& [sub, n] : b.counts) full += n == 500;
  o.detail << b.counts.size() << " subcategories, " << full << " with 500 pairs, " << check.pairs
           << " pairs; closure " << check.closure_failures << ", minimality " << check.minimality_failures
           << ", distinctness " << check.distinctness_failures << ", agreement " << check.agreement_failures
           << " failures (" << check.agreement_checked << " agreement checks)";
  o.require(b.counts.size() >= 9 && full == b.counts.size(), ">= 9 subcategories x 500");
  o.require(check.ok(), "all invariants");
  o.require(check.pairs == b.pairs.size(), "reread");
}

model::ModelConfig grad_config() {
  model::ModelConfig c;
  c.hidden_size = 8;
  c.n_heads = 2;
  c.n_layers = 2;
  c.ffn_dim = 32;
  c.vocab_size = 50;
  c.context_len = 16;
  c.dropout_rate = 0.0;
  return c;
}

struct GradBatch {
  model::TreeDistanceMatrix t1, t2;
  std::vector<model::Sequence> seqs;
  GradBatch() {
    t1 = model::tree_distances_from_heads({2, 0, 2, 5, 3});
    t2 = model::tree_distances_from_heads({0, 1, 1, 3});
    seqs.push_back({{2, 11, 12, 13, 14, 15, 3}, {-1, 0, 1, 2, 3, 4, -1}, &t1, {}});
    seqs.push_back({{2, 20, 21, 22, 22, 23, 3}, {-1, 0, 1, 2, 2, 3, -1}, &t2, {}});
  }
};

// ---- 3: gradient correctness ----
void gradient_correctness(Outcome& o) {
  model::Transformer<double> m(grad_config(), 31);
  GradBatch b;
  struct Case {
    const char* name;
    model::AttentionBiasMode mode;
    double t;
  };
  const std::vector<Case> cases{{"none", model::AttentionBiasMode::none(), 0},
                                {"recency t=0", model::AttentionBiasMode::recency(0.6), 0},
                                {"recency t=3", model::AttentionBiasMode::recency(0.6), 3},
                                {"tree lambda=1", model::AttentionBiasMode::tree_planted(1.0), 0}};
  for (const auto& c : cases) {
    auto rep = model::gradient_check(m, b.seqs, c.mode, c.t, 1e-4, 1e-4, 0);
    o.detail << c.name << ": " << rep.checked << " params, " << fmt("%.4f", 100 * rep.fraction_within())
             << "% within 1e-4, max " << fmt("%.2e", rep.max_rel_error) << "; ";
    o.require(rep.fraction_within() >= 0.99, std::string(c.name) + " fraction");
    o.require(rep.max_rel_error <= 1e-3, std::string(c.name) + " max");
  }
}

// ---- 4: recency limit ----
void recency_limit(Outcome& o) {
  model::Transformer<double> m(grad_config(), 41);
  GradBatch b;
  auto g0 = m.weights().zeros_like();
  auto base = m.run(b.seqs, model::AttentionBiasMode::none(), {}, &g0);
  model::RunOptions late;
  late.epoch = 56;  // 0.6^56 ~ 3.8e-13
  const double rt = std::pow(0.6, late.epoch);
  auto g1 = m.weights().zeros_like();
  auto rec = m.run(b.seqs, model::AttentionBiasMode::recency(0.6), late, &g1);
  const double dlogit = (base.logits - rec.logits).cwiseAbs().maxCoeff();
  double dgrad = 0;
  model::for_each_pair<double>(g0, g1, [&](const std::string&, model::Mat<double>& x, model::Mat<double>& y) {
    dgrad = std::max(dgrad, (x - y).cwiseAbs().maxCoeff());
  });
  const auto v = model::recency_bias(3, 0.6, 1);
  const bool exact = v.size() == 3 && v[0] == -1.2 && v[1] == -0.6 && v[2] == 0.0;
  o.detail << "r^t = " << fmt("%.2e", rt) << ", max |logit diff| " << fmt("%.2e", dlogit)
           << ", max |grad diff| " << fmt("%.2e", dgrad) << "; bias(i=3,r=0.6,t=1) = (" << v[0] << ", "
           << v[1] << ", " << v[2] << ")";
  o.require(rt < 1e-12, "r^t < 1e-12");
  o.require(dlogit <= 1e-9 && dgrad <= 1e-9, "vanilla equivalence");
  o.require(exact, "exact bias vector");
}

// ---- 5: tree-planting loss ----
void tree_loss(Outcome& o) {
  std::mt19937_64 rng(55);
  std::uniform_real_distribution<double> u(1e-3, 1.0);
  double min_kl = INFINITY, max_zero = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const int n = 2 + int(rng() % 9);
    std::vector<int> heads(n);  // random tree: root 1, others attach to an earlier word
    for (int i = 0; i < n; ++i) heads[i] = i == 0 ? 0 : 1 + int(rng() % i);
    std::shuffle(heads.begin(), heads.end(), rng);
    int root = 0;
    for (int i = 0; i < n; ++i) root += heads[i] == 0;
    if (root != 1) continue;
    model::TreeDistanceMatrix tree;
    try {
      tree = model::tree_distances_from_heads(heads);
    } catch (const std::exception&) {
      continue;  // shuffling can create cycles
    }
    std::vector<int> wop(n);
    for (int i = 0; i < n; ++i) wop[i] = i;
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n), target = Eigen::MatrixXd::Zero(n, n);
    for (int i = 0; i < n; ++i) {
      double z = 0;
      for (int j = 0; j <= i; ++j) z += a(i, j) = u(rng);
      a.row(i) /= z;
      auto r = model::tree_target_row(tree, wop, i);
      for (int j = 0; j <= i; ++j) target(i, j) = r[j];
    }
    min_kl = std::min(min_kl, model::tree_planting_loss({a}, tree, wop));
    max_zero = std::max(max_zero, std::abs(model::tree_planting_loss({target}, tree, wop)));
  }
  auto chain = model::tree_distances_from_heads({0, 1, 2});
  auto row = model::tree_target_row(chain, {0, 1, 2}, 2);
  const double z = std::exp(-2.0) + std::exp(-1.0) + 1.0;
  double chain_err = 0;
  for (int j = 0; j < 3; ++j) chain_err = std::max(chain_err, std::abs(row[j] - std::exp(-(2.0 - j)) / z));
  o.detail << "min KL on random inputs " << fmt("%.3e", min_kl) << ", max |KL| at target "
           << fmt("%.1e", max_zero) << ", chain row error " << fmt("%.1e", chain_err);
  o.require(min_kl >= 0.0, "KL >= 0");
  o.require(max_zero <= 1e-10, "KL = 0 at target");
  o.require(chain_err <= 1e-15, "chain normalization");
}

// ---- 6: overfit ----
void overfit(Outcome& o) {
  const auto g = synth::Grammar::load(kData + "/lexicon.json");
  auto recs = synth::generate(g, 200, synth::Mix::natural(), 606, "o");
  std::string text;
  for (const auto& r : recs) text += r.surface() + "\n";
  auto tok = tokenizer::train_bpe_text(text, 400);
  model::ModelConfig mcfg = model::ModelConfig::preset("mini");
  mcfg.hidden_size = 128;
  mcfg.n_layers = 2;
  mcfg.ffn_dim = 512;
  mcfg.dropout_rate = 0.0;
  mcfg.vocab_size = tok.size();
  trainer::TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 8;
  cfg.context_len = 32;
  mcfg.context_len = cfg.context_len;
  cfg.warmup_steps = 100;
  cfg.max_steps = 2000;
  cfg.patience_steps = 2000;
  cfg.eval_interval = 500;
  cfg.weight_decay = 0.0;
  cfg.seed = 6;
  trainer::TrainInputs in;
  in.train = trainer::encode_records(tok, recs, cfg.context_len, false);
  in.dev = std::vector<trainer::Example>(in.train.begin(), in.train.begin() + 20);
  auto a = trainer::train(mcfg, cfg, in);
  auto b = trainer::train(mcfg, cfg, in);
  // Loss over the packed chunks the trainer optimizes.
  const double loss = trainer::evaluate_loss(a.final_model, trainer::pack(in.train, cfg.context_len), {}, 0.0);
  const double per_sentence = trainer::evaluate_loss(a.final_model, in.train, {}, 0.0);
  const bool same = a.manifest.to_json(false) == b.manifest.to_json(false);
  o.detail << "train loss " << fmt("%.4f", loss) << " nats/token after " << a.manifest.train_loss.size()
           << " steps (" << tok.size() << " token vocabulary; sentence-by-sentence "
           << fmt("%.3f", per_sentence) << "); reruns " << (same ? "bit-identical" : "DIFFER");
  o.require(loss < 0.1, "loss < 0.1");
  o.require(same, "identical manifests");
}

// ---- 7: evaluation oracle ----
double oracle_p(long c, long n) {
  const double e = n / 2.0;
  const double x = (c - e) * (c - e) / e + ((n - c) - e) * ((n - c) - e) / e;
  return std::erfc(std::sqrt(x / 2.0));
}

void eval_oracle(Outcome& o) {
  auto k = eval::chi2_vs_chance(300, 500);
  auto half = eval::chi2_vs_chance(250, 500);
  double worst_p = 0;
  long acc_mismatch = 0;
  std::mt19937_64 rng(77);
  std::vector<eval::SeedResult> seeds(3);
  for (int s = 0; s < 3; ++s) {
    std::vector<eval::PairScore> scores;
    for (int i = 0; i < 900; ++i) {
      eval::PairScore p;
      p.phenomenon = "ph" + std::to_string(i % 3);
      p.subcategory = "sub" + std::to_string(i % 9);
      p.correct = rng() % 100 < 55 + 10 * (i % 3);
      scores.push_back(p);
    }
    seeds[s] = eval::tally(scores);
    for (const auto& [key, c] : seeds[s]) {
      long brute = 0, n = 0;
      for (const auto& p : scores) {
        const bool in = key == "overall" || key == "phenomenon/" + p.phenomenon ||
                        key == "subcategory/" + p.phenomenon + "/" + p.subcategory;
        n += in;
        brute += in && p.correct;
      }
      acc_mismatch += brute != c.n_correct || n != c.n_items;
      worst_p = std::max(worst_p, std::abs(eval::chi2_vs_chance(c.n_correct, c.n_items).p_value -
                                           oracle_p(c.n_correct, c.n_items)));
    }
  }
  auto agg = eval::aggregate_seeds(seeds);
  long agg_mismatch = 0;
  for (const auto& r : agg) {
    long sum_c = 0, sum_n = 0;
    for (const auto& p : r.per_seed) sum_c += p.n_correct, sum_n += p.n_items;
    agg_mismatch += sum_c != r.n_correct || sum_n != r.n_items;
  }
  const double mean = eval::mean({0.6, 0.7, 0.8});
  const double sd = *eval::sample_sd({0.6, 0.7, 0.8});
  o.detail << "300/500: chi2 " << k.statistic << ", p " << fmt("%.4e", k.p_value) << "; 250/500: p "
           << half.p_value << "; count mismatches " << acc_mismatch + agg_mismatch << ", max |p - oracle| "
           << fmt("%.1e", worst_p) << "; {0.6,0.7,0.8}: mean " << mean << ", sd " << fmt("%.15g", sd);
  o.require(std::abs(k.statistic - 20.0) < 1e-12, "chi2 = 20");
  o.require(std::abs(k.p_value - oracle_p(300, 500)) < 1e-6 && std::abs(k.p_value - 7.74e-6) < 5e-9, "p(300/500)");
  o.require(half.p_value == 1.0, "p(250/500) = 1");
  o.require(acc_mismatch == 0 && agg_mismatch == 0, "exact counts");
  o.require(worst_p < 1e-6, "p within 1e-6");
  o.require(std::abs(mean - 0.7) < 1e-12 && std::abs(sd - 0.1) < 1e-12, "mean/sd");
}

// ---- 8: Dyck validity ----
// Independent validator: one stack per bracket type.
bool stack_valid(const std::vector<std::string>& toks, int k, int max_depth) {
  std::vector<int> depth(k, 0);
  for (const auto& t : toks) {
    if (t.size() < 5 || t[0] != '<' || t.back() != '>' || t[2] != ':') return false;
    const bool open = t[1] == 'o';
    if (!open && t[1] != 'c') return false;
    const int type = std::atoi(t.substr(3, t.size() - 4).c_str());
    if (type < 0 || type >= k) return false;
    if (open) {
      if (++depth[type] > max_depth) return false;
    } else if (--depth[type] < 0) {
      return false;
    }
  }
  for (int d : depth)
    if (d) return false;
  return true;
}

void dyck_validity(Outcome& o) {
  const dyck::DyckConfig cfg;
  auto strings = dyck::generate_dyck(cfg, 10000, 8);
  std::size_t accepted = 0, in_bounds = 0, mutants = 0, rejected = 0, valid_mutants = 0, bad_accept = 0;
  std::mt19937_64 rng(88);
  for (const auto& s : strings) {
    auto toks = split_whitespace(s);
    accepted += stack_valid(toks, cfg.k, cfg.max_depth) && dyck::validate_dyck(s, cfg);
    in_bounds += int(toks.size()) >= cfg.min_length && int(toks.size()) <= cfg.max_length;
    for (int m = 0; m < 5; ++m) {
      auto mut = toks;
      const std::size_t pos = rng() % mut.size();
      auto b = *dyck::parse_token(mut[pos]);
      switch (rng() % 4) {
        case 0:  // flip direction
          mut[pos] = b.open ? dyck::close_token(b.type) : dyck::open_token(b.type);
          break;
        case 1: {  // change type
          const int t = (b.type + 1 + int(rng() % (cfg.k - 1))) % cfg.k;
          mut[pos] = b.open ? dyck::open_token(t) : dyck::close_token(t);
          break;
        }
        case 2:  // delete
          mut.erase(mut.begin() + long(pos));
          break;
        default: {  // insert
          const int t = int(rng() % cfg.k);
          mut.insert(mut.begin() + long(pos), rng() % 2 ? dyck::open_token(t) : dyck::close_token(t));
        }
      }
      ++mutants;
      const bool ok = dyck::validate_dyck(join(mut, " "), cfg);
      rejected += !ok;
      if (ok) {
        const bool truly = stack_valid(mut, cfg.k, cfg.max_depth);
        valid_mutants += truly;
        bad_accept += !truly;
      }
    }
  }
  const double rate = double(rejected) / double(mutants);
  o.detail << accepted << "/10000 accepted, " << in_bounds << "/10000 within length bounds, mutants rejected "
           << rejected << "/" << mutants << " (" << fmt("%.3f", 100 * rate) << "%), accepted mutants verified valid "
           << valid_mutants << ", wrongly accepted " << bad_accept;
  o.require(accepted == 10000, "all accepted");
  o.require(in_bounds == 10000, "bounds");
  o.require(rate >= 0.999 && bad_accept == 0, "mutations");
}

// ---- 9: tokenizer ----
// Zipf-distributed pseudo-words so that merges keep paying off at large vocabularies.
std::string pseudo_corpus(std::size_t chars, std::uint64_t seed) {
  static const std::vector<std::string> onset{"", "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t",
                                              "v", "z", "br", "st", "tr", "sh", "ch", "kl", "pr"};
  static const std::vector<std::string> nucleus{"a", "e", "i", "o", "u", "ai", "ou", "ea"};
  static const std::vector<std::string> coda{"", "", "n", "r", "s", "t", "l", "nd", "ck"};
  std::mt19937_64 rng(seed);
  std::vector<std::string> words;
  std::set<std::string> seen;
  while (words.size() < 400000) {
    std::string w;
    const int syl = 1 + int(rng() % 4);
    for (int s = 0; s < syl; ++s)
      w += onset[rng() % onset.size()] + nucleus[rng() % nucleus.size()] + coda[rng() % coda.size()];
    if (seen.insert(w).second) words.push_back(w);
  }
  std::vector<double> weights(words.size());
  for (std::size_t i = 0; i < words.size(); ++i) weights[i] = 1.0 / double(i + 1);
  std::discrete_distribution<std::size_t> zipf(weights.begin(), weights.end());
  std::string out;
  while (out.size() < chars) {
    const int len = 5 + int(rng() % 15);
    for (int i = 0; i < len; ++i) out += (i ? " " : "") + words[zipf(rng)];
    out += rng() % 5 ? " .\n" : " ?\n";
  }
  return out;
}

void tokenizer_checks(Outcome& o) {
  // Round trip on natural-mix synthetic sentences.
  const auto g = synth::Grammar::load(kData + "/lexicon.json");
  auto recs = synth::generate(g, 1000, synth::Mix::natural(), 909, "t");
  std::string text;
  for (const auto& r : recs) text += r.surface() + "\n";
  auto small = tokenizer::train_bpe_text(text, 300);
  std::size_t round = 0;
  for (const auto& r : recs) round += small.decode(small.encode(r.surface())) == r.surface();

  const auto corpus = pseudo_corpus(1000000, 99);
  const std::vector<std::size_t> sizes{8192, 32768, 49152, 65536};
  std::vector<std::uint64_t> ctc;
  std::vector<int> learned;
  for (auto s : sizes) {
    auto m = tokenizer::train_bpe_text(corpus, s);
    learned.push_back(m.learned_size());
    ctc.push_back(tokenizer::corpus_token_count(m, corpus));
  }
  bool monotone = true;
  for (std::size_t i = 1; i < ctc.size(); ++i) monotone &= ctc[i] <= ctc[i - 1];

  // Selection fixtures against a brute-force argmin of max pairwise relative gap.
  std::mt19937_64 rng(9);
  std::size_t agree = 0, fixtures = 200;
  for (std::size_t f = 0; f < fixtures; ++f) {
    const std::size_t nc = 2 + rng() % 3, nk = 2 + rng() % 4;
    std::vector<std::vector<std::uint64_t>> m(nc, std::vector<std::uint64_t>(nk));
    for (auto& row : m)
      for (auto& x : row) x = 1000 + rng() % 500;
    std::size_t best = 0;
    double best_d = INFINITY;
    for (std::size_t k = 0; k < nk; ++k) {
      double d = 0;
      for (std::size_t a = 0; a < nc; ++a)
        for (std::size_t b = 0; b < nc; ++b)
          d = std::max(d, (double(m[a][k]) - double(m[b][k])) / double(std::min(m[a][k], m[b][k])));
      if (d < best_d) best_d = d, best = k;
    }
    agree += tokenizer::select_vocab_index(m) == best;
  }
  o.detail << "round trip " << round << "/1000; CTC on " << corpus.size() << " chars:";
  for (std::size_t i = 0; i < sizes.size(); ++i)
    o.detail << " " << sizes[i] << "->" << ctc[i] << " (" << learned[i] << " learned)";
  o.detail << "; selection fixtures " << agree << "/" << fixtures;
  o.require(round == 1000, "round trip");
  o.require(monotone, "CTC weakly decreasing");
  o.require(agree == fixtures, "selection argmin");
}

// ---- 10: toy replication ----
void toy_replication(Outcome& o) {
  const fs::path out_root = fs::path(POSH_BINARY_DIR) / "acceptance-exp3";
  fs::remove_all(out_root);
  setenv("POSH_OUTPUT_ROOT", out_root.c_str(), 1);
  auto recipe = cli::Recipe::load(kRoot + "/recipes/exp3-biases-toy/recipe.toml");
  unsetenv("POSH_OUTPUT_ROOT");
  std::ostringstream log;
  const auto t0 = std::chrono::steady_clock::now();
  auto res = cli::run_recipe(recipe, false, log);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  o.require(res.status == 0, "pipeline: " + res.failed_stage + ": " + res.message);
  if (res.status) return;
  const auto dir = recipe.output_dir;
  auto check = nlohmann::json::parse(read_file((dir / "bench" / "check.json").string()));
  auto tok = tokenizer::BpeModel::load((dir / "tok" / "vocab.json").string(), (dir / "tok" / "merges.txt").string());
  std::string text;
  for (const auto& l : cli::corpus_lines((dir / "filtered" / "kept.conllu").string())) text += l + "\n";
  const auto tokens = tokenizer::corpus_token_count(tok, text);
  auto filtered = corpus::load_records((dir / "filtered" / "kept.conllu").string());
  std::size_t leaked = 0;
  for (const auto& r : filtered) leaked += corpus::is_qf_evidence(r) || corpus::is_binding_evidence(r);
  std::size_t runs = 0;
  for (const char* cond : {"vanilla", "recency", "dyck"})
    for (auto s : recipe.seeds) runs += fs::exists(dir / cond / ("seed-" + std::to_string(s)) / "best.ckpt");

  auto control = nlohmann::json::parse(read_file((dir / "control" / "report.json").string()));
  const auto& overall = control["results"][0];
  bool in_band = true;
  o.detail << "9 runs in " << fmt("%.0f", secs) << " s; corpus " << tokens << " tokens, evidence leaked "
           << leaked << "; bench " << check["pairs"] << " pairs, checks " << (check["ok"] ? "ok" : "FAIL")
           << "; control accuracy per seed:";
  for (const auto& p : overall["per_seed"]) {
    const double n = p["n_items"].get<double>();
    const double half = 2.5758293035489 * std::sqrt(0.25 / n);
    const double acc = p["accuracy"].get<double>();
    in_band &= std::abs(acc - 0.5) <= half;
    o.detail << " " << fmt("%.3f", acc) << " (band 0.5+-" << fmt("%.3f", half) << ")";
  }
  auto cmp = nlohmann::json::parse(read_file((dir / "compare" / "compare.json").string()));
  o.detail << "; overall means:";
  for (const auto& [label, v] : cmp["rows"][0]["values"].items()) o.detail << " " << label << " " << fmt("%.3f", v["mean"].get<double>());
  o.require(runs == 9, "9 checkpoints");
  o.require(check["ok"].get<bool>(), "bench invariants");
  o.require(leaked == 0, "no evidence in training corpus");
  o.require(in_band, "control within 99% band");
  o.require(secs < 3600, "runtime < 1 h");
}

struct Criterion {
  int id;
  const char* name;
  double budget_s;
  std::function<void(Outcome&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "filter soundness", 10, filter_soundness},
      {2, "benchmark generation", 30, benchmark_generation},
      {3, "gradient correctness", 120, gradient_correctness},
      {4, "recency limit", 0, recency_limit},
      {5, "tree-planting loss", 0, tree_loss},
      {6, "overfit sanity", 600, overfit},
      {7, "evaluation oracle", 0, eval_oracle},
      {8, "dyck validity", 0, dyck_validity},
      {9, "tokenizer", 0, tokenizer_checks},
      {10, "toy replication", 3600, toy_replication},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  int failures = 0;
  for (const auto& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      c.run(o);
    } catch (const std::exception& e) {
      o.require(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget_s > 0) o.require(secs < c.budget_s, "runtime budget " + fmt("%.0f s", c.budget_s));
    std::printf("%s criterion %d (%s): %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", c.id, c.name,
                o.detail.str().c_str(), secs);
    std::fflush(stdout);
    failures += !o.pass;
  }
  return failures ? 1 : 0;
}
