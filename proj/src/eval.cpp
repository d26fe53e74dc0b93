#include "posh/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "json.hpp"
#include "posh/trainer.hpp"
#include "posh/util.hpp"

namespace posh::eval {

using nlohmann::json;
using nlohmann::ordered_json;

TransformerLM::TransformerLM(model::Transformer<double> m, model::AttentionBiasMode bias,
                             double epoch)
    : model_(std::move(m)), bias_(bias), epoch_(epoch) {}

std::vector<std::vector<double>> TransformerLM::logprobs(
    const std::vector<std::vector<int>>& seqs) const {
  return model_.token_logprobs(seqs, bias_, epoch_);
}

LoadedModel load_model(const std::string& checkpoint_path) {
  auto ck = model::load_checkpoint(checkpoint_path);
  if (ck.tokenizer_vocab.empty())
    throw std::runtime_error(checkpoint_path + ": checkpoint has no embedded tokenizer");
  auto info = trainer::checkpoint_info(ck);
  model::Transformer<float> f(ck.config, ck.weights);
  LoadedModel out;
  out.lm = std::make_unique<TransformerLM>(f.cast<double>(), info.bias, info.eval_epoch);
  out.tokenizer = tokenizer::BpeModel::from_files(ck.tokenizer_vocab, ck.tokenizer_merges);
  return out;
}

Normalization normalization_from_string(const std::string& s) {
  if (s == "per_token" || s == "token") return Normalization::per_token;
  if (s == "total" || s == "sum") return Normalization::total;
  throw std::invalid_argument("unknown normalization '" + s + "'");
}

std::vector<int> encode_sentence(const tokenizer::BpeModel& tok, const std::string& sentence) {
  auto ids = tok.encode(sentence);
  if (ids.empty()) throw std::invalid_argument("sentence is empty after tokenization");
  ids.insert(ids.begin(), tok.bos_id());
  return ids;
}

namespace {

SentenceScore sum_score(const std::vector<double>& lp) {
  SentenceScore s;
  for (double v : lp) s.logprob += v;
  s.tokens = static_cast<int>(lp.size());
  return s;
}

double log_perplexity(double logprob, int tokens, Normalization norm) {
  return norm == Normalization::per_token ? -logprob / tokens : -logprob;
}

}  // namespace

SentenceScore score_sentence(const LanguageModel& lm, const tokenizer::BpeModel& tok,
                             const std::string& sentence) {
  auto ids = encode_sentence(tok, sentence);
  if (static_cast<int>(ids.size()) > lm.context_len())
    throw std::invalid_argument("sentence exceeds the model context");
  return sum_score(lm.logprobs({ids}).at(0));
}

double perplexity(const SentenceScore& s, Normalization norm) {
  if (s.tokens <= 0) throw std::invalid_argument("perplexity of an empty sentence");
  return std::exp(log_perplexity(s.logprob, s.tokens, norm));
}

double sentence_perplexity(const LanguageModel& lm, const tokenizer::BpeModel& tok,
                           const std::string& sentence, Normalization norm) {
  return perplexity(score_sentence(lm, tok, sentence), norm);
}

void decide(PairScore& p, Normalization norm, double tie_tolerance) {
  const double g = log_perplexity(p.logprob_good, p.tokens_good, norm);
  const double b = log_perplexity(p.logprob_bad, p.tokens_bad, norm);
  // Relative tolerance on perplexity, compared in log space.
  p.tie = std::abs(g - b) <= -std::log1p(-tie_tolerance);
  p.correct = !p.tie && g < b;
}

std::vector<PairScore> score_pairs(const LanguageModel& lm, const tokenizer::BpeModel& tok,
                                   const std::vector<templates::MinimalPair>& pairs,
                                   const ScoreOptions& opt) {
  if (opt.batch_size <= 0) throw std::invalid_argument("batch_size must be > 0");
  std::vector<PairScore> out(pairs.size());
  std::vector<std::vector<int>> seqs;
  std::vector<std::size_t> owner;  // seqs[2k], seqs[2k+1] belong to pair owner[k]
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    auto& ps = out[i];
    ps.pair_id = std::to_string(i);
    ps.phenomenon = pairs[i].phenomenon;
    ps.subcategory = pairs[i].subcategory;
    ps.template_id = pairs[i].template_id;
    try {
      auto g = encode_sentence(tok, pairs[i].sentence_good);
      auto b = encode_sentence(tok, pairs[i].sentence_bad);
      if (static_cast<int>(std::max(g.size(), b.size())) > lm.context_len())
        throw std::invalid_argument("sentence exceeds the model context");
      seqs.push_back(std::move(g));
      seqs.push_back(std::move(b));
      owner.push_back(i);
    } catch (const std::exception& e) {
      ps.error = e.what();
    }
  }

  std::vector<std::vector<double>> lps(seqs.size());
  const std::size_t bs = static_cast<std::size_t>(opt.batch_size);
  const std::size_t n_batches = (seqs.size() + bs - 1) / bs;
  auto work = [&](std::size_t first, std::size_t stride) {
    for (std::size_t k = first; k < n_batches; k += stride) {
      const std::size_t lo = k * bs, hi = std::min(seqs.size(), lo + bs);
      std::vector<std::vector<int>> batch(seqs.begin() + static_cast<long>(lo),
                                          seqs.begin() + static_cast<long>(hi));
      auto r = lm.logprobs(batch);
      for (std::size_t j = lo; j < hi; ++j) lps[j] = std::move(r[j - lo]);
    }
  };
  const std::size_t workers = static_cast<std::size_t>(std::max(1, opt.workers));
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w, workers);
    for (auto& t : pool) t.join();
  }

  for (std::size_t k = 0; k < owner.size(); ++k) {
    auto& ps = out[owner[k]];
    auto g = sum_score(lps[2 * k]), b = sum_score(lps[2 * k + 1]);
    ps.logprob_good = g.logprob;
    ps.tokens_good = g.tokens;
    ps.logprob_bad = b.logprob;
    ps.tokens_bad = b.tokens;
    decide(ps, opt.normalization, opt.tie_tolerance);
  }
  return out;
}

// ---------------------------------------------------------------- statistics

double gamma_q(double a, double x) {
  if (!(a > 0) || x < 0) throw std::invalid_argument("gamma_q: need a > 0 and x >= 0");
  if (x == 0) return 1.0;
  const double lg = std::lgamma(a);
  constexpr int kMaxIter = 10000;
  constexpr double kEps = 1e-16;
  if (x < a + 1) {
    // Series for P(a, x).
    double ap = a, sum = 1.0 / a, del = sum;
    for (int n = 0; n < kMaxIter; ++n) {
      ap += 1;
      del *= x / ap;
      sum += del;
      if (std::abs(del) < std::abs(sum) * kEps) break;
    }
    return 1.0 - sum * std::exp(-x + a * std::log(x) - lg);
  }
  // Lentz continued fraction for Q(a, x).
  constexpr double kTiny = 1e-300;
  double b = x + 1 - a, c = 1 / kTiny, d = 1 / b, h = d;
  for (int i = 1; i < kMaxIter; ++i) {
    const double an = -i * (i - a);
    b += 2;
    d = an * d + b;
    if (std::abs(d) < kTiny) d = kTiny;
    c = b + an / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1) < kEps) break;
  }
  return std::exp(-x + a * std::log(x) - lg) * h;
}

double chi2_survival(double x, double dof) {
  if (x <= 0) return 1.0;
  return gamma_q(dof / 2, x / 2);
}

Chi2Result chi2_vs_chance(long n_correct, long n_items) {
  if (n_items <= 0) throw std::invalid_argument("chi2_vs_chance: no items");
  if (n_correct < 0 || n_correct > n_items) throw std::invalid_argument("chi2_vs_chance: bad count");
  const double n = static_cast<double>(n_items);
  const double diff = 2.0 * static_cast<double>(n_correct) - n;
  Chi2Result r;
  r.statistic = diff * diff / n;
  r.p_value = std::clamp(chi2_survival(r.statistic, 1.0), 0.0, 1.0);
  return r;
}

std::string significance_stars(double p) {
  if (p < 0.001) return "***";
  if (p < 0.01) return "**";
  if (p < 0.05) return "*";
  return "";
}

double mean(const std::vector<double>& xs) {
  if (xs.empty()) throw std::invalid_argument("mean of nothing");
  double s = 0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

std::optional<double> sample_sd(const std::vector<double>& xs) {
  if (xs.size() < 2) return std::nullopt;
  const double m = mean(xs);
  double ss = 0;
  for (double x : xs) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

// Keys: "overall", "phenomenon/<p>", "subcategory/<p>/<s>".
SeedResult tally(const std::vector<PairScore>& scores) {
  SeedResult r;
  for (const auto& s : scores) {
    for (const auto& key : {std::string("overall"), "phenomenon/" + s.phenomenon,
                            "subcategory/" + s.phenomenon + "/" + s.subcategory}) {
      auto& c = r[key];
      if (!s.error.empty()) {
        ++c.errors;
        continue;
      }
      ++c.n_items;
      c.n_correct += s.correct;
      c.ties += s.tie;
    }
  }
  return r;
}

namespace {

std::pair<std::string, std::string> split_key(const std::string& key) {
  if (key == "overall") return {"overall", "overall"};
  auto slash = key.find('/');
  std::string level = key.substr(0, slash), rest = key.substr(slash + 1);
  if (level == "subcategory") rest = rest.substr(rest.find('/') + 1);
  return {level, rest};
}

// overall, then each phenomenon followed by its subcategories.
bool report_order(const std::string& a, const std::string& b) {
  auto rank = [](const std::string& k) -> std::pair<std::string, int> {
    if (k == "overall") return {"", 0};
    auto slash = k.find('/');
    const std::string level = k.substr(0, slash), rest = k.substr(slash + 1);
    if (level == "phenomenon") return {rest, 1};
    return {rest.substr(0, rest.find('/')), 2};
  };
  auto ra = rank(a), rb = rank(b);
  if (ra != rb) return ra < rb;
  return a < b;
}

}  // namespace

std::vector<CategoryResult> aggregate_seeds(const std::vector<SeedResult>& seeds) {
  if (seeds.empty()) throw std::invalid_argument("aggregate_seeds: no seeds");
  std::set<std::string> keys;
  for (const auto& [k, v] : seeds.front()) keys.insert(k);
  for (const auto& s : seeds) {
    std::set<std::string> ks;
    for (const auto& [k, v] : s) ks.insert(k);
    if (ks != keys) throw std::invalid_argument("aggregate_seeds: category sets differ across seeds");
  }
  std::vector<std::string> ordered(keys.begin(), keys.end());
  std::sort(ordered.begin(), ordered.end(), report_order);

  std::vector<CategoryResult> out;
  for (const auto& key : ordered) {
    CategoryResult r;
    std::tie(r.level, r.category) = split_key(key);
    std::vector<double> accs;
    double worst_p = -1;
    for (const auto& s : seeds) {
      const auto& c = s.at(key);
      PerSeed ps;
      ps.n_correct = c.n_correct;
      ps.n_items = c.n_items;
      if (c.n_items > 0) {
        ps.accuracy = static_cast<double>(c.n_correct) / static_cast<double>(c.n_items);
        ps.chi2 = chi2_vs_chance(c.n_correct, c.n_items);
      }
      if (ps.chi2.p_value > worst_p) {
        worst_p = ps.chi2.p_value;
        r.chi2 = ps.chi2;
      }
      r.n_items += c.n_items;
      r.n_correct += c.n_correct;
      accs.push_back(ps.accuracy);
      r.per_seed.push_back(ps);
    }
    r.p_value = r.chi2.p_value;
    r.accuracy = r.n_items ? static_cast<double>(r.n_correct) / static_cast<double>(r.n_items) : 0.0;
    r.mean = mean(accs);
    r.sd = sample_sd(accs);
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------- reports

std::string emit_report(const Report& rep, const std::string& format) {
  if (format != "json" && format != "text") throw std::invalid_argument("unknown report format '" + format + "'");
  if (rep.results.empty()) throw std::invalid_argument("empty result set");
  if (format == "json") {
    ordered_json j;
    j["title"] = rep.title;
    j["seeds"] = rep.seeds;
    ordered_json rows = ordered_json::array();
    for (const auto& r : rep.results) {
      ordered_json row;
      row["level"] = r.level;
      row["category"] = r.category;
      row["n_items"] = r.n_items;
      row["n_correct"] = r.n_correct;
      row["accuracy"] = r.accuracy;
      row["mean"] = r.mean;
      row["sd"] = r.sd ? ordered_json(*r.sd) : ordered_json(nullptr);
      row["chi2"] = r.chi2.statistic;
      row["p_value"] = r.p_value;
      row["stars"] = significance_stars(r.p_value);
      ordered_json per = ordered_json::array();
      for (const auto& s : r.per_seed)
        per.push_back({{"accuracy", s.accuracy},
                       {"n_correct", s.n_correct},
                       {"n_items", s.n_items},
                       {"chi2", s.chi2.statistic},
                       {"p_value", s.chi2.p_value},
                       {"stars", significance_stars(s.chi2.p_value)}});
      row["per_seed"] = per;
      rows.push_back(row);
    }
    j["results"] = rows;
    return j.dump(2) + "\n";
  }

  std::ostringstream out;
  char buf[256];
  if (!rep.title.empty()) out << rep.title << "\n";
  out << "seeds: " << rep.seeds.size() << "\n";
  std::snprintf(buf, sizeof buf, "%-40s %7s %10s %6s  %s\n", "category", "n", "acc(%)", "sd", "per-seed acc(%)");
  out << buf;
  for (const auto& r : rep.results) {
    const int indent = r.level == "overall" ? 0 : r.level == "phenomenon" ? 2 : 4;
    std::string name = std::string(static_cast<std::size_t>(indent), ' ') + r.category;
    std::string acc = [&] {
      char a[32];
      std::snprintf(a, sizeof a, "%.1f", 100 * r.mean);
      return std::string(a) + significance_stars(r.p_value);
    }();
    std::string sd = "-";
    if (r.sd) {
      char s[32];
      std::snprintf(s, sizeof s, "%.1f", 100 * *r.sd);
      sd = s;
    }
    std::string seeds;
    for (const auto& s : r.per_seed) {
      char a[32];
      std::snprintf(a, sizeof a, "%s%.1f", seeds.empty() ? "" : " ", 100 * s.accuracy);
      seeds += a;
    }
    std::snprintf(buf, sizeof buf, "%-40s %7ld %-10s %6s  %s\n", name.c_str(), r.n_items / static_cast<long>(std::max<std::size_t>(1, r.per_seed.size())),
                  acc.c_str(), sd.c_str(), seeds.c_str());
    out << buf;
  }
  out << "* p<0.05, ** p<0.01, *** p<0.001 (chi-square vs. chance, least significant seed)\n";
  return out.str();
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

}  // namespace

std::string items_csv(const std::vector<std::vector<PairScore>>& per_seed,
                      const std::vector<std::string>& seed_labels) {
  if (per_seed.size() != seed_labels.size()) throw std::invalid_argument("items_csv: label count mismatch");
  std::ostringstream out;
  out << "seed,pair_id,phenomenon,subcategory,template_id,logprob_good,logprob_bad,tokens_good,"
         "tokens_bad,correct,tie,error\n";
  char num[64];
  for (std::size_t s = 0; s < per_seed.size(); ++s) {
    for (const auto& p : per_seed[s]) {
      out << csv_field(seed_labels[s]) << ',' << p.pair_id << ',' << csv_field(p.phenomenon) << ','
          << csv_field(p.subcategory) << ',' << csv_field(p.template_id) << ',';
      std::snprintf(num, sizeof num, "%.10g,", p.logprob_good);
      out << num;
      std::snprintf(num, sizeof num, "%.10g,", p.logprob_bad);
      out << num << p.tokens_good << ',' << p.tokens_bad << ',' << (p.correct ? 1 : 0) << ','
          << (p.tie ? 1 : 0) << ',' << csv_field(p.error) << '\n';
    }
  }
  return out.str();
}

// ---------------------------------------------------------------- adapters

std::vector<templates::MinimalPair> read_blimp_jsonl(std::istream& in) {
  std::vector<templates::MinimalPair> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (split_whitespace(line).empty()) continue;
    try {
      auto j = json::parse(line);
      templates::MinimalPair p;
      p.sentence_good = j.at("sentence_good").get<std::string>();
      p.sentence_bad = j.at("sentence_bad").get<std::string>();
      p.phenomenon = j.value("linguistics_term", j.value("field", std::string()));
      p.subcategory = j.value("UID", std::string());
      if (j.contains("pair_id")) p.template_id = j["pair_id"].is_string() ? j["pair_id"].get<std::string>() : j["pair_id"].dump();
      out.push_back(std::move(p));
    } catch (const json::exception& e) {
      throw std::runtime_error("BLiMP line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

std::vector<templates::MinimalPair> read_zorro(std::istream& in, const std::string& name) {
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!split_whitespace(line).empty()) lines.push_back(line);
  }
  if (lines.size() % 2) throw std::runtime_error("Zorro file " + name + ": odd number of sentences");
  const auto dash = name.find('-');
  std::vector<templates::MinimalPair> out;
  for (std::size_t i = 0; i < lines.size(); i += 2) {
    templates::MinimalPair p;
    p.sentence_bad = lines[i];
    p.sentence_good = lines[i + 1];
    p.phenomenon = name.substr(0, dash);
    p.subcategory = name;
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<templates::MinimalPair> read_tsv_pairs(std::istream& in) {
  std::vector<templates::MinimalPair> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    while (true) {
      auto tab = line.find('\t', start);
      cols.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (cols.size() < 2) throw std::runtime_error("TSV line " + std::to_string(n) + ": need good and bad columns");
    templates::MinimalPair p;
    p.sentence_good = cols[0];
    p.sentence_bad = cols[1];
    if (cols.size() > 2) p.phenomenon = cols[2];
    if (cols.size() > 3) p.subcategory = cols[3];
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<templates::MinimalPair> load_pairs(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  if (ends_with(path, ".tsv")) return read_tsv_pairs(in);
  if (ends_with(path, ".txt")) return read_zorro(in, std::filesystem::path(path).stem().string());
  std::string first;
  while (std::getline(in, first) && split_whitespace(first).empty()) {
  }
  in.clear();
  in.seekg(0);
  if (!first.empty()) {
    auto j = json::parse(first);
    if (j.contains("UID") || j.contains("linguistics_term")) return read_blimp_jsonl(in);
  }
  return templates::read_benchmark_jsonl(in);
}

}  // namespace posh::eval
