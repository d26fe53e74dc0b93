#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "posh/cli.hpp"
#include "posh/synth.hpp"
#include "posh/tokenizer.hpp"
#include "posh/trainer.hpp"
#include "posh/util.hpp"

#ifndef POSH_VERSION
#define POSH_VERSION "0.0.0"
#endif

namespace posh::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

std::string tool_version() { return std::string("posh ") + POSH_VERSION; }

namespace {

bool is_record_path(const std::string& p) {
  return ends_with(p, ".conllu") || ends_with(p, ".conllu.gz") || ends_with(p, ".conll") ||
         ends_with(p, ".jsonl");
}

void ensure_parent(const std::string& path) {
  auto parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

std::set<corpus::Phenomenon> parse_phenomena(const std::vector<std::string>& names) {
  std::set<corpus::Phenomenon> out;
  for (const auto& n : names) out.insert(corpus::phenomenon_from_string(n));
  if (out.empty()) throw std::invalid_argument("no phenomena given");
  return out;
}

corpus::FilterRules load_rules(const std::string& path) {
  return path.empty() ? corpus::FilterRules{} : corpus::FilterRules::from_json_file(path);
}

}  // namespace

std::vector<corpus::SentenceRecord> read_corpus(const std::string& path) {
  if (is_record_path(path)) return corpus::load_records(path);
  std::vector<corpus::SentenceRecord> out;
  std::size_t i = 0;
  for (const auto& line : corpus_lines(path)) {
    corpus::SentenceRecord r;
    r.id = std::to_string(i++);
    r.text = line;
    r.source = path;
    for (const auto& w : split_whitespace(line)) {
      corpus::Token t;
      t.form = w;
      r.tokens.push_back(t);
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<std::string> corpus_lines(const std::string& path) {
  std::vector<std::string> lines;
  if (is_record_path(path)) {
    for (const auto& r : corpus::load_records(path)) lines.push_back(r.surface());
    return lines;
  }
  std::istringstream in(read_file(path));
  std::string line;
  while (std::getline(in, line))
    if (!split_whitespace(line).empty()) lines.push_back(line);
  return lines;
}

void write_records(const std::string& path, const std::vector<corpus::SentenceRecord>& records) {
  ensure_parent(path);
  std::ostringstream out;
  if (ends_with(path, ".jsonl")) corpus::write_jsonl(out, records);
  else corpus::write_conllu(out, records);
  write_file(path, out.str());
}

std::size_t cmd_synth(const SynthArgs& a) {
  if (a.out.empty()) throw std::invalid_argument("synth: output path required");
  if ((a.n == 0) == (a.words == 0)) throw std::invalid_argument("synth: give exactly one of n and words");
  auto g = synth::Grammar::load(a.lexicon);
  synth::Mix mix;
  if (a.mix == "natural") mix = synth::Mix::natural();
  else if (a.mix == "distractors") mix = synth::Mix::distractors();
  else if (a.mix == "evidence") mix.weights = {{synth::Kind::qf_evidence, 1.0}, {synth::Kind::binding_evidence, 1.0}};
  else mix = synth::Mix::only(synth::kind_from_string(a.mix));
  auto recs = a.n ? synth::generate(g, a.n, mix, a.seed) : synth::generate_words(g, a.words, mix, a.seed);
  write_records(a.out, recs);
  return recs.size();
}

corpus::FilterStats cmd_filter(const FilterArgs& a) {
  auto records = read_corpus(a.in);
  auto res = corpus::filter_corpus(records, parse_phenomena(a.phenomena), load_rules(a.rules));
  if (!a.out_kept.empty()) write_records(a.out_kept, res.kept);
  if (!a.out_removed.empty()) write_records(a.out_removed, res.removed);
  if (!a.stats.empty()) {
    ensure_parent(a.stats);
    write_file(a.stats, corpus::stats_to_json(res.stats) + "\n");
  }
  return res.stats;
}

std::size_t cmd_inject(const InjectArgs& a) {
  const auto rules = load_rules(a.rules);
  std::map<corpus::Phenomenon, double> rates;
  for (const auto& [name, r] : a.rates) rates[corpus::phenomenon_from_string(name)] = r;
  // One pool file may hold evidence for several phenomena; each sentence goes
  // to the first phenomenon (in enum order) whose predicate it satisfies.
  std::map<corpus::Phenomenon, std::vector<corpus::SentenceRecord>> pools;
  std::size_t unmatched = 0;
  for (const auto& path : a.pools) {
    for (auto& r : read_corpus(path)) {
      bool placed = false;
      for (auto p : {corpus::Phenomenon::question_formation, corpus::Phenomenon::binding}) {
        if (corpus::is_evidence(r, p, rules)) {
          pools[p].push_back(r);
          placed = true;
          break;
        }
      }
      unmatched += !placed;
    }
  }
  if (unmatched) std::cerr << "inject: " << unmatched << " pool sentences match no evidence rule; skipped\n";
  auto res = corpus::inject_evidence(read_corpus(a.in), pools, rates, a.seed, rules);
  write_records(a.out, res.records);
  if (!a.replacements.empty()) {
    ordered_json j = ordered_json::array();
    for (const auto& r : res.replacements)
      j.push_back({{"position", r.position},
                   {"phenomenon", std::string(corpus::to_string(r.phenomenon))},
                   {"pool_index", r.pool_index}});
    ensure_parent(a.replacements);
    write_file(a.replacements, j.dump(1) + "\n");
  }
  return res.replacements.size();
}

corpus::SampleResult cmd_sample(const SampleArgs& a) {
  std::function<bool(const corpus::SentenceRecord&)> pred;
  if (a.trigger == "qf") pred = corpus::has_qf_trigger;
  else if (a.trigger == "binding") pred = corpus::has_reflexive;
  else throw std::invalid_argument("sample: trigger must be qf or binding");
  auto res = corpus::sanity_sample(read_corpus(a.in), pred, a.n, a.seed);
  write_records(a.out, res.sample);
  return res;
}

templates::Benchmark cmd_bench_generate(const BenchArgs& a) {
  auto lex = templates::Lexicon::load(a.lexicon);
  auto specs = templates::load_templates(a.templates, lex);
  auto b = templates::generate_benchmark(specs, lex, a.n, a.seed);
  ensure_parent(a.out);
  std::ostringstream out;
  templates::write_benchmark_jsonl(out, b.pairs);
  write_file(a.out, out.str());
  if (!a.manifest.empty()) {
    ensure_parent(a.manifest);
    write_file(a.manifest, templates::benchmark_manifest_json(b, a.seed) + "\n");
  }
  return b;
}

templates::BenchmarkCheck cmd_bench_check(const std::string& bench, const BenchArgs& a) {
  auto lex = templates::Lexicon::load(a.lexicon);
  auto specs = templates::load_templates(a.templates, lex);
  std::ifstream in(bench);
  if (!in) throw std::runtime_error("cannot open " + bench);
  auto pairs = templates::read_benchmark_jsonl(in);
  if (a.vocab.empty()) throw std::invalid_argument("bench check: a vocabulary file is required");
  return templates::check_benchmark(pairs, specs, lex, templates::load_vocab(a.vocab));
}

std::string check_to_json(const templates::BenchmarkCheck& c) {
  ordered_json j;
  j["pairs"] = c.pairs;
  j["ok"] = c.ok();
  j["closure_failures"] = c.closure_failures;
  j["minimality_failures"] = c.minimality_failures;
  j["distinctness_failures"] = c.distinctness_failures;
  j["agreement_failures"] = c.agreement_failures;
  j["agreement_checked"] = c.agreement_checked;
  j["messages"] = c.messages;
  return j.dump(2);
}

void cmd_dyck(const DyckArgs& a) {
  auto strings = dyck::generate_dyck(a.config, a.n, a.seed);
  ensure_parent(a.out);
  write_file(a.out, join(strings, "\n") + "\n");
}

int cmd_tok_train(const TokTrainArgs& a) {
  if (a.corpora.empty()) throw std::invalid_argument("tok train: no corpus");
  std::string text;
  for (const auto& c : a.corpora)
    for (const auto& line : corpus_lines(c)) text += line + "\n";
  auto model = tokenizer::train_bpe_text(text, a.vocab_size, trainer::dyck_reserved_tokens(a.dyck_k));
  ensure_parent(a.out_vocab);
  ensure_parent(a.out_merges);
  model.save(a.out_vocab, a.out_merges);
  return model.size();
}

std::vector<std::string> expand_seed_paths(const std::string& pattern,
                                           const std::vector<std::uint64_t>& seeds) {
  const auto pos = pattern.find("{seed}");
  if (pos == std::string::npos) return {pattern};
  std::vector<std::string> out;
  for (auto s : seeds) {
    std::string p = pattern;
    p.replace(pos, 6, std::to_string(s));
    out.push_back(p);
  }
  return out;
}

EvalOutput cmd_eval(const EvalArgs& a) {
  auto pairs = eval::load_pairs(a.bench);
  if (pairs.empty()) throw std::invalid_argument("eval: benchmark has no pairs");
  EvalOutput out;
  out.report.title = a.title;
  std::vector<eval::SeedResult> tallies;
  auto score = [&](const eval::LanguageModel& lm, const tokenizer::BpeModel& tok, const std::string& label) {
    auto s = eval::score_pairs(lm, tok, pairs, a.score);
    std::size_t errors = 0;
    for (const auto& p : s) errors += !p.error.empty();
    if (errors) std::cerr << "eval: " << errors << " pairs could not be scored for " << label << "\n";
    tallies.push_back(eval::tally(s));
    out.scores.push_back(std::move(s));
    out.report.seeds.push_back(label);
  };
  if (a.random_init) {
    auto tok = tokenizer::BpeModel::load(a.vocab, a.merges);
    auto cfg = a.control_config;
    cfg.vocab_size = tok.size();
    if (a.control_seeds.empty()) throw std::invalid_argument("eval: control needs seeds");
    for (auto seed : a.control_seeds) {
      eval::TransformerLM lm(model::Transformer<double>(cfg, seed));
      score(lm, tok, "random-init seed " + std::to_string(seed));
    }
  } else {
    if (a.models.empty()) throw std::invalid_argument("eval: no models given");
    for (const auto& path : a.models) {
      auto m = eval::load_model(path);
      score(*m.lm, m.tokenizer, path);
    }
  }
  out.report.results = eval::aggregate_seeds(tallies);
  if (!a.out_dir.empty()) {
    fs::create_directories(a.out_dir);
    write_file((fs::path(a.out_dir) / "report.json").string(), eval::emit_report(out.report, "json"));
    write_file((fs::path(a.out_dir) / "report.txt").string(), eval::emit_report(out.report, "text"));
    write_file((fs::path(a.out_dir) / "items.csv").string(), eval::items_csv(out.scores, out.report.seeds));
  }
  return out;
}

std::string compare_reports(const std::vector<std::string>& report_paths,
                            const std::vector<std::string>& labels, const std::string& format) {
  if (report_paths.size() != labels.size()) throw std::invalid_argument("compare: label count mismatch");
  if (report_paths.empty()) throw std::invalid_argument("compare: no reports");
  if (format != "json" && format != "text") throw std::invalid_argument("compare: unknown format " + format);
  std::vector<std::pair<std::string, std::string>> keys;  // (level, category) in first-seen order
  std::vector<std::map<std::pair<std::string, std::string>, json>> rows(report_paths.size());
  for (std::size_t i = 0; i < report_paths.size(); ++i) {
    auto j = json::parse(read_file(report_paths[i]));
    for (const auto& r : j.at("results")) {
      std::pair<std::string, std::string> k{r.at("level"), r.at("category")};
      if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
      rows[i][k] = r;
    }
  }
  if (format == "json") {
    ordered_json out;
    out["conditions"] = labels;
    ordered_json arr = ordered_json::array();
    for (const auto& k : keys) {
      ordered_json row;
      row["level"] = k.first;
      row["category"] = k.second;
      ordered_json vals = ordered_json::object();
      for (std::size_t i = 0; i < labels.size(); ++i) {
        auto it = rows[i].find(k);
        if (it == rows[i].end()) {
          vals[labels[i]] = nullptr;
          continue;
        }
        vals[labels[i]] = {{"mean", it->second.at("mean")},
                           {"sd", it->second.at("sd")},
                           {"p_value", it->second.at("p_value")},
                           {"stars", it->second.at("stars")}};
      }
      row["values"] = vals;
      arr.push_back(row);
    }
    out["rows"] = arr;
    return out.dump(2) + "\n";
  }
  std::ostringstream out;
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-36s", "category");
  out << buf;
  for (const auto& l : labels) {
    std::snprintf(buf, sizeof buf, " %16s", l.c_str());
    out << buf;
  }
  out << "\n";
  for (const auto& k : keys) {
    const int indent = k.first == "overall" ? 0 : k.first == "phenomenon" ? 2 : 4;
    std::snprintf(buf, sizeof buf, "%-36s", (std::string(static_cast<std::size_t>(indent), ' ') + k.second).c_str());
    out << buf;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      auto it = rows[i].find(k);
      std::string cell = "-";
      if (it != rows[i].end()) {
        char c[64];
        const auto& r = it->second;
        if (r.at("sd").is_null())
          std::snprintf(c, sizeof c, "%.1f%s", 100 * r.at("mean").get<double>(), r.at("stars").get<std::string>().c_str());
        else
          std::snprintf(c, sizeof c, "%.1f%s (%.1f)", 100 * r.at("mean").get<double>(),
                        r.at("stars").get<std::string>().c_str(), 100 * r.at("sd").get<double>());
        cell = c;
      }
      std::snprintf(buf, sizeof buf, " %16s", cell.c_str());
      out << buf;
    }
    out << "\n";
  }
  out << "mean accuracy % over seeds (sample SD); * p<0.05, ** p<0.01, *** p<0.001\n";
  return out.str();
}

}  // namespace posh::cli
