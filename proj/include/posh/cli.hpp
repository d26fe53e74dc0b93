#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "posh/corpus.hpp"
#include "posh/dyck.hpp"
#include "posh/eval.hpp"
#include "posh/templates.hpp"

namespace posh::cli {

std::string tool_version();

// ---- commands shared by the CLI and recipe stages ----

// Sentence records from .conllu/.jsonl, or one record per line of plain text.
std::vector<corpus::SentenceRecord> read_corpus(const std::string& path);
std::vector<std::string> corpus_lines(const std::string& path);
void write_records(const std::string& path, const std::vector<corpus::SentenceRecord>& records);

struct SynthArgs {
  std::string lexicon;
  std::string mix = "natural";  // natural, distractors, or a sentence kind
  std::size_t n = 0;            // sentences; 0 uses `words`
  std::size_t words = 0;
  std::uint64_t seed = 0;
  std::string out;
};
std::size_t cmd_synth(const SynthArgs& a);

struct FilterArgs {
  std::string in, out_kept, out_removed, stats, rules;
  std::vector<std::string> phenomena{"qf", "binding"};
};
corpus::FilterStats cmd_filter(const FilterArgs& a);

struct InjectArgs {
  std::string in;
  std::vector<std::string> pools;  // split by evidence predicate
  std::map<std::string, double> rates{{"qf", 0.002}, {"binding", 0.0007}};
  std::uint64_t seed = 0;
  std::string out, replacements, rules;
};
std::size_t cmd_inject(const InjectArgs& a);

struct SampleArgs {
  std::string in, out;
  std::string trigger = "qf";  // qf, binding
  std::size_t n = 100;
  std::uint64_t seed = 0;
};
corpus::SampleResult cmd_sample(const SampleArgs& a);

struct BenchArgs {
  std::string templates, lexicon, vocab;
  std::size_t n = 500;
  std::uint64_t seed = 0;
  std::string out, manifest;
};
templates::Benchmark cmd_bench_generate(const BenchArgs& a);
templates::BenchmarkCheck cmd_bench_check(const std::string& bench, const BenchArgs& a);
std::string check_to_json(const templates::BenchmarkCheck& c);

struct DyckArgs {
  dyck::DyckConfig config;
  std::size_t n = 1000;
  std::uint64_t seed = 0;
  std::string out;
};
void cmd_dyck(const DyckArgs& a);

struct TokTrainArgs {
  std::vector<std::string> corpora;
  std::size_t vocab_size = 8192;
  int dyck_k = 0;  // reserve bracket tokens for k types
  std::string out_vocab, out_merges;
};
int cmd_tok_train(const TokTrainArgs& a);  // returns the tokenizer size

struct EvalArgs {
  std::vector<std::string> models;  // checkpoint paths, one per seed
  std::string bench;
  eval::ScoreOptions score;
  std::string out_dir;
  std::string title;
  // Random-initialized control instead of checkpoints.
  bool random_init = false;
  std::string vocab, merges;
  model::ModelConfig control_config;
  std::vector<std::uint64_t> control_seeds;
};
struct EvalOutput {
  eval::Report report;
  std::vector<std::vector<eval::PairScore>> scores;
};
EvalOutput cmd_eval(const EvalArgs& a);

// Expands "{seed}" in a path pattern, or returns the path unchanged.
std::vector<std::string> expand_seed_paths(const std::string& pattern,
                                           const std::vector<std::uint64_t>& seeds);

// Side-by-side summary of several eval report.json files.
std::string compare_reports(const std::vector<std::string>& report_paths,
                            const std::vector<std::string>& labels, const std::string& format);

// ---- recipes ----

struct Stage {
  std::string name;
  std::string kind;
  std::string config_json;        // as written, references unresolved
  std::vector<std::string> deps;  // stage names referenced with "@name"
};

struct Recipe {
  std::string name;
  std::filesystem::path base_dir;    // directory of the recipe file
  std::filesystem::path output_dir;  // resolved
  std::vector<std::uint64_t> seeds;
  std::vector<Stage> stages;

  // POSH_OUTPUT_ROOT, when set, replaces the base for a relative output_dir.
  static Recipe from_json(const std::string& text, const std::filesystem::path& base_dir);
  static Recipe load(const std::string& path);
};

const std::vector<std::string>& stage_kinds();

struct StageOutcome {
  std::string name;
  std::string kind;
  std::string hash;
  bool cached = false;
  std::vector<std::string> outputs;
};

struct RecipeResult {
  int status = 0;
  std::string failed_stage;
  std::string message;
  std::vector<StageOutcome> stages;
};

RecipeResult run_recipe(const Recipe& r, bool dry_run, std::ostream& log);

}  // namespace posh::cli
