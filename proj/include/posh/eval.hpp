#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "posh/model.hpp"
#include "posh/templates.hpp"
#include "posh/tokenizer.hpp"

namespace posh::eval {

// Anything that yields log p(ids[k] | ids[<k]) for k = 1..n-1.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;
  virtual std::vector<std::vector<double>> logprobs(
      const std::vector<std::vector<int>>& seqs) const = 0;
  virtual int context_len() const { return 1 << 30; }
};

// Transformer scored at 64-bit with a fixed bias mode and epoch.
class TransformerLM : public LanguageModel {
 public:
  TransformerLM(model::Transformer<double> m, model::AttentionBiasMode bias = {},
                double epoch = 0.0);
  std::vector<std::vector<double>> logprobs(
      const std::vector<std::vector<int>>& seqs) const override;
  int context_len() const override { return model_.config().context_len; }

 private:
  model::Transformer<double> model_;
  model::AttentionBiasMode bias_;
  double epoch_;
};

// Model, tokenizer and scoring state restored from one checkpoint.
struct LoadedModel {
  std::unique_ptr<TransformerLM> lm;
  tokenizer::BpeModel tokenizer;
};
LoadedModel load_model(const std::string& checkpoint_path);

enum class Normalization { per_token, total };
Normalization normalization_from_string(const std::string& s);

struct SentenceScore {
  double logprob = 0.0;  // sum over tokens, nats
  int tokens = 0;        // excludes BOS
};

// [BOS] + subword ids; throws when nothing remains after tokenization.
std::vector<int> encode_sentence(const tokenizer::BpeModel& tok, const std::string& sentence);

SentenceScore score_sentence(const LanguageModel& lm, const tokenizer::BpeModel& tok,
                             const std::string& sentence);

// exp(-logprob / tokens), or exp(-logprob) for total normalization.
double perplexity(const SentenceScore& s, Normalization norm = Normalization::per_token);
double sentence_perplexity(const LanguageModel& lm, const tokenizer::BpeModel& tok,
                           const std::string& sentence,
                           Normalization norm = Normalization::per_token);

struct PairScore {
  std::string pair_id;
  std::string phenomenon;
  std::string subcategory;
  std::string template_id;
  double logprob_good = 0.0;
  double logprob_bad = 0.0;
  int tokens_good = 0;
  int tokens_bad = 0;
  bool correct = false;
  bool tie = false;
  std::string error;  // non-empty: excluded from counts
};

struct ScoreOptions {
  Normalization normalization = Normalization::per_token;
  int batch_size = 16;
  int workers = 1;
  double tie_tolerance = 1e-12;  // relative, on perplexity
};

std::vector<PairScore> score_pairs(const LanguageModel& lm, const tokenizer::BpeModel& tok,
                                   const std::vector<templates::MinimalPair>& pairs,
                                   const ScoreOptions& opt = {});

// Decides one pair from its two scores.
void decide(PairScore& p, Normalization norm, double tie_tolerance = 1e-12);

struct Chi2Result {
  double statistic = 0.0;
  double p_value = 1.0;
};

// Goodness of fit against n/2 : n/2 with one degree of freedom.
Chi2Result chi2_vs_chance(long n_correct, long n_items);

// Regularized upper incomplete gamma Q(a, x).
double gamma_q(double a, double x);
double chi2_survival(double x, double dof);

std::string significance_stars(double p);

struct SeedCounts {
  long n_correct = 0;
  long n_items = 0;
  long ties = 0;
  long errors = 0;
};

// Per-seed counts for one grouping key.
using SeedResult = std::map<std::string, SeedCounts>;

struct PerSeed {
  double accuracy = 0.0;
  long n_correct = 0;
  long n_items = 0;
  Chi2Result chi2;
};

struct CategoryResult {
  std::string category;
  std::string level;  // "overall", "phenomenon" or "subcategory"
  long n_items = 0;     // summed over seeds
  long n_correct = 0;
  double accuracy = 0.0;  // pooled n_correct / n_items
  std::vector<PerSeed> per_seed;
  double mean = 0.0;
  std::optional<double> sd;  // sample SD; null for one seed
  double p_value = 1.0;      // least significant per-seed test
  Chi2Result chi2;           // of the seed with that p
};

// Counts at every level from one seed's pair scores.
SeedResult tally(const std::vector<PairScore>& scores);

// Throws when the seeds disagree on the set of categories.
std::vector<CategoryResult> aggregate_seeds(const std::vector<SeedResult>& seeds);

double mean(const std::vector<double>& xs);
std::optional<double> sample_sd(const std::vector<double>& xs);

struct Report {
  std::string title;
  std::vector<std::string> seeds;  // labels, e.g. checkpoint paths
  std::vector<CategoryResult> results;
};

// format: "json" or "text"
std::string emit_report(const Report& r, const std::string& format);
std::string items_csv(const std::vector<std::vector<PairScore>>& per_seed,
                      const std::vector<std::string>& seed_labels);

// --- external suites mapped onto MinimalPair ---
// BLiMP JSON lines: sentence_good, sentence_bad, linguistics_term -> phenomenon,
//   UID -> subcategory, pair_id -> template_id.
// Zorro text: consecutive lines (bad, good); file stem "phenomenon-paradigm".
// TSV: good, bad[, phenomenon[, subcategory]], '#' comments.
std::vector<templates::MinimalPair> read_blimp_jsonl(std::istream& in);
std::vector<templates::MinimalPair> read_zorro(std::istream& in, const std::string& name);
std::vector<templates::MinimalPair> read_tsv_pairs(std::istream& in);
// By extension and content: .jsonl with sentence_good (ours or BLiMP), .tsv, .txt (Zorro).
std::vector<templates::MinimalPair> load_pairs(const std::string& path);

}  // namespace posh::eval
