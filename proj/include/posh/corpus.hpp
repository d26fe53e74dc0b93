#pragma once

#include <cstdint>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace posh::corpus {

// One row of a CoNLL-U block. Indices are 1-based; head 0 is the root.
struct Token {
  int index = 0;
  std::string form;
  std::string upos;
  int head = 0;
  std::string deprel;
};

struct SentenceRecord {
  std::string id;
  std::vector<Token> tokens;
  std::string source;
  std::string text;

  // Raw text when the block carried `# text =`, otherwise forms joined by spaces.
  std::string surface() const;
};

enum class Phenomenon { question_formation, binding };

std::string_view to_string(Phenomenon p);
Phenomenon phenomenon_from_string(std::string_view name);  // accepts "qf" / "binding" too

enum class ConditionKind { base, filtered, injected };

struct CorpusCondition {
  ConditionKind kind = ConditionKind::base;
  std::map<Phenomenon, double> injection_rates;

  static CorpusCondition injected_default();
  void validate() const;
};

class ConlluError : public std::runtime_error {
 public:
  ConlluError(std::size_t line, const std::string& what);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RejectedRecord {
  SentenceRecord record;
  std::string reason;
};

bool is_known_deprel(std::string_view label);

// Checks the structural invariants of a parsed sentence; returns the first
// violation found.
std::optional<std::string> validate_sentence(const SentenceRecord& s);

// Parses CoNLL-U. Format errors always throw ConlluError. Records failing
// validate_sentence throw ValidationError unless `rejects` is given, in which
// case they are quarantined there.
std::vector<SentenceRecord> read_conllu(std::istream& in, std::string_view source = {},
                                        std::vector<RejectedRecord>* rejects = nullptr);
std::vector<SentenceRecord> read_conllu_file(const std::string& path,
                                             std::vector<RejectedRecord>* rejects = nullptr);
void write_conllu(std::ostream& out, const std::vector<SentenceRecord>& records);

// {id, text, source} per line. Records read back carry no tokens.
void write_jsonl(std::ostream& out, const std::vector<SentenceRecord>& records);
std::vector<SentenceRecord> read_jsonl(std::istream& in);

// Reads either format, chosen by extension (.jsonl vs anything else).
std::vector<SentenceRecord> load_records(const std::string& path,
                                         std::vector<RejectedRecord>* rejects = nullptr);

struct FilterRules {
  std::vector<std::string> wh_words{"who",   "what",  "when", "where", "why",
                                    "how",   "which", "whose", "whom"};
  std::set<std::string> nominal_upos{"NOUN", "PROPN", "PRON"};

  // JSON object with optional "wh_words" and "nominal_upos" arrays.
  static FilterRules from_json_file(const std::string& path);
};

bool is_interrogative(const SentenceRecord& s, const FilterRules& rules = {});
bool has_subject_relative(const SentenceRecord& s);
bool is_qf_evidence(const SentenceRecord& s, const FilterRules& rules = {});
bool is_binding_evidence(const SentenceRecord& s, const FilterRules& rules = {});
bool is_evidence(const SentenceRecord& s, Phenomenon p, const FilterRules& rules = {});

// Looser triggers used to draw audit samples from an already filtered corpus.
bool has_qf_trigger(const SentenceRecord& s);  // "?" plus at least two AUX tokens
bool has_reflexive(const SentenceRecord& s);

struct FilterStats {
  std::size_t input = 0;
  std::size_t kept = 0;
  std::size_t removed = 0;
  std::map<Phenomenon, std::size_t> rule_matches;
};

struct FilterResult {
  std::vector<SentenceRecord> kept;
  std::vector<SentenceRecord> removed;
  FilterStats stats;
};

FilterResult filter_corpus(const std::vector<SentenceRecord>& records,
                           const std::set<Phenomenon>& phenomena, const FilterRules& rules = {});

struct Replacement {
  std::size_t position = 0;
  Phenomenon phenomenon{};
  std::size_t pool_index = 0;
};

struct InjectResult {
  std::vector<SentenceRecord> records;
  std::vector<Replacement> replacements;  // sorted by position
};

// Replaces round(rate * N) sentences per phenomenon with pool sentences at
// uniformly sampled, mutually distinct positions.
InjectResult inject_evidence(const std::vector<SentenceRecord>& filtered,
                             const std::map<Phenomenon, std::vector<SentenceRecord>>& pools,
                             const std::map<Phenomenon, double>& rates, std::uint64_t seed,
                             const FilterRules& rules = {});

struct SampleResult {
  std::vector<SentenceRecord> sample;
  std::size_t population = 0;
  bool short_sample = false;
};

SampleResult sanity_sample(const std::vector<SentenceRecord>& records,
                           const std::function<bool(const SentenceRecord&)>& predicate,
                           std::size_t n, std::uint64_t seed);

std::string stats_to_json(const FilterStats& stats);

}  // namespace posh::corpus
