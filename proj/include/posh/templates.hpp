#pragma once

#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace posh::templates {

// One piece of a good/bad pattern.
//   literal  "that", "?", "'s"
//   slot     {nn_f1}            lexicon filler
//   slot     {vb_act.past}      feature "past" of the filler chosen for vb_act
//   choice   {who|what}         inline alternatives; the k-th choice of the bad
//                               pattern is paired with the k-th choice of the good one
//   choice   {who|}             single alternative
struct PatternElement {
  enum class Kind { literal, slot, choice };
  Kind kind = Kind::literal;
  std::string text;                  // literal token or slot name
  std::string attribute;             // slot feature reference, empty for the form itself
  std::vector<std::string> options;  // choice alternatives
  int choice_index = -1;

  bool same_as(const PatternElement& other) const;
};

using Pattern = std::vector<PatternElement>;

Pattern parse_pattern(const std::string& text);

struct SlotConstraint {
  std::string lexical_class;
  std::map<std::string, std::string> features;  // required feature values
};

struct TemplateSpec {
  std::string id;
  std::string phenomenon;
  std::string subcategory;
  Pattern good_pattern;
  Pattern bad_pattern;
  std::map<std::string, SlotConstraint> slot_constraints;
  std::optional<std::string> antecedent;  // binding: slot of the local antecedent

  std::vector<std::string> slot_names() const;  // in order of first appearance in the good pattern
  std::size_t choice_count() const;
};

struct LexicalEntry {
  std::string form;
  std::map<std::string, std::string> features;
};

struct Lexicon {
  std::map<std::string, std::vector<LexicalEntry>> entries;
  std::string provenance;

  static Lexicon from_json(const std::string& json_text);
  static Lexicon load(const std::string& path);

  // Every whitespace token of every form; used for closure checks.
  std::set<std::string> tokens() const;
};

class TemplateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CapacityError : public std::runtime_error {
 public:
  CapacityError(const std::string& template_id, std::uint64_t capacity, std::uint64_t requested);
  std::uint64_t capacity() const { return capacity_; }

 private:
  std::uint64_t capacity_;
};

// Stanza format, blank-line separated:
//   id: / phenomenon: / subcategory: / b: / g:       required
//   slot: NAME = CLASS                                  optional, repeatable
//   require: NAME feature=value [feature=value ...]     optional, repeatable
//   antecedent: NAME                                    optional
// Slots without an explicit class resolve to the class of the same name,
// then to the name with trailing digits stripped.
std::vector<TemplateSpec> parse_templates(std::istream& in, const Lexicon& lex);
std::vector<TemplateSpec> load_templates(const std::string& path, const Lexicon& lex);

struct MinimalPair {
  std::string sentence_good;
  std::string sentence_bad;
  std::string phenomenon;
  std::string subcategory;
  std::string template_id;
  std::map<std::string, std::string> slot_fill;

  bool operator==(const MinimalPair&) const = default;
};

// Number of distinct constrained fillings, counted up to `limit`.
std::uint64_t template_capacity(const TemplateSpec& t, const Lexicon& lex,
                                std::uint64_t limit = UINT64_MAX);

std::vector<MinimalPair> expand_template(const TemplateSpec& t, const Lexicon& lex, std::size_t n,
                                         std::uint64_t seed);

struct Benchmark {
  std::vector<MinimalPair> pairs;  // grouped by subcategory, in template-file order
  std::vector<std::pair<std::string, std::size_t>> counts;  // subcategory -> pairs
};

Benchmark generate_benchmark(const std::vector<TemplateSpec>& specs, const Lexicon& lex,
                             std::size_t per_subcategory, std::uint64_t seed);

void write_benchmark_jsonl(std::ostream& out, const std::vector<MinimalPair>& pairs);
std::vector<MinimalPair> read_benchmark_jsonl(std::istream& in);
std::string benchmark_manifest_json(const Benchmark& b, std::uint64_t seed);

using FrequencyTable = std::unordered_map<std::string, std::uint64_t>;

FrequencyTable count_tokens(std::istream& text);
FrequencyTable read_frequency_table(std::istream& in);  // "token<TAB>count" lines

std::vector<std::string> build_shared_vocab(const FrequencyTable& a, const FrequencyTable& b,
                                            std::size_t k);

// --- machine checks standing in for manual verification ---

// Splits a rendered sentence into closure-check tokens.
std::vector<std::string> sentence_tokens(const std::string& sentence);
bool is_literal_punctuation(const std::string& token);

std::optional<std::string> check_lexicon_closure(const Lexicon& lex,
                                                 const std::set<std::string>& vocab);
std::optional<std::string> check_pair(const MinimalPair& pair, const TemplateSpec& t,
                                      const Lexicon& lex, const std::set<std::string>& vocab);

struct BenchmarkCheck {
  std::size_t pairs = 0;
  std::size_t closure_failures = 0;
  std::size_t minimality_failures = 0;
  std::size_t distinctness_failures = 0;
  std::size_t agreement_failures = 0;
  std::size_t agreement_checked = 0;
  std::vector<std::string> messages;  // first few failures

  bool ok() const {
    return closure_failures == 0 && minimality_failures == 0 && distinctness_failures == 0 &&
           agreement_failures == 0;
  }
};

BenchmarkCheck check_benchmark(const std::vector<MinimalPair>& pairs,
                               const std::vector<TemplateSpec>& specs, const Lexicon& lex,
                               const std::set<std::string>& vocab);

std::set<std::string> load_vocab(const std::string& path);  // one token per line

}  // namespace posh::templates
