#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "posh/corpus.hpp"
#include "posh/templates.hpp"

namespace posh::synth {

// Sentence shapes of the toy grammar. Every sentence carries a gold UD parse.
enum class Kind {
  transitive,        // the boy saw the girl .
  modal,             // the boy will read the book .
  subject_relative,  // the boy who can read the book will sleep .
  object_relative,   // the boy who the girl saw will sleep .
  yes_no_question,   // will the boy read the book ?
  wh_question,       // what will the boy read ?
  embedded,          // the girl said that the boy saw the dog .
  reflexive_local,   // the boy saw himself .
  wanna_question,    // does the boy wanna sleep ?
  qf_evidence,       // will the boy who can read the book sleep ?
  binding_evidence,  // the girl said that the boy saw himself .
};

std::string to_string(Kind k);
Kind kind_from_string(const std::string& s);
const std::vector<Kind>& all_kinds();

// Whether the corpus filter should treat this kind as direct evidence.
bool is_evidence_kind(Kind k);

struct Mix {
  std::map<Kind, double> weights;

  static Mix natural();      // everything, evidence rare
  static Mix distractors();  // every non-evidence kind, equal weight
  static Mix only(Kind k);
};

class Grammar {
 public:
  explicit Grammar(templates::Lexicon lex);
  static Grammar load(const std::string& lexicon_path);

  corpus::SentenceRecord sentence(Kind k, std::mt19937_64& rng, const std::string& id) const;

 private:
  const std::vector<templates::LexicalEntry>& cls(const std::string& name) const;
  templates::Lexicon lex_;
};

// Sentence i uses its own RNG stream derived from (seed, i).
std::vector<corpus::SentenceRecord> generate(const Grammar& g, std::size_t n, const Mix& mix,
                                             std::uint64_t seed,
                                             const std::string& id_prefix = "s");

// Generates until the word count (punctuation included) reaches `words`.
std::vector<corpus::SentenceRecord> generate_words(const Grammar& g, std::size_t words,
                                                   const Mix& mix, std::uint64_t seed,
                                                   const std::string& id_prefix = "s");

}  // namespace posh::synth
