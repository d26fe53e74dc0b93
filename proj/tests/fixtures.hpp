#pragma once

#include <random>
#include <string>
#include <vector>

#include "posh/corpus.hpp"

namespace posh::testing {

struct Row {
  std::string form;
  std::string upos;
  int head;
  std::string deprel;
};

inline corpus::SentenceRecord make_sentence(const std::vector<Row>& rows, std::string id = "t") {
  corpus::SentenceRecord s;
  s.id = std::move(id);
  int i = 0;
  for (const auto& r : rows) s.tokens.push_back({++i, r.form, r.upos, r.head, r.deprel});
  return s;
}

// Gold parse: acl:relcl on "is" (5), nsubj on "boy" (3).
inline corpus::SentenceRecord boy_in_corner_question() {
  return make_sentence({{"Is", "AUX", 9, "aux"},
                        {"the", "DET", 3, "det"},
                        {"boy", "NOUN", 9, "nsubj"},
                        {"who", "PRON", 5, "nsubj"},
                        {"is", "AUX", 3, "acl:relcl"},
                        {"in", "ADP", 8, "case"},
                        {"the", "DET", 8, "det"},
                        {"corner", "NOUN", 5, "obl"},
                        {"smiling", "VERB", 0, "root"},
                        {"?", "PUNCT", 9, "punct"}},
                       "boy-question");
}

inline corpus::SentenceRecord boy_in_corner_declarative() {
  return make_sentence({{"The", "DET", 2, "det"},
                        {"boy", "NOUN", 8, "nsubj"},
                        {"who", "PRON", 4, "nsubj"},
                        {"is", "AUX", 2, "acl:relcl"},
                        {"in", "ADP", 7, "case"},
                        {"the", "DET", 7, "det"},
                        {"corner", "NOUN", 4, "obl"},
                        {"is", "AUX", 8, "aux"},
                        {"smiling", "VERB", 0, "root"},
                        {".", "PUNCT", 9, "punct"}},
                       "boy-declarative");
}

inline corpus::SentenceRecord anyone_awake_question() {
  return make_sentence({{"How", "ADV", 8, "advmod"},
                        {"could", "AUX", 8, "aux"},
                        {"anyone", "PRON", 8, "nsubj"},
                        {"that", "PRON", 6, "nsubj"},
                        {"was", "AUX", 6, "cop"},
                        {"awake", "ADJ", 3, "acl:relcl"},
                        {"not", "PART", 8, "advmod"},
                        {"hear", "VERB", 0, "root"},
                        {"that", "PRON", 8, "obj"},
                        {"?", "PUNCT", 8, "punct"}},
                       "anyone-question");
}

inline corpus::SentenceRecord is_he_smiling() {
  return make_sentence({{"Is", "AUX", 3, "aux"},
                        {"he", "PRON", 3, "nsubj"},
                        {"smiling", "VERB", 0, "root"},
                        {"?", "PUNCT", 3, "punct"}},
                       "he-question");
}

inline corpus::SentenceRecord people_like_her() {
  return make_sentence({{"People", "NOUN", 6, "nsubj"},
                        {"like", "ADP", 3, "case"},
                        {"her", "PRON", 1, "nmod"},
                        {"do", "AUX", 6, "aux"},
                        {"n't", "PART", 6, "advmod"},
                        {"often", "ADV", 6, "advmod"},
                        {"get", "VERB", 0, "root"},
                        {"themselves", "PRON", 9, "nsubj"},
                        {"murdered", "VERB", 7, "xcomp"},
                        {".", "PUNCT", 7, "punct"}},
                       "people-like-her");
}

// Random well-formed sentence: every token heads to an earlier one or the root.
inline corpus::SentenceRecord random_sentence(std::mt19937_64& rng, int id) {
  static const std::vector<std::string> forms{"the", "boy",  "who", "is",      "?",    ".",
                                              "he",  "saw",  "himself", "themselves", "what",
                                              "can", "girl", "Mary", "myself", "how"};
  static const std::vector<std::string> upos{"DET", "NOUN", "PRON", "AUX", "PUNCT",
                                             "VERB", "PROPN", "ADV"};
  static const std::vector<std::string> rels{"nsubj", "acl:relcl", "obj", "det", "aux",
                                             "punct", "obl", "nsubj:pass"};
  std::uniform_int_distribution<int> len(1, 12);
  const int n = len(rng);
  std::uniform_int_distribution<int> root_pick(1, n);
  const int root = root_pick(rng);
  corpus::SentenceRecord s;
  s.id = "r" + std::to_string(id);
  for (int i = 1; i <= n; ++i) {
    corpus::Token t;
    t.index = i;
    t.form = forms[rng() % forms.size()];
    t.upos = upos[rng() % upos.size()];
    t.deprel = rels[rng() % rels.size()];
    t.head = i == root ? 0 : root;
    if (i == root) t.deprel = "root";
    s.tokens.push_back(t);
  }
  return s;
}

}  // namespace posh::testing
