#pragma once

#include <cstdint>
#include <istream>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace posh::tokenizer {

// Marks a word boundary; prefixed to every word except the first of a line.
inline const std::string kSpaceMarker = "\xE2\x96\x81";  // U+2581

// Pre-tokens of one line: words split on whitespace, punctuation characters
// as separate pieces, the first piece of each non-initial word carrying the
// space marker.
std::vector<std::string> pre_tokenize(const std::string& line);

// Splits UTF-8 text into code points (invalid bytes pass through singly).
std::vector<std::string> utf8_chars(const std::string& s);

struct Encoding {
  std::vector<int> ids;
  std::vector<int> word_of_token;  // index of the source word for each id
};

class BpeModel {
 public:
  int pad_id() const { return 0; }
  int unk_id() const { return 1; }
  int bos_id() const { return 2; }
  int eos_id() const { return 3; }
  static constexpr int kNumSpecials = 4;

  int size() const { return static_cast<int>(id_to_token_.size()); }
  // Alphabet plus merges; specials and reserved tokens excluded.
  int learned_size() const { return size() - kNumSpecials - static_cast<int>(reserved_.size()); }
  const std::string& token(int id) const { return id_to_token_.at(id); }
  int id_of(const std::string& token) const;  // unk when absent
  bool contains(const std::string& token) const { return vocab_.count(token) > 0; }
  int alphabet_size() const { return alphabet_size_; }
  const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }
  const std::vector<std::string>& reserved() const { return reserved_; }
  const std::string& normalization() const { return normalization_; }

  std::vector<int> encode(const std::string& line) const;
  Encoding encode_words(const std::vector<std::string>& words) const;
  std::string decode(const std::vector<int>& ids) const;

  // Segmentation of one pre-token into token strings.
  std::vector<std::string> segment(const std::string& piece) const;

  std::string vocab_json() const;
  std::string merges_text() const;
  static BpeModel from_files(const std::string& vocab_json, const std::string& merges_text);
  void save(const std::string& vocab_path, const std::string& merges_path) const;
  static BpeModel load(const std::string& vocab_path, const std::string& merges_path);

  // Builds a model from an alphabet and merge list.
  static BpeModel build(const std::vector<std::string>& alphabet,
                        const std::vector<std::pair<std::string, std::string>>& merges,
                        const std::vector<std::string>& reserved);

 private:
  void add_token(const std::string& t);
  void encode_piece(const std::string& piece, std::vector<int>& out) const;

  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> vocab_;
  std::vector<std::pair<std::string, std::string>> merges_;
  std::map<std::pair<std::string, std::string>, int> ranks_;
  std::vector<std::string> reserved_;
  std::string normalization_ = "none";
  int alphabet_size_ = 0;
  mutable std::unordered_map<std::string, std::vector<int>> cache_;
};

// Standard BPE on the pre-tokens of every line. vocab_size counts alphabet
// plus merged symbols; training stops early when no pair occurs twice. Reserved
// tokens are encoded atomically when a whole word matches.
BpeModel train_bpe(std::istream& corpus, std::size_t vocab_size,
                   const std::vector<std::string>& reserved = {});
BpeModel train_bpe_text(const std::string& corpus, std::size_t vocab_size,
                        const std::vector<std::string>& reserved = {});

std::uint64_t corpus_token_count(const BpeModel& model, std::istream& corpus);
std::uint64_t corpus_token_count(const BpeModel& model, const std::string& corpus);

// Max over corpus pairs of |a - b| / min(a, b).
double ctc_discrepancy(const std::vector<std::uint64_t>& ctcs);

// ctc[corpus][candidate]; returns the index of the chosen candidate.
std::size_t select_vocab_index(const std::vector<std::vector<std::uint64_t>>& ctc);

struct SelectionResult {
  std::size_t chosen;
  std::vector<std::vector<std::uint64_t>> ctc;  // [corpus][candidate]
  std::vector<double> discrepancy;              // per candidate
};

// Trains one tokenizer per corpus and candidate size, measures CTC on the
// corpus itself and picks the size with the smallest discrepancy.
SelectionResult select_vocab_size(const std::vector<std::string>& corpora,
                                  const std::vector<std::size_t>& candidates);

}  // namespace posh::tokenizer
