#include "posh/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <numeric>
#include <queue>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "posh/util.hpp"

namespace posh::tokenizer {

namespace {

const char* const kSpecials[] = {"<pad>", "<unk>", "<bos>", "<eos>"};

bool is_punct_char(const std::string& ch) {
  return ch.size() == 1 && std::ispunct(static_cast<unsigned char>(ch[0]));
}

// Pieces of one word; `marked` prefixes the first piece with the space marker.
void word_pieces(const std::string& word, bool marked, std::vector<std::string>& out) {
  std::string run = marked ? kSpaceMarker : "";
  bool run_has_text = false;
  for (const auto& ch : utf8_chars(word)) {
    if (is_punct_char(ch)) {
      if (run_has_text) {
        out.push_back(run);
        run.clear();
      }
      out.push_back(run + ch);
      run.clear();
      run_has_text = false;
    } else {
      run += ch;
      run_has_text = true;
    }
  }
  if (run_has_text) out.push_back(run);
}

struct PairHash {
  std::size_t operator()(const std::pair<int, int>& p) const {
    return std::hash<std::uint64_t>()((std::uint64_t(std::uint32_t(p.first)) << 32) |
                                      std::uint32_t(p.second));
  }
};

}  // namespace

std::vector<std::string> utf8_chars(const std::string& s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = 1;
    if (c >= 0xF0 && c < 0xF8) len = 4;
    else if (c >= 0xE0) len = 3;
    else if (c >= 0xC0) len = 2;
    if (len > 1 && c >= 0xF8) len = 1;
    bool valid = i + len <= s.size();
    for (std::size_t k = 1; valid && k < len; ++k) {
      valid = (static_cast<unsigned char>(s[i + k]) & 0xC0) == 0x80;
    }
    if (!valid) len = 1;
    out.push_back(s.substr(i, len));
    i += len;
  }
  return out;
}

std::vector<std::string> pre_tokenize(const std::string& line) {
  std::vector<std::string> out;
  bool first = true;
  for (const auto& word : split_whitespace(line)) {
    word_pieces(word, !first, out);
    first = false;
  }
  return out;
}

int BpeModel::id_of(const std::string& token) const {
  auto it = vocab_.find(token);
  return it == vocab_.end() ? unk_id() : it->second;
}

void BpeModel::add_token(const std::string& t) {
  if (vocab_.count(t)) throw std::invalid_argument("duplicate token '" + t + "'");
  vocab_[t] = static_cast<int>(id_to_token_.size());
  id_to_token_.push_back(t);
}

BpeModel BpeModel::build(const std::vector<std::string>& alphabet,
                         const std::vector<std::pair<std::string, std::string>>& merges,
                         const std::vector<std::string>& reserved) {
  BpeModel m;
  for (const char* s : kSpecials) m.add_token(s);
  for (const auto& r : reserved) m.add_token(r);
  m.reserved_ = reserved;
  for (const auto& a : alphabet) m.add_token(a);
  m.alphabet_size_ = static_cast<int>(alphabet.size());
  for (const auto& [a, b] : merges) {
    if (!m.vocab_.count(a) || !m.vocab_.count(b)) {
      throw std::invalid_argument("merge of unknown symbols '" + a + "' '" + b + "'");
    }
    m.ranks_[{a, b}] = static_cast<int>(m.merges_.size());
    m.merges_.emplace_back(a, b);
    if (!m.vocab_.count(a + b)) m.add_token(a + b);
  }
  return m;
}

std::vector<std::string> BpeModel::segment(const std::string& piece) const {
  std::vector<std::string> sym = utf8_chars(piece);
  while (sym.size() > 1) {
    int best_rank = -1;
    for (std::size_t i = 0; i + 1 < sym.size(); ++i) {
      auto it = ranks_.find({sym[i], sym[i + 1]});
      if (it != ranks_.end() && (best_rank < 0 || it->second < best_rank)) best_rank = it->second;
    }
    if (best_rank < 0) break;
    const auto& [a, b] = merges_[best_rank];
    std::vector<std::string> next;
    for (std::size_t i = 0; i < sym.size(); ++i) {
      if (i + 1 < sym.size() && sym[i] == a && sym[i + 1] == b) {
        next.push_back(a + b);
        ++i;
      } else {
        next.push_back(sym[i]);
      }
    }
    sym = std::move(next);
  }
  return sym;
}

void BpeModel::encode_piece(const std::string& piece, std::vector<int>& out) const {
  auto it = cache_.find(piece);
  if (it == cache_.end()) {
    std::vector<int> ids;
    for (const auto& s : segment(piece)) ids.push_back(id_of(s));
    if (cache_.size() > 200000) cache_.clear();
    it = cache_.emplace(piece, std::move(ids)).first;
  }
  out.insert(out.end(), it->second.begin(), it->second.end());
}

Encoding BpeModel::encode_words(const std::vector<std::string>& words) const {
  Encoding enc;
  std::vector<std::string> pieces;
  bool first = true;
  for (std::size_t w = 0; w < words.size(); ++w) {
    const auto before = enc.ids.size();
    const auto parts = split_whitespace(words[w]);
    for (const auto& part : parts) {
      if (std::find(reserved_.begin(), reserved_.end(), part) != reserved_.end()) {
        enc.ids.push_back(vocab_.at(part));
      } else {
        pieces.clear();
        word_pieces(part, !first, pieces);
        for (const auto& p : pieces) encode_piece(p, enc.ids);
      }
      first = false;
    }
    enc.word_of_token.resize(enc.ids.size(), static_cast<int>(w));
    (void)before;
  }
  return enc;
}

std::vector<int> BpeModel::encode(const std::string& line) const {
  return encode_words(split_whitespace(line)).ids;
}

std::string BpeModel::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id == pad_id() || id == bos_id() || id == eos_id()) continue;
    if (id < kNumSpecials + static_cast<int>(reserved_.size())) {
      if (!out.empty()) out += ' ';
      out += id_to_token_.at(id);
      continue;
    }
    const std::string& t = id_to_token_.at(id);
    std::size_t pos = 0;
    while (pos < t.size()) {
      if (t.compare(pos, kSpaceMarker.size(), kSpaceMarker) == 0) {
        out += ' ';
        pos += kSpaceMarker.size();
      } else {
        out += t[pos++];
      }
    }
  }
  return out;
}

std::string BpeModel::vocab_json() const {
  nlohmann::ordered_json j;
  j["normalization"] = normalization_;
  j["space_marker"] = kSpaceMarker;
  j["specials"] = {{"pad", pad_id()}, {"unk", unk_id()}, {"bos", bos_id()}, {"eos", eos_id()}};
  j["reserved"] = reserved_;
  j["alphabet_size"] = alphabet_size_;
  nlohmann::ordered_json v = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < id_to_token_.size(); ++i) v[id_to_token_[i]] = i;
  j["vocab"] = v;
  return j.dump(1);
}

std::string BpeModel::merges_text() const {
  std::string out;
  for (const auto& [a, b] : merges_) out += a + " " + b + "\n";
  return out;
}

BpeModel BpeModel::from_files(const std::string& vocab_json, const std::string& merges_text) {
  auto j = nlohmann::json::parse(vocab_json);
  std::vector<std::string> reserved = j.value("reserved", std::vector<std::string>{});
  std::vector<std::pair<int, std::string>> by_id;
  for (const auto& [tok, id] : j.at("vocab").items()) by_id.emplace_back(id.get<int>(), tok);
  std::sort(by_id.begin(), by_id.end());
  std::vector<std::pair<std::string, std::string>> merges;
  std::istringstream in(merges_text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto sp = line.find(' ');
    if (sp == std::string::npos) throw std::runtime_error("bad merge line: " + line);
    merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
  }
  const std::size_t alphabet_begin = kNumSpecials + reserved.size();
  const std::size_t alphabet_size = j.at("alphabet_size").get<std::size_t>();
  if (by_id.size() < alphabet_begin + alphabet_size) {
    throw std::runtime_error("vocabulary smaller than specials plus alphabet");
  }
  std::vector<std::string> alphabet;
  for (std::size_t i = alphabet_begin; i < alphabet_begin + alphabet_size; ++i) {
    alphabet.push_back(by_id[i].second);
  }
  BpeModel m = build(alphabet, merges, reserved);
  m.normalization_ = j.value("normalization", "none");
  if (by_id.size() != m.id_to_token_.size()) {
    throw std::runtime_error("vocabulary size inconsistent with merges");
  }
  for (std::size_t i = 0; i < by_id.size(); ++i) {
    if (by_id[i].first != static_cast<int>(i) || m.id_to_token_[i] != by_id[i].second) {
      throw std::runtime_error("vocabulary ids inconsistent with merges");
    }
  }
  return m;
}

void BpeModel::save(const std::string& vocab_path, const std::string& merges_path) const {
  write_file(vocab_path, vocab_json());
  write_file(merges_path, merges_text());
}

BpeModel BpeModel::load(const std::string& vocab_path, const std::string& merges_path) {
  return from_files(read_file(vocab_path), read_file(merges_path));
}

BpeModel train_bpe(std::istream& corpus, std::size_t vocab_size,
                   const std::vector<std::string>& reserved) {
  // Unique pre-tokens with counts.
  std::unordered_map<std::string, std::uint64_t> piece_counts;
  std::set<std::string> reserved_set(reserved.begin(), reserved.end());
  std::string line;
  std::vector<std::string> pieces;
  bool any = false;
  while (std::getline(corpus, line)) {
    bool first = true;
    for (const auto& word : split_whitespace(line)) {
      any = true;
      if (!reserved_set.count(word)) {
        pieces.clear();
        word_pieces(word, !first, pieces);
        for (const auto& p : pieces) ++piece_counts[p];
      }
      first = false;
    }
  }
  if (!any) throw std::invalid_argument("train_bpe: empty corpus");

  std::vector<std::string> strings;  // symbol id -> string
  std::unordered_map<std::string, int> sym_id;
  auto intern = [&](const std::string& s) {
    auto [it, inserted] = sym_id.emplace(s, static_cast<int>(strings.size()));
    if (inserted) strings.push_back(s);
    return it->second;
  };

  std::set<std::string> alphabet_set;
  std::vector<std::pair<std::string, std::uint64_t>> sorted_pieces(piece_counts.begin(),
                                                                   piece_counts.end());
  std::sort(sorted_pieces.begin(), sorted_pieces.end());
  for (const auto& [p, c] : sorted_pieces) {
    for (const auto& ch : utf8_chars(p)) alphabet_set.insert(ch);
  }
  std::vector<std::string> alphabet(alphabet_set.begin(), alphabet_set.end());
  if (vocab_size < alphabet.size()) {
    throw std::invalid_argument("train_bpe: vocab_size " + std::to_string(vocab_size) +
                                " below alphabet size " + std::to_string(alphabet.size()));
  }
  for (const auto& a : alphabet) intern(a);

  std::vector<std::vector<int>> words;
  std::vector<std::uint64_t> freq;
  for (const auto& [p, c] : sorted_pieces) {
    std::vector<int> syms;
    for (const auto& ch : utf8_chars(p)) syms.push_back(sym_id.at(ch));
    words.push_back(std::move(syms));
    freq.push_back(c);
  }

  using Pair = std::pair<int, int>;
  std::unordered_map<Pair, std::int64_t, PairHash> counts;
  std::unordered_map<Pair, std::vector<int>, PairHash> where;
  for (std::size_t w = 0; w < words.size(); ++w) {
    for (std::size_t i = 0; i + 1 < words[w].size(); ++i) {
      Pair p{words[w][i], words[w][i + 1]};
      counts[p] += static_cast<std::int64_t>(freq[w]);
      auto& list = where[p];
      if (list.empty() || list.back() != static_cast<int>(w)) list.push_back(static_cast<int>(w));
    }
  }

  struct Entry {
    std::int64_t count;
    Pair pair;
  };
  auto worse = [&](const Entry& x, const Entry& y) {
    if (x.count != y.count) return x.count < y.count;
    const auto& xa = strings[x.pair.first];
    const auto& ya = strings[y.pair.first];
    if (xa != ya) return xa > ya;
    return strings[x.pair.second] > strings[y.pair.second];
  };
  std::priority_queue<Entry, std::vector<Entry>, decltype(worse)> heap(worse);
  for (const auto& [p, c] : counts) heap.push({c, p});

  std::vector<std::pair<std::string, std::string>> merges;
  while (strings.size() < vocab_size && !heap.empty()) {
    Entry top = heap.top();
    heap.pop();
    auto it = counts.find(top.pair);
    if (it == counts.end() || it->second != top.count) continue;
    if (top.count < 2) break;

    const Pair pair = top.pair;
    const int merged = intern(strings[pair.first] + strings[pair.second]);
    merges.emplace_back(strings[pair.first], strings[pair.second]);

    std::set<Pair> touched;
    const auto affected = std::move(where[pair]);
    where.erase(pair);
    for (int w : affected) {
      auto& syms = words[w];
      bool present = false;
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
        present = present || (syms[i] == pair.first && syms[i + 1] == pair.second);
      }
      if (!present) continue;
      const auto f = static_cast<std::int64_t>(freq[w]);
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
        Pair p{syms[i], syms[i + 1]};
        counts[p] -= f;
        touched.insert(p);
      }
      std::vector<int> next;
      for (std::size_t i = 0; i < syms.size(); ++i) {
        if (i + 1 < syms.size() && syms[i] == pair.first && syms[i + 1] == pair.second) {
          next.push_back(merged);
          ++i;
        } else {
          next.push_back(syms[i]);
        }
      }
      syms = std::move(next);
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
        Pair p{syms[i], syms[i + 1]};
        counts[p] += f;
        touched.insert(p);
        auto& list = where[p];
        if (list.empty() || list.back() != w) list.push_back(w);
      }
    }
    for (const auto& p : touched) {
      auto c = counts.find(p);
      if (c == counts.end()) continue;
      if (c->second <= 0) {
        counts.erase(c);
      } else {
        heap.push({c->second, p});
      }
    }
  }
  return BpeModel::build(alphabet, merges, reserved);
}

BpeModel train_bpe_text(const std::string& corpus, std::size_t vocab_size,
                        const std::vector<std::string>& reserved) {
  std::istringstream in(corpus);
  return train_bpe(in, vocab_size, reserved);
}

std::uint64_t corpus_token_count(const BpeModel& model, std::istream& corpus) {
  std::uint64_t total = 0;
  std::string line;
  while (std::getline(corpus, line)) total += model.encode(line).size();
  return total;
}

std::uint64_t corpus_token_count(const BpeModel& model, const std::string& corpus) {
  std::istringstream in(corpus);
  return corpus_token_count(model, in);
}

double ctc_discrepancy(const std::vector<std::uint64_t>& ctcs) {
  if (ctcs.size() < 2) throw std::invalid_argument("discrepancy needs at least two corpora");
  double worst = 0.0;
  for (std::size_t a = 0; a < ctcs.size(); ++a) {
    for (std::size_t b = a + 1; b < ctcs.size(); ++b) {
      const double lo = static_cast<double>(std::min(ctcs[a], ctcs[b]));
      const double diff = std::abs(double(ctcs[a]) - double(ctcs[b]));
      if (lo == 0.0) {
        if (diff > 0) worst = std::numeric_limits<double>::infinity();
        continue;
      }
      worst = std::max(worst, diff / lo);
    }
  }
  return worst;
}

std::size_t select_vocab_index(const std::vector<std::vector<std::uint64_t>>& ctc) {
  if (ctc.size() < 2) throw std::invalid_argument("select_vocab_size needs at least two corpora");
  const std::size_t n = ctc[0].size();
  if (n == 0) throw std::invalid_argument("no candidate sizes");
  std::size_t best = 0;
  double best_value = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < n; ++c) {
    std::vector<std::uint64_t> column;
    for (const auto& row : ctc) column.push_back(row.at(c));
    const double d = ctc_discrepancy(column);
    if (d < best_value) {
      best_value = d;
      best = c;
    }
  }
  return best;
}

SelectionResult select_vocab_size(const std::vector<std::string>& corpora,
                                  const std::vector<std::size_t>& candidates) {
  if (corpora.size() < 2) throw std::invalid_argument("select_vocab_size needs at least two corpora");
  if (candidates.empty()) throw std::invalid_argument("no candidate sizes");
  // Smallest size first so ties resolve to it.
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return candidates[a] < candidates[b]; });
  SelectionResult r;
  r.ctc.assign(corpora.size(), std::vector<std::uint64_t>(candidates.size()));
  for (std::size_t i = 0; i < corpora.size(); ++i) {
    for (std::size_t c = 0; c < candidates.size(); ++c) {
      auto model = train_bpe_text(corpora[i], candidates[c]);
      r.ctc[i][c] = corpus_token_count(model, corpora[i]);
    }
  }
  std::vector<std::vector<std::uint64_t>> ordered(corpora.size());
  for (std::size_t i = 0; i < corpora.size(); ++i) {
    for (auto c : order) ordered[i].push_back(r.ctc[i][c]);
  }
  r.chosen = order[select_vocab_index(ordered)];
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    std::vector<std::uint64_t> column;
    for (const auto& row : r.ctc) column.push_back(row[c]);
    r.discrepancy.push_back(ctc_discrepancy(column));
  }
  return r;
}

}  // namespace posh::tokenizer
