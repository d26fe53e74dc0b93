#include "posh/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"
#include "posh/util.hpp"

namespace posh::corpus {

namespace {

const std::set<std::string, std::less<>>& universal_relations() {
  static const std::set<std::string, std::less<>> kRelations{
      "acl",   "advcl",     "advmod", "amod",      "appos",  "aux",   "case",  "cc",
      "ccomp", "clf",       "compound", "conj",    "cop",    "csubj", "dep",   "det",
      "discourse", "dislocated", "expl", "fixed",  "flat",   "goeswith", "iobj", "list",
      "mark",  "nmod",      "nsubj",  "nummod",    "obj",    "obl",   "orphan", "parataxis",
      "punct", "reparandum", "root",  "vocative",  "xcomp"};
  return kRelations;
}

bool parse_int(std::string_view field, int& out) {
  const char* end = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(field.data(), end, out);
  return ec == std::errc() && ptr == end;
}

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> cols;
  std::size_t start = 0;
  while (true) {
    std::size_t tab = line.find('\t', start);
    if (tab == std::string_view::npos) {
      cols.push_back(line.substr(start));
      break;
    }
    cols.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
  return cols;
}

bool deprel_is(std::string_view deprel, std::string_view base) {
  return deprel == base || (deprel.size() > base.size() && deprel.substr(0, base.size()) == base &&
                            deprel[base.size()] == ':');
}

}  // namespace

std::string SentenceRecord::surface() const {
  if (!text.empty()) return text;
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out += ' ';
    out += t.form;
  }
  return out;
}

std::string_view to_string(Phenomenon p) {
  switch (p) {
    case Phenomenon::question_formation:
      return "question_formation";
    case Phenomenon::binding:
      return "binding";
  }
  return "unknown";
}

Phenomenon phenomenon_from_string(std::string_view name) {
  if (name == "qf" || name == "question_formation") return Phenomenon::question_formation;
  if (name == "binding") return Phenomenon::binding;
  throw std::invalid_argument("unknown phenomenon '" + std::string(name) + "'");
}

CorpusCondition CorpusCondition::injected_default() {
  return {ConditionKind::injected,
          {{Phenomenon::question_formation, 0.002}, {Phenomenon::binding, 0.0007}}};
}

void CorpusCondition::validate() const {
  for (const auto& [p, rate] : injection_rates) {
    if (!(rate >= 0.0 && rate <= 0.01)) {
      throw std::invalid_argument("injection rate for " + std::string(to_string(p)) +
                                  " outside [0, 0.01]");
    }
  }
}

ConlluError::ConlluError(std::size_t line, const std::string& what)
    : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}

bool is_known_deprel(std::string_view label) {
  auto colon = label.find(':');
  return universal_relations().count(label.substr(0, colon)) > 0;
}

std::optional<std::string> validate_sentence(const SentenceRecord& s) {
  if (s.tokens.empty()) return "sentence has no tokens";
  const int n = static_cast<int>(s.tokens.size());
  int roots = 0;
  for (int i = 0; i < n; ++i) {
    const Token& t = s.tokens[static_cast<std::size_t>(i)];
    if (t.index != i + 1) {
      return "token indices not contiguous at position " + std::to_string(i + 1);
    }
    if (t.head < 0 || t.head > n) {
      return "token " + std::to_string(t.index) + " has head " + std::to_string(t.head) +
             " outside 0.." + std::to_string(n);
    }
    if (t.head == t.index) return "token " + std::to_string(t.index) + " heads itself";
    if (t.head == 0) ++roots;
  }
  if (roots != 1) return "expected exactly one root, found " + std::to_string(roots);
  return std::nullopt;
}

std::vector<SentenceRecord> read_conllu(std::istream& in, std::string_view source,
                                        std::vector<RejectedRecord>* rejects) {
  std::vector<SentenceRecord> out;
  SentenceRecord current;
  bool open = false;
  std::size_t line_no = 0;
  std::size_t block_start = 0;

  auto flush = [&] {
    if (!open) return;
    if (current.id.empty()) {
      current.id = std::string(source.empty() ? "s" : source) + ":" + std::to_string(out.size() + 1 +
                   (rejects ? rejects->size() : 0));
    }
    current.source = std::string(source);
    if (auto problem = validate_sentence(current)) {
      if (rejects == nullptr) {
        throw ValidationError("sentence starting at line " + std::to_string(block_start) + " (" +
                              current.id + "): " + *problem);
      }
      rejects->push_back({std::move(current), *problem});
    } else {
      out.push_back(std::move(current));
    }
    current = SentenceRecord{};
    open = false;
  };

  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      flush();
      continue;
    }
    if (!open) {
      open = true;
      block_start = line_no;
    }
    if (line[0] == '#') {
      std::string_view body(line);
      body.remove_prefix(1);
      while (!body.empty() && body.front() == ' ') body.remove_prefix(1);
      if (body.rfind("text =", 0) == 0) {
        body.remove_prefix(6);
        while (!body.empty() && body.front() == ' ') body.remove_prefix(1);
        current.text = std::string(body);
      } else if (body.rfind("sent_id =", 0) == 0) {
        body.remove_prefix(9);
        while (!body.empty() && body.front() == ' ') body.remove_prefix(1);
        current.id = std::string(body);
      }
      continue;
    }
    auto cols = split_tabs(line);
    if (cols.size() != 10) {
      throw ConlluError(line_no, "expected 10 tab-separated columns, found " +
                                     std::to_string(cols.size()));
    }
    // Multiword ranges (1-2) and empty nodes (1.1) are not part of the basic tree.
    if (cols[0].find('-') != std::string_view::npos || cols[0].find('.') != std::string_view::npos) {
      continue;
    }
    Token tok;
    if (!parse_int(cols[0], tok.index)) {
      throw ConlluError(line_no, "non-integer token id '" + std::string(cols[0]) + "'");
    }
    if (!parse_int(cols[6], tok.head)) {
      throw ConlluError(line_no, "non-integer head '" + std::string(cols[6]) + "'");
    }
    tok.form = std::string(cols[1]);
    tok.upos = std::string(cols[3]);
    tok.deprel = std::string(cols[7]);
    current.tokens.push_back(std::move(tok));
  }
  flush();
  return out;
}

std::vector<SentenceRecord> read_conllu_file(const std::string& path,
                                             std::vector<RejectedRecord>* rejects) {
  std::istringstream in(read_file(path));
  std::string source = path;
  auto slash = source.find_last_of('/');
  if (slash != std::string::npos) source = source.substr(slash + 1);
  for (std::string_view ext : {".gz", ".conllu"}) {
    if (ends_with(source, ext)) source.resize(source.size() - ext.size());
  }
  return read_conllu(in, source, rejects);
}

void write_conllu(std::ostream& out, const std::vector<SentenceRecord>& records) {
  for (const auto& r : records) {
    out << "# sent_id = " << r.id << '\n';
    out << "# text = " << r.surface() << '\n';
    for (const auto& t : r.tokens) {
      out << t.index << '\t' << t.form << "\t_\t" << t.upos << "\t_\t_\t" << t.head << '\t'
          << t.deprel << "\t_\t_\n";
    }
    out << '\n';
  }
}

void write_jsonl(std::ostream& out, const std::vector<SentenceRecord>& records) {
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["text"] = r.surface();
    j["source"] = r.source;
    out << j.dump() << '\n';
  }
}

std::vector<SentenceRecord> read_jsonl(std::istream& in) {
  std::vector<SentenceRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConlluError(line_no, std::string("bad JSON: ") + e.what());
    }
    SentenceRecord r;
    r.id = j.value("id", std::to_string(line_no));
    r.text = j.at("text").get<std::string>();
    r.source = j.value("source", "");
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<SentenceRecord> load_records(const std::string& path,
                                         std::vector<RejectedRecord>* rejects) {
  if (ends_with(path, ".jsonl") || ends_with(path, ".jsonl.gz")) {
    std::istringstream in(read_file(path));
    return read_jsonl(in);
  }
  return read_conllu_file(path, rejects);
}

FilterRules FilterRules::from_json_file(const std::string& path) {
  auto j = nlohmann::json::parse(read_file(path));
  FilterRules rules;
  if (j.contains("wh_words")) {
    rules.wh_words.clear();
    for (const auto& w : j["wh_words"]) rules.wh_words.push_back(to_lower(w.get<std::string>()));
  }
  if (j.contains("nominal_upos")) {
    rules.nominal_upos.clear();
    for (const auto& u : j["nominal_upos"]) rules.nominal_upos.insert(u.get<std::string>());
  }
  return rules;
}

bool is_interrogative(const SentenceRecord& s, const FilterRules& rules) {
  if (s.tokens.empty()) return false;
  if (s.tokens.back().form == "?") return true;
  const std::size_t lead = std::min<std::size_t>(2, s.tokens.size());
  for (std::size_t i = 0; i < lead; ++i) {
    const Token& t = s.tokens[i];
    if (t.upos == "AUX") return true;
    const std::string lower = to_lower(t.form);
    if (std::find(rules.wh_words.begin(), rules.wh_words.end(), lower) != rules.wh_words.end()) {
      return true;
    }
  }
  return false;
}

bool has_subject_relative(const SentenceRecord& s) {
  // Some nsubj strictly before some acl:relcl  <=>  first nsubj < last acl:relcl.
  int first_subject = -1;
  int last_relative = -1;
  for (const auto& t : s.tokens) {
    if (first_subject < 0 && deprel_is(t.deprel, "nsubj")) first_subject = t.index;
    if (t.deprel == "acl:relcl") last_relative = t.index;
  }
  return first_subject >= 0 && last_relative >= 0 && first_subject < last_relative;
}

bool is_qf_evidence(const SentenceRecord& s, const FilterRules& rules) {
  return has_subject_relative(s) && is_interrogative(s, rules);
}

bool is_binding_evidence(const SentenceRecord& s, const FilterRules& rules) {
  std::size_t nominals = 0;
  for (const auto& t : s.tokens) {
    const std::string lower = to_lower(t.form);
    if (nominals >= 2 && (ends_with(lower, "self") || ends_with(lower, "selves"))) return true;
    if (rules.nominal_upos.count(t.upos)) ++nominals;
  }
  return false;
}

bool is_evidence(const SentenceRecord& s, Phenomenon p, const FilterRules& rules) {
  switch (p) {
    case Phenomenon::question_formation:
      return is_qf_evidence(s, rules);
    case Phenomenon::binding:
      return is_binding_evidence(s, rules);
  }
  return false;
}

bool has_qf_trigger(const SentenceRecord& s) {
  bool question = false;
  int aux = 0;
  for (const auto& t : s.tokens) {
    if (t.form == "?") question = true;
    if (t.upos == "AUX") ++aux;
  }
  return question && aux >= 2;
}

bool has_reflexive(const SentenceRecord& s) {
  return std::any_of(s.tokens.begin(), s.tokens.end(), [](const Token& t) {
    const std::string lower = to_lower(t.form);
    return ends_with(lower, "self") || ends_with(lower, "selves");
  });
}

FilterResult filter_corpus(const std::vector<SentenceRecord>& records,
                           const std::set<Phenomenon>& phenomena, const FilterRules& rules) {
  FilterResult result;
  result.stats.input = records.size();
  for (Phenomenon p : phenomena) result.stats.rule_matches[p] = 0;

  for (const auto& r : records) {
    bool hit = false;
    for (Phenomenon p : phenomena) {
      if (is_evidence(r, p, rules)) {
        ++result.stats.rule_matches[p];
        hit = true;
      }
    }
    (hit ? result.removed : result.kept).push_back(r);
  }
  result.stats.kept = result.kept.size();
  result.stats.removed = result.removed.size();
  return result;
}

InjectResult inject_evidence(const std::vector<SentenceRecord>& filtered,
                             const std::map<Phenomenon, std::vector<SentenceRecord>>& pools,
                             const std::map<Phenomenon, double>& rates, std::uint64_t seed,
                             const FilterRules& rules) {
  CorpusCondition{ConditionKind::injected, rates}.validate();
  const std::size_t n = filtered.size();

  std::map<Phenomenon, std::size_t> counts;
  std::size_t total = 0;
  for (const auto& [p, rate] : rates) {
    const auto k = static_cast<std::size_t>(std::llround(rate * static_cast<double>(n)));
    if (k == 0) continue;
    auto pool = pools.find(p);
    if (pool == pools.end() || pool->second.empty()) {
      throw std::invalid_argument("empty evidence pool for " + std::string(to_string(p)) +
                                  " with nonzero rate");
    }
    for (const auto& s : pool->second) {
      if (!is_evidence(s, p, rules)) {
        throw std::invalid_argument("pool sentence " + s.id + " is not " +
                                    std::string(to_string(p)) + " evidence");
      }
    }
    counts[p] = k;
    total += k;
  }
  if (total > n) throw std::invalid_argument("more replacements than sentences");

  InjectResult result{filtered, {}};
  if (total == 0) return result;

  auto rng = make_rng(seed, "inject");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  // Partial Fisher-Yates: the first `total` slots become distinct uniform positions.
  for (std::size_t i = 0; i < total; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(order[i], order[pick(rng)]);
  }

  std::size_t cursor = 0;
  for (const auto& [p, k] : counts) {
    const auto& pool = pools.at(p);
    std::vector<std::size_t> draw(pool.size());
    std::iota(draw.begin(), draw.end(), std::size_t{0});
    std::shuffle(draw.begin(), draw.end(), rng);
    std::uniform_int_distribution<std::size_t> any(0, pool.size() - 1);
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t src = i < draw.size() ? draw[i] : any(rng);
      const std::size_t pos = order[cursor++];
      result.records[pos] = pool[src];
      result.replacements.push_back({pos, p, src});
    }
  }
  std::sort(result.replacements.begin(), result.replacements.end(),
            [](const Replacement& a, const Replacement& b) { return a.position < b.position; });
  return result;
}

SampleResult sanity_sample(const std::vector<SentenceRecord>& records,
                           const std::function<bool(const SentenceRecord&)>& predicate,
                           std::size_t n, std::uint64_t seed) {
  std::vector<const SentenceRecord*> population;
  for (const auto& r : records) {
    if (predicate(r)) population.push_back(&r);
  }
  SampleResult result;
  result.population = population.size();
  result.short_sample = n > population.size();
  std::vector<const SentenceRecord*> chosen;
  auto rng = make_rng(seed, "sanity-sample");
  std::sample(population.begin(), population.end(), std::back_inserter(chosen), n, rng);
  for (const auto* r : chosen) result.sample.push_back(*r);
  return result;
}

std::string stats_to_json(const FilterStats& stats) {
  nlohmann::ordered_json j;
  j["input"] = stats.input;
  j["kept"] = stats.kept;
  j["removed"] = stats.removed;
  nlohmann::ordered_json rules = nlohmann::ordered_json::object();
  for (const auto& [p, c] : stats.rule_matches) rules[std::string(to_string(p))] = c;
  j["rule_matches"] = rules;
  return j.dump(2);
}

}  // namespace posh::corpus
