#include "posh/templates.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <future>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"
#include "posh/util.hpp"

namespace posh::templates {

namespace {

constexpr std::uint64_t kEnumerateLimit = 1u << 21;

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

// Splits a literal word into tokens: trailing punctuation and the possessive
// clitic become separate tokens.
void split_literal_word(const std::string& word, std::vector<std::string>& out) {
  std::string w = word;
  std::vector<std::string> tail;
  while (!w.empty() && std::string_view(".?!,").find(w.back()) != std::string_view::npos) {
    tail.insert(tail.begin(), std::string(1, w.back()));
    w.pop_back();
  }
  if (w.size() > 2 && ends_with(w, "'s")) {
    out.push_back(w.substr(0, w.size() - 2));
    out.emplace_back("'s");
  } else if (!w.empty()) {
    out.push_back(w);
  }
  out.insert(out.end(), tail.begin(), tail.end());
}

struct SlotInfo {
  std::string name;
  std::string lexical_class;
  std::vector<std::size_t> candidates;  // indices into the class entry list
};

struct ChoiceInfo {
  std::vector<std::string> bad;
  std::vector<std::string> good;
};

// Flattened sampling space of one template.
struct Space {
  std::vector<SlotInfo> slots;
  std::vector<ChoiceInfo> choices;
  // slots sharing a lexical class must take distinct entries
  std::vector<std::vector<std::size_t>> same_class_earlier;

  std::vector<std::uint64_t> radix() const {
    std::vector<std::uint64_t> r;
    for (const auto& s : slots) r.push_back(s.candidates.size());
    for (const auto& c : choices) r.push_back(c.bad.size() * c.good.size());
    return r;
  }
};

const std::vector<LexicalEntry>& class_entries(const Lexicon& lex, const std::string& cls) {
  auto it = lex.entries.find(cls);
  if (it == lex.entries.end()) throw TemplateError("unknown lexical class '" + cls + "'");
  return it->second;
}

std::vector<const PatternElement*> choices_of(const Pattern& p) {
  std::vector<const PatternElement*> out;
  for (const auto& e : p) {
    if (e.kind == PatternElement::Kind::choice) out.push_back(&e);
  }
  return out;
}

Space build_space(const TemplateSpec& t, const Lexicon& lex) {
  Space space;
  for (const auto& name : t.slot_names()) {
    const auto& constraint = t.slot_constraints.at(name);
    const auto& entries = class_entries(lex, constraint.lexical_class);
    SlotInfo info{name, constraint.lexical_class, {}};
    for (std::size_t i = 0; i < entries.size(); ++i) {
      bool ok = true;
      for (const auto& [feature, value] : constraint.features) {
        auto f = entries[i].features.find(feature);
        ok = ok && f != entries[i].features.end() && f->second == value;
      }
      if (ok) info.candidates.push_back(i);
    }
    space.slots.push_back(std::move(info));
  }
  auto bad = choices_of(t.bad_pattern);
  auto good = choices_of(t.good_pattern);
  for (std::size_t k = 0; k < bad.size(); ++k) {
    space.choices.push_back({bad[k]->options, good[k]->options});
  }
  for (std::size_t i = 0; i < space.slots.size(); ++i) {
    std::vector<std::size_t> earlier;
    for (std::size_t j = 0; j < i; ++j) {
      if (space.slots[j].lexical_class == space.slots[i].lexical_class) earlier.push_back(j);
    }
    space.same_class_earlier.push_back(std::move(earlier));
  }
  return space;
}

bool distinct_ok(const Space& space, const std::vector<std::uint64_t>& digits, std::size_t upto) {
  for (std::size_t i = 0; i < upto; ++i) {
    const auto ei = space.slots[i].candidates[digits[i]];
    for (std::size_t j : space.same_class_earlier[i]) {
      if (space.slots[j].candidates[digits[j]] == ei) return false;
    }
  }
  return true;
}

std::uint64_t saturating_mul(std::uint64_t a, std::uint64_t b, std::uint64_t cap) {
  if (a == 0 || b == 0) return 0;
  if (a > cap / b) return cap;
  return std::min(cap, a * b);
}

// Counts distinct-entry slot assignments, stopping at `limit`.
std::uint64_t count_slot_assignments(const Space& space, std::vector<std::uint64_t>& digits,
                                     std::size_t depth, std::uint64_t limit) {
  if (depth == space.slots.size()) return 1;
  std::uint64_t total = 0;
  for (std::uint64_t c = 0; c < space.slots[depth].candidates.size(); ++c) {
    digits[depth] = c;
    const auto entry = space.slots[depth].candidates[c];
    bool clash = false;
    for (std::size_t j : space.same_class_earlier[depth]) {
      clash = clash || space.slots[j].candidates[digits[j]] == entry;
    }
    if (clash) continue;
    total += count_slot_assignments(space, digits, depth + 1, limit - total);
    if (total >= limit) return limit;
  }
  return total;
}

void enumerate(const Space& space, std::vector<std::uint64_t>& digits, std::size_t depth,
               std::vector<std::vector<std::uint64_t>>& out) {
  const auto radix = space.radix();
  if (depth == radix.size()) {
    out.push_back(digits);
    return;
  }
  for (std::uint64_t c = 0; c < radix[depth]; ++c) {
    digits[depth] = c;
    if (depth < space.slots.size() && !distinct_ok(space, digits, depth + 1)) continue;
    enumerate(space, digits, depth + 1, out);
  }
}

std::vector<std::string> render(const Pattern& pattern, const TemplateSpec& t, const Lexicon& lex,
                                const std::map<std::string, const LexicalEntry*>& fill,
                                const std::vector<std::string>& choice_values) {
  std::vector<std::string> tokens;
  for (const auto& e : pattern) {
    switch (e.kind) {
      case PatternElement::Kind::literal:
        tokens.push_back(e.text);
        break;
      case PatternElement::Kind::slot: {
        const LexicalEntry* entry = fill.at(e.text);
        if (e.attribute.empty()) {
          for (auto& w : split_whitespace(entry->form)) tokens.push_back(std::move(w));
        } else {
          auto f = entry->features.find(e.attribute);
          if (f == entry->features.end()) {
            throw TemplateError("template " + t.id + ": entry '" + entry->form +
                                "' lacks feature '" + e.attribute + "'");
          }
          for (auto& w : split_whitespace(f->second)) tokens.push_back(std::move(w));
        }
        break;
      }
      case PatternElement::Kind::choice:
        tokens.push_back(choice_values.at(static_cast<std::size_t>(e.choice_index)));
        break;
    }
  }
  (void)lex;
  return tokens;
}

std::string choice_key(std::size_t k, bool good) {
  return "choice" + std::to_string(k + 1) + (good ? ".good" : ".bad");
}

MinimalPair make_pair(const TemplateSpec& t, const Lexicon& lex, const Space& space,
                      const std::vector<std::uint64_t>& digits) {
  std::map<std::string, const LexicalEntry*> fill;
  MinimalPair pair;
  for (std::size_t i = 0; i < space.slots.size(); ++i) {
    const auto& slot = space.slots[i];
    const LexicalEntry& entry =
        class_entries(lex, slot.lexical_class)[slot.candidates[digits[i]]];
    fill[slot.name] = &entry;
    pair.slot_fill[slot.name] = entry.form;
  }
  std::vector<std::string> bad_choices, good_choices;
  for (std::size_t k = 0; k < space.choices.size(); ++k) {
    const auto d = digits[space.slots.size() + k];
    const auto& c = space.choices[k];
    bad_choices.push_back(c.bad[d / c.good.size()]);
    good_choices.push_back(c.good[d % c.good.size()]);
    pair.slot_fill[choice_key(k, false)] = bad_choices.back();
    pair.slot_fill[choice_key(k, true)] = good_choices.back();
  }
  pair.sentence_good = join(render(t.good_pattern, t, lex, fill, good_choices), " ");
  pair.sentence_bad = join(render(t.bad_pattern, t, lex, fill, bad_choices), " ");
  pair.phenomenon = t.phenomenon;
  pair.subcategory = t.subcategory;
  pair.template_id = t.id;
  return pair;
}

}  // namespace

bool PatternElement::same_as(const PatternElement& other) const {
  if (kind != other.kind) return false;
  if (kind == Kind::choice) return false;
  return text == other.text && attribute == other.attribute;
}

Pattern parse_pattern(const std::string& text) {
  Pattern out;
  int choices = 0;
  std::size_t i = 0;
  std::string pending;
  auto flush_literal = [&] {
    for (const auto& word : split_whitespace(pending)) {
      std::vector<std::string> parts;
      split_literal_word(word, parts);
      for (auto& p : parts) {
        PatternElement e;
        e.kind = PatternElement::Kind::literal;
        e.text = std::move(p);
        out.push_back(std::move(e));
      }
    }
    pending.clear();
  };
  while (i < text.size()) {
    if (text[i] == '{') {
      // "{a}{b}" and "{a}'s" separate without whitespace; treat braces as word boundaries.
      flush_literal();
      auto close = text.find('}', i);
      if (close == std::string::npos) throw TemplateError("unclosed '{' in pattern: " + text);
      std::string body = trim(std::string_view(text).substr(i + 1, close - i - 1));
      if (body.empty()) throw TemplateError("empty slot in pattern: " + text);
      PatternElement e;
      if (body.find('|') != std::string::npos) {
        e.kind = PatternElement::Kind::choice;
        std::stringstream ss(body);
        std::string opt;
        while (std::getline(ss, opt, '|')) {
          opt = trim(opt);
          if (!opt.empty()) e.options.push_back(opt);
        }
        if (e.options.empty()) throw TemplateError("choice without alternatives: " + text);
        e.choice_index = choices++;
      } else {
        e.kind = PatternElement::Kind::slot;
        auto dot = body.find('.');
        e.text = body.substr(0, dot);
        if (dot != std::string::npos) e.attribute = body.substr(dot + 1);
      }
      out.push_back(std::move(e));
      i = close + 1;
    } else {
      pending += text[i++];
    }
  }
  flush_literal();
  return out;
}

std::vector<std::string> TemplateSpec::slot_names() const {
  std::vector<std::string> names;
  for (const Pattern* p : {&good_pattern, &bad_pattern}) {
    for (const auto& e : *p) {
      if (e.kind == PatternElement::Kind::slot &&
          std::find(names.begin(), names.end(), e.text) == names.end()) {
        names.push_back(e.text);
      }
    }
  }
  return names;
}

std::size_t TemplateSpec::choice_count() const { return choices_of(good_pattern).size(); }

Lexicon Lexicon::from_json(const std::string& json_text) {
  auto j = nlohmann::json::parse(json_text);
  Lexicon lex;
  lex.provenance = j.value("provenance", "");
  for (const auto& [cls, list] : j.at("classes").items()) {
    auto& entries = lex.entries[cls];
    for (const auto& item : list) {
      LexicalEntry e;
      e.form = item.at("form").get<std::string>();
      if (item.contains("features")) {
        for (const auto& [k, v] : item["features"].items()) e.features[k] = v.get<std::string>();
      }
      entries.push_back(std::move(e));
    }
  }
  return lex;
}

Lexicon Lexicon::load(const std::string& path) { return from_json(read_file(path)); }

std::set<std::string> Lexicon::tokens() const {
  std::set<std::string> out;
  for (const auto& [cls, entries] : entries) {
    for (const auto& e : entries) {
      for (auto& w : split_whitespace(e.form)) out.insert(std::move(w));
    }
  }
  return out;
}

CapacityError::CapacityError(const std::string& template_id, std::uint64_t capacity,
                             std::uint64_t requested)
    : std::runtime_error("template " + template_id + " yields only " + std::to_string(capacity) +
                         " distinct fillings, " + std::to_string(requested) + " requested"),
      capacity_(capacity) {}

std::vector<TemplateSpec> parse_templates(std::istream& in, const Lexicon& lex) {
  std::vector<TemplateSpec> specs;
  std::map<std::string, std::string> fields;
  std::map<std::string, std::string> explicit_class;
  std::map<std::string, std::map<std::string, std::string>> requirements;
  std::size_t line_no = 0, stanza_line = 0;

  auto finish = [&] {
    if (fields.empty() && explicit_class.empty() && requirements.empty()) return;
    auto where = " (stanza at line " + std::to_string(stanza_line) + ")";
    for (const char* key : {"id", "phenomenon", "subcategory", "b", "g"}) {
      if (!fields.count(key)) throw TemplateError(std::string("missing '") + key + ":'" + where);
    }
    TemplateSpec t;
    t.id = fields["id"];
    t.phenomenon = fields["phenomenon"];
    t.subcategory = fields["subcategory"];
    t.bad_pattern = parse_pattern(fields["b"]);
    t.good_pattern = parse_pattern(fields["g"]);
    if (fields.count("antecedent")) t.antecedent = fields["antecedent"];

    std::set<std::string> good_slots, bad_slots;
    for (const auto& e : t.good_pattern) {
      if (e.kind == PatternElement::Kind::slot) good_slots.insert(e.text);
    }
    for (const auto& e : t.bad_pattern) {
      if (e.kind == PatternElement::Kind::slot) bad_slots.insert(e.text);
    }
    if (good_slots != bad_slots) {
      throw TemplateError("template " + t.id + ": good and bad patterns use different slots");
    }
    if (choices_of(t.good_pattern).size() != choices_of(t.bad_pattern).size()) {
      throw TemplateError("template " + t.id + ": good and bad patterns differ in choice count");
    }
    for (const auto& name : good_slots) {
      SlotConstraint c;
      if (explicit_class.count(name)) {
        c.lexical_class = explicit_class[name];
      } else if (lex.entries.count(name)) {
        c.lexical_class = name;
      } else {
        std::string base = name;
        while (!base.empty() && std::isdigit(static_cast<unsigned char>(base.back()))) {
          base.pop_back();
        }
        c.lexical_class = base;
      }
      if (!lex.entries.count(c.lexical_class)) {
        throw TemplateError("template " + t.id + ": slot '" + name +
                            "' names no lexical class ('" + c.lexical_class + "')");
      }
      if (requirements.count(name)) c.features = requirements[name];
      t.slot_constraints[name] = std::move(c);
    }
    for (const auto& [name, cls] : explicit_class) {
      if (!good_slots.count(name)) {
        throw TemplateError("template " + t.id + ": slot line for unused slot '" + name + "'");
      }
    }
    if (t.antecedent && !good_slots.count(*t.antecedent)) {
      throw TemplateError("template " + t.id + ": antecedent '" + *t.antecedent +
                          "' is not a slot");
    }
    for (const auto& s : specs) {
      if (s.id == t.id) throw TemplateError("duplicate template id " + t.id);
    }
    specs.push_back(std::move(t));
    fields.clear();
    explicit_class.clear();
    requirements.clear();
  };

  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    std::string body = trim(line);
    if (body.empty()) {
      finish();
      continue;
    }
    if (body[0] == '#') continue;
    if (fields.empty() && explicit_class.empty() && requirements.empty()) stanza_line = line_no;
    auto colon = body.find(':');
    if (colon == std::string::npos) {
      throw TemplateError("line " + std::to_string(line_no) + ": expected 'key: value'");
    }
    std::string key = trim(body.substr(0, colon));
    std::string value = trim(body.substr(colon + 1));
    if (key == "slot") {
      auto eq = value.find('=');
      if (eq == std::string::npos) {
        throw TemplateError("line " + std::to_string(line_no) + ": expected 'slot: NAME = CLASS'");
      }
      explicit_class[trim(value.substr(0, eq))] = trim(value.substr(eq + 1));
    } else if (key == "require") {
      auto parts = split_whitespace(value);
      if (parts.size() < 2) {
        throw TemplateError("line " + std::to_string(line_no) + ": expected 'require: NAME f=v'");
      }
      for (std::size_t k = 1; k < parts.size(); ++k) {
        auto eq = parts[k].find('=');
        if (eq == std::string::npos) {
          throw TemplateError("line " + std::to_string(line_no) + ": bad feature '" + parts[k] +
                              "'");
        }
        requirements[parts[0]][parts[k].substr(0, eq)] = parts[k].substr(eq + 1);
      }
    } else if (key == "id" || key == "phenomenon" || key == "subcategory" || key == "b" ||
               key == "g" || key == "antecedent") {
      if (fields.count(key)) {
        throw TemplateError("line " + std::to_string(line_no) + ": repeated '" + key + ":'");
      }
      fields[key] = value;
    } else {
      throw TemplateError("line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
  }
  finish();
  return specs;
}

std::vector<TemplateSpec> load_templates(const std::string& path, const Lexicon& lex) {
  std::istringstream in(read_file(path));
  return parse_templates(in, lex);
}

std::uint64_t template_capacity(const TemplateSpec& t, const Lexicon& lex, std::uint64_t limit) {
  Space space = build_space(t, lex);
  std::uint64_t choice_product = 1;
  for (const auto& c : space.choices) {
    choice_product = saturating_mul(choice_product, c.bad.size() * c.good.size(), UINT64_MAX);
  }
  if (choice_product == 0) return 0;
  // Enough slot assignments to reach the limit once multiplied by the choice product.
  const std::uint64_t slot_limit = limit / choice_product + (limit % choice_product ? 1 : 0);
  std::vector<std::uint64_t> digits(space.slots.size(), 0);
  const auto slots = count_slot_assignments(space, digits, 0, std::max<std::uint64_t>(slot_limit, 1));
  return saturating_mul(slots, choice_product, limit);
}

std::vector<MinimalPair> expand_template(const TemplateSpec& t, const Lexicon& lex, std::size_t n,
                                         std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("expand_template: n must be positive");
  const std::uint64_t capacity = template_capacity(t, lex, n);
  if (capacity < n) throw CapacityError(t.id, template_capacity(t, lex), n);

  Space space = build_space(t, lex);
  const auto radix = space.radix();
  std::uint64_t raw = 1;
  for (auto r : radix) raw = saturating_mul(raw, r, UINT64_MAX);

  auto rng = make_rng(seed, "template:" + t.id);
  std::vector<std::vector<std::uint64_t>> chosen;
  if (raw <= kEnumerateLimit) {
    std::vector<std::vector<std::uint64_t>> all;
    std::vector<std::uint64_t> digits(radix.size(), 0);
    enumerate(space, digits, 0, all);
    for (std::size_t i = 0; i < n; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, all.size() - 1);
      std::swap(all[i], all[pick(rng)]);
      chosen.push_back(all[i]);
    }
  } else {
    std::set<std::vector<std::uint64_t>> seen;
    std::vector<std::uint64_t> digits(radix.size(), 0);
    std::uint64_t attempts = 0;
    const std::uint64_t max_attempts = 1000ull * n + 1000000ull;
    while (chosen.size() < n) {
      if (++attempts > max_attempts) throw CapacityError(t.id, chosen.size(), n);
      for (std::size_t d = 0; d < radix.size(); ++d) {
        std::uniform_int_distribution<std::uint64_t> pick(0, radix[d] - 1);
        digits[d] = pick(rng);
      }
      if (!distinct_ok(space, digits, space.slots.size())) continue;
      if (seen.insert(digits).second) chosen.push_back(digits);
    }
  }

  std::vector<MinimalPair> pairs;
  pairs.reserve(n);
  for (const auto& digits : chosen) pairs.push_back(make_pair(t, lex, space, digits));
  return pairs;
}

Benchmark generate_benchmark(const std::vector<TemplateSpec>& specs, const Lexicon& lex,
                             std::size_t per_subcategory, std::uint64_t seed) {
  if (per_subcategory == 0) throw std::invalid_argument("per_subcategory must be positive");
  std::vector<std::string> order;
  std::map<std::string, std::vector<const TemplateSpec*>> groups;
  for (const auto& t : specs) {
    if (!groups.count(t.subcategory)) order.push_back(t.subcategory);
    groups[t.subcategory].push_back(&t);
  }

  auto build_group = [&](const std::string& sub) {
    const auto& members = groups.at(sub);
    std::vector<MinimalPair> out;
    const std::size_t base = per_subcategory / members.size();
    const std::size_t extra = per_subcategory % members.size();
    for (std::size_t i = 0; i < members.size(); ++i) {
      const std::size_t k = base + (i < extra ? 1 : 0);
      if (k == 0) continue;
      auto pairs = expand_template(*members[i], lex, k, derive_seed(seed, sub, i));
      out.insert(out.end(), std::make_move_iterator(pairs.begin()),
                 std::make_move_iterator(pairs.end()));
    }
    return out;
  };

  std::vector<std::future<std::vector<MinimalPair>>> jobs;
  for (const auto& sub : order) jobs.push_back(std::async(std::launch::async, build_group, sub));

  Benchmark b;
  for (std::size_t i = 0; i < order.size(); ++i) {
    auto pairs = jobs[i].get();
    b.counts.emplace_back(order[i], pairs.size());
    b.pairs.insert(b.pairs.end(), std::make_move_iterator(pairs.begin()),
                   std::make_move_iterator(pairs.end()));
  }
  return b;
}

void write_benchmark_jsonl(std::ostream& out, const std::vector<MinimalPair>& pairs) {
  for (const auto& p : pairs) {
    nlohmann::ordered_json j;
    j["sentence_good"] = p.sentence_good;
    j["sentence_bad"] = p.sentence_bad;
    j["phenomenon"] = p.phenomenon;
    j["subcategory"] = p.subcategory;
    j["template_id"] = p.template_id;
    j["slot_fill"] = p.slot_fill;
    out << j.dump() << '\n';
  }
}

std::vector<MinimalPair> read_benchmark_jsonl(std::istream& in) {
  std::vector<MinimalPair> pairs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      MinimalPair p;
      p.sentence_good = j.at("sentence_good").get<std::string>();
      p.sentence_bad = j.at("sentence_bad").get<std::string>();
      p.phenomenon = j.value("phenomenon", "");
      p.subcategory = j.value("subcategory", "");
      p.template_id = j.value("template_id", "");
      if (j.contains("slot_fill")) {
        for (const auto& [k, v] : j["slot_fill"].items()) p.slot_fill[k] = v.get<std::string>();
      }
      pairs.push_back(std::move(p));
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("benchmark line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return pairs;
}

std::string benchmark_manifest_json(const Benchmark& b, std::uint64_t seed) {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["total"] = b.pairs.size();
  nlohmann::ordered_json counts = nlohmann::ordered_json::object();
  for (const auto& [sub, n] : b.counts) counts[sub] = n;
  j["subcategories"] = counts;
  return j.dump(2);
}

FrequencyTable count_tokens(std::istream& text) {
  FrequencyTable table;
  std::string word;
  while (text >> word) ++table[word];
  return table;
}

FrequencyTable read_frequency_table(std::istream& in) {
  FrequencyTable table;
  std::string line;
  while (std::getline(in, line)) {
    auto tab = line.find('\t');
    if (tab == std::string::npos) continue;
    table[line.substr(0, tab)] += std::stoull(line.substr(tab + 1));
  }
  return table;
}

namespace {
std::vector<std::string> top_k(const FrequencyTable& t, std::size_t k) {
  std::vector<std::pair<std::string, std::uint64_t>> items(t.begin(), t.end());
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  if (items.size() > k) items.resize(k);
  std::vector<std::string> out;
  for (auto& [w, c] : items) out.push_back(std::move(w));
  std::sort(out.begin(), out.end());
  return out;
}
}  // namespace

std::vector<std::string> build_shared_vocab(const FrequencyTable& a, const FrequencyTable& b,
                                            std::size_t k) {
  if (k == 0) throw std::invalid_argument("k must be positive");
  if (a.empty() || b.empty()) throw std::invalid_argument("empty frequency table");
  auto ta = top_k(a, k);
  auto tb = top_k(b, k);
  std::vector<std::string> out;
  std::set_intersection(ta.begin(), ta.end(), tb.begin(), tb.end(), std::back_inserter(out));
  return out;
}

std::vector<std::string> sentence_tokens(const std::string& sentence) {
  return split_whitespace(sentence);
}

bool is_literal_punctuation(const std::string& token) {
  return token == "." || token == "?" || token == "!" || token == ",";
}

std::set<std::string> load_vocab(const std::string& path) {
  std::istringstream in(read_file(path));
  std::set<std::string> vocab;
  std::string line;
  while (std::getline(in, line)) {
    auto w = trim(line);
    if (!w.empty()) vocab.insert(w);
  }
  return vocab;
}

std::optional<std::string> check_lexicon_closure(const Lexicon& lex,
                                                 const std::set<std::string>& vocab) {
  for (const auto& [cls, entries] : lex.entries) {
    for (const auto& e : entries) {
      for (const auto& w : split_whitespace(e.form)) {
        if (!vocab.count(w)) return "class " + cls + ": '" + w + "' not in shared vocabulary";
      }
    }
  }
  return std::nullopt;
}

namespace {

// Longest common subsequence over pattern elements; returns match flags.
std::pair<std::vector<bool>, std::vector<bool>> stable_elements(const Pattern& a,
                                                                const Pattern& b) {
  const std::size_t n = a.size(), m = b.size();
  std::vector<std::vector<int>> dp(n + 1, std::vector<int>(m + 1, 0));
  for (std::size_t i = n; i-- > 0;) {
    for (std::size_t j = m; j-- > 0;) {
      dp[i][j] = a[i].same_as(b[j]) ? dp[i + 1][j + 1] + 1 : std::max(dp[i + 1][j], dp[i][j + 1]);
    }
  }
  std::vector<bool> sa(n, false), sb(m, false);
  std::size_t i = 0, j = 0;
  while (i < n && j < m) {
    if (a[i].same_as(b[j])) {
      sa[i++] = true;
      sb[j++] = true;
    } else if (dp[i + 1][j] >= dp[i][j + 1]) {
      ++i;
    } else {
      ++j;
    }
  }
  return {sa, sb};
}

std::optional<std::string> reflexive_gender(const std::string& token) {
  if (token == "himself") return "m";
  if (token == "herself") return "f";
  return std::nullopt;
}

}  // namespace

std::optional<std::string> check_pair(const MinimalPair& pair, const TemplateSpec& t,
                                      const Lexicon& lex, const std::set<std::string>& vocab) {
  auto final_punct = [](const std::string& s) {
    return !s.empty() && std::string_view(".?!").find(s.back()) != std::string_view::npos;
  };
  if (pair.sentence_good.empty() || pair.sentence_bad.empty()) return "empty sentence";
  if (pair.sentence_good == pair.sentence_bad) return "good and bad sentences are identical";
  if (!final_punct(pair.sentence_good) || !final_punct(pair.sentence_bad)) {
    return "missing sentence-final punctuation";
  }
  for (const auto* s : {&pair.sentence_good, &pair.sentence_bad}) {
    for (const auto& tok : sentence_tokens(*s)) {
      if (!vocab.count(tok) && !is_literal_punctuation(tok)) {
        return "closure: '" + tok + "' not in shared vocabulary";
      }
    }
  }

  // Re-derive the filling and re-render each pattern element by element.
  std::map<std::string, const LexicalEntry*> fill;
  for (const auto& [name, constraint] : t.slot_constraints) {
    auto it = pair.slot_fill.find(name);
    if (it == pair.slot_fill.end()) return "minimality: slot_fill lacks '" + name + "'";
    const LexicalEntry* found = nullptr;
    for (const auto& e : class_entries(lex, constraint.lexical_class)) {
      if (e.form == it->second) found = &e;
    }
    if (!found) return "slot '" + name + "' filled with a form outside its class";
    fill[name] = found;
  }
  std::vector<std::string> good_choices, bad_choices;
  for (std::size_t k = 0; k < t.choice_count(); ++k) {
    auto g = pair.slot_fill.find(choice_key(k, true));
    auto b = pair.slot_fill.find(choice_key(k, false));
    if (g == pair.slot_fill.end() || b == pair.slot_fill.end()) return "missing choice fill";
    good_choices.push_back(g->second);
    bad_choices.push_back(b->second);
  }

  auto per_element = [&](const Pattern& p, const std::vector<std::string>& choices) {
    std::vector<std::vector<std::string>> spans;
    for (const auto& e : p) spans.push_back(render({e}, t, lex, fill, choices));
    return spans;
  };
  const auto good_spans = per_element(t.good_pattern, good_choices);
  const auto bad_spans = per_element(t.bad_pattern, bad_choices);
  auto flatten = [](const std::vector<std::vector<std::string>>& spans) {
    std::vector<std::string> out;
    for (const auto& s : spans) out.insert(out.end(), s.begin(), s.end());
    return out;
  };
  if (join(flatten(good_spans), " ") != pair.sentence_good ||
      join(flatten(bad_spans), " ") != pair.sentence_bad) {
    return "minimality: sentences do not match the template rendering";
  }
  const auto [stable_good, stable_bad] = stable_elements(t.good_pattern, t.bad_pattern);
  std::vector<std::string> kept_good, kept_bad, diff_good, diff_bad;
  for (std::size_t i = 0; i < good_spans.size(); ++i) {
    auto& dst = stable_good[i] ? kept_good : diff_good;
    dst.insert(dst.end(), good_spans[i].begin(), good_spans[i].end());
  }
  for (std::size_t i = 0; i < bad_spans.size(); ++i) {
    auto& dst = stable_bad[i] ? kept_bad : diff_bad;
    dst.insert(dst.end(), bad_spans[i].begin(), bad_spans[i].end());
  }
  if (kept_good != kept_bad) return "minimality: shared elements render differently";

  if (t.antecedent) {
    const LexicalEntry* ante = fill.at(*t.antecedent);
    auto g = ante->features.find("gender");
    if (g == ante->features.end()) return "agreement: antecedent has no gender feature";
    std::optional<std::string> good_refl, bad_refl;
    for (const auto& tok : sentence_tokens(pair.sentence_good)) {
      if (auto r = reflexive_gender(tok)) good_refl = r;
    }
    for (const auto& tok : diff_bad) {
      if (auto r = reflexive_gender(tok)) bad_refl = r;
    }
    if (!good_refl) return "agreement: good sentence has no gendered reflexive";
    if (*good_refl != g->second) return "agreement: good reflexive mismatches antecedent";
    if (bad_refl && *bad_refl == g->second) return "agreement: bad reflexive matches antecedent";
  }
  return std::nullopt;
}

BenchmarkCheck check_benchmark(const std::vector<MinimalPair>& pairs,
                               const std::vector<TemplateSpec>& specs, const Lexicon& lex,
                               const std::set<std::string>& vocab) {
  BenchmarkCheck result;
  std::map<std::string, const TemplateSpec*> by_id;
  for (const auto& t : specs) by_id[t.id] = &t;
  std::map<std::string, std::set<std::map<std::string, std::string>>> fills;
  auto note = [&](const std::string& m) {
    if (result.messages.size() < 20) result.messages.push_back(m);
  };
  for (const auto& p : pairs) {
    ++result.pairs;
    auto it = by_id.find(p.template_id);
    if (it == by_id.end()) {
      ++result.minimality_failures;
      note("unknown template " + p.template_id);
      continue;
    }
    if (it->second->antecedent) ++result.agreement_checked;
    if (!fills[p.subcategory].insert(p.slot_fill).second) {
      ++result.distinctness_failures;
      note("duplicate slot_fill in " + p.subcategory + ": " + p.sentence_good);
    }
    if (auto problem = check_pair(p, *it->second, lex, vocab)) {
      if (problem->rfind("closure", 0) == 0) {
        ++result.closure_failures;
      } else if (problem->rfind("agreement", 0) == 0) {
        ++result.agreement_failures;
      } else {
        ++result.minimality_failures;
      }
      note(p.template_id + ": " + *problem + " [" + p.sentence_good + "]");
    }
  }
  return result;
}

}  // namespace posh::templates
