#include "posh/synth.hpp"

#include <stdexcept>

#include "posh/util.hpp"

namespace posh::synth {

namespace {

using corpus::SentenceRecord;
using corpus::Token;

const std::vector<std::pair<Kind, std::string>>& kind_names() {
  static const std::vector<std::pair<Kind, std::string>> names{
      {Kind::transitive, "transitive"},
      {Kind::modal, "modal"},
      {Kind::subject_relative, "subject_relative"},
      {Kind::object_relative, "object_relative"},
      {Kind::yes_no_question, "yes_no_question"},
      {Kind::wh_question, "wh_question"},
      {Kind::embedded, "embedded"},
      {Kind::reflexive_local, "reflexive_local"},
      {Kind::wanna_question, "wanna_question"},
      {Kind::qf_evidence, "qf_evidence"},
      {Kind::binding_evidence, "binding_evidence"},
  };
  return names;
}

// Accumulates tokens; heads are filled in once the governing word exists.
struct Builder {
  std::vector<Token> toks;

  int add(const std::string& form, const std::string& upos, const std::string& deprel,
          int head = 0) {
    Token t;
    t.index = static_cast<int>(toks.size()) + 1;
    t.form = form;
    t.upos = upos;
    t.deprel = deprel;
    t.head = head;
    toks.push_back(t);
    return t.index;
  }
  void attach(int dep, int head) { toks[static_cast<std::size_t>(dep - 1)].head = head; }
};

struct Np {
  int head = 0;
  std::vector<int> pending;  // tokens waiting for the head word's governor
  std::string gender;
};

}  // namespace

std::string to_string(Kind k) {
  for (const auto& [kind, name] : kind_names())
    if (kind == k) return name;
  throw std::invalid_argument("unknown sentence kind");
}

Kind kind_from_string(const std::string& s) {
  for (const auto& [kind, name] : kind_names())
    if (name == s) return kind;
  throw std::invalid_argument("unknown sentence kind: " + s);
}

const std::vector<Kind>& all_kinds() {
  static const std::vector<Kind> kinds = [] {
    std::vector<Kind> out;
    for (const auto& kn : kind_names()) out.push_back(kn.first);
    return out;
  }();
  return kinds;
}

bool is_evidence_kind(Kind k) { return k == Kind::qf_evidence || k == Kind::binding_evidence; }

Mix Mix::natural() {
  Mix m;
  m.weights = {{Kind::transitive, 0.18},      {Kind::modal, 0.16},
               {Kind::subject_relative, 0.1}, {Kind::object_relative, 0.08},
               {Kind::yes_no_question, 0.12}, {Kind::wh_question, 0.1},
               {Kind::embedded, 0.12},        {Kind::reflexive_local, 0.06},
               {Kind::wanna_question, 0.04},  {Kind::qf_evidence, 0.02},
               {Kind::binding_evidence, 0.02}};
  return m;
}

Mix Mix::distractors() {
  Mix m;
  for (Kind k : all_kinds())
    if (!is_evidence_kind(k)) m.weights[k] = 1.0;
  return m;
}

Mix Mix::only(Kind k) {
  Mix m;
  m.weights[k] = 1.0;
  return m;
}

Grammar::Grammar(templates::Lexicon lex) : lex_(std::move(lex)) {
  for (const char* c : {"det", "adj_person", "person", "nn_thing", "name", "noun_m", "noun_f",
                        "name_m", "name_f", "aux_modal", "aux_sg", "vb_state", "vb_trans_animate",
                        "vb_trans_animate_base", "vb_trans_thing", "verb_thing_base",
                        "verb_intrans"})
    (void)cls(c);
}

Grammar Grammar::load(const std::string& lexicon_path) {
  return Grammar(templates::Lexicon::load(lexicon_path));
}

const std::vector<templates::LexicalEntry>& Grammar::cls(const std::string& name) const {
  auto it = lex_.entries.find(name);
  if (it == lex_.entries.end() || it->second.empty())
    throw std::invalid_argument("lexicon lacks class " + name);
  return it->second;
}

SentenceRecord Grammar::sentence(Kind kind, std::mt19937_64& rng, const std::string& id) const {
  auto pick_entry = [&](const std::string& c) -> const templates::LexicalEntry& {
    const auto& v = cls(c);
    return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
  };
  auto pick = [&](const std::string& c) { return pick_entry(c).form; };
  auto coin = [&](double p) { return std::bernoulli_distribution(p)(rng); };

  Builder b;
  auto finish_np = [&](Np& np, int governor, const std::string& deprel) {
    b.attach(np.head, governor);
    b.toks[static_cast<std::size_t>(np.head - 1)].deprel = deprel;
  };
  // Determiner noun phrase headed by a common noun from class `c`.
  auto det_np = [&](const std::string& c, bool allow_adj) {
    Np np;
    int d = b.add(pick("det"), "DET", "det");
    int a = 0;
    if (allow_adj && coin(0.25)) a = b.add(pick("adj_person"), "ADJ", "amod");
    const auto& e = pick_entry(c);
    np.head = b.add(e.form, "NOUN", "dep");
    auto g = e.features.find("gender");
    if (g != e.features.end()) np.gender = g->second;
    b.attach(d, np.head);
    if (a) b.attach(a, np.head);
    return np;
  };
  auto animate_np = [&](bool allow_name) {
    if (allow_name && coin(0.3)) {
      Np np;
      np.head = b.add(pick("name"), "PROPN", "dep");
      return np;
    }
    return det_np("person", true);
  };
  auto gendered_np = [&]() {
    bool male = coin(0.5);
    if (coin(0.3)) {
      Np np;
      const auto& e = pick_entry(male ? "name_m" : "name_f");
      np.head = b.add(e.form, "PROPN", "dep");
      np.gender = male ? "m" : "f";
      return np;
    }
    Np np = det_np(male ? "noun_m" : "noun_f", false);
    np.gender = male ? "m" : "f";
    return np;
  };
  auto thing_np = [&]() { return det_np("nn_thing", false); };
  auto reflexive = [&](const std::string& gender) {
    return b.add(gender == "f" ? "herself" : "himself", "PRON", "obj");
  };
  // Base-form verb phrase; returns the verb.
  auto base_vp = [&]() {
    if (coin(0.5)) return b.add(pick("verb_intrans"), "VERB", "dep");
    int v = b.add(pick("verb_thing_base"), "VERB", "dep");
    Np o = thing_np();
    finish_np(o, v, "obj");
    return v;
  };
  // "who ..." relative clause on noun `n`: subject or object gap.
  auto relative = [&](int n, bool subject_gap) {
    int who = b.add("who", "PRON", "dep");
    int v;
    if (subject_gap) {
      int aux = b.add(pick("aux_modal"), "AUX", "aux");
      v = base_vp();
      b.attach(aux, v);
      b.toks[static_cast<std::size_t>(who - 1)].deprel = "nsubj";
    } else {
      Np s = animate_np(true);
      v = b.add(pick("vb_trans_animate"), "VERB", "dep");
      finish_np(s, v, "nsubj");
      b.toks[static_cast<std::size_t>(who - 1)].deprel = "obj";
    }
    b.attach(who, v);
    b.attach(v, n);
    b.toks[static_cast<std::size_t>(v - 1)].deprel = "acl:relcl";
  };
  auto set_root = [&](int v) {
    b.attach(v, 0);
    b.toks[static_cast<std::size_t>(v - 1)].deprel = "root";
  };
  auto punct = [&](const std::string& p, int root) { b.add(p, "PUNCT", "punct", root); };

  switch (kind) {
    case Kind::transitive: {
      Np s = animate_np(true);
      int v;
      if (coin(0.5)) {
        v = b.add(pick("vb_trans_animate"), "VERB", "root");
        Np o = animate_np(true);
        finish_np(o, v, "obj");
      } else {
        v = b.add(pick("vb_trans_thing"), "VERB", "root");
        Np o = thing_np();
        finish_np(o, v, "obj");
      }
      finish_np(s, v, "nsubj");
      set_root(v);
      punct(".", v);
      break;
    }
    case Kind::modal: {
      Np s = animate_np(true);
      int aux = b.add(pick("aux_modal"), "AUX", "aux");
      int v = base_vp();
      b.attach(aux, v);
      finish_np(s, v, "nsubj");
      set_root(v);
      punct(".", v);
      break;
    }
    case Kind::subject_relative:
    case Kind::object_relative: {
      // A name would put "who" among the first two words.
      Np s = det_np("person", true);
      relative(s.head, kind == Kind::subject_relative);
      int aux = b.add(pick("aux_modal"), "AUX", "aux");
      int v = base_vp();
      b.attach(aux, v);
      finish_np(s, v, "nsubj");
      set_root(v);
      punct(".", v);
      break;
    }
    case Kind::yes_no_question: {
      int aux = b.add(pick("aux_modal"), "AUX", "aux");
      Np s = animate_np(true);
      int v = base_vp();
      b.attach(aux, v);
      finish_np(s, v, "nsubj");
      set_root(v);
      punct("?", v);
      break;
    }
    case Kind::wh_question: {
      bool what = coin(0.5);
      int wh = b.add(what ? "what" : "who", "PRON", "obj");
      int aux = b.add(what ? pick("aux_modal") : pick("aux_sg"), "AUX", "aux");
      Np s = animate_np(true);
      int v = b.add(what ? pick("verb_thing_base") : pick("vb_trans_animate_base"), "VERB", "root");
      b.attach(wh, v);
      b.attach(aux, v);
      finish_np(s, v, "nsubj");
      set_root(v);
      punct("?", v);
      break;
    }
    case Kind::embedded:
    case Kind::binding_evidence: {
      Np s = animate_np(true);
      int v1 = b.add(pick("vb_state"), "VERB", "root");
      int mark = b.add("that", "SCONJ", "mark");
      int v2;
      if (kind == Kind::binding_evidence) {
        Np s2 = gendered_np();
        v2 = b.add(pick("vb_trans_animate"), "VERB", "ccomp");
        finish_np(s2, v2, "nsubj");
        b.attach(reflexive(s2.gender), v2);
      } else {
        Np s2 = animate_np(true);
        bool animate_obj = coin(0.5);
        v2 = b.add(pick(animate_obj ? "vb_trans_animate" : "vb_trans_thing"), "VERB", "ccomp");
        finish_np(s2, v2, "nsubj");
        Np o = animate_obj ? animate_np(true) : thing_np();
        finish_np(o, v2, "obj");
      }
      b.attach(mark, v2);
      b.attach(v2, v1);
      finish_np(s, v1, "nsubj");
      set_root(v1);
      punct(".", v1);
      break;
    }
    case Kind::reflexive_local: {
      Np s = gendered_np();
      int v = b.add(pick("vb_trans_animate"), "VERB", "root");
      b.attach(reflexive(s.gender), v);
      finish_np(s, v, "nsubj");
      set_root(v);
      punct(".", v);
      break;
    }
    case Kind::wanna_question: {
      int aux = b.add(pick("aux_sg"), "AUX", "aux");
      Np s = animate_np(true);
      int w = b.add("wanna", "VERB", "root");
      int v = base_vp();
      b.attach(aux, w);
      b.attach(v, w);
      b.toks[static_cast<std::size_t>(v - 1)].deprel = "xcomp";
      finish_np(s, w, "nsubj");
      set_root(w);
      punct("?", w);
      break;
    }
    case Kind::qf_evidence: {
      int aux = b.add(pick("aux_modal"), "AUX", "aux");
      Np s = det_np("person", true);
      relative(s.head, coin(0.6));
      int v = base_vp();
      b.attach(aux, v);
      finish_np(s, v, "nsubj");
      set_root(v);
      punct("?", v);
      break;
    }
  }

  SentenceRecord r;
  r.id = id;
  r.source = "synth:" + to_string(kind);
  r.tokens = std::move(b.toks);
  std::vector<std::string> forms;
  for (const auto& t : r.tokens) forms.push_back(t.form);
  r.text = join(forms, " ");
  return r;
}

namespace {

std::discrete_distribution<std::size_t> kind_distribution(const Mix& mix,
                                                          std::vector<Kind>& kinds) {
  std::vector<double> w;
  for (const auto& [k, weight] : mix.weights) {
    if (weight < 0) throw std::invalid_argument("negative mix weight");
    if (weight > 0) {
      kinds.push_back(k);
      w.push_back(weight);
    }
  }
  if (kinds.empty()) throw std::invalid_argument("mix has no positive weight");
  return std::discrete_distribution<std::size_t>(w.begin(), w.end());
}

}  // namespace

std::vector<corpus::SentenceRecord> generate(const Grammar& g, std::size_t n, const Mix& mix,
                                             std::uint64_t seed, const std::string& id_prefix) {
  std::vector<Kind> kinds;
  auto dist = kind_distribution(mix, kinds);
  std::vector<corpus::SentenceRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto rng = make_rng(seed, "synth", i);
    Kind k = kinds[dist(rng)];
    out.push_back(g.sentence(k, rng, id_prefix + "-" + std::to_string(i)));
  }
  return out;
}

std::vector<corpus::SentenceRecord> generate_words(const Grammar& g, std::size_t words,
                                                   const Mix& mix, std::uint64_t seed,
                                                   const std::string& id_prefix) {
  std::vector<Kind> kinds;
  auto dist = kind_distribution(mix, kinds);
  std::vector<corpus::SentenceRecord> out;
  std::size_t total = 0;
  for (std::size_t i = 0; total < words; ++i) {
    auto rng = make_rng(seed, "synth", i);
    Kind k = kinds[dist(rng)];
    out.push_back(g.sentence(k, rng, id_prefix + "-" + std::to_string(i)));
    total += out.back().tokens.size();
  }
  return out;
}

}  // namespace posh::synth
