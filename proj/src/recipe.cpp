#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "posh/cli.hpp"
#include "posh/trainer.hpp"
#include "posh/util.hpp"

namespace posh::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

const std::vector<std::string>& stage_kinds() {
  static const std::vector<std::string> kinds{"synth", "filter", "inject", "sample", "bench",
                                              "dyck",  "tok",    "train",  "eval",   "compare"};
  return kinds;
}

namespace {

bool looks_like_path(const std::string& s) {
  return s.find('/') != std::string::npos || s.find('.') != std::string::npos;
}

// Output a bare "@stage" reference points to; empty means the stage directory.
std::string primary_output(const std::string& kind) {
  static const std::map<std::string, std::string> m{
      {"synth", "corpus.conllu"}, {"filter", "kept.conllu"}, {"inject", "injected.conllu"},
      {"sample", "sample.conllu"}, {"bench", "bench.jsonl"}, {"dyck", "dyck.txt"},
      {"eval", "report.json"},     {"compare", "compare.json"}};
  auto it = m.find(kind);
  return it == m.end() ? "" : it->second;
}

void collect_refs(const json& j, std::set<std::string>& out) {
  if (j.is_string()) {
    const auto& s = j.get_ref<const std::string&>();
    if (!s.empty() && s[0] == '@') out.insert(s.substr(1, s.find('/') - 1));
  } else if (j.is_structured()) {
    for (const auto& v : j) collect_refs(v, out);
  }
}

struct Context {
  const Recipe& recipe;
  std::map<std::string, const Stage*> stages;
  std::map<std::string, std::string> hashes;
  fs::path stage_dir(const std::string& name) const { return recipe.output_dir / name; }
};

// Replaces "@stage[/sub]" by output paths and relative paths by recipe-relative ones.
json resolve(const json& j, const Context& ctx) {
  if (j.is_string()) {
    const auto& s = j.get_ref<const std::string&>();
    if (!s.empty() && s[0] == '@') {
      const auto slash = s.find('/');
      const auto name = s.substr(1, slash == std::string::npos ? std::string::npos : slash - 1);
      const auto* st = ctx.stages.at(name);
      fs::path p = ctx.stage_dir(name);
      if (slash != std::string::npos) p /= s.substr(slash + 1);
      else if (auto prim = primary_output(st->kind); !prim.empty()) p /= prim;
      return p.lexically_normal().string();
    }
    if (!s.empty() && fs::path(s).is_relative() && looks_like_path(s)) {
      auto p = (ctx.recipe.base_dir / s).lexically_normal();
      if (fs::exists(p)) return p.string();
    }
    return s;
  }
  if (j.is_array()) {
    json out = json::array();
    for (const auto& v : j) out.push_back(resolve(v, ctx));
    return out;
  }
  if (j.is_object()) {
    json out = json::object();
    for (auto it = j.begin(); it != j.end(); ++it) out[it.key()] = resolve(it.value(), ctx);
    return out;
  }
  return j;
}

// Contents of every external input file named in the config.
void hash_inputs(const json& raw, const Context& ctx, std::string& acc) {
  if (raw.is_string()) {
    const auto& s = raw.get_ref<const std::string&>();
    if (s.empty() || s[0] == '@') return;
    fs::path p = fs::path(s).is_absolute() ? fs::path(s) : ctx.recipe.base_dir / s;
    std::error_code ec;
    if (looks_like_path(s) && fs::is_regular_file(p, ec))
      acc += "file:" + s + ":" + sha256_hex(read_file(p.string())) + "\n";
  } else if (raw.is_structured()) {
    for (const auto& v : raw) hash_inputs(v, ctx, acc);
  }
}

std::string stage_hash(const Stage& st, const json& raw, const Context& ctx) {
  std::string acc = tool_version() + "\n" + st.kind + "\n" + raw.dump() + "\n";
  if (st.kind == "train" || st.kind == "eval") {
    acc += "seeds:";
    for (auto s : ctx.recipe.seeds) acc += std::to_string(s) + ",";
    acc += "\n";
  }
  hash_inputs(raw, ctx, acc);
  for (const auto& d : st.deps) acc += "dep:" + d + ":" + ctx.hashes.at(d) + "\n";
  return sha256_hex(acc);
}

std::string str(const json& c, const char* key, const std::string& def = "") {
  return c.contains(key) ? c.at(key).get<std::string>() : def;
}

std::vector<std::string> str_list(const json& c, const char* key) {
  if (!c.contains(key)) return {};
  if (c.at(key).is_string()) return {c.at(key).get<std::string>()};
  return c.at(key).get<std::vector<std::string>>();
}

void require(const json& c, std::initializer_list<const char*> keys, const std::string& kind) {
  for (auto k : keys)
    if (!c.contains(k)) throw std::invalid_argument(kind + " stage: missing config key '" + k + "'");
}

// Runs one stage into `dir`; returns the files it produced.
std::vector<std::string> execute(const Stage& st, const json& c, const fs::path& dir,
                                 const Context& ctx, std::ostream& log) {
  auto out = [&](const std::string& f) { return (dir / f).string(); };
  const auto& k = st.kind;
  if (k == "synth") {
    require(c, {"lexicon"}, k);
    SynthArgs a;
    a.lexicon = str(c, "lexicon");
    a.mix = str(c, "mix", "natural");
    a.n = c.value("n", std::size_t{0});
    a.words = c.value("words", std::size_t{0});
    a.seed = c.value("seed", std::uint64_t{0});
    a.out = out("corpus.conllu");
    log << "  " << cmd_synth(a) << " sentences\n";
    return {a.out};
  }
  if (k == "filter") {
    require(c, {"in"}, k);
    FilterArgs a;
    a.in = str(c, "in");
    if (c.contains("phenomena")) a.phenomena = str_list(c, "phenomena");
    a.rules = str(c, "rules");
    a.out_kept = out("kept.conllu");
    a.out_removed = out("removed.conllu");
    a.stats = out("stats.json");
    auto s = cmd_filter(a);
    log << "  " << corpus::stats_to_json(s) << "\n";
    return {a.out_kept, a.out_removed, a.stats};
  }
  if (k == "inject") {
    require(c, {"in", "pools"}, k);
    InjectArgs a;
    a.in = str(c, "in");
    a.pools = str_list(c, "pools");
    if (c.contains("rates")) a.rates = c.at("rates").get<std::map<std::string, double>>();
    a.seed = c.value("seed", std::uint64_t{0});
    a.rules = str(c, "rules");
    a.out = out("injected.conllu");
    a.replacements = out("replacements.json");
    log << "  " << cmd_inject(a) << " replacements\n";
    return {a.out, a.replacements};
  }
  if (k == "sample") {
    require(c, {"in"}, k);
    SampleArgs a;
    a.in = str(c, "in");
    a.trigger = str(c, "trigger", "qf");
    a.n = c.value("n", std::size_t{100});
    a.seed = c.value("seed", std::uint64_t{0});
    a.out = out("sample.conllu");
    auto r = cmd_sample(a);
    log << "  " << r.sample.size() << " of " << r.population << "\n";
    return {a.out};
  }
  if (k == "bench") {
    require(c, {"templates", "lexicon", "vocab"}, k);
    BenchArgs a;
    a.templates = str(c, "templates");
    a.lexicon = str(c, "lexicon");
    a.vocab = str(c, "vocab");
    a.n = c.value("n", std::size_t{500});
    a.seed = c.value("seed", std::uint64_t{0});
    a.out = out("bench.jsonl");
    a.manifest = out("manifest.json");
    cmd_bench_generate(a);
    auto check = cmd_bench_check(a.out, a);
    write_file(out("check.json"), check_to_json(check) + "\n");
    if (!check.ok()) throw std::runtime_error("benchmark checks failed; see check.json");
    log << "  " << check.pairs << " pairs\n";
    return {a.out, a.manifest, out("check.json")};
  }
  if (k == "dyck") {
    DyckArgs a;
    a.config.k = c.value("k", a.config.k);
    a.config.max_depth = c.value("max_depth", a.config.max_depth);
    a.config.min_length = c.value("min_length", a.config.min_length);
    a.config.max_length = c.value("max_length", a.config.max_length);
    a.config.open_prob = c.value("open_prob", a.config.open_prob);
    a.n = c.value("n", a.n);
    a.seed = c.value("seed", std::uint64_t{0});
    a.out = out("dyck.txt");
    cmd_dyck(a);
    return {a.out};
  }
  if (k == "tok") {
    require(c, {"corpora", "vocab_size"}, k);
    TokTrainArgs a;
    a.corpora = str_list(c, "corpora");
    a.vocab_size = c.at("vocab_size").get<std::size_t>();
    a.dyck_k = c.value("dyck_k", 0);
    a.out_vocab = out("vocab.json");
    a.out_merges = out("merges.txt");
    log << "  vocabulary " << cmd_tok_train(a) << "\n";
    return {a.out_vocab, a.out_merges};
  }
  if (k == "train") {
    require(c, {"data"}, k);
    if (ctx.recipe.seeds.empty()) throw std::invalid_argument("train stage: recipe has no seeds");
    std::vector<std::string> files;
    for (auto seed : ctx.recipe.seeds) {
      json job = c;
      job["train"] = c.value("train", json::object());
      job["train"]["seed"] = seed;
      const auto run_dir = dir / ("seed-" + std::to_string(seed));
      job["data"]["output_dir"] = run_dir.string();
      auto tj = trainer::TrainJob::from_json(job.dump(), ctx.recipe.base_dir.string());
      auto m = trainer::run_job(tj);
      log << "  seed " << seed << ": " << m.stopping_reason << ", best dev " << m.best_dev_loss
          << " at step " << m.best_step << "\n";
      for (const char* f : {"best.ckpt", "final.ckpt", "manifest.json"})
        files.push_back((run_dir / f).string());
    }
    return files;
  }
  if (k == "eval") {
    require(c, {"bench"}, k);
    EvalArgs a;
    a.bench = str(c, "bench");
    a.title = str(c, "title", st.name);
    a.score.normalization = eval::normalization_from_string(str(c, "normalization", "per_token"));
    a.score.batch_size = c.value("batch_size", 16);
    a.score.workers = c.value("workers", 1);
    a.random_init = c.value("random_init", false);
    a.out_dir = dir.string();
    if (a.random_init) {
      require(c, {"vocab", "merges"}, k);
      a.vocab = str(c, "vocab");
      a.merges = str(c, "merges");
      const auto m = c.value("model", json::object());
      a.control_config = model::ModelConfig::preset(m.value("preset", std::string("mini")));
      a.control_config.hidden_size = m.value("hidden_size", a.control_config.hidden_size);
      a.control_config.n_heads = m.value("n_heads", a.control_config.n_heads);
      a.control_config.n_layers = m.value("n_layers", a.control_config.n_layers);
      a.control_config.ffn_dim = m.value("ffn_dim", a.control_config.ffn_dim);
      a.control_config.context_len = m.value("context_len", a.control_config.context_len);
      a.control_seeds = ctx.recipe.seeds;
    } else {
      require(c, {"models"}, k);
      for (const auto& p : str_list(c, "models"))
        for (const auto& e : expand_seed_paths(p, ctx.recipe.seeds)) a.models.push_back(e);
    }
    auto r = cmd_eval(a);
    log << "  overall " << r.report.results.front().mean << "\n";
    return {out("report.json"), out("report.txt"), out("items.csv")};
  }
  if (k == "compare") {
    require(c, {"reports"}, k);
    std::vector<std::string> labels, paths;
    for (const auto& item : c.at("reports")) {
      labels.push_back(item.at("label").get<std::string>());
      paths.push_back(item.at("report").get<std::string>());
    }
    write_file(out("compare.json"), compare_reports(paths, labels, "json"));
    write_file(out("compare.txt"), compare_reports(paths, labels, "text"));
    return {out("compare.json"), out("compare.txt")};
  }
  throw std::invalid_argument("unknown stage kind " + k);
}

std::string now_iso() {
  auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

bool outputs_exist(const json& meta) {
  for (const auto& f : meta.at("outputs"))
    if (!fs::exists(f.get<std::string>())) return false;
  return true;
}

}  // namespace

Recipe Recipe::from_json(const std::string& text, const fs::path& base_dir) {
  auto j = json::parse(text);
  Recipe r;
  r.base_dir = fs::absolute(base_dir).lexically_normal();
  r.name = j.value("name", std::string("recipe"));
  const fs::path out = j.value("output_dir", std::string("out/") + r.name);
  if (out.is_absolute()) {
    r.output_dir = out;
  } else if (const char* root = std::getenv("POSH_OUTPUT_ROOT"); root && *root) {
    r.output_dir = fs::path(root) / out;
  } else {
    r.output_dir = r.base_dir / out;
  }
  r.output_dir = fs::absolute(r.output_dir).lexically_normal();
  if (j.contains("seeds")) r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  std::set<std::string> seen;
  const auto& kinds = stage_kinds();
  for (const auto& s : j.value("stage", json::array())) {
    Stage st;
    if (!s.contains("name") || !s.contains("kind"))
      throw std::invalid_argument("recipe: every stage needs a name and a kind");
    st.name = s.at("name").get<std::string>();
    st.kind = s.at("kind").get<std::string>();
    if (st.name.empty() || st.name.find('/') != std::string::npos || st.name[0] == '.')
      throw std::invalid_argument("recipe: invalid stage name '" + st.name + "'");
    if (std::find(kinds.begin(), kinds.end(), st.kind) == kinds.end())
      throw std::invalid_argument("recipe: stage '" + st.name + "' has unknown kind '" + st.kind + "'");
    if (!seen.insert(st.name).second)
      throw std::invalid_argument("recipe: duplicate stage name '" + st.name + "'");
    const auto cfg = s.value("config", json::object());
    if (!cfg.is_object()) throw std::invalid_argument("recipe: stage '" + st.name + "' config must be a table");
    st.config_json = cfg.dump();
    std::set<std::string> refs;
    collect_refs(cfg, refs);
    for (const auto& d : refs) {
      if (!seen.count(d) || d == st.name)
        throw std::invalid_argument("recipe: stage '" + st.name + "' references '@" + d +
                                    "', which is not an earlier stage");
      st.deps.push_back(d);
    }
    r.stages.push_back(std::move(st));
  }
  return r;
}

Recipe Recipe::load(const std::string& path) {
  return from_json(trainer::read_config_json(path), fs::absolute(path).parent_path());
}

RecipeResult run_recipe(const Recipe& r, bool dry_run, std::ostream& log) {
  RecipeResult res;
  Context ctx{r, {}, {}};
  for (const auto& st : r.stages) ctx.stages[st.name] = &st;
  ordered_json prov;
  prov["recipe"] = r.name;
  prov["tool_version"] = tool_version();
  prov["seeds"] = r.seeds;
  prov["started"] = now_iso();
  prov["stages"] = ordered_json::array();
  log << (dry_run ? "plan for " : "running ") << r.name << " -> " << r.output_dir.string() << "\n";
  for (const auto& st : r.stages) {
    StageOutcome o{st.name, st.kind, "", false, {}};
    try {
      const auto raw = json::parse(st.config_json);
      o.hash = stage_hash(st, raw, ctx);
      ctx.hashes[st.name] = o.hash;
      const auto dir = ctx.stage_dir(st.name);
      const auto meta_path = dir / ".stage.json";
      if (fs::exists(meta_path)) {
        auto meta = json::parse(read_file(meta_path.string()));
        if (meta.value("hash", std::string()) == o.hash && outputs_exist(meta)) {
          o.cached = true;
          o.outputs = meta.at("outputs").get<std::vector<std::string>>();
        }
      }
      log << "[" << st.name << "] " << st.kind << " " << o.hash.substr(0, 12) << " "
          << (o.cached ? "cached" : dry_run ? "would run" : "running") << std::endl;
      if (!o.cached && !dry_run) {
        fs::remove_all(dir);
        fs::create_directories(dir);
        const auto t0 = std::chrono::steady_clock::now();
        o.outputs = execute(st, resolve(raw, ctx), dir, ctx, log);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        ordered_json meta;
        meta["name"] = st.name;
        meta["kind"] = st.kind;
        meta["hash"] = o.hash;
        meta["config"] = raw;
        meta["deps"] = st.deps;
        meta["outputs"] = o.outputs;
        meta["seconds"] = secs;
        meta["finished"] = now_iso();
        write_file(meta_path.string(), meta.dump(2) + "\n");
        log << "  done in " << secs << " s" << std::endl;
      }
    } catch (const std::exception& e) {
      res.status = 1;
      res.failed_stage = st.name;
      res.message = e.what();
      log << "stage '" << st.name << "' failed: " << e.what() << "\n";
      res.stages.push_back(o);
      break;
    }
    prov["stages"].push_back({{"name", o.name},
                              {"kind", o.kind},
                              {"hash", o.hash},
                              {"cached", o.cached},
                              {"outputs", o.outputs}});
    res.stages.push_back(std::move(o));
  }
  if (!dry_run) {
    prov["finished"] = now_iso();
    prov["status"] = res.status == 0 ? "ok" : "failed";
    if (res.status) prov["failed_stage"] = res.failed_stage;
    fs::create_directories(r.output_dir);
    write_file((r.output_dir / "provenance.json").string(), prov.dump(2) + "\n");
    std::ofstream hist(r.output_dir / "runs.log", std::ios::app);
    hist << prov["finished"].get<std::string>() << " " << r.name << " "
         << (res.status == 0 ? "ok" : "failed:" + res.failed_stage);
    for (const auto& o : res.stages) hist << " " << o.name << (o.cached ? "=cached" : "=ran");
    hist << "\n";
  }
  return res;
}

}  // namespace posh::cli
