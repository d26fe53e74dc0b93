#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "posh/cli.hpp"
#include "posh/tokenizer.hpp"
#include "posh/trainer.hpp"
#include "posh/util.hpp"

using namespace posh;

namespace {

std::map<std::string, double> parse_rates(const std::vector<std::string>& items) {
  std::map<std::string, double> out;
  for (const auto& it : items) {
    const auto eq = it.find('=');
    if (eq == std::string::npos) throw CLI::ValidationError("--rate", "expected name=value, got " + it);
    out[it.substr(0, eq)] = std::stod(it.substr(eq + 1));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Filtered-corpus training and minimal-pair evaluation toolkit", "posh"};
  app.set_version_flag("--version", cli::tool_version());
  app.require_subcommand(1);
  std::function<int()> action;

  // corpus
  auto* corpus_cmd = app.add_subcommand("corpus", "Filter, inject and sample treebank corpora");
  corpus_cmd->require_subcommand(1);

  cli::FilterArgs filter;
  auto* f = corpus_cmd->add_subcommand("filter", "Remove sentences that carry disambiguating evidence");
  f->add_option("--in", filter.in, "Input .conllu/.jsonl or text")->required();
  f->add_option("--out-kept", filter.out_kept, "Kept sentences")->required();
  f->add_option("--out-removed", filter.out_removed, "Removed sentences");
  f->add_option("--stats", filter.stats, "Statistics JSON");
  f->add_option("--rules", filter.rules, "Rule overrides JSON");
  f->add_option("--phenomena", filter.phenomena, "qf,binding")->delimiter(',');
  f->callback([&] {
    action = [&] {
      std::cout << corpus::stats_to_json(cli::cmd_filter(filter)) << "\n";
      return 0;
    };
  });

  cli::InjectArgs inject;
  std::vector<std::string> rates;
  auto* inj = corpus_cmd->add_subcommand("inject", "Replace filtered sentences with held-out evidence");
  inj->add_option("--in", inject.in, "Filtered corpus")->required();
  inj->add_option("--pool", inject.pools, "Evidence pool file (repeatable)")->required();
  inj->add_option("--rate", rates, "phenomenon=rate (repeatable)");
  inj->add_option("--seed", inject.seed);
  inj->add_option("--out", inject.out)->required();
  inj->add_option("--replacements", inject.replacements, "Replacement log JSON");
  inj->add_option("--rules", inject.rules);
  inj->callback([&] {
    action = [&] {
      if (!rates.empty()) inject.rates = parse_rates(rates);
      std::cout << cli::cmd_inject(inject) << " sentences replaced\n";
      return 0;
    };
  });

  cli::SampleArgs sample;
  auto* smp = corpus_cmd->add_subcommand("sample", "Draw a sanity-check sample of trigger sentences");
  smp->add_option("--in", sample.in)->required();
  smp->add_option("--out", sample.out)->required();
  smp->add_option("--trigger", sample.trigger)->check(CLI::IsMember({"qf", "binding"}));
  smp->add_option("--n", sample.n);
  smp->add_option("--seed", sample.seed);
  smp->callback([&] {
    action = [&] {
      auto r = cli::cmd_sample(sample);
      std::cout << r.sample.size() << " of " << r.population << " sentences\n";
      if (r.short_sample) std::cerr << "warning: population smaller than requested sample\n";
      return 0;
    };
  });

  // synth
  cli::SynthArgs synth;
  auto* sy = app.add_subcommand("synth", "Generate an annotated toy corpus");
  sy->add_option("--lexicon", synth.lexicon)->required();
  sy->add_option("--mix", synth.mix, "natural, distractors, evidence or one sentence kind");
  sy->add_option("--n", synth.n, "Sentence count");
  sy->add_option("--words", synth.words, "Word budget");
  sy->add_option("--seed", synth.seed);
  sy->add_option("--out", synth.out)->required();
  sy->callback([&] {
    action = [&] {
      std::cout << cli::cmd_synth(synth) << " sentences\n";
      return 0;
    };
  });

  // bench
  auto* bench_cmd = app.add_subcommand("bench", "Minimal-pair benchmark");
  bench_cmd->require_subcommand(1);
  cli::BenchArgs bench;
  auto* bg = bench_cmd->add_subcommand("generate", "Instantiate templates");
  bg->add_option("--templates", bench.templates)->required();
  bg->add_option("--lexicon", bench.lexicon)->required();
  bg->add_option("--vocab", bench.vocab, "Vocabulary for the closure check")->required();
  bg->add_option("--n", bench.n, "Pairs per subcategory");
  bg->add_option("--seed", bench.seed);
  bg->add_option("--out", bench.out)->required();
  bg->add_option("--manifest", bench.manifest);
  bg->callback([&] {
    action = [&] {
      auto b = cli::cmd_bench_generate(bench);
      auto check = cli::cmd_bench_check(bench.out, bench);
      std::cout << cli::check_to_json(check) << "\n";
      return check.ok() ? 0 : 1;
    };
  });
  std::string bench_file;
  auto* bc = bench_cmd->add_subcommand("check", "Validate an existing benchmark");
  bc->add_option("--bench", bench_file)->required();
  bc->add_option("--templates", bench.templates)->required();
  bc->add_option("--lexicon", bench.lexicon)->required();
  bc->add_option("--vocab", bench.vocab)->required();
  bc->callback([&] {
    action = [&] {
      auto check = cli::cmd_bench_check(bench_file, bench);
      std::cout << cli::check_to_json(check) << "\n";
      return check.ok() ? 0 : 1;
    };
  });

  // dyck
  cli::DyckArgs dy;
  auto* d = app.add_subcommand("dyck", "Generate k-Dyck strings");
  d->add_option("--k", dy.config.k);
  d->add_option("--max-depth", dy.config.max_depth);
  d->add_option("--min-length", dy.config.min_length);
  d->add_option("--max-length", dy.config.max_length);
  d->add_option("--open-prob", dy.config.open_prob);
  d->add_option("--n", dy.n);
  d->add_option("--seed", dy.seed);
  d->add_option("--out", dy.out)->required();
  d->callback([&] {
    action = [&] {
      cli::cmd_dyck(dy);
      return 0;
    };
  });

  // tok
  auto* tok_cmd = app.add_subcommand("tok", "Tokenizer training and vocabulary selection");
  tok_cmd->require_subcommand(1);
  cli::TokTrainArgs tt;
  auto* tr = tok_cmd->add_subcommand("train", "Train a BPE tokenizer");
  tr->add_option("--corpus", tt.corpora, "Training corpus (repeatable)")->required();
  tr->add_option("--vocab-size", tt.vocab_size);
  tr->add_option("--dyck-k", tt.dyck_k, "Reserve bracket tokens");
  tr->add_option("--out-vocab", tt.out_vocab)->required();
  tr->add_option("--out-merges", tt.out_merges)->required();
  tr->callback([&] {
    action = [&] {
      std::cout << "vocabulary size " << cli::cmd_tok_train(tt) << "\n";
      return 0;
    };
  });
  std::string ctc_vocab, ctc_merges, ctc_corpus;
  auto* ctc = tok_cmd->add_subcommand("ctc", "Count corpus tokens");
  ctc->add_option("--vocab", ctc_vocab)->required();
  ctc->add_option("--merges", ctc_merges)->required();
  ctc->add_option("--corpus", ctc_corpus)->required();
  ctc->callback([&] {
    action = [&] {
      auto m = tokenizer::BpeModel::load(ctc_vocab, ctc_merges);
      std::string text;
      for (const auto& l : cli::corpus_lines(ctc_corpus)) text += l + "\n";
      std::cout << tokenizer::corpus_token_count(m, text) << "\n";
      return 0;
    };
  });
  std::vector<std::string> sel_corpora;
  std::vector<std::size_t> candidates{8192, 32768, 49152, 65536};
  auto* sel = tok_cmd->add_subcommand("select", "Pick the vocabulary size that equalizes token counts");
  sel->add_option("--corpus", sel_corpora, "Corpus (repeatable)")->required();
  sel->add_option("--candidates", candidates)->delimiter(',');
  sel->callback([&] {
    action = [&] {
      std::vector<std::string> texts;
      for (const auto& c : sel_corpora) {
        std::string text;
        for (const auto& l : cli::corpus_lines(c)) text += l + "\n";
        texts.push_back(std::move(text));
      }
      auto r = tokenizer::select_vocab_size(texts, candidates);
      nlohmann::ordered_json j;
      j["candidates"] = candidates;
      j["ctc"] = r.ctc;
      j["discrepancy"] = r.discrepancy;
      j["chosen"] = candidates[r.chosen];
      std::cout << j.dump(2) << "\n";
      return 0;
    };
  });

  // train
  std::string train_config;
  auto* t = app.add_subcommand("train", "Train a language model from a TOML or JSON job");
  t->add_option("--config", train_config)->required()->check(CLI::ExistingFile);
  t->callback([&] {
    action = [&] {
      auto m = trainer::run_job(trainer::TrainJob::from_file(train_config));
      std::cout << m.to_json(true) << "\n";
      return 0;
    };
  });

  // eval
  cli::EvalArgs ev;
  std::vector<std::string> model_patterns;
  std::vector<std::uint64_t> seeds;
  std::string normalization = "per_token", format = "text", preset = "mini";
  auto* e = app.add_subcommand("eval", "Score a minimal-pair benchmark");
  e->add_option("--model", model_patterns, "Checkpoint, may contain {seed} (repeatable)");
  e->add_option("--bench", ev.bench, "Benchmark .jsonl, BLiMP .jsonl, Zorro .txt or .tsv")->required();
  e->add_option("--seeds", seeds, "Seeds for {seed} and the random-init control")->delimiter(',');
  e->add_option("--normalization", normalization)->check(CLI::IsMember({"per_token", "total"}));
  e->add_option("--format", format)->check(CLI::IsMember({"text", "json"}));
  e->add_option("--out-dir", ev.out_dir, "Write report.json, report.txt and items.csv");
  e->add_option("--title", ev.title);
  e->add_option("--batch-size", ev.score.batch_size);
  e->add_option("--workers", ev.score.workers);
  e->add_flag("--random-init", ev.random_init, "Untrained control models");
  e->add_option("--vocab", ev.vocab, "Tokenizer for --random-init");
  e->add_option("--merges", ev.merges, "Tokenizer for --random-init");
  e->add_option("--preset", preset, "Architecture for --random-init");
  e->callback([&] {
    action = [&] {
      ev.score.normalization = eval::normalization_from_string(normalization);
      for (const auto& p : model_patterns)
        for (const auto& x : cli::expand_seed_paths(p, seeds)) ev.models.push_back(x);
      if (ev.random_init) {
        ev.control_config = model::ModelConfig::preset(preset);
        ev.control_seeds = seeds;
      }
      auto out = cli::cmd_eval(ev);
      std::cout << eval::emit_report(out.report, format);
      return 0;
    };
  });

  // compare
  std::vector<std::string> reports;
  std::string cmp_format = "text";
  auto* cmp = app.add_subcommand("compare", "Side-by-side summary of eval reports");
  cmp->add_option("--report", reports, "label=report.json (repeatable)")->required();
  cmp->add_option("--format", cmp_format)->check(CLI::IsMember({"text", "json"}));
  cmp->callback([&] {
    action = [&] {
      std::vector<std::string> labels, paths;
      for (const auto& r : reports) {
        const auto eq = r.find('=');
        labels.push_back(eq == std::string::npos ? r : r.substr(0, eq));
        paths.push_back(eq == std::string::npos ? r : r.substr(eq + 1));
      }
      std::cout << cli::compare_reports(paths, labels, cmp_format);
      return 0;
    };
  });

  // run
  std::string recipe_path;
  bool dry_run = false;
  auto* run = app.add_subcommand("run", "Execute a recipe");
  run->add_option("recipe", recipe_path, "Recipe TOML or JSON")->required()->check(CLI::ExistingFile);
  run->add_flag("--dry-run", dry_run, "Print the plan without running");
  run->callback([&] {
    action = [&] {
      auto r = cli::run_recipe(cli::Recipe::load(recipe_path), dry_run, std::cout);
      if (r.status) std::cerr << "error: stage '" << r.failed_stage << "': " << r.message << "\n";
      return r.status;
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err);
  }
  try {
    return action ? action() : 0;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
}
