#include <cmath>
#include <filesystem>
#include <map>

#include "doctest.h"
#include "posh/synth.hpp"
#include "posh/trainer.hpp"
#include "posh/util.hpp"

using namespace posh;
using namespace posh::trainer;

namespace {

struct Fixture {
  std::vector<corpus::SentenceRecord> records;
  tokenizer::BpeModel tok;
  model::ModelConfig mcfg;

  Fixture() {
    auto g = synth::Grammar::load(std::string(POSH_SOURCE_DIR) + "/data/lexicon.json");
    records = synth::generate(g, 60, synth::Mix::natural(), 3);
    std::string text;
    for (const auto& r : records) text += r.surface() + "\n";
    tok = tokenizer::train_bpe_text(text, 120, dyck_reserved_tokens(2));
    mcfg.hidden_size = 16;
    mcfg.n_heads = 2;
    mcfg.n_layers = 1;
    mcfg.ffn_dim = 32;
    mcfg.vocab_size = tok.size();
    mcfg.context_len = 32;
    mcfg.dropout_rate = 0.1;
  }

  TrainConfig small_config() const {
    TrainConfig c;
    c.learning_rate = 3e-3;
    c.batch_size = 4;
    c.context_len = 32;
    c.warmup_steps = 5;
    c.max_steps = 40;
    c.eval_interval = 10;
    c.patience_steps = 1000;
    c.seed = 11;
    return c;
  }

  TrainInputs inputs(bool trees = false) const {
    auto split = split_dev(records, 0.1);
    TrainInputs in;
    in.train = encode_records(tok, split.train, 32, trees);
    in.dev = encode_records(tok, split.dev, 32, false);
    return in;
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("posh_trainer_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("learning rate schedule") {
  TrainConfig c;
  CHECK(lr_at(0, c) == 0.0);
  CHECK(lr_at(4000, c) == doctest::Approx(1e-4));
  CHECK(lr_at(100000, c) == 0.0);
  CHECK(lr_at(2000, c) == doctest::Approx(5e-5));
  CHECK(lr_at(52000, c) == doctest::Approx(5e-5));
  double peak = 0.0, prev = 0.0, max_jump = 0.0;
  for (int s = 0; s <= c.max_steps; s += 50) {
    double v = lr_at(s, c);
    peak = std::max(peak, v);
    if (s) max_jump = std::max(max_jump, std::abs(v - prev));
    prev = v;
  }
  CHECK(peak == doctest::Approx(1e-4));
  CHECK(max_jump <= 1e-4 * 50 / 4000 + 1e-15);

  c.scheduler = Scheduler::constant;
  CHECK(lr_at(90000, c) == doctest::Approx(1e-4));
  c.warmup_steps = 0;
  CHECK(lr_at(0, c) == doctest::Approx(1e-4));
}

TEST_CASE("configuration parsing and validation") {
  TrainConfig c;
  c.bias = model::AttentionBiasMode::recency(0.6);
  c.pretrain.steps = 7;
  auto back = TrainConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());

  auto e = TrainConfig::from_json(R"({"mode": "epochs", "epochs": 10})");
  CHECK(e.mode == Mode::epochs);
  CHECK(e.warmup_steps == 0);
  CHECK(e.scheduler == Scheduler::constant);
  CHECK_THROWS(TrainConfig::from_json(R"({"mode": "epochs", "epochs": 0})"));
  CHECK_THROWS(TrainConfig::from_json(R"({"warmup_steps": 10, "max_steps": 5})"));
  CHECK_THROWS(TrainConfig::from_json(R"({"patience_steps": 0})"));
  CHECK_THROWS(TrainConfig::from_json(R"({"mode": "sideways"})"));

  auto dir = temp_dir("toml");
  std::filesystem::create_directories(dir);
  write_file((dir / "run.toml").string(),
             "[model]\npreset = \"mini\"\nhidden_size = 64\n\n[train]\nlearning_rate = 0.001\n"
             "max_steps = 100\nwarmup_steps = 10\n[train.bias]\nkind = \"recency\"\n"
             "decay_base = 0.6\n\n[data]\ntrain = \"corpus.conllu\"\nvocab = \"v.json\"\n"
             "merges = \"m.txt\"\noutput_dir = \"out\"\n");
  auto job = TrainJob::from_file((dir / "run.toml").string());
  CHECK(job.model.hidden_size == 64);
  CHECK(job.model.n_layers == 4);
  CHECK(job.train.learning_rate == doctest::Approx(1e-3));
  CHECK(job.train.bias.kind == model::BiasKind::recency);
  CHECK(job.train_path == (dir / "corpus.conllu").string());
  write_file((dir / "bad.toml").string(), "[train\n");
  CHECK_THROWS(read_config_json((dir / "bad.toml").string()));
}

TEST_CASE("early stopping with patience of one interval") {
  EarlyStopper s(500);
  CHECK_FALSE(s.update(500, 2.0));
  CHECK(s.update(1000, 2.5));
  EarlyStopper t(1000);
  CHECK_FALSE(t.update(500, 2.0));
  CHECK_FALSE(t.update(1000, 1.5));
  CHECK_FALSE(t.update(1500, 1.6));
  CHECK(t.update(2000, 1.7));
  CHECK(t.best_step() == 1000);
}

TEST_CASE("data preparation") {
  const auto& f = fixture();
  auto items = encode_records(f.tok, f.records, 32, true);
  REQUIRE(items.size() == f.records.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    CHECK(items[i].ids.front() == f.tok.bos_id());
    CHECK(items[i].ids.back() == f.tok.eos_id());
    CHECK(items[i].tree->n == static_cast<int>(f.records[i].tokens.size()));
  }
  auto packed = pack(items, 16);
  std::size_t total = 0, packed_total = 0;
  for (const auto& e : items) total += e.ids.size();
  for (const auto& e : packed) {
    CHECK(e.ids.size() <= 16);
    packed_total += e.ids.size();
  }
  CHECK(packed_total + 1 >= total);

  auto split = split_dev(f.records, 0.1);
  CHECK(split.train.size() + split.dev.size() == f.records.size());
  CHECK_FALSE(split.dev.empty());
  auto again = split_dev(f.records, 0.1);
  CHECK(again.dev.size() == split.dev.size());
  CHECK(split_dev(f.records, 1e-6).dev.size() == 1);

  CHECK_NOTHROW(encode_dyck(f.tok, {"<o:0> <o:1> <c:1> <c:0>"}, 2));
  CHECK_THROWS(encode_dyck(f.tok, {"<o:0> <c:0>"}, 3));
}

TEST_CASE("training is deterministic and keeps the best checkpoint") {
  const auto& f = fixture();
  auto cfg = f.small_config();
  auto in = f.inputs();
  auto dir = temp_dir("run");
  in.output_dir = dir.string();
  in.tokenizer = &f.tok;
  auto a = train(f.mcfg, cfg, in);
  in.output_dir.clear();
  auto b = train(f.mcfg, cfg, in);
  b.manifest.best_checkpoint = a.manifest.best_checkpoint;
  b.manifest.final_checkpoint = a.manifest.final_checkpoint;
  CHECK(a.manifest.to_json(false) == b.manifest.to_json(false));

  const auto& m = a.manifest;
  CHECK(m.stopping_reason == "max_steps");
  CHECK(m.train_loss.size() == 40);
  CHECK(m.eval_steps == std::vector<int>{10, 20, 30, 40});
  CHECK(m.dev_loss.size() == m.eval_steps.size());
  CHECK(m.train_loss.back() < m.train_loss.front());

  auto ck = model::load_checkpoint(m.best_checkpoint);
  CHECK_FALSE(ck.tokenizer_vocab.empty());
  model::Transformer<float> best(ck.config, ck.weights);
  auto info = checkpoint_info(ck);
  CHECK(evaluate_loss(best, in.dev, info.bias, info.eval_epoch, cfg.batch_size) ==
        doctest::Approx(m.best_dev_loss).epsilon(1e-12));
  double min_dev = *std::min_element(m.dev_loss.begin(), m.dev_loss.end());
  CHECK(m.best_dev_loss == min_dev);

  auto reread = RunManifest::from_json(read_file((dir / "manifest.json").string()));
  CHECK(reread.to_json(false) == m.to_json(false));

  auto empty = in;
  empty.dev.clear();
  CHECK_THROWS(train(f.mcfg, cfg, empty));
}

TEST_CASE("seed changes the run") {
  const auto& f = fixture();
  auto cfg = f.small_config();
  cfg.max_steps = 10;
  auto a = train(f.mcfg, cfg, f.inputs());
  cfg.seed = 12;
  auto b = train(f.mcfg, cfg, f.inputs());
  CHECK(a.manifest.train_loss != b.manifest.train_loss);
}

TEST_CASE("Dyck phase") {
  const auto& f = fixture();
  auto cfg = f.small_config();
  cfg.max_steps = 10;
  auto in = f.inputs();
  auto plain = train(f.mcfg, cfg, in);
  in.dyck = encode_dyck(f.tok, dyck::generate_dyck({2, 4, 4, 16, 0.5}, 10, 1), 2);
  auto zero = train(f.mcfg, cfg, in);
  CHECK(zero.manifest.to_json(false) == plain.manifest.to_json(false));

  dyck::DyckConfig dc{2, 4, 8, 24, 0.5};
  auto strings = dyck::generate_dyck(dc, 400, 4);
  in.dyck = encode_dyck(f.tok, strings, 2);
  cfg.pretrain.steps = 150;
  cfg.pretrain.dyck = dc;
  auto mcfg = f.mcfg;
  mcfg.dropout_rate = 0.0;
  auto run = train(mcfg, cfg, in);
  const auto& m = run.manifest;
  REQUIRE(m.phases.size() == 2);
  CHECK(m.phases[0].name == "dyck");
  CHECK(m.phases[0].steps == 150);
  CHECK(m.phases[1].name == "main");
  CHECK(m.phases[1].first_step == 150);
  CHECK(m.train_loss.size() == 160);
  CHECK(m.eval_steps.front() == 160);

  // Unigram entropy of the packed Dyck stream as the baseline to beat.
  std::map<int, double> freq;
  double n = 0;
  for (const auto& e : pack(in.dyck, cfg.context_len))
    for (int id : e.ids) freq[id] += 1, n += 1;
  double unigram = 0;
  for (const auto& [id, c] : freq) unigram -= c / n * std::log(c / n);
  double late = 0;
  for (int s = 130; s < 150; ++s) late += m.train_loss[static_cast<std::size_t>(s)] / 20;
  CHECK(late < unigram - 0.05);
  MESSAGE("dyck phase loss " << late << " vs unigram " << unigram);

  in.dyck.clear();
  CHECK_THROWS(train(mcfg, cfg, in));
}

TEST_CASE("epoch mode with recency decay") {
  const auto& f = fixture();
  auto cfg = TrainConfig::from_json(
      R"({"mode": "epochs", "epochs": 3, "learning_rate": 0.003, "batch_size": 8,
          "context_len": 32, "eval_interval": 1000, "seed": 5,
          "bias": {"kind": "recency", "decay_base": 0.6}})");
  auto run = train(f.mcfg, cfg, f.inputs());
  const auto& m = run.manifest;
  CHECK(m.stopping_reason == "epochs_done");
  CHECK(m.eval_epochs == std::vector<double>{0, 1, 2});
  CHECK(m.final_epoch == 2);
  CHECK(lr_at(0, cfg) == doctest::Approx(0.003));

  // r = 0.6 at the tenth epoch (t = 9)
  CHECK(std::pow(0.6, 9) == doctest::Approx(0.0101).epsilon(0.01));
  auto bias = model::recency_bias(32, 0.6, 9);
  CHECK(bias.front() >= -0.0101 * 31);
  CHECK(bias.back() == 0.0);

  auto one = cfg;
  one.epochs = 1;
  auto r1 = train(f.mcfg, one, f.inputs());
  CHECK(r1.manifest.eval_epochs == std::vector<double>{0});
}

TEST_CASE("tree-planted training reduces the tree loss") {
  const auto& f = fixture();
  auto cfg = f.small_config();
  cfg.bias = model::AttentionBiasMode::tree_planted(1.0);
  cfg.max_steps = 60;
  auto run = train(f.mcfg, cfg, f.inputs(true));
  const auto& tl = run.manifest.tree_loss;
  REQUIRE(tl.size() == 60);
  double first = 0, last = 0;
  for (int i = 0; i < 10; ++i) first += tl[static_cast<std::size_t>(i)], last += tl[tl.size() - 1 - static_cast<std::size_t>(i)];
  CHECK(last < first);
  CHECK_THROWS(train(f.mcfg, cfg, f.inputs(false)));
}
