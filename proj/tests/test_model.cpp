#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "fixtures.hpp"
#include "posh/model.hpp"

using namespace posh::model;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.hidden_size = 8;
  c.n_heads = 2;
  c.n_layers = 2;
  c.ffn_dim = 16;
  c.vocab_size = 50;
  c.context_len = 16;
  c.dropout_rate = 0.0;
  return c;
}

// Two sentences with parses; BOS/EOS positions carry no word.
struct TinyBatch {
  TreeDistanceMatrix t1, t2;
  std::vector<Sequence> seqs;
  TinyBatch() {
    t1 = tree_distances_from_heads({2, 0, 2, 3});
    t2 = tree_distances_from_heads({0, 1, 1});
    seqs.push_back({{2, 11, 12, 13, 14, 3}, {-1, 0, 1, 2, 3, -1}, &t1, {}});
    seqs.push_back({{2, 20, 21, 21, 22, 3}, {-1, 0, 1, 1, 2, -1}, &t2, {}});
  }
};

// Floyd-Warshall over the undirected tree.
std::vector<std::vector<int>> floyd(const std::vector<int>& heads) {
  const int n = int(heads.size());
  const int inf = 1 << 20;
  std::vector<std::vector<int>> d(n, std::vector<int>(n, inf));
  for (int i = 0; i < n; ++i) {
    d[i][i] = 0;
    if (heads[i] > 0) d[i][heads[i] - 1] = d[heads[i] - 1][i] = 1;
  }
  for (int k = 0; k < n; ++k)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) d[i][j] = std::min(d[i][j], d[i][k] + d[k][j]);
  return d;
}

}  // namespace

TEST_CASE("config presets and validation") {
  auto mini = ModelConfig::preset("mini");
  CHECK(mini.hidden_size == 512);
  CHECK(mini.n_heads == 8);
  CHECK(mini.n_layers == 4);
  CHECK(mini.ffn_dim == 2048);
  CHECK(ModelConfig::preset("xs").n_layers == 6);
  CHECK(ModelConfig::preset("xxs").n_heads == 4);
  CHECK(ModelConfig::preset("small").hidden_size == 768);
  CHECK_THROWS(ModelConfig::preset("huge"));
  auto bad = tiny_config();
  bad.n_heads = 3;
  CHECK_THROWS(bad.validate());
  CHECK(ModelConfig::from_json(mini.to_json()) == mini);
  CHECK_THROWS(AttentionBiasMode::recency(1.0).validate(2));
  CHECK_THROWS(AttentionBiasMode::tree_planted(-1.0).validate(2));
  CHECK_THROWS(AttentionBiasMode::tree_planted(1.0, 3).validate(2));
}

TEST_CASE("recency bias vector") {
  auto b = recency_bias(3, 0.6, 1);
  REQUIRE(b.size() == 3);
  CHECK(b[0] == -1.2);
  CHECK(b[1] == -0.6);
  CHECK(b[2] == 0.0);
  // non-decreasing in t entrywise
  for (int t = 0; t < 10; ++t) {
    auto now = recency_bias(6, 0.6, t), next = recency_bias(6, 0.6, t + 1);
    for (int j = 0; j < 6; ++j) CHECK(next[j] >= now[j]);
  }
  CHECK(std::pow(0.6, 9) == doctest::Approx(0.0101).epsilon(0.01));
}

TEST_CASE("tree distances") {
  auto one = tree_distances_from_heads({0});
  CHECK(one.n == 1);
  CHECK(one.at(0, 0) == 0);
  auto chain = tree_distances_from_heads({0, 1, 2});
  CHECK(chain.at(0, 2) == 2);
  auto star = tree_distances_from_heads({0, 1, 1, 1});
  for (int i = 1; i < 4; ++i)
    for (int j = 1; j < 4; ++j)
      if (i != j) CHECK(star.at(i, j) == 2);
  CHECK_THROWS(tree_distances_from_heads({0, 0}));
  CHECK_THROWS(tree_distances_from_heads({2, 1}));
  CHECK_THROWS(tree_distances_from_heads({5}));

  std::mt19937_64 rng(3);
  for (int k = 0; k < 50; ++k) {
    auto s = posh::testing::random_sentence(rng, k);
    std::vector<int> heads;
    for (const auto& t : s.tokens) heads.push_back(t.head);
    auto m = tree_distances_from_parse(s);
    auto ref = floyd(heads);
    for (int i = 0; i < m.n; ++i)
      for (int j = 0; j < m.n; ++j) {
        CHECK(m.at(i, j) == ref[i][j]);
        CHECK(m.at(i, j) == m.at(j, i));
        if (i != j) CHECK(m.at(i, j) >= 1);
      }
  }
  auto gold = tree_distances_from_parse(posh::testing::boy_in_corner_question());
  CHECK(gold.at(2, 8) == 1);  // boy - smiling
  CHECK(gold.at(7, 2) == 2);  // corner - is - boy
}

TEST_CASE("tree target rows") {
  auto chain = tree_distances_from_heads({0, 1, 2});
  auto row = tree_target_row(chain, {0, 1, 2}, 2);
  const double z = std::exp(-2.0) + std::exp(-1.0) + 1.0;
  CHECK(row[0] == doctest::Approx(std::exp(-2.0) / z).epsilon(1e-14));
  CHECK(row[1] == doctest::Approx(std::exp(-1.0) / z).epsilon(1e-14));
  CHECK(row[2] == doctest::Approx(1.0 / z).epsilon(1e-14));
  CHECK(tree_target_row(chain, {-1, 0, 1}, 0).empty());
  auto with_bos = tree_target_row(chain, {-1, 0, 1}, 2);
  CHECK(with_bos[0] == 0.0);
  CHECK(with_bos[1] + with_bos[2] == doctest::Approx(1.0));
}

TEST_CASE("standalone losses") {
  Eigen::MatrixXd uniform = Eigen::MatrixXd::Zero(3, 7);
  CHECK(lm_loss(uniform, {1, 2, 3}) == doctest::Approx(std::log(7.0)));
  Eigen::MatrixXd two(2, 2);
  two << 1.0, 0.0, 0.0, 2.0;
  const double expected =
      0.5 * (std::log(1 + std::exp(-1.0)) + std::log(1 + std::exp(-2.0)));
  CHECK(lm_loss(two, {0, 1}) == doctest::Approx(expected).epsilon(1e-14));
  Eigen::MatrixXd sharp = Eigen::MatrixXd::Zero(1, 4);
  sharp(0, 2) = 60;
  CHECK(lm_loss(sharp, {2}) < 1e-20);

  auto chain = tree_distances_from_heads({0, 1, 2});
  std::vector<int> wop{0, 1, 2};
  Eigen::MatrixXd target = Eigen::MatrixXd::Zero(3, 3);
  for (int i = 0; i < 3; ++i) {
    auto r = tree_target_row(chain, wop, i);
    for (int j = 0; j <= i; ++j) target(i, j) = r[j];
  }
  CHECK(std::abs(tree_planting_loss({target}, chain, wop)) < 1e-10);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  for (int k = 0; k < 100; ++k) {
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(3, 3);
    for (int i = 0; i < 3; ++i) {
      double z = 0;
      for (int j = 0; j <= i; ++j) z += a(i, j) = u(rng);
      a.row(i) /= z;
    }
    CHECK(tree_planting_loss({a}, chain, wop) >= 0.0);
  }
  CHECK_THROWS(tree_planting_loss({target}, chain, {0, 1, 5}));
}

TEST_CASE("forward: attention rows, causality, single token") {
  Transformer<double> m(tiny_config(), 7);
  TinyBatch b;
  RunOptions opt;
  opt.keep_attention = true;
  for (const auto& mode : {AttentionBiasMode::none(), AttentionBiasMode::recency(0.6),
                           AttentionBiasMode::tree_planted(1.0)}) {
    auto res = m.run(b.seqs, mode, opt);
    for (const auto& layer : res.attention)
      for (const auto& seq : layer)
        for (const auto& P : seq)
          for (int i = 0; i < P.rows(); ++i) {
            CHECK(P.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
            for (int j = i + 1; j < P.cols(); ++j) CHECK(P(i, j) == 0.0);
          }
  }
  auto base = m.run(b.seqs, AttentionBiasMode::none(), opt);
  auto changed = b.seqs;
  changed[0].ids[3] = 40;
  auto after = m.run(changed, AttentionBiasMode::none(), opt);
  for (int p = 0; p < 3; ++p)
    CHECK((base.logits.row(p) - after.logits.row(p)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((base.logits.row(3) - after.logits.row(3)).cwiseAbs().maxCoeff() > 0.0);
  // second sequence unaffected by the first
  CHECK((base.logits.bottomRows(6) - after.logits.bottomRows(6)).cwiseAbs().maxCoeff() == 0.0);

  TreeDistanceMatrix t1 = tree_distances_from_heads({0});
  for (const auto& mode : {AttentionBiasMode::none(), AttentionBiasMode::recency(0.6),
                           AttentionBiasMode::tree_planted(1.0)}) {
    auto r = m.run({Sequence{{5}, {0}, &t1, {}}}, mode, opt);
    CHECK(r.attention[0][0][0](0, 0) == 1.0);
  }
}

TEST_CASE("forward rejects malformed input") {
  Transformer<double> m(tiny_config(), 7);
  CHECK_THROWS(m.run({Sequence{{50}, {}, nullptr, {}}}, {}, {}));
  CHECK_THROWS(m.run({Sequence{std::vector<int>(17, 1), {}, nullptr, {}}}, {}, {}));
  CHECK_THROWS(m.run({Sequence{{1, 2}, {}, nullptr, {}}}, AttentionBiasMode::tree_planted(1), {}));
  TreeDistanceMatrix t = tree_distances_from_heads({0});
  CHECK_THROWS(m.run({Sequence{{1, 2}, {0, 1}, &t, {}}}, AttentionBiasMode::tree_planted(1), {}));
  CHECK_THROWS(m.run({}, {}, {}));
}

TEST_CASE("gradients match finite differences") {
  Transformer<double> m(tiny_config(), 11);
  TinyBatch b;
  struct Case {
    AttentionBiasMode mode;
    double t;
  };
  for (const auto& c : {Case{AttentionBiasMode::none(), 0}, Case{AttentionBiasMode::recency(0.6), 0},
                        Case{AttentionBiasMode::recency(0.6), 3},
                        Case{AttentionBiasMode::tree_planted(1.0), 0}}) {
    auto rep = gradient_check(m, b.seqs, c.mode, c.t, 1e-4, 1e-4, 40);
    CAPTURE(to_string(c.mode.kind));
    CAPTURE(rep.worst_param);
    CHECK(rep.fraction_within() >= 0.99);
    CHECK(rep.max_rel_error < 1e-3);
  }
}

TEST_CASE("recency limit and zero-weight tree planting reduce to vanilla") {
  Transformer<double> m(tiny_config(), 5);
  TinyBatch b;
  RunOptions vanilla_opt;
  auto g0 = m.weights().zeros_like();
  auto base = m.run(b.seqs, AttentionBiasMode::none(), vanilla_opt, &g0);

  RunOptions late;
  late.epoch = 60;  // 0.6^60 ~ 5e-14
  auto g1 = m.weights().zeros_like();
  auto rec = m.run(b.seqs, AttentionBiasMode::recency(0.6), late, &g1);
  CHECK((base.logits - rec.logits).cwiseAbs().maxCoeff() < 1e-9);
  double worst = 0;
  for_each_pair<double>(g0, g1, [&](const std::string&, Mat<double>& a, Mat<double>& c) {
    worst = std::max(worst, (a - c).cwiseAbs().maxCoeff());
  });
  CHECK(worst < 1e-9);

  auto g2 = m.weights().zeros_like();
  auto tpt = m.run(b.seqs, AttentionBiasMode::tree_planted(0.0), vanilla_opt, &g2);
  CHECK(tpt.tree_loss > 0.0);
  CHECK(tpt.total_loss == base.lm_loss);
  worst = 0;
  for_each_pair<double>(g0, g2, [&](const std::string&, Mat<double>& a, Mat<double>& c) {
    worst = std::max(worst, (a - c).cwiseAbs().maxCoeff());
  });
  CHECK(worst == 0.0);

  // recency before scaling is also a valid configuration
  auto before = AttentionBiasMode::recency(0.6);
  before.recency_before_scale = true;
  auto rep = gradient_check(m, b.seqs, before, 1, 1e-4, 1e-4, 20);
  CHECK(rep.max_rel_error < 1e-3);
}

TEST_CASE("dropout is seeded and disabled in evaluation") {
  auto cfg = tiny_config();
  cfg.dropout_rate = 0.1;
  Transformer<double> m(cfg, 3);
  TinyBatch b;
  std::mt19937_64 r1(9), r2(9);
  RunOptions a;
  a.train = true;
  a.dropout_rng = &r1;
  RunOptions c = a;
  c.dropout_rng = &r2;
  auto x = m.run(b.seqs, {}, a);
  auto y = m.run(b.seqs, {}, c);
  CHECK(x.lm_loss == y.lm_loss);
  auto eval1 = m.run(b.seqs, {}, {});
  auto eval2 = m.run(b.seqs, {}, {});
  CHECK(eval1.lm_loss == eval2.lm_loss);
  CHECK(eval1.lm_loss != x.lm_loss);
  CHECK_THROWS(m.run(b.seqs, {}, RunOptions{0, true, nullptr, false}));

  // gradients stay exact with a fixed dropout mask
  std::mt19937_64 r3(4);
  RunOptions with_mask = a;
  with_mask.dropout_rng = &r3;
  auto g = m.weights().zeros_like();
  auto before = r3;
  m.run(b.seqs, {}, with_mask, &g);
  const double step = 1e-5;
  auto& w = m.weights().layers[0].w_1;
  const double orig = w(1, 2);
  w(1, 2) = orig + step;
  auto ra = before;
  with_mask.dropout_rng = &ra;
  const double up = m.run(b.seqs, {}, with_mask).lm_loss;
  w(1, 2) = orig - step;
  auto rb = before;
  with_mask.dropout_rng = &rb;
  const double down = m.run(b.seqs, {}, with_mask).lm_loss;
  w(1, 2) = orig;
  CHECK(relative_error(g.layers[0].w_1(1, 2), (up - down) / (2 * step)) < 1e-5);
}

TEST_CASE("token log-probabilities are batch invariant") {
  Transformer<double> m(tiny_config(), 21);
  std::vector<std::vector<int>> seqs{{2, 5, 6, 7, 3}, {2, 9, 3}, {2, 1, 1, 1, 1, 1, 3}};
  auto together = m.token_logprobs(seqs);
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    auto alone = m.token_logprobs({seqs[s]});
    REQUIRE(alone[0].size() == seqs[s].size() - 1);
    for (std::size_t k = 0; k < alone[0].size(); ++k)
      CHECK(std::abs(alone[0][k] - together[s][k]) < 1e-9);
  }
  // uniform model: zero weights give log(1/V) everywhere
  auto zero = m;
  zero.weights().set_zero();
  for (auto& layer : zero.weights().layers) layer.ln1_g.setOnes(), layer.ln2_g.setOnes();
  zero.weights().lnf_g.setOnes();
  auto uniform = zero.token_logprobs({{2, 4, 5}});
  for (double lp : uniform[0]) CHECK(lp == doctest::Approx(-std::log(50.0)));
}

TEST_CASE("checkpoint round trip") {
  Transformer<double> m(tiny_config(), 13);
  Checkpoint ck;
  ck.config = m.config();
  ck.weights = to_float(m.weights());
  ck.extra.emplace_back("adam.m.tok_emb", Mat<float>::Ones(2, 3));
  ck.tokenizer_vocab = "{\"vocab\":{}}";
  ck.tokenizer_merges = "a b\n";
  ck.metadata = R"({"step": 12})";
  const auto path = (std::filesystem::temp_directory_path() / "posh_test.ckpt").string();
  save_checkpoint(path, ck);
  auto back = load_checkpoint(path);
  CHECK(back.config == ck.config);
  CHECK(back.tokenizer_merges == "a b\n");
  CHECK(back.metadata == R"({"step":12})");
  REQUIRE(back.extra.size() == 1);
  CHECK(back.extra[0].first == "adam.m.tok_emb");
  bool same = true;
  auto w = ck.weights;
  for_each_pair<float>(w, back.weights, [&](const std::string&, Mat<float>& a, Mat<float>& b) {
    same = same && a == b;
  });
  CHECK(same);
  Transformer<float> restored(back.config, back.weights);
  auto lp = restored.token_logprobs({{2, 5, 6}});
  auto ref = m.token_logprobs({{2, 5, 6}});
  CHECK(lp[0][0] == doctest::Approx(ref[0][0]).epsilon(1e-5));
  std::filesystem::remove(path);
  CHECK_THROWS(load_checkpoint(path));
}
