#include <algorithm>
#include <random>
#include <map>
#include <set>

#include "doctest.h"
#include "posh/dyck.hpp"
#include "posh/util.hpp"

using namespace posh::dyck;

namespace {

// Reference acceptor: per type, repeatedly cancel an opener with the next
// closer of the same type that follows it with nothing of that type between.
bool reduce_accepts(const std::vector<std::string>& tokens, int k) {
  for (int t = 0; t < k; ++t) {
    std::string seq;
    for (const auto& tok : tokens) {
      if (tok == open_token(t)) seq += '(';
      if (tok == close_token(t)) seq += ')';
    }
    for (auto p = seq.find("()"); p != std::string::npos; p = seq.find("()")) seq.erase(p, 2);
    if (!seq.empty()) return false;
  }
  return true;
}

int max_type_depth(const std::vector<std::string>& tokens) {
  std::map<int, int> depth;
  int best = 0;
  for (const auto& tok : tokens) {
    auto b = parse_token(tok);
    best = std::max(best, depth[b->type] += b->open ? 1 : -1);
  }
  return best;
}

}  // namespace

TEST_CASE("validate_dyck basic strings") {
  DyckConfig one{1, 10, 2, 16, 0.5};
  CHECK(validate_dyck("", one));
  CHECK(validate_dyck("( )", one));
  CHECK(validate_dyck("( ( ) ( ) )", one));
  CHECK_FALSE(validate_dyck(") (", one));
  CHECK_FALSE(validate_dyck("( x )", one));

  DyckConfig two{2, 10, 2, 16, 0.5};
  CHECK(validate_dyck("( [ ) ]", two));
  CHECK_FALSE(validate_dyck("( [ ]", two));
  CHECK(validate_dyck("<o:0> <o:1> <c:0> <c:1>", two));
  CHECK_FALSE(validate_dyck("<o:2> <c:2>", two));
  CHECK_FALSE(validate_dyck("( [ ) ]", one));

  DyckConfig shallow{1, 2, 2, 16, 0.5};
  CHECK(validate_dyck("( ( ) )", shallow));
  CHECK_FALSE(validate_dyck("( ( ( ) ) )", shallow));
}

TEST_CASE("config validation") {
  CHECK_NOTHROW(DyckConfig{}.validate());
  CHECK_THROWS(DyckConfig{8, 10, 1, 128, 0.5}.validate());
  CHECK_THROWS(DyckConfig{8, 10, 0, 128, 0.5}.validate());
  CHECK_THROWS(DyckConfig{8, 10, 20, 16, 0.5}.validate());
  CHECK_THROWS(DyckConfig{0, 10, 2, 16, 0.5}.validate());
  CHECK_THROWS(DyckConfig{65, 10, 2, 16, 0.5}.validate());
  CHECK_THROWS(DyckConfig{8, 10, 2, 16, 1.0}.validate());
  CHECK_THROWS(DyckConfig{8, 0, 2, 16, 0.5}.validate());
  CHECK_THROWS(generate_dyck(DyckConfig{8, 10, 1, 16, 0.5}, 1, 0));
}

TEST_CASE("generated strings agree with the reference acceptor") {
  for (const DyckConfig& cfg : {DyckConfig{}, DyckConfig{1, 3, 2, 20, 0.7},
                                DyckConfig{4, 1, 8, 8, 0.3}, DyckConfig{64, 10, 16, 128, 0.5}}) {
    auto samples = generate_dyck(cfg, 300, 11);
    std::mt19937_64 rng(5);
    for (const auto& s : samples) {
      auto tokens = posh::split_whitespace(s);
      CHECK(validate_dyck(s, cfg));
      CHECK(reduce_accepts(tokens, cfg.k));
      CHECK(int(tokens.size()) >= cfg.min_length);
      CHECK(int(tokens.size()) <= cfg.max_length);
      CHECK(tokens.size() % 2 == 0);
      CHECK(max_type_depth(tokens) <= cfg.max_depth);

      auto mutated = tokens;
      auto& tok = mutated[rng() % mutated.size()];
      auto b = parse_token(tok);
      tok = b->open ? close_token(b->type) : open_token(b->type);
      CHECK_FALSE(validate_dyck(posh::join(mutated, " "), cfg));
      CHECK_FALSE(reduce_accepts(mutated, cfg.k));
    }
  }
}

TEST_CASE("generation is deterministic and index-addressable") {
  DyckConfig cfg;
  auto a = generate_dyck(cfg, 50, 3);
  CHECK(a == generate_dyck(cfg, 50, 3));
  CHECK(a != generate_dyck(cfg, 50, 4));
  CHECK(a[17] == generate_one(cfg, 3, 17));
  auto longer = generate_dyck(cfg, 60, 3);
  CHECK(std::equal(a.begin(), a.end(), longer.begin()));
}

TEST_CASE("all bracket types are used") {
  DyckConfig cfg{8, 10, 64, 64, 0.5};
  std::set<int> seen;
  for (const auto& s : generate_dyck(cfg, 50, 1))
    for (const auto& tok : posh::split_whitespace(s)) seen.insert(parse_token(tok)->type);
  CHECK(seen.size() == 8);
}
