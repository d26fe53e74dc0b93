#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace posh::dyck {

struct DyckConfig {
  int k = 8;
  int max_depth = 10;
  int min_length = 16;
  int max_length = 128;
  double open_prob = 0.5;

  void validate() const;  // throws std::invalid_argument
};

std::string open_token(int type);   // "<o:3>"
std::string close_token(int type);  // "<c:3>"

// Bracket type and direction of a token. Accepts "<o:i>"/"<c:i>" and the
// ASCII pairs () [] {} for types 0..2.
struct Bracket {
  int type;
  bool open;
};
std::optional<Bracket> parse_token(const std::string& token);

// One space-separated string per sample; per-sample RNG streams make the
// result independent of evaluation order.
std::vector<std::string> generate_dyck(const DyckConfig& cfg, std::size_t n, std::uint64_t seed);
std::string generate_one(const DyckConfig& cfg, std::uint64_t seed, std::uint64_t index);

// Each bracket type balanced and well nested on its own subsequence, depth
// within max_depth, types below k. Length bounds are not checked.
bool validate_dyck(const std::string& s, const DyckConfig& cfg);

}  // namespace posh::dyck
