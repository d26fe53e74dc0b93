#include "posh/dyck.hpp"

#include <random>

#include "posh/util.hpp"

namespace posh::dyck {

void DyckConfig::validate() const {
  if (k < 1 || k > 64) throw std::invalid_argument("dyck: k must be in [1, 64]");
  if (max_depth < 1) throw std::invalid_argument("dyck: max_depth must be positive");
  if (min_length <= 0 || min_length % 2 || max_length % 2) {
    throw std::invalid_argument("dyck: length bounds must be positive even integers");
  }
  if (min_length > max_length) throw std::invalid_argument("dyck: min_length > max_length");
  if (!(open_prob > 0.0 && open_prob < 1.0)) {
    throw std::invalid_argument("dyck: open_prob must be in (0, 1)");
  }
}

std::string open_token(int type) { return "<o:" + std::to_string(type) + ">"; }
std::string close_token(int type) { return "<c:" + std::to_string(type) + ">"; }

std::optional<Bracket> parse_token(const std::string& token) {
  static const std::string opens = "([{", closes = ")]}";
  if (token.size() == 1) {
    if (auto p = opens.find(token[0]); p != std::string::npos) return Bracket{int(p), true};
    if (auto p = closes.find(token[0]); p != std::string::npos) return Bracket{int(p), false};
    return std::nullopt;
  }
  if (token.size() < 5 || token[0] != '<' || token[2] != ':' || token.back() != '>') {
    return std::nullopt;
  }
  if (token[1] != 'o' && token[1] != 'c') return std::nullopt;
  const std::string digits = token.substr(3, token.size() - 4);
  if (digits.empty() || digits.size() > 3) return std::nullopt;
  for (char c : digits) {
    if (c < '0' || c > '9') return std::nullopt;
  }
  if (digits.size() > 1 && digits[0] == '0') return std::nullopt;
  return Bracket{std::stoi(digits), token[1] == 'o'};
}

std::string generate_one(const DyckConfig& cfg, std::uint64_t seed, std::uint64_t index) {
  auto rng = make_rng(seed, "dyck", index);
  std::uniform_int_distribution<int> half(cfg.min_length / 2, cfg.max_length / 2);
  const int length = 2 * half(rng);
  std::bernoulli_distribution coin(cfg.open_prob);

  std::vector<int> depth(cfg.k, 0);
  int open_total = 0;
  std::vector<std::string> out;
  out.reserve(length);
  std::vector<int> candidates;
  for (int pos = 0; pos < length; ++pos) {
    const int remaining = length - pos;
    candidates.clear();
    for (int t = 0; t < cfg.k; ++t) {
      if (depth[t] < cfg.max_depth) candidates.push_back(t);
    }
    const bool can_open = open_total + 2 <= remaining && !candidates.empty();
    const bool opening = can_open && (open_total == 0 || coin(rng));
    if (!opening) {
      candidates.clear();
      for (int t = 0; t < cfg.k; ++t) {
        if (depth[t] > 0) candidates.push_back(t);
      }
    }
    const int t =
        candidates[std::uniform_int_distribution<std::size_t>(0, candidates.size() - 1)(rng)];
    depth[t] += opening ? 1 : -1;
    open_total += opening ? 1 : -1;
    out.push_back(opening ? open_token(t) : close_token(t));
  }
  return join(out, " ");
}

std::vector<std::string> generate_dyck(const DyckConfig& cfg, std::size_t n, std::uint64_t seed) {
  cfg.validate();
  std::vector<std::string> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_one(cfg, seed, i));
  return out;
}

bool validate_dyck(const std::string& s, const DyckConfig& cfg) {
  std::vector<int> depth(cfg.k, 0);
  for (const auto& tok : split_whitespace(s)) {
    auto b = parse_token(tok);
    if (!b || b->type >= cfg.k) return false;
    int& d = depth[b->type];
    if (b->open) {
      if (++d > cfg.max_depth) return false;
    } else if (--d < 0) {
      return false;
    }
  }
  for (int d : depth) {
    if (d != 0) return false;
  }
  return true;
}

}  // namespace posh::dyck
