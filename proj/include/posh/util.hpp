#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace posh {

// Reads a whole file; transparently inflates gzip input.
std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view contents);

std::string to_lower(std::string_view s);
std::vector<std::string> split_whitespace(std::string_view s);
std::string join(const std::vector<std::string>& parts, std::string_view sep);
bool ends_with(std::string_view s, std::string_view suffix);

// Independent named RNG streams derived from one run seed.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream, std::uint64_t index = 0);
inline std::mt19937_64 make_rng(std::uint64_t seed, std::string_view stream,
                                std::uint64_t index = 0) {
  return std::mt19937_64(derive_seed(seed, stream, index));
}

// Hex SHA-256 digest.
std::string sha256_hex(std::string_view data);

}  // namespace posh
