#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace bilevel {

using Rng = std::mt19937_64;

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Seed of the named stream (name, a, b) under a master seed. Streams with
/// different names or indices are independent of each other and of order of use.
constexpr std::uint64_t derive_seed(std::uint64_t master, std::string_view name, std::uint64_t a = 0,
                                    std::uint64_t b = 0) {
  std::uint64_t h = splitmix64(master);
  for (char c : name) h = splitmix64(h ^ static_cast<unsigned char>(c));
  h = splitmix64(h ^ splitmix64(a + 0x632be59bd9b4e019ull));
  return splitmix64(h ^ splitmix64(b + 0x85157af5ull));
}

inline Rng make_rng(std::uint64_t master, std::string_view name, std::uint64_t a = 0, std::uint64_t b = 0) {
  return Rng(derive_seed(master, name, a, b));
}

/// Uniform integer in [0, n).
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return static_cast<std::size_t>(std::uniform_int_distribution<std::uint64_t>(0, n - 1)(rng));
}

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

}  // namespace bilevel
