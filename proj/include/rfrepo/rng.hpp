#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace rfrepo {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Deterministic substream derivation: the engine produced for a given
// (seed, path) never depends on thread scheduling or call order, which is
// what makes fits and simulations reproducible across thread counts.
inline Rng substream(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  std::uint64_t state = seed;
  std::uint64_t h = splitmix64(state);
  for (std::uint64_t p : path) {
    state ^= p + 0x9e3779b97f4a7c15ULL + (state << 6) + (state >> 2);
    h ^= splitmix64(state);
  }
  return Rng(h);
}

// Stream tags so unrelated substreams of one seed never collide.
namespace stream_tag {
inline constexpr std::uint64_t tree = 0x7472656531ULL;
inline constexpr std::uint64_t bootstrap_se = 0x62736531ULL;
inline constexpr std::uint64_t importance = 0x696d7031ULL;
inline constexpr std::uint64_t train = 0x7472616eULL;
inline constexpr std::uint64_t test = 0x74657374ULL;
inline constexpr std::uint64_t impute = 0x696d7075ULL;
inline constexpr std::uint64_t censoring = 0x63656e73ULL;
inline constexpr std::uint64_t forest_fit = 0x666f7265ULL;
}  // namespace stream_tag

}  // namespace rfrepo
