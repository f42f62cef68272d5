#pragma once

#include <cstdint>
#include <random>

namespace cnftpr {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Independent deterministic engine for stream `k` of run seed `seed`.
inline std::mt19937_64 make_engine(uint64_t seed, uint64_t k) {
  return std::mt19937_64(splitmix64(splitmix64(seed) ^ splitmix64(k + 1)));
}

}  // namespace cnftpr
