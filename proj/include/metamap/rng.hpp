#pragma once

#include <cstdint>
#include <random>

namespace metamap {

// splitmix64; used to derive independent child seeds from (seed, index) pairs
// so streams can be restarted at any element without replaying the prefix.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t seed, uint64_t index) {
  return splitmix64(seed ^ splitmix64(index + 0x51ed2701a9e3c4d5ULL));
}

inline std::mt19937_64 make_engine(uint64_t seed) { return std::mt19937_64(seed); }

inline double uniform_real(std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  return dist(rng);
}

inline double normal_real(std::mt19937_64& rng, double mean, double stddev) {
  std::normal_distribution<double> dist(mean, stddev);
  return dist(rng);
}

inline int64_t uniform_int(std::mt19937_64& rng, int64_t lo, int64_t hi) {
  std::uniform_int_distribution<int64_t> dist(lo, hi);
  return dist(rng);
}

}  // namespace metamap
