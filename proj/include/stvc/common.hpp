#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace stvc {

// Caller broke an API precondition (bad shape, bad argument, misuse).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// Input bytes or data failed validation (corrupt stream, bad header, ...).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A value that must be finite was NaN or Inf.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void contract(bool ok, const std::string& msg) {
  if (!ok) throw ContractError(msg);
}

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// Global toggle for per-op NaN/Inf screens. On by default; hot loops may
// disable it once their numerics are trusted.
inline bool& finite_checks() {
  static bool on = true;
  return on;
}

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Stable seed derivation so every consumer of randomness (init, noise, data)
// draws from its own stream keyed by (seed, stream, counter).
inline uint64_t derive_seed(uint64_t seed, uint64_t stream, uint64_t counter = 0) {
  return splitmix64(splitmix64(seed ^ 0x517cc1b727220a95ull) ^ splitmix64(stream * 0x2545f4914f6cdd1dull + counter));
}

inline uint64_t fnv1a64(const char* s) {
  uint64_t h = 1469598103934665603ull;
  for (; *s; ++s) h = (h ^ (uint64_t)(unsigned char)*s) * 1099511628211ull;
  return h;
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  double normal(double mean = 0.0, double stdev = 1.0) {
    std::normal_distribution<double> d(mean, stdev);
    return d(gen_);
  }

  double uniform(double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(gen_);
  }

  int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive bounds
    std::uniform_int_distribution<int64_t> d(lo, hi);
    return d(gen_);
  }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
};

}  // namespace stvc
