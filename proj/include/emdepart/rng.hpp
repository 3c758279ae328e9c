#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "emdepart/tensor.hpp"

namespace emdepart {

// Deterministic random source. The engine (mt19937_64) has a fully specified
// sequence; the mappings below avoid std::*_distribution, whose output is
// implementation-defined and would break run-to-run reproducibility across
// standard libraries. Exact floating-point reproducibility still assumes one
// libm for log/cos in normal().
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller, cosine branch only, so the engine advances exactly two
  // steps per call and no spare value needs to live in checkpoints.
  double normal(double mean = 0.0, double sigma = 1.0) {
    double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
    double u2 = uniform();
    double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    return mean + sigma * z;
  }

  // Unbiased integer in [0, n) by rejection.
  std::size_t index(std::size_t n) {
    if (n == 0) throw DataError("Rng::index: n must be positive");
    const std::uint64_t un = n;
    const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % un + 1) % un;
    std::uint64_t x;
    do {
      x = eng_();
    } while (x > limit);
    return static_cast<std::size_t>(x % un);
  }

  // Fisher-Yates; std::shuffle is implementation-defined, this is not.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  std::string save_state() const {
    std::ostringstream os;
    os << eng_;
    return os.str();
  }

  void load_state(const std::string& s) {
    std::istringstream is(s);
    is >> eng_;
    if (is.fail()) throw DataError("Rng::load_state: malformed engine state");
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace emdepart
