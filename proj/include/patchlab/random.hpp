#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace patchlab {

/// xoshiro256** generator seeded through splitmix64.
///
/// The stream is fully specified so other implementations can reproduce it:
///   state[i] = splitmix64(seed ^ (stream * 0xD1B54A32D192ED03)), i = 0..3
///   uniform()  = (next() >> 11) * 2^-53
///   normal()   = Box-Muller on (1 - uniform(), uniform()), both outputs used
///   below(n)   = Lemire multiply-shift with rejection
///   shuffle()  = Fisher-Yates from the back, j = below(i + 1)
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint64_t next();
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  std::uint64_t below(std::uint64_t n);

  template <typename T>
  void shuffle(std::span<T> values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(values[i - 1], values[j]);
    }
  }
  template <typename T>
  void shuffle(std::vector<T>& values) {
    shuffle(std::span<T>(values));
  }

 private:
  std::uint64_t state_[4];
  double spare_normal_ = 0.0;
  bool has_spare_ = false;
};

std::uint64_t splitmix64(std::uint64_t& state);

}  // namespace patchlab
