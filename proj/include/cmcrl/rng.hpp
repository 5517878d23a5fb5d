#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace cmcrl {

// xoshiro256++ with splitmix64 seeding. The generator algorithm is fixed for
// the whole repo so that a given seed produces the same stream on every
// platform; std::random distributions are implementation-defined and are not
// used anywhere.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();

  // Uniform double in [0, 1), 53 mantissa bits.
  double uniform();
  // Uniform double in [lo, hi).
  double uniform(double lo, double hi);
  // Uniform integer in the inclusive range [lo, hi], rejection sampled so the
  // distribution is exact and the draw count is part of the stream contract.
  int64_t uniform_int(int64_t lo, int64_t hi);
  // Standard normal via Box-Muller; consumes exactly two u64 draws.
  double normal();
  double normal(double mean, double stddev);

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      int64_t j = uniform_int(0, i);
      std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
    }
  }

  std::array<uint64_t, 4> state() const { return s_; }
  void set_state(const std::array<uint64_t, 4>& s) { s_ = s; }

  // Mixes a base seed with stream coordinates (epoch, sample index, ...) into
  // an independent per-sample seed. Used to derive worker-parallel streams
  // that do not depend on iteration order.
  static uint64_t derive(uint64_t base, uint64_t a, uint64_t b = 0,
                         uint64_t c = 0);

 private:
  std::array<uint64_t, 4> s_{};
};

uint64_t splitmix64(uint64_t& state);

}  // namespace cmcrl
