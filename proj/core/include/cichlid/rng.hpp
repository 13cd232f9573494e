#pragma once

#include <cstdint>

namespace cichlid {

// Deterministic 64-bit generator. The default engine is xorshift64*; the
// LCG variant (Knuth MMIX constants) can be selected for comparison runs.
class Rng {
 public:
  enum class Kind : std::uint8_t { Xorshift, Lcg };

  explicit Rng(std::uint64_t seed, Kind kind = Kind::Xorshift)
      : state_(seed ? seed : 0x9e3779b97f4a7c15ull), kind_(kind) {}

  std::uint64_t next() {
    if (kind_ == Kind::Xorshift) {
      std::uint64_t x = state_;
      x ^= x >> 12;
      x ^= x << 25;
      x ^= x >> 27;
      state_ = x;
      return x * 0x2545f4914f6cdd1dull;
    }
    state_ = state_ * 6364136223846793005ull + 1442695040888963407ull;
    return state_;
  }

  // Uniform in [0, bound). bound must be nonzero.
  std::uint64_t below(std::uint64_t bound) { return next() % bound; }

  double unit() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  bool chance(double p) { return unit() < p; }

  Kind kind() const { return kind_; }

 private:
  std::uint64_t state_;
  Kind kind_;
};

}  // namespace cichlid
