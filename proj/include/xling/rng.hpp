#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace xling {

// splitmix64; used to expand seeds and to derive independent streams.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Combine a seed with stream tags. derive(seed, a, b) != derive(seed, b, a).
inline uint64_t derive_seed(uint64_t seed, uint64_t tag) {
  return splitmix64(seed ^ splitmix64(tag + 0x632be59bd9b4e019ULL));
}
inline uint64_t derive_seed(uint64_t seed, uint64_t tag1, uint64_t tag2) {
  return derive_seed(derive_seed(seed, tag1), tag2);
}

// xoshiro256** by Blackman & Vigna. Chosen over std engines because the
// state is four words, serializes trivially, and the output sequence is
// identical on every platform (std distributions are not portable).
class Rng {
 public:
  Rng() : Rng(0) {}
  explicit Rng(uint64_t seed) {
    uint64_t x = seed;
    for (auto& w : state_) {
      x = splitmix64(x);
      w = x;
    }
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform double in [0, 1) with 53 bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform double in the open interval (0, 1); never returns exactly 0.
  double next_open_double() {
    double u;
    do {
      u = next_double();
    } while (u <= 0.0);
    return u;
  }

  // Uniform integer in [0, n) by rejection; n > 0.
  uint64_t next_below(uint64_t n) {
    const uint64_t threshold = (~n + 1) % n;  // 2^64 mod n
    uint64_t r;
    do {
      r = next_u64();
    } while (r < threshold);
    return r % n;
  }

  // Standard normal via Box-Muller; no cached spare so the draw count per
  // call is fixed (two uniforms), which keeps replay alignment simple.
  double next_gaussian() {
    const double u1 = next_open_double();
    const double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  std::array<uint64_t, 4> state() const { return state_; }
  void set_state(const std::array<uint64_t, 4>& s) { state_ = s; }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::array<uint64_t, 4> state_{};
};

// Counter-based uniform stream for dropout. Each mask element i is a pure
// function of (seed, counter + i), so a forward pass can be replayed exactly
// by restoring the counter (needed when the same loss is re-evaluated at
// perturbed parameters).
struct CounterStream {
  uint64_t seed = 0;
  uint64_t counter = 0;

  // Value for offset i without advancing the stream.
  double at(uint64_t i) const {
    return static_cast<double>(splitmix64(seed ^ splitmix64(counter + i)) >> 11) * 0x1.0p-53;
  }
  void advance(uint64_t n) { counter += n; }
};

}  // namespace xling
