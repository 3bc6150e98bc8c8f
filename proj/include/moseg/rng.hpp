#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace moseg {

// Deterministic random source. splitmix64 core with hand-rolled
// distributions so that results do not depend on the standard library's
// unspecified distribution algorithms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  float uniform(float lo, float hi) {
    return lo + static_cast<float>(uniform()) * (hi - lo);
  }

  // Inclusive on both ends.
  int uniform_int(int lo, int hi) {
    if (hi <= lo) return lo;
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(next_u64() % span);
  }

  float normal(float mean = 0.0f, float stddev = 1.0f) {
    if (have_spare_) {
      have_spare_ = false;
      return mean + stddev * spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 1e-300);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = static_cast<float>(r * std::sin(theta));
    have_spare_ = true;
    return mean + stddev * static_cast<float>(r * std::cos(theta));
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j =
          static_cast<std::size_t>(uniform_int(0, static_cast<int>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Child stream whose sequence is independent of how much this stream has
  // been consumed. Used to give each training stage / sequence its own seed.
  Rng fork(std::string_view tag) const {
    std::uint64_t h = 1469598103934665603ULL ^ state_;
    for (const char c : tag) {
      h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
      h *= 1099511628211ULL;
    }
    return Rng(h);
  }

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
  float spare_ = 0.0f;
  bool have_spare_ = false;
};

// Stable stage seed derived from a base seed and a label, e.g.
// derive_seed(seed, "bootstrap/round2/static"). Keeping stages on
// independent streams makes checkpoint-resume reproduce exactly.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view label) {
  std::uint64_t h = 1469598103934665603ULL ^ (base * 0x9e3779b97f4a7c15ULL);
  for (const char c : label) {
    h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace moseg
