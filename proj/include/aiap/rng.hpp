#pragma once

#include <cstdint>
#include <random>

#include "aiap/tensor.hpp"

namespace aiap {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Child-stream seed derivation; keeps every randomized stage a pure function
// of (master seed, coordinates).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                                 std::uint64_t c = 0) {
  std::uint64_t x = splitmix64(seed ^ 0x8f5c61c3u);
  x = splitmix64(x ^ splitmix64(a));
  x = splitmix64(x ^ splitmix64(b + 0x1234567u));
  x = splitmix64(x ^ splitmix64(c + 0x89abcdefu));
  return x;
}

// Seeded generator with hand-rolled distributions so sequences are identical
// across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t bits() { return eng_(); }

  // Uniform in [0, 1).
  double uniform01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Uniform integer in [0, n), unbiased via rejection.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw ValueError("uniform_int(0)");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = eng_();
    } while (x >= limit);
    return x % n;
  }

 private:
  std::mt19937_64 eng_;
};

template <typename Real>
struct CategoricalSample {
  int row = 0;
  int col = 0;
  TensorT<Real> prob;  // gradient-carrying entry probs[row, col]
};

// Draws a cell from a rank-2 probability field. The returned probability is
// the tape-linked tensor entry at the drawn index.
template <typename Real>
CategoricalSample<Real> categorical_sample(const TensorT<Real>& probs, Rng& rng) {
  if (probs.rank() != 2)
    throw ShapeError("categorical_sample expects rank-2 probs, got " + shape_str(probs.shape()));
  double total = 0.0;
  for (Real p : probs.values()) {
    if (!(p >= Real(0)))
      throw ValueError("categorical_sample: negative or non-finite probability");
    total += static_cast<double>(p);
  }
  if (std::abs(total - 1.0) > 1e-6)
    throw ValueError("categorical_sample: probabilities sum to " + std::to_string(total));

  const double u = rng.uniform01() * total;
  const std::int64_t n = probs.numel();
  double cum = 0.0;
  std::int64_t pick = -1;
  for (std::int64_t i = 0; i < n; ++i) {
    cum += static_cast<double>(probs.value(i));
    if (u < cum) {
      pick = i;
      break;
    }
  }
  if (pick < 0) {  // float tail: last cell with nonzero mass
    for (std::int64_t i = n - 1; i >= 0; --i)
      if (probs.value(i) > Real(0)) {
        pick = i;
        break;
      }
  }
  const int w = probs.shape()[1];
  CategoricalSample<Real> s;
  s.row = static_cast<int>(pick / w);
  s.col = static_cast<int>(pick % w);
  s.prob = at(probs, pick);
  return s;
}

}  // namespace aiap
