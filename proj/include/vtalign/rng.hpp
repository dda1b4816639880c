#pragma once

// Seeded random source with hand-rolled transforms. mt19937_64 output is
// pinned by the standard; the distributions in <random> are not, so uniform
// and normal draws are derived here to keep datasets and checkpoints
// byte-identical across standard libraries.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "vtalign/tensor.hpp"

namespace vtalign {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Uniform integer in [0, n) by rejection.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::uniform_int: n must be positive");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = gen_();
    } while (x >= limit);
    return x % n;
  }

  // Standard normal via Box-Muller, one spare cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = uniform_int(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline Tensor random_uniform(Shape shape, double lo, double hi, Rng& rng,
                             bool requires_grad = false) {
  std::vector<double> data(numel(shape));
  for (auto& v : data) v = rng.uniform(lo, hi);
  return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

inline Tensor random_normal(Shape shape, double mean, double stddev, Rng& rng,
                            bool requires_grad = false) {
  std::vector<double> data(numel(shape));
  for (auto& v : data) v = mean + stddev * rng.normal();
  return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

}  // namespace vtalign
