#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "tconv/random.hpp"
#include "tconv/tensor.hpp"

namespace tconv::testing {

inline Tensor4<double> random_tensor(Shape4 s, std::mt19937_64& rng, double lo = -1.0,
                                     double hi = 1.0) {
  return tconv::random_tensor<double>(s, rng, lo, hi);
}

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return uniform_index(rng, lo, hi);
}

// ||a - b|| / max(||a||, ||b||), zero when both vanish.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::sqrt(std::max(na, nb));
  return scale == 0 ? 0 : std::sqrt(diff) / scale;
}

inline double dot(const Tensor4<double>& a, const Tensor4<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace tconv::testing
