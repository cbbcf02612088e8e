#pragma once

#include <cstddef>
#include <random>

#include "tconv/tensor.hpp"

namespace tconv {

using Rng = std::mt19937_64;

template <typename T = double>
Tensor4<T> random_tensor(Shape4 s, Rng& rng, T lo = T{-1}, T hi = T{1}) {
  std::uniform_real_distribution<T> dist(lo, hi);
  Tensor4<T> t(s);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

// Uniform integer in [lo, hi].
inline std::size_t uniform_index(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

}  // namespace tconv
