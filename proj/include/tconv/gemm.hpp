#pragma once

#include <algorithm>
#include <cstddef>

namespace tconv {

// Row-major kernels. Every output element accumulates its products in
// ascending inner-index order, so results are reproducible bit for bit and
// match a naive triple loop with the same order.

// C[m x n] += A[m x k] * B[k x n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda,
             const T* b, std::size_t ldb, T* c, std::size_t ldc) {
  constexpr std::size_t kColBlock = 512;
  for (std::size_t j0 = 0; j0 < n; j0 += kColBlock) {
    const std::size_t j1 = std::min(n, j0 + kColBlock);
    for (std::size_t i = 0; i < m; ++i) {
      T* __restrict crow = c + i * ldc;
      const T* arow = a + i * lda;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = arow[p];
        const T* __restrict brow = b + p * ldb;
        for (std::size_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

// C[m x n] += A^T * B, with A stored [k x m] and B [k x n].
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda,
             const T* b, std::size_t ldb, T* c, std::size_t ldc) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * lda;
    const T* __restrict brow = b + p * ldb;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      T* __restrict crow = c + i * ldc;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// dst[cols x rows] = src[rows x cols]^T
template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  constexpr std::size_t kTile = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += kTile) {
    const std::size_t i1 = std::min(rows, i0 + kTile);
    for (std::size_t j0 = 0; j0 < cols; j0 += kTile) {
      const std::size_t j1 = std::min(cols, j0 + kTile);
      for (std::size_t i = i0; i < i1; ++i)
        for (std::size_t j = j0; j < j1; ++j) dst[j * rows + i] = src[i * cols + j];
    }
  }
}

}  // namespace tconv
