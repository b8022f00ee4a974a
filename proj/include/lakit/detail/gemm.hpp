#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

// Single-threaded matrix kernels with a fixed accumulation order. Every
// output element starts from its old value (or zero) and adds the products
// over the inner index in ascending order, so results are bit-reproducible
// run to run and independent of the blocking below.
namespace lakit::detail {

// C[m x n] (+)= A * B, A(i, p) = a[i * ars + p * acs], B row-major [k x n].
// Register tiles of R rows x W columns keep C out of memory across the k loop.
template <class T>
void gemm_strided(std::size_t m, std::size_t k, std::size_t n, const T* a, std::size_t ars, std::size_t acs,
                  const T* b, T* c, bool accumulate) {
  constexpr std::size_t R = 4;
  constexpr std::size_t W = 128 / sizeof(T);
  auto tail_rows = [&](std::size_t i0, std::size_t i1, std::size_t j0) {
    for (std::size_t i = i0; i < i1; ++i) {
      T* cr = c + i * n;
      if (!accumulate) std::fill(cr + j0, cr + n, T{0});
      for (std::size_t p = 0; p < k; ++p) {
        const T av = a[i * ars + p * acs];
        const T* bp = b + p * n;
        for (std::size_t j = j0; j < n; ++j) cr[j] += av * bp[j];
      }
    }
  };
  std::size_t i = 0;
  for (; i + R <= m; i += R) {
    std::size_t j = 0;
    for (; j + W <= n; j += W) {
      T acc[R][W];
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t jj = 0; jj < W; ++jj) acc[r][jj] = accumulate ? c[(i + r) * n + j + jj] : T{0};
      for (std::size_t p = 0; p < k; ++p) {
        const T* bp = b + p * n + j;
        for (std::size_t r = 0; r < R; ++r) {
          const T av = a[(i + r) * ars + p * acs];
          for (std::size_t jj = 0; jj < W; ++jj) acc[r][jj] += av * bp[jj];
        }
      }
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t jj = 0; jj < W; ++jj) c[(i + r) * n + j + jj] = acc[r][jj];
    }
    if (j < n) tail_rows(i, i + R, j);
  }
  tail_rows(i, m, 0);
}

// C[m x n] (+)= A[m x k] * B[k x n]
template <class T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate) {
  gemm_strided(m, k, n, a, k, 1, b, c, accumulate);
}

// C[m x n] (+)= A^T * B where A is stored [k x m] and B is [k x n].
template <class T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate) {
  gemm_strided(m, k, n, a, 1, m, b, c, accumulate);
}

template <class T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  constexpr std::size_t B = 16;
  for (std::size_t r0 = 0; r0 < rows; r0 += B)
    for (std::size_t c0 = 0; c0 < cols; c0 += B) {
      const std::size_t r1 = std::min(rows, r0 + B), c1 = std::min(cols, c0 + B);
      for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t c = c0; c < c1; ++c) dst[c * rows + r] = src[r * cols + c];
    }
}

// C[m x n] (+)= A[m x k] * B^T where B is stored [n x k].
template <class T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate,
             std::vector<T>& scratch) {
  scratch.resize(k * n);
  transpose(n, k, b, scratch.data());
  gemm_nn(m, k, n, a, scratch.data(), c, accumulate);
}

}  // namespace lakit::detail
