#pragma once

// Dense kernels used by the model and the aggregation path. Every kernel has
// a serial reference version and an OpenMP version; both compute each output
// element with the same operation order, so their results are bitwise equal
// regardless of thread count.

#include <cstddef>
#include <span>

#include <omp.h>

namespace fedpull::kernels {

namespace serial {

/// y[n x m] = x[n x k] * w[k x m]   (overwrites y)
template <typename T>
void matmul(const T* x, const T* w, T* y, std::size_t n, std::size_t k,
            std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    T* yr = y + i * m;
    for (std::size_t j = 0; j < m; ++j) yr[j] = T(0);
    const T* xr = x + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T a = xr[p];
      const T* wr = w + p * m;
      for (std::size_t j = 0; j < m; ++j) yr[j] += a * wr[j];
    }
  }
}

/// y[n x m] = x[n x k] * w^T, with w stored [m x k]   (overwrites y)
template <typename T>
void matmul_bt(const T* x, const T* w, T* y, std::size_t n, std::size_t k,
               std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const T* xr = x + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const T* wr = w + j * k;
      T s = T(0);
      for (std::size_t p = 0; p < k; ++p) s += xr[p] * wr[p];
      y[i * m + j] = s;
    }
  }
}

/// g[k x m] += x^T * dy, with x [n x k] and dy [n x m]
template <typename T>
void matmul_at_acc(const T* x, const T* dy, T* g, std::size_t n,
                   std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const T* xr = x + i * k;
    const T* dr = dy + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const T a = xr[p];
      T* gr = g + p * m;
      for (std::size_t j = 0; j < m; ++j) gr[j] += a * dr[j];
    }
  }
}

/// out[e] = sum_c weights[c] * inputs[c][e], accumulated in double in
/// ascending c order, then rounded to float.
void weighted_sum(std::span<const std::span<const float>> inputs,
                  std::span<const double> weights, std::span<float> out);

}  // namespace serial

namespace omp {

// One contiguous block of rows per thread; rows are independent, so the
// result matches the serial kernel bit for bit.
template <typename F>
void for_row_blocks(std::size_t n, F&& f) {
#pragma omp parallel
  {
    const auto t = static_cast<std::size_t>(omp_get_thread_num());
    const auto nt = static_cast<std::size_t>(omp_get_num_threads());
    const std::size_t lo = n * t / nt, hi = n * (t + 1) / nt;
    if (lo < hi) f(lo, hi);
  }
}

template <typename T>
void matmul(const T* x, const T* w, T* y, std::size_t n, std::size_t k,
            std::size_t m) {
  for_row_blocks(n, [&](std::size_t lo, std::size_t hi) {
    serial::matmul(x + lo * k, w, y + lo * m, hi - lo, k, m);
  });
}

template <typename T>
void matmul_bt(const T* x, const T* w, T* y, std::size_t n, std::size_t k,
               std::size_t m) {
  for_row_blocks(n, [&](std::size_t lo, std::size_t hi) {
    serial::matmul_bt(x + lo * k, w, y + lo * m, hi - lo, k, m);
  });
}

void weighted_sum(std::span<const std::span<const float>> inputs,
                  std::span<const double> weights, std::span<float> out);

}  // namespace omp

}  // namespace fedpull::kernels
