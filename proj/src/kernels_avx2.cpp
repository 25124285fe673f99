// Compiled with -mavx2 -mfma; only reached through dispatch when CPUID reports both.
#include "stemfold/kernels.hpp"

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>

namespace stemfold::kernels::avx2 {
namespace {

// R rows x 8 columns register block of C, accumulating over the full k extent.
template <int R>
inline void block_r8(std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  __m256d acc0[R];
  __m256d acc1[R];
  for (int r = 0; r < R; ++r) {
    acc0[r] = _mm256_setzero_pd();
    acc1[r] = _mm256_setzero_pd();
  }
  for (std::size_t p = 0; p < k; ++p) {
    const __m256d b0 = _mm256_loadu_pd(b + p * n);
    const __m256d b1 = _mm256_loadu_pd(b + p * n + 4);
    for (int r = 0; r < R; ++r) {
      const __m256d av = _mm256_broadcast_sd(a + r * k + p);
      acc0[r] = _mm256_fmadd_pd(av, b0, acc0[r]);
      acc1[r] = _mm256_fmadd_pd(av, b1, acc1[r]);
    }
  }
  for (int r = 0; r < R; ++r) {
    double* crow = c + r * n;
    _mm256_storeu_pd(crow, _mm256_add_pd(_mm256_loadu_pd(crow), acc0[r]));
    _mm256_storeu_pd(crow + 4, _mm256_add_pd(_mm256_loadu_pd(crow + 4), acc1[r]));
  }
}

template <int R>
inline void block_r4(std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  __m256d acc[R];
  for (int r = 0; r < R; ++r) acc[r] = _mm256_setzero_pd();
  for (std::size_t p = 0; p < k; ++p) {
    const __m256d b0 = _mm256_loadu_pd(b + p * n);
    for (int r = 0; r < R; ++r) {
      acc[r] = _mm256_fmadd_pd(_mm256_broadcast_sd(a + r * k + p), b0, acc[r]);
    }
  }
  for (int r = 0; r < R; ++r) {
    double* crow = c + r * n;
    _mm256_storeu_pd(crow, _mm256_add_pd(_mm256_loadu_pd(crow), acc[r]));
  }
}

template <int R>
inline void block_r1(std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  double acc[R] = {};
  for (std::size_t p = 0; p < k; ++p) {
    const double bv = b[p * n];
    for (int r = 0; r < R; ++r) acc[r] += a[r * k + p] * bv;
  }
  for (int r = 0; r < R; ++r) c[r * n] += acc[r];
}

template <int R>
void row_panel(std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8) block_r8<R>(n, k, a, b + j, c + j);
  for (; j + 4 <= n; j += 4) block_r4<R>(n, k, a, b + j, c + j);
  for (; j < n; ++j) block_r1<R>(n, k, a, b + j, c + j);
}

}  // namespace

void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
              double* c) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) row_panel<4>(n, k, a + i * k, b, c + i * n);
  switch (m - i) {
    case 3: row_panel<3>(n, k, a + i * k, b, c + i * n); break;
    case 2: row_panel<2>(n, k, a + i * k, b, c + i * n); break;
    case 1: row_panel<1>(n, k, a + i * k, b, c + i * n); break;
    default: break;
  }
}

double dot(std::span<const double> x, std::span<const double> y) {
  const std::size_t n = x.size();
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x.data() + i), _mm256_loadu_pd(y.data() + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(x.data() + i + 4), _mm256_loadu_pd(y.data() + i + 4),
                           acc1);
  }
  acc0 = _mm256_add_pd(acc0, acc1);
  alignas(32) double lanes[4];
  _mm256_store_pd(lanes, acc0);
  double s = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
  for (; i < n; ++i) s += x[i] * y[i];
  return s;
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  const std::size_t n = x.size();
  const __m256d av = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y.data() + i,
                     _mm256_fmadd_pd(av, _mm256_loadu_pd(x.data() + i),
                                     _mm256_loadu_pd(y.data() + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace stemfold::kernels::avx2

#else

// Non-x86 or compiler without AVX2 support: forward to the reference so the
// symbols exist; dispatch never selects them because isa_supported() is false.
namespace stemfold::kernels::avx2 {
void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
              double* c) {
  scalar::gemm_acc(m, n, k, a, b, c);
}
double dot(std::span<const double> x, std::span<const double> y) { return scalar::dot(x, y); }
void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  scalar::axpy(alpha, x, y);
}
}  // namespace stemfold::kernels::avx2

#endif
