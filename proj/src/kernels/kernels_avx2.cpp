#if defined(__x86_64__) || defined(_M_X64)

#include "cki/kernels.hpp"

#include <immintrin.h>

#include <algorithm>
#include <cstring>

namespace cki::kernels {
namespace {

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d swapped = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, swapped));
}

double a_dot(const double* a, const double* b, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc);
  }
  double r = hsum(acc);
  for (; i < n; ++i) r += a[i] * b[i];
  return r;
}

void a_axpy(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d vy = _mm256_loadu_pd(y + i);
    vy = _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), vy);
    _mm256_storeu_pd(y + i, vy);
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void a_scal(double alpha, double* x, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(x + i, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
  }
  for (; i < n; ++i) x[i] *= alpha;
}

void a_vadd(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i,
                     _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void a_vsub(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i,
                     _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] - b[i];
}

void a_vmul(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i,
                     _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

double a_vsum(const double* a, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) acc = _mm256_add_pd(acc, _mm256_loadu_pd(a + i));
  double r = hsum(acc);
  for (; i < n; ++i) r += a[i];
  return r;
}

double a_vmax(const double* a, std::size_t n) {
  if (n < 8) {
    double m = a[0];
    for (std::size_t i = 1; i < n; ++i) m = std::max(m, a[i]);
    return m;
  }
  __m256d vm = _mm256_loadu_pd(a);
  std::size_t i = 4;
  for (; i + 4 <= n; i += 4) vm = _mm256_max_pd(vm, _mm256_loadu_pd(a + i));
  alignas(32) double tmp[4];
  _mm256_store_pd(tmp, vm);
  double m = std::max(std::max(tmp[0], tmp[1]), std::max(tmp[2], tmp[3]));
  for (; i < n; ++i) m = std::max(m, a[i]);
  return m;
}

// Same ikj traversal as the scalar lane; two k-steps fused per pass to keep
// the FMA ports busy without exotic blocking (matrices here are small and
// L2-resident).
void a_gemm(std::size_t m, std::size_t n, std::size_t k, const double* A,
            const double* B, double* C, bool accumulate) {
  if (!accumulate) std::memset(C, 0, m * n * sizeof(double));
  for (std::size_t i = 0; i < m; ++i) {
    double* c = C + i * n;
    const double* arow = A + i * k;
    std::size_t kk = 0;
    for (; kk + 2 <= k; kk += 2) {
      const __m256d a0 = _mm256_set1_pd(arow[kk]);
      const __m256d a1 = _mm256_set1_pd(arow[kk + 1]);
      const double* b0 = B + kk * n;
      const double* b1 = b0 + n;
      std::size_t j = 0;
      for (; j + 4 <= n; j += 4) {
        __m256d vc = _mm256_loadu_pd(c + j);
        vc = _mm256_fmadd_pd(a0, _mm256_loadu_pd(b0 + j), vc);
        vc = _mm256_fmadd_pd(a1, _mm256_loadu_pd(b1 + j), vc);
        _mm256_storeu_pd(c + j, vc);
      }
      for (; j < n; ++j) c[j] += arow[kk] * b0[j] + arow[kk + 1] * b1[j];
    }
    for (; kk < k; ++kk) a_axpy(arow[kk], B + kk * n, c, n);
  }
}

void a_gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* A,
               const double* B, double* C, bool accumulate) {
  if (!accumulate) std::memset(C, 0, m * n * sizeof(double));
  for (std::size_t kk = 0; kk < k; ++kk) {
    const double* arow = A + kk * m;
    const double* brow = B + kk * n;
    for (std::size_t i = 0; i < m; ++i) {
      if (arow[i] == 0.0) continue;
      a_axpy(arow[i], brow, C + i * n, n);
    }
  }
}

void a_gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* A,
               const double* B, double* C, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = A + i * k;
    double* c = C + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = a_dot(arow, B + j * k, k);
      c[j] = accumulate ? c[j] + d : d;
    }
  }
}

}  // namespace

const Ops avx2_ops = {
    "avx2", a_dot,  a_axpy, a_scal,    a_vadd,    a_vsub,
    a_vmul, a_vsum, a_vmax, a_gemm, a_gemm_tn, a_gemm_nt,
};

}  // namespace cki::kernels

#endif  // x86_64
