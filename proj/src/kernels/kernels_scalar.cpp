#include "cki/kernels.hpp"

#include <algorithm>
#include <cstring>

namespace cki::kernels {
namespace {

double s_dot(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void s_axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void s_scal(double alpha, double* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] *= alpha;
}

void s_vadd(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void s_vsub(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

void s_vmul(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

double s_vsum(const double* a, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i];
  return acc;
}

double s_vmax(const double* a, std::size_t n) {
  double m = a[0];
  for (std::size_t i = 1; i < n; ++i) m = std::max(m, a[i]);
  return m;
}

// ikj order: row of C accumulates axpy contributions from rows of B. The
// AVX2 lane uses the same order so the two backends round identically per
// term and differ only in summation grouping.
void s_gemm(std::size_t m, std::size_t n, std::size_t k, const double* A,
            const double* B, double* C, bool accumulate) {
  if (!accumulate) std::memset(C, 0, m * n * sizeof(double));
  for (std::size_t i = 0; i < m; ++i) {
    double* c = C + i * n;
    const double* arow = A + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double a = arow[kk];
      if (a == 0.0) continue;
      const double* brow = B + kk * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += a * brow[j];
    }
  }
}

void s_gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* A,
               const double* B, double* C, bool accumulate) {
  if (!accumulate) std::memset(C, 0, m * n * sizeof(double));
  for (std::size_t kk = 0; kk < k; ++kk) {
    const double* arow = A + kk * m;
    const double* brow = B + kk * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double a = arow[i];
      if (a == 0.0) continue;
      double* c = C + i * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += a * brow[j];
    }
  }
}

void s_gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* A,
               const double* B, double* C, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = A + i * k;
    double* c = C + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = s_dot(arow, B + j * k, k);
      c[j] = accumulate ? c[j] + d : d;
    }
  }
}

}  // namespace

const Ops scalar_ops = {
    "scalar", s_dot,  s_axpy, s_scal,    s_vadd,    s_vsub,
    s_vmul,   s_vsum, s_vmax, s_gemm, s_gemm_tn, s_gemm_nt,
};

}  // namespace cki::kernels
