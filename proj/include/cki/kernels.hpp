#pragma once

#include <cstddef>
#include <string>

namespace cki::kernels {

/// Dispatch table for the dense double-precision inner loops. All heavy
/// arithmetic in the project funnels through these entries so that the
/// scalar reference path and the SIMD path stay interchangeable.
///
/// Matrix arguments are row-major and dense (leading dimension == column
/// count). `accumulate == false` overwrites C, otherwise C += A*B.
struct Ops {
  const char* name;

  double (*dot)(const double* a, const double* b, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // x *= alpha
  void (*scal)(double alpha, double* x, std::size_t n);
  void (*vadd)(const double* a, const double* b, double* out, std::size_t n);
  void (*vsub)(const double* a, const double* b, double* out, std::size_t n);
  void (*vmul)(const double* a, const double* b, double* out, std::size_t n);
  double (*vsum)(const double* a, std::size_t n);
  double (*vmax)(const double* a, std::size_t n);

  // C[m x n] = A[m x k] * B[k x n]
  void (*gemm)(std::size_t m, std::size_t n, std::size_t k, const double* A,
               const double* B, double* C, bool accumulate);
  // C[m x n] = A^T * B with A stored [k x m]
  void (*gemm_tn)(std::size_t m, std::size_t n, std::size_t k, const double* A,
                  const double* B, double* C, bool accumulate);
  // C[m x n] = A * B^T with B stored [n x k]
  void (*gemm_nt)(std::size_t m, std::size_t n, std::size_t k, const double* A,
                  const double* B, double* C, bool accumulate);
};

extern const Ops scalar_ops;
#if defined(__x86_64__) || defined(_M_X64)
extern const Ops avx2_ops;
#endif

bool avx2_supported();

/// Active backend. Defaults to the best supported lane; the
/// CKI_KERNEL_BACKEND environment variable ("scalar", "avx2", "auto")
/// overrides the automatic pick.
const Ops& ops();

/// Force a backend by name ("scalar", "avx2", "auto"). Throws on an
/// unknown name or an unsupported lane.
void set_backend(const std::string& name);

std::string backend_name();

}  // namespace cki::kernels
