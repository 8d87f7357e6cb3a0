// SPDX-License-Identifier: Apache-2.0
#pragma once

// Data-parallel inner loops used by every layer. Each kernel has a scalar
// reference implementation and, on x86-64, an AVX2+FMA variant. The active
// table is chosen once at startup from CPUID; REFUSION_SIMD=scalar forces
// the reference path.

#include <cstddef>
#include <string_view>

namespace refusion::simd {

struct KernelTable {
  std::string_view name;

  // y += a * x
  void (*axpy)(std::size_t n, double a, const double* x, double* y);
  // x *= a
  void (*scale)(std::size_t n, double a, double* x);
  // out = s * x + b
  void (*affine)(std::size_t n, double s, double b, const double* x, double* out);
  // out = a * b
  void (*mul)(std::size_t n, const double* a, const double* b, double* out);
  // out += a * b
  void (*mul_add)(std::size_t n, const double* a, const double* b, double* out);

  double (*dot)(std::size_t n, const double* x, const double* y);
  double (*sum)(std::size_t n, const double* x);
  double (*abs_diff_sum)(std::size_t n, const double* a, const double* b);
  double (*sq_diff_sum)(std::size_t n, const double* a, const double* b);

  // C[M x N] += A[M x K] * B[K x N]   (row-major, leading dimensions given)
  void (*gemm_nn)(int m, int n, int k, const double* a, int lda, const double* b, int ldb,
                  double* c, int ldc);
  // C[M x N] += A[M x K] * B[N x K]^T
  void (*gemm_nt)(int m, int n, int k, const double* a, int lda, const double* b, int ldb,
                  double* c, int ldc);
};

enum class Backend { scalar, avx2 };

const KernelTable& scalar_kernels();
/// nullptr when the binary was built without AVX2 support or the CPU lacks it.
const KernelTable* avx2_kernels();

/// Kernels used by the library. Thread-safe after first call.
const KernelTable& active();
/// Overrides the automatic choice; throws if the backend is unavailable.
void select(Backend b);
Backend active_backend();

/// RAII override for tests.
class ScopedBackend {
 public:
  explicit ScopedBackend(Backend b) : saved_(active_backend()) { select(b); }
  ~ScopedBackend() { select(saved_); }
  ScopedBackend(const ScopedBackend&) = delete;
  ScopedBackend& operator=(const ScopedBackend&) = delete;

 private:
  Backend saved_;
};

// C[M x N] += A^T * B with A stored K x M. Transposes A then uses gemm_nn.
void gemm_tn(int m, int n, int k, const double* a, int lda, const double* b, int ldb, double* c,
             int ldc);

}  // namespace refusion::simd
