// SPDX-License-Identifier: Apache-2.0
#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "refusion/simd/kernels.hpp"

namespace refusion::simd {

#if defined(REFUSION_HAVE_AVX2)
const KernelTable& avx2_table();
#endif

namespace {

bool cpu_has_avx2() {
#if defined(REFUSION_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Backend initial_backend() {
  if (const char* env = std::getenv("REFUSION_SIMD")) {
    if (std::string_view(env) == "scalar") return Backend::scalar;
  }
  return cpu_has_avx2() ? Backend::avx2 : Backend::scalar;
}

std::atomic<const KernelTable*>& current() {
  static std::atomic<const KernelTable*> table{
      initial_backend() == Backend::avx2 ? avx2_kernels() : &scalar_kernels()};
  return table;
}

}  // namespace

const KernelTable* avx2_kernels() {
#if defined(REFUSION_HAVE_AVX2)
  static const bool ok = cpu_has_avx2();
  return ok ? &avx2_table() : nullptr;
#else
  return nullptr;
#endif
}

const KernelTable& active() { return *current().load(std::memory_order_acquire); }

void select(Backend b) {
  if (b == Backend::scalar) {
    current().store(&scalar_kernels(), std::memory_order_release);
    return;
  }
  const KernelTable* t = avx2_kernels();
  if (t == nullptr) throw std::runtime_error("AVX2 kernels unavailable on this CPU/build");
  current().store(t, std::memory_order_release);
}

Backend active_backend() {
  return current().load(std::memory_order_acquire) == &scalar_kernels() ? Backend::scalar
                                                                        : Backend::avx2;
}

void gemm_tn(int m, int n, int k, const double* a, int lda, const double* b, int ldb, double* c,
             int ldc) {
  // A is K x M; build A^T (M x K) so the register-tiled gemm_nn applies.
  std::vector<double> at(static_cast<std::size_t>(m) * k);
  for (int p = 0; p < k; ++p) {
    for (int i = 0; i < m; ++i) {
      at[static_cast<std::size_t>(i) * k + p] = a[static_cast<std::size_t>(p) * lda + i];
    }
  }
  active().gemm_nn(m, n, k, at.data(), k, b, ldb, c, ldc);
}

}  // namespace refusion::simd
