// Copyright 2026 The reformer-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string_view>

// Dense double-precision inner loops used by the tensor layer. Each kernel has
// a scalar reference implementation and an AVX2+FMA variant; the active table
// is chosen once at startup from CPUID (override with REFORMER_SIMD=scalar).
//
// All matrices are row-major and contiguous. The gemm variants accumulate into
// C when `accumulate` is true and overwrite it otherwise.

namespace reformer::kernels {

struct KernelTable {
  std::string_view name;

  // C[m x n] (+)= A[m x k] * B[k x n]
  void (*gemm_nn)(const double* a, const double* b, double* c, std::size_t m,
                  std::size_t k, std::size_t n, bool accumulate);
  // C[m x n] (+)= A[m x k] * B[n x k]^T
  void (*gemm_nt)(const double* a, const double* b, double* c, std::size_t m,
                  std::size_t k, std::size_t n, bool accumulate);
  // C[m x n] (+)= A[k x m]^T * B[k x n]
  void (*gemm_tn)(const double* a, const double* b, double* c, std::size_t m,
                  std::size_t k, std::size_t n, bool accumulate);

  double (*dot)(const double* a, const double* b, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  void (*add)(const double* a, const double* b, double* out, std::size_t n);
  void (*sub)(const double* a, const double* b, double* out, std::size_t n);
  void (*mul)(const double* a, const double* b, double* out, std::size_t n);
  void (*scale)(double alpha, const double* x, double* out, std::size_t n);
  double (*sum)(const double* x, std::size_t n);
};

const KernelTable& scalar_table();

// Returns nullptr when the binary was built without AVX2 support or the CPU
// lacks AVX2/FMA.
const KernelTable* avx2_table();

// Returns nullptr unless built for AArch64 with NEON.
const KernelTable* neon_table();

// The table used by every tensor op.
const KernelTable& active();

// Forces a table; intended for tests and benchmarking.
void set_active(const KernelTable& table);

}  // namespace reformer::kernels
