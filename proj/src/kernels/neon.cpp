// Copyright 2026 The reformer-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

// AArch64 Advanced SIMD variants. NEON is part of the AArch64 base ISA, so
// no runtime feature check is needed beyond building for that target.

#include "reformer/kernels.hpp"

#if defined(REFORMER_HAVE_NEON)

#include <arm_neon.h>

namespace reformer::kernels {
namespace {

template <typename CoefFn>
inline void row_update(CoefFn a_at, const double* b, double* crow,
                       std::size_t k, std::size_t n, bool accumulate) {
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8) {
    float64x2_t c0 = accumulate ? vld1q_f64(crow + j) : vdupq_n_f64(0.0);
    float64x2_t c1 = accumulate ? vld1q_f64(crow + j + 2) : vdupq_n_f64(0.0);
    float64x2_t c2 = accumulate ? vld1q_f64(crow + j + 4) : vdupq_n_f64(0.0);
    float64x2_t c3 = accumulate ? vld1q_f64(crow + j + 6) : vdupq_n_f64(0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const float64x2_t av = vdupq_n_f64(a_at(p));
      const double* brow = b + p * n + j;
      c0 = vfmaq_f64(c0, av, vld1q_f64(brow));
      c1 = vfmaq_f64(c1, av, vld1q_f64(brow + 2));
      c2 = vfmaq_f64(c2, av, vld1q_f64(brow + 4));
      c3 = vfmaq_f64(c3, av, vld1q_f64(brow + 6));
    }
    vst1q_f64(crow + j, c0);
    vst1q_f64(crow + j + 2, c1);
    vst1q_f64(crow + j + 4, c2);
    vst1q_f64(crow + j + 6, c3);
  }
  for (; j + 2 <= n; j += 2) {
    float64x2_t c0 = accumulate ? vld1q_f64(crow + j) : vdupq_n_f64(0.0);
    for (std::size_t p = 0; p < k; ++p) {
      c0 = vfmaq_f64(c0, vdupq_n_f64(a_at(p)), vld1q_f64(b + p * n + j));
    }
    vst1q_f64(crow + j, c0);
  }
  for (; j < n; ++j) {
    double acc = accumulate ? crow[j] : 0.0;
    for (std::size_t p = 0; p < k; ++p) acc += a_at(p) * b[p * n + j];
    crow[j] = acc;
  }
}

void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    row_update([arow](std::size_t p) { return arow[p]; }, b, c + i * n, k, n,
               accumulate);
  }
}

double dot(const double* a, const double* b, std::size_t n) {
  float64x2_t acc0 = vdupq_n_f64(0.0);
  float64x2_t acc1 = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc0 = vfmaq_f64(acc0, vld1q_f64(a + i), vld1q_f64(b + i));
    acc1 = vfmaq_f64(acc1, vld1q_f64(a + i + 2), vld1q_f64(b + i + 2));
  }
  for (; i + 2 <= n; i += 2) {
    acc0 = vfmaq_f64(acc0, vld1q_f64(a + i), vld1q_f64(b + i));
  }
  double acc = vaddvq_f64(vaddq_f64(acc0, acc1));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double v = dot(arow, b + j * k, k);
      c[i * n + j] = accumulate ? c[i * n + j] + v : v;
    }
  }
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    row_update([a, m, i](std::size_t p) { return a[p * m + i]; }, b, c + i * n,
               k, n, accumulate);
  }
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  const float64x2_t av = vdupq_n_f64(alpha);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    vst1q_f64(y + i, vfmaq_f64(vld1q_f64(y + i), av, vld1q_f64(x + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

template <typename VecOp, typename ScalarOp>
inline void binary(const double* a, const double* b, double* out,
                   std::size_t n, VecOp vop, ScalarOp sop) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    vst1q_f64(out + i, vop(vld1q_f64(a + i), vld1q_f64(b + i)));
  }
  for (; i < n; ++i) out[i] = sop(a[i], b[i]);
}

void add(const double* a, const double* b, double* out, std::size_t n) {
  binary(
      a, b, out, n, [](float64x2_t x, float64x2_t y) { return vaddq_f64(x, y); },
      [](double x, double y) { return x + y; });
}

void sub(const double* a, const double* b, double* out, std::size_t n) {
  binary(
      a, b, out, n, [](float64x2_t x, float64x2_t y) { return vsubq_f64(x, y); },
      [](double x, double y) { return x - y; });
}

void mul(const double* a, const double* b, double* out, std::size_t n) {
  binary(
      a, b, out, n, [](float64x2_t x, float64x2_t y) { return vmulq_f64(x, y); },
      [](double x, double y) { return x * y; });
}

void scale(double alpha, const double* x, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(out + i, vmulq_n_f64(vld1q_f64(x + i), alpha));
  for (; i < n; ++i) out[i] = alpha * x[i];
}

double sum(const double* x, std::size_t n) {
  float64x2_t acc = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) acc = vaddq_f64(acc, vld1q_f64(x + i));
  double s = vaddvq_f64(acc);
  for (; i < n; ++i) s += x[i];
  return s;
}

const KernelTable kNeonTable{"neon", gemm_nn, gemm_nt, gemm_tn, dot, axpy,
                             add,    sub,     mul,     scale,   sum};

}  // namespace

const KernelTable* neon_table() { return &kNeonTable; }

}  // namespace reformer::kernels

#else

namespace reformer::kernels {

const KernelTable* neon_table() { return nullptr; }

}  // namespace reformer::kernels

#endif  // REFORMER_HAVE_NEON
