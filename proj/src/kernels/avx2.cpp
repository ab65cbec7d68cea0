#include "patchmoe/kernels.hpp"

#if defined(PATCHMOE_HAVE_AVX2_TU)

#include <immintrin.h>

#include <vector>

namespace patchmoe::kernels {
namespace {

struct F32x8 {
  using scalar = float;
  using reg = __m256;
  static constexpr std::size_t width = 8;
  static reg zero() { return _mm256_setzero_ps(); }
  static reg load(const float* p) { return _mm256_loadu_ps(p); }
  static void store(float* p, reg v) { _mm256_storeu_ps(p, v); }
  static reg splat(float v) { return _mm256_set1_ps(v); }
  static reg fma(reg a, reg b, reg c) { return _mm256_fmadd_ps(a, b, c); }
  static reg add(reg a, reg b) { return _mm256_add_ps(a, b); }
  static float hsum(reg v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    __m128 sh = _mm_movehdup_ps(lo);
    lo = _mm_add_ps(lo, sh);
    sh = _mm_movehl_ps(sh, lo);
    lo = _mm_add_ss(lo, sh);
    return _mm_cvtss_f32(lo);
  }
};

struct F64x4 {
  using scalar = double;
  using reg = __m256d;
  static constexpr std::size_t width = 4;
  static reg zero() { return _mm256_setzero_pd(); }
  static reg load(const double* p) { return _mm256_loadu_pd(p); }
  static void store(double* p, reg v) { _mm256_storeu_pd(p, v); }
  static reg splat(double v) { return _mm256_set1_pd(v); }
  static reg fma(reg a, reg b, reg c) { return _mm256_fmadd_pd(a, b, c); }
  static reg add(reg a, reg b) { return _mm256_add_pd(a, b); }
  static double hsum(reg v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d sh = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
  }
};

template <class V>
typename V::scalar dot_simd(const typename V::scalar* x, const typename V::scalar* y,
                            std::size_t n) {
  constexpr std::size_t W = V::width;
  auto a0 = V::zero(), a1 = V::zero(), a2 = V::zero(), a3 = V::zero();
  std::size_t i = 0;
  for (; i + 4 * W <= n; i += 4 * W) {
    a0 = V::fma(V::load(x + i), V::load(y + i), a0);
    a1 = V::fma(V::load(x + i + W), V::load(y + i + W), a1);
    a2 = V::fma(V::load(x + i + 2 * W), V::load(y + i + 2 * W), a2);
    a3 = V::fma(V::load(x + i + 3 * W), V::load(y + i + 3 * W), a3);
  }
  for (; i + W <= n; i += W) a0 = V::fma(V::load(x + i), V::load(y + i), a0);
  typename V::scalar acc = V::hsum(V::add(V::add(a0, a1), V::add(a2, a3)));
  for (; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

template <class V>
void axpy_simd(std::size_t n, typename V::scalar a, const typename V::scalar* x,
               typename V::scalar* y) {
  constexpr std::size_t W = V::width;
  const auto av = V::splat(a);
  std::size_t i = 0;
  for (; i + W <= n; i += W) V::store(y + i, V::fma(av, V::load(x + i), V::load(y + i)));
  for (; i < n; ++i) y[i] += a * x[i];
}

// C += A * B, all row-major and untransposed. Register tile: 4 rows x 2 vectors.
template <class V>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const typename V::scalar* a,
             std::size_t lda, const typename V::scalar* b, std::size_t ldb,
             typename V::scalar* c, std::size_t ldc) {
  using T = typename V::scalar;
  constexpr std::size_t W = V::width;
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const T* a0 = a + i * lda;
    const T* a1 = a0 + lda;
    const T* a2 = a1 + lda;
    const T* a3 = a2 + lda;
    T* c0 = c + i * ldc;
    T* c1 = c0 + ldc;
    T* c2 = c1 + ldc;
    T* c3 = c2 + ldc;
    std::size_t j = 0;
    for (; j + 2 * W <= n; j += 2 * W) {
      auto r00 = V::load(c0 + j), r01 = V::load(c0 + j + W);
      auto r10 = V::load(c1 + j), r11 = V::load(c1 + j + W);
      auto r20 = V::load(c2 + j), r21 = V::load(c2 + j + W);
      auto r30 = V::load(c3 + j), r31 = V::load(c3 + j + W);
      for (std::size_t p = 0; p < k; ++p) {
        const T* bp = b + p * ldb + j;
        const auto b0 = V::load(bp);
        const auto b1 = V::load(bp + W);
        auto s = V::splat(a0[p]);
        r00 = V::fma(s, b0, r00);
        r01 = V::fma(s, b1, r01);
        s = V::splat(a1[p]);
        r10 = V::fma(s, b0, r10);
        r11 = V::fma(s, b1, r11);
        s = V::splat(a2[p]);
        r20 = V::fma(s, b0, r20);
        r21 = V::fma(s, b1, r21);
        s = V::splat(a3[p]);
        r30 = V::fma(s, b0, r30);
        r31 = V::fma(s, b1, r31);
      }
      V::store(c0 + j, r00);
      V::store(c0 + j + W, r01);
      V::store(c1 + j, r10);
      V::store(c1 + j + W, r11);
      V::store(c2 + j, r20);
      V::store(c2 + j + W, r21);
      V::store(c3 + j, r30);
      V::store(c3 + j + W, r31);
    }
    for (; j + W <= n; j += W) {
      auto r0 = V::load(c0 + j), r1 = V::load(c1 + j);
      auto r2 = V::load(c2 + j), r3 = V::load(c3 + j);
      for (std::size_t p = 0; p < k; ++p) {
        const auto bv = V::load(b + p * ldb + j);
        r0 = V::fma(V::splat(a0[p]), bv, r0);
        r1 = V::fma(V::splat(a1[p]), bv, r1);
        r2 = V::fma(V::splat(a2[p]), bv, r2);
        r3 = V::fma(V::splat(a3[p]), bv, r3);
      }
      V::store(c0 + j, r0);
      V::store(c1 + j, r1);
      V::store(c2 + j, r2);
      V::store(c3 + j, r3);
    }
    for (; j < n; ++j) {
      T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
      for (std::size_t p = 0; p < k; ++p) {
        const T bv = b[p * ldb + j];
        s0 += a0[p] * bv;
        s1 += a1[p] * bv;
        s2 += a2[p] * bv;
        s3 += a3[p] * bv;
      }
      c0[j] += s0;
      c1[j] += s1;
      c2[j] += s2;
      c3[j] += s3;
    }
  }
  for (; i < m; ++i) {
    const T* ai = a + i * lda;
    T* ci = c + i * ldc;
    std::size_t j = 0;
    for (; j + W <= n; j += W) {
      auto r = V::load(ci + j);
      for (std::size_t p = 0; p < k; ++p) r = V::fma(V::splat(ai[p]), V::load(b + p * ldb + j), r);
      V::store(ci + j, r);
    }
    for (; j < n; ++j) {
      T s = 0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * b[p * ldb + j];
      ci[j] += s;
    }
  }
}

template <typename T>
void transpose_into(std::vector<T>& dst, const T* src, std::size_t rows, std::size_t cols,
                    std::size_t ld) {
  // src is rows x cols (stride ld); dst becomes cols x rows, contiguous.
  dst.resize(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t q = 0; q < cols; ++q) dst[q * rows + r] = src[r * ld + q];
}

template <class V>
void gemm_simd(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
               const typename V::scalar* a, std::size_t lda, const typename V::scalar* b,
               std::size_t ldb, typename V::scalar* c, std::size_t ldc) {
  using T = typename V::scalar;
  if (m == 0 || n == 0 || k == 0) return;
  thread_local std::vector<T> pack_a;
  thread_local std::vector<T> pack_b;
  if (ta == Trans::yes) {
    transpose_into(pack_a, a, k, m, lda);
    a = pack_a.data();
    lda = k;
  }
  if (tb == Trans::yes) {
    transpose_into(pack_b, b, n, k, ldb);
    b = pack_b.data();
    ldb = n;
  }
  gemm_nn<V>(m, n, k, a, lda, b, ldb, c, ldc);
}

bool cpu_has_avx2() {
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
}

}  // namespace

const KernelTable* avx2_table() {
  static const KernelTable table{
      "avx2",
      {&dot_simd<F32x8>, &axpy_simd<F32x8>, &gemm_simd<F32x8>},
      {&dot_simd<F64x4>, &axpy_simd<F64x4>, &gemm_simd<F64x4>},
  };
  static const bool supported = cpu_has_avx2();
  return supported ? &table : nullptr;
}

}  // namespace patchmoe::kernels

#else

namespace patchmoe::kernels {
const KernelTable* avx2_table() { return nullptr; }
}  // namespace patchmoe::kernels

#endif
