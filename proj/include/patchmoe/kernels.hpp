#pragma once

// Dense arithmetic kernels behind every tensor op.
//
// Each variant (scalar reference, AVX2+FMA) fills a KernelTable; the active
// table is chosen once per process from CPU features, and can be pinned with
// PATCHMOE_KERNELS=scalar|avx2. Results between variants agree to rounding
// but are not bit-identical (FMA contraction, summation order); within one
// variant every kernel has a fixed reduction order.

#include <cstddef>
#include <span>
#include <string_view>

namespace patchmoe::kernels {

enum class Trans { no, yes };

template <typename T>
struct Ops {
  /// sum_i x[i] * y[i]
  T (*dot)(const T* x, const T* y, std::size_t n);
  /// y[i] += a * x[i]
  void (*axpy)(std::size_t n, T a, const T* x, T* y);
  /// C[m x n] += op(A) * op(B), with op(A) of shape m x k and op(B) k x n.
  /// Leading dimensions are row strides of the stored (untransposed) arrays.
  void (*gemm)(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
               const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c,
               std::size_t ldc);
};

struct KernelTable {
  std::string_view name;
  Ops<float> f32;
  Ops<double> f64;

  template <typename T>
  const Ops<T>& ops() const {
    if constexpr (sizeof(T) == sizeof(float))
      return f32;
    else
      return f64;
  }
};

const KernelTable& scalar_table();

/// nullptr when the AVX2 translation unit was not built or the CPU lacks
/// AVX2/FMA.
const KernelTable* avx2_table();

/// Table used by the tensor ops. Selected on first call.
const KernelTable& active();

/// Force a variant by name ("scalar", "avx2"). Returns false if unavailable.
bool select(std::string_view name);

template <typename T>
inline T dot(std::span<const T> x, std::span<const T> y) {
  return active().ops<T>().dot(x.data(), y.data(), x.size());
}

template <typename T>
inline void axpy(T a, std::span<const T> x, std::span<T> y) {
  active().ops<T>().axpy(x.size(), a, x.data(), y.data());
}

template <typename T>
inline void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
                 const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c,
                 std::size_t ldc) {
  active().ops<T>().gemm(ta, tb, m, n, k, a, lda, b, ldb, c, ldc);
}

}  // namespace patchmoe::kernels
