#include "patchmoe/kernels.hpp"

namespace patchmoe::kernels {
namespace {

template <typename T>
T dot_scalar(const T* x, const T* y, std::size_t n) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

template <typename T>
void axpy_scalar(std::size_t n, T a, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

// Reference GEMM: plain triple loop, one accumulator per output element,
// inner index in increasing order.
template <typename T>
void gemm_scalar(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
                 const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c,
                 std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = ta == Trans::no ? a[i * lda + p] : a[p * lda + i];
        const T bv = tb == Trans::no ? b[p * ldb + j] : b[j * ldb + p];
        acc += av * bv;
      }
      c[i * ldc + j] += acc;
    }
  }
}

}  // namespace

const KernelTable& scalar_table() {
  static const KernelTable table{
      "scalar",
      {&dot_scalar<float>, &axpy_scalar<float>, &gemm_scalar<float>},
      {&dot_scalar<double>, &axpy_scalar<double>, &gemm_scalar<double>},
  };
  return table;
}

}  // namespace patchmoe::kernels
