#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "patchmoe/kernels.hpp"

using namespace patchmoe::kernels;

namespace {

template <typename T>
std::vector<T> random_vec(std::size_t n, std::mt19937_64& gen) {
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<T> v(n);
  for (T& x : v) x = T(u(gen));
  return v;
}

// Textbook triple loop, independent of both variants.
template <typename T>
void naive_gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda,
                const T* b, std::size_t ldb, T* c, std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      long double s = 0;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = ta == Trans::no ? a[i * lda + p] : a[p * lda + i];
        const T bv = tb == Trans::no ? b[p * ldb + j] : b[j * ldb + p];
        s += static_cast<long double>(av) * bv;
      }
      c[i * ldc + j] += T(s);
    }
}

template <typename T>
void check_table(const KernelTable& table, double tol) {
  std::mt19937_64 gen(42);
  const Ops<T>& ops = table.ops<T>();
  for (std::size_t n : {0, 1, 3, 7, 8, 9, 16, 31, 64, 100}) {
    const auto x = random_vec<T>(n, gen), y = random_vec<T>(n, gen);
    long double ref = 0;
    for (std::size_t i = 0; i < n; ++i) ref += static_cast<long double>(x[i]) * y[i];
    CHECK(std::fabs(double(ops.dot(x.data(), y.data(), n)) - double(ref)) <= tol * (1 + n));

    auto z = y;
    ops.axpy(n, T(0.75), x.data(), z.data());
    for (std::size_t i = 0; i < n; ++i) CHECK(std::fabs(double(z[i]) - (double(y[i]) + 0.75 * double(x[i]))) <= tol);
  }
  for (Trans ta : {Trans::no, Trans::yes})
    for (Trans tb : {Trans::no, Trans::yes})
      for (auto [m, n, k] : std::vector<std::array<std::size_t, 3>>{{1, 1, 1}, {3, 5, 7}, {8, 8, 8}, {9, 17, 13},
                                                                    {16, 33, 4}, {2, 64, 40}}) {
        const std::size_t lda = ta == Trans::no ? k : m, ldb = tb == Trans::no ? n : k;
        const auto a = random_vec<T>(m * k, gen), b = random_vec<T>(k * n, gen);
        auto c = random_vec<T>(m * n, gen);
        auto ref = c;
        ops.gemm(ta, tb, m, n, k, a.data(), lda, b.data(), ldb, c.data(), n);
        naive_gemm(ta, tb, m, n, k, a.data(), lda, b.data(), ldb, ref.data(), n);
        for (std::size_t i = 0; i < m * n; ++i) CHECK(std::fabs(double(c[i]) - double(ref[i])) <= tol * (1 + k));
      }
}

}  // namespace

TEST_SUITE("kernels") {
  TEST_CASE("scalar kernels match a long-double reference") {
    check_table<float>(scalar_table(), 1e-6);
    check_table<double>(scalar_table(), 1e-14);
  }

  TEST_CASE("avx2 kernels match a long-double reference") {
    const KernelTable* avx = avx2_table();
    if (!avx) {
      MESSAGE("AVX2 unavailable on this CPU; skipped");
      return;
    }
    check_table<float>(*avx, 1e-6);
    check_table<double>(*avx, 1e-14);
  }

  TEST_CASE("avx2 and scalar variants agree on the same inputs") {
    const KernelTable* avx = avx2_table();
    if (!avx) return;
    std::mt19937_64 gen(7);
    for (int rep = 0; rep < 20; ++rep) {
      const std::size_t m = 1 + gen() % 20, n = 1 + gen() % 40, k = 1 + gen() % 50;
      for (Trans ta : {Trans::no, Trans::yes})
        for (Trans tb : {Trans::no, Trans::yes}) {
          const std::size_t lda = ta == Trans::no ? k : m, ldb = tb == Trans::no ? n : k;
          const auto a = random_vec<double>(m * k, gen), b = random_vec<double>(k * n, gen);
          std::vector<double> c1(m * n, 0.0), c2(m * n, 0.0);
          scalar_table().f64.gemm(ta, tb, m, n, k, a.data(), lda, b.data(), ldb, c1.data(), n);
          avx->f64.gemm(ta, tb, m, n, k, a.data(), lda, b.data(), ldb, c2.data(), n);
          for (std::size_t i = 0; i < c1.size(); ++i) CHECK(c1[i] == doctest::Approx(c2[i]).epsilon(1e-12));
        }
    }
  }

  TEST_CASE("select pins a variant by name") {
    const std::string before(active().name);
    CHECK(select("scalar"));
    CHECK(active().name == "scalar");
    CHECK_FALSE(select("neon"));
    CHECK(select(before));
  }
}
