#include <doctest.h>

#include <cmath>

#include "../support/gradient_suite.hpp"
#include "patchmoe/ops.hpp"
#include "patchmoe/rng.hpp"
#include "patchmoe/scaler.hpp"

using namespace patchmoe::f64;
using patchmoe::NumericError;
using patchmoe::ShapeError;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
  Tensor t(std::move(shape));
  for (real& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_SUITE("tensor_core") {
  TEST_CASE("tensor handles share storage, clone does not") {
    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor b = a;
    b[0] = 9;
    CHECK(a[0] == 9);
    Tensor c = a.clone();
    c[1] = 7;
    CHECK(a[1] == 2);
    Tensor v = a.reshape({4});
    CHECK(v.same_storage(a));
    CHECK_THROWS_AS(a.reshape({3}), ShapeError);
    CHECK_THROWS_AS(Tensor({2}, {1, 2, 3}), ShapeError);
  }

  TEST_CASE("matmul examples") {
    const Tensor eye({2, 2}, {1, 0, 0, 1}), m({2, 2}, {1, 2, 3, 4});
    const Tensor r = matmul(eye, m);
    for (std::size_t i = 0; i < 4; ++i) CHECK(r[i] == m[i]);
    CHECK(matmul(Tensor({1, 2}, {1, 2}), Tensor({2, 1}, {3, 4})).item() == 11);
    Rng rng(1);
    const Tensor z = matmul(Tensor({2, 3}), random_tensor({3, 2}, rng));
    for (real v : z.values()) CHECK(v == 0);
    CHECK_THROWS_AS(matmul(Tensor({2, 3}), Tensor({2, 3})), ShapeError);
  }

  TEST_CASE("softmax examples and row sums") {
    Tensor s = softmax(Tensor({2}, {0, 0}), 0);
    CHECK(s[0] == doctest::Approx(0.5));
    s = softmax(Tensor({2}, {0, std::log(3.0)}), 0);
    CHECK(s[0] == doctest::Approx(0.25));
    CHECK(s[1] == doctest::Approx(0.75));
    s = softmax(Tensor({2}, {1000, 0}), 0);
    CHECK(s[0] == doctest::Approx(1.0));
    CHECK(std::isfinite(s[1]));
    Rng rng(2);
    for (int rep = 0; rep < 50; ++rep) {
      const Tensor x = random_tensor({3, 7}, rng, -20, 20);
      const Tensor p = softmax(x, 1);
      for (std::size_t r = 0; r < 3; ++r) {
        double total = 0;
        for (std::size_t c = 0; c < 7; ++c) {
          CHECK(p[r * 7 + c] > 0);
          total += p[r * 7 + c];
        }
        CHECK(std::fabs(total - 1) <= 1e-6);
      }
    }
  }

  TEST_CASE("layer norm examples") {
    const Tensor one = Tensor::full({3}, 1), zero({3});
    const Tensor normalized = layer_norm(Tensor({3}, {4, 4, 4}), one, zero);
    for (real v : normalized.values()) CHECK(v == 0);
    const Tensor y = layer_norm(Tensor({2}, {1, 3}), Tensor::full({2}, 1), Tensor({2}), 0);
    CHECK(y[0] == doctest::Approx(-1));
    CHECK(y[1] == doctest::Approx(1));
    const Tensor bias({3}, {0.5, -1, 2});
    const Tensor g = layer_norm(Tensor({2, 3}, {1, 5, -2, 0, 3, 3}), Tensor({3}), bias);
    for (std::size_t i = 0; i < 6; ++i) CHECK(g[i] == bias[i % 3]);
  }

  TEST_CASE("activation values") {
    CHECK(activate(0.0, Activation::silu) == 0);
    CHECK(activate(-1.0, Activation::relu) == 0);
    CHECK(activate(1.0, Activation::silu) == doctest::Approx(1 / (1 + std::exp(-1.0))));
    CHECK(parse_activation("gelu") == Activation::gelu);
    CHECK_THROWS_AS(parse_activation("tanh"), patchmoe::UsageError);
  }

  TEST_CASE("min-max scaler examples") {
    const ScalerParams p = minmax_fit(Tensor({2, 2}, {0, 2, 1, 4}));
    CHECK(p.min == std::vector<real>{0, 2});
    CHECK(p.max == std::vector<real>{1, 4});
    const ScalerParams single = minmax_fit(Tensor({1, 3}, {1, 2, 3}));
    CHECK(single.min == single.max);
    CHECK(single.degenerate == std::vector<std::uint8_t>{1, 1, 1});
    const Tensor scaled = minmax_apply(single, Tensor({1, 3}, {5, 6, 7}));
    for (real v : scaled.values()) CHECK(v == 0);

    ScalerParams s02;
    s02.min = {0};
    s02.max = {2};
    s02.degenerate = {0};
    CHECK(minmax_apply(s02, Tensor({1}, {1})).item() == 0.5);

    Rng rng(3);
    const Tensor unit = random_tensor({6, 4}, rng, 0, 1);
    Tensor with_bounds = unit.clone();
    for (std::size_t j = 0; j < 4; ++j) {
      with_bounds[j] = 0;
      with_bounds[4 + j] = 1;
    }
    const Tensor same = minmax_apply(minmax_fit(with_bounds), with_bounds);
    for (std::size_t i = 0; i < same.size(); ++i) CHECK(same[i] == doctest::Approx(with_bounds[i]));

    for (int rep = 0; rep < 30; ++rep) {
      const Tensor x = random_tensor({5, 3}, rng, -4, 9);
      const ScalerParams q = minmax_fit(x);
      const Tensor back = minmax_invert(q, minmax_apply(q, x));
      for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::fabs(back[i] - x[i]) <= 1e-6);
    }
    CHECK_THROWS_AS(minmax_fit(Tensor({0, 3})), patchmoe::DataError);
  }

  TEST_CASE("cosine similarity") {
    const std::vector<real> a{1, 2, -1}, a2{2, 4, -2}, e0{1, 0, 0}, e1{0, 1, 0}, z{0, 0, 0};
    CHECK(cosine_similarity(a, a) == doctest::Approx(1));
    CHECK(cosine_similarity(e0, e1) == 0);
    CHECK(cosine_similarity(a, a2) == doctest::Approx(1));
    CHECK(cosine_similarity(a, z) == 0);
    Rng rng(4);
    for (int rep = 0; rep < 50; ++rep) {
      std::vector<real> x(5), y(5);
      for (std::size_t i = 0; i < 5; ++i) x[i] = rng.uniform(-1, 1);
      const double lambda = std::exp(rng.uniform(-5, 5));
      for (std::size_t i = 0; i < 5; ++i) y[i] = lambda * x[i];
      CHECK(std::fabs(cosine_similarity(x, y) - cosine_similarity(x, x)) <= 1e-6);
    }
  }

  TEST_CASE("rng streams are reproducible and forks are independent of parent position") {
    Rng a(123), b(123);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng c(5);
    const Rng f1 = c.fork(9);
    c.next_u64();
    Rng f2 = c.fork(9), f1c = f1;
    CHECK(f1c.next_u64() == f2.next_u64());
    CHECK(Rng(5).fork(1).next_u64() != Rng(5).fork(2).next_u64());
    Rng p(8);
    auto perm = p.permutation(10);
    std::sort(perm.begin(), perm.end());
    for (std::size_t i = 0; i < 10; ++i) CHECK(perm[i] == i);
  }

  TEST_CASE("check_finite reports the op") {
    Tensor t({2}, {1, std::nan("")});
    CHECK_THROWS_AS(check_finite(t, "test"), NumericError);
  }

  TEST_CASE("tape records only when an input requires a gradient") {
    Tensor a({2}, {1, 2}), b({2}, {3, 4});
    Tape tape;
    (void)add(a, b);
    CHECK(tape.size() == 0);
    a.set_requires_grad(true);
    Tensor s = sum(add(a, b));
    CHECK(tape.size() == 2);
    tape.backward(s);
    CHECK(a.grad()[0] == 1);
    CHECK_FALSE(b.has_grad());
    {
      NoGradScope off;
      CHECK(Tape::active() == nullptr);
    }
  }

  TEST_CASE("every op passes the finite-difference check") {
    for (const suite::GradResult& r : suite::op_gradients(4)) {
      INFO(r.name);
      CHECK(r.max_rel_error <= 1e-4);
      CHECK(r.checked > 0);
    }
  }

  TEST_CASE("dropout keeps the expected mass and is the identity at p=0") {
    Rng rng(6);
    const Tensor x = Tensor::full({10000}, 1);
    Rng m(1);
    const Tensor same = dropout(x, 0, m);
    for (std::size_t i = 0; i < 10; ++i) CHECK(same[i] == 1);
    const Tensor y = dropout(x, 0.25, rng);
    double total = 0;
    for (real v : y.values()) total += v;
    CHECK(total / 10000 == doctest::Approx(1).epsilon(0.05));
  }
}
