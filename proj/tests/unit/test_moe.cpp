#include <doctest.h>

#include <cmath>
#include <sstream>

#include "../support/criteria_f64.hpp"
#include "patchmoe/moe.hpp"

using namespace patchmoe::f64;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
  Tensor t(std::move(shape));
  for (real& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

ScalerParams unit_scaler(std::size_t d) {
  ScalerParams s;
  s.min.assign(d, 0);
  s.max.assign(d, 1);
  s.degenerate.assign(d, 0);
  return s;
}

ExpertMLP random_expert(std::size_t d, std::size_t de, Rng& r) {
  ExpertMLP m;
  m.norm_gain = Tensor::full({d}, 1);
  m.norm_bias = Tensor({d});
  m.w1 = random_tensor({d, de}, r);
  m.b1 = random_tensor({de}, r);
  m.w2 = random_tensor({de, d}, r);
  m.b2 = random_tensor({d}, r);
  m.gamma = Tensor({1}, {0.3});
  m.xcorr = random_tensor({d}, r);
  for (std::size_t i = 0; i < de; ++i) m.indices.push_back(i);
  return m;
}

}  // namespace

TEST_SUITE("moe_layer") {
  TEST_CASE("routing logits: self-similarity, single expert, orthogonal centroids") {
    Router r;
    r.scaler = unit_scaler(3);
    r.temperature = 0.25;
    r.centroids = Tensor({2, 3}, {0.2, 0.5, 0.9, 0.9, 0.1, 0.1});
    Tensor cap({1, 1, 2, 3});
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t j = 0; j < 3; ++j) cap[n * 3 + j] = r.centroids[j];
    const Tensor l = routing_logits(cap, r);
    CHECK(l.shape() == Shape{1, 1, 2});
    CHECK(l[0] == doctest::Approx(4.0));
    CHECK(l[0] > l[1]);

    Router one = r;
    one.centroids = Tensor({1, 3}, {0.3, 0.3, 0.3});
    Rng rng(1);
    const Tensor any = random_tensor({2, 3, 2, 3}, rng, 0, 1);
    const Tensor l1 = routing_logits(any, one);
    CHECK(l1.shape() == Shape{2, 3, 1});
    for (std::uint32_t i : select_experts(l1, 1).indices) CHECK(i == 0);

    Router ortho = r;
    ortho.temperature = 0.5;
    ortho.centroids = Tensor({2, 3}, {1, 0, 0, 0, 1, 0});
    const Tensor aligned({1, 1, 1, 3}, {0.7, 0, 0});
    const Tensor lo = routing_logits(aligned, ortho);
    CHECK(lo[0] == doctest::Approx(2.0));
    CHECK(lo[1] == doctest::Approx(0.0));
  }

  TEST_CASE("select_experts examples") {
    const ExpertSelection s = select_experts(Tensor({1, 3}, {2, 1, 1}), 1);
    CHECK(s.indices == std::vector<std::uint32_t>{0});
    CHECK(s.gates[0] == 1.0);
    CHECK(select_experts(Tensor({1, 2}, {1, 1}), 1).indices == std::vector<std::uint32_t>{0});
    const ExpertSelection t = select_experts(Tensor({1, 3}, {1, 1, 0.5}), 2);
    CHECK(t.indices == std::vector<std::uint32_t>{0, 1});

    Rng rng(2);
    const Tensor logits = random_tensor({4, 5}, rng, -2, 2);
    const ExpertSelection all = select_experts(logits, 5);
    const Tensor p = softmax(logits, 1);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 5; ++j)
        CHECK(all.gates[i * 5 + j] == doctest::Approx(p[i * 5 + all.indices[i * 5 + j]]).epsilon(1e-12));
    const ExpertSelection raw = select_experts(logits, 2, false);
    for (std::size_t i = 0; i < 4; ++i) CHECK(raw.gates[i * 2] == p[i * 5 + raw.indices[i * 2]]);
  }

  TEST_CASE("expert blend endpoints and a hand-computed expert") {
    Rng rng(3);
    ExpertMLP e = random_expert(4, 3, rng);
    e.gamma[0] = 1;
    const Tensor z = random_tensor({5, 4}, rng);
    const Tensor y = e.forward_normalized(z);
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == e.xcorr[i % 4]);

    ExpertMLP h;
    h.activation = Activation::relu;
    h.w1 = Tensor({2, 2}, {0, -1, 1, 1});     // dense columns 1 and 2 of [[1,0,-1,2],[0,1,1,-1]]
    h.b1 = Tensor({2}, {0, 0.5});
    h.w2 = Tensor({2, 2}, {0, 1, 1, 1});      // dense rows 1 and 2 of [[1,0],[0,1],[1,1],[-1,2]]
    h.b2 = Tensor({2}, {0.1, -0.1});
    h.gamma = Tensor({1}, {0.25});
    h.xcorr = Tensor({2}, {1, 1});
    h.indices = {1, 2};
    const Tensor out = h.forward_normalized(Tensor({1, 2}, {1, 2}));
    CHECK(out[0] == doctest::Approx(1.45));
    CHECK(out[1] == doctest::Approx(2.8));
    CHECK(h.mlp_parameter_count() == 4 + 2 + 4 + 2 + 2 + 1);
  }

  TEST_CASE("top-2 with identical experts and equal gates reproduces the expert") {
    Rng rng(4);
    MoEBlock b;
    b.router.centroids = Tensor({2, 3}, {0.5, 0.5, 0.5, 0.5, 0.5, 0.5});
    b.router.scaler = unit_scaler(3);
    b.router.top_k = 2;
    b.router.norm_gain = Tensor::full({3}, 1);
    b.router.norm_bias = Tensor({3});
    const ExpertMLP e = random_expert(3, 4, rng);
    b.experts = {e, e};
    const Tensor x = random_tensor({2, 3, 2, 3}, rng);
    const MoEOutput out = moe_forward(x, b);
    for (real g : out.record.gates) CHECK(g == doctest::Approx(0.5));
    const Tensor direct = expert_forward(x.reshape({12, 3}), e);
    for (std::size_t i = 0; i < direct.size(); ++i) CHECK(out.output[i] == doctest::Approx(direct[i]).epsilon(1e-12));
  }

  TEST_CASE("dispatch statistics") {
    RoutingRecord r;
    r.expert_counts = {10, 0, 0};
    UtilizationReport u = dispatch_stats(r);
    CHECK(u.entropy == 0);
    CHECK(u.load == std::vector<double>{1, 0, 0});
    r.expert_counts = {5, 5, 5, 5};
    u = dispatch_stats(r);
    CHECK(u.entropy == doctest::Approx(std::log(4.0)));
    CHECK(u.max_load_ratio == doctest::Approx(1.0));
    r.expert_counts = {2, 1, 1};
    u = dispatch_stats(r);
    CHECK(u.load[0] == 0.5);
    CHECK(u.load[1] == 0.25);
    CHECK(u.entropy == doctest::Approx(-(0.5 * std::log(0.5) + 0.5 * std::log(0.25))));
    CHECK(u.assignments == 4);
  }

  TEST_CASE("routing CSV lists one row per patch and rank") {
    Rng rng(5);
    MoEBlock b;
    b.router.centroids = random_tensor({3, 2}, rng, 0, 1);
    b.router.scaler = unit_scaler(2);
    b.router.top_k = 2;
    b.router.norm_gain = Tensor::full({2}, 1);
    b.router.norm_bias = Tensor({2});
    for (int e = 0; e < 3; ++e) b.experts.push_back(random_expert(2, 2, rng));
    const MoEOutput out = moe_forward(random_tensor({1, 4, 1, 2}, rng), b);
    std::ostringstream os;
    write_routing_csv(os, out.record);
    std::istringstream is(os.str());
    std::string line;
    std::getline(is, line);
    CHECK(line == "batch,patch,rank,expert,gate");
    std::size_t rows = 0;
    while (std::getline(is, line)) ++rows;
    CHECK(rows == 8);
  }

  TEST_CASE("routing invariants on random configurations") {
    for (const suite::Outcome& o :
         {suite::pixel_coherence(10), suite::gate_normalization(10, 1e-6), suite::rescaling_invariance(10),
          suite::permutation_equivariance(10), suite::dense_equivalence(5, 1e-6)}) {
      INFO(o.detail);
      CHECK(o.pass);
    }
  }
}
