#include "criteria_f64.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "../oracles/algorithm1_reference.hpp"
#include "../oracles/ward_reference.hpp"
#include "patchmoe/affinity.hpp"
#include "patchmoe/backbone.hpp"
#include "patchmoe/expert_init.hpp"
#include "patchmoe/moe.hpp"
#include "patchmoe/router_init.hpp"
#include "patchmoe/scaler.hpp"

namespace suite {
using namespace patchmoe::f64;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
  Tensor t(std::move(shape));
  for (real& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

std::string fmt(const char* f, double a, double b = 0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.image_size = 16;
  cfg.patch_size = 8;
  cfg.pixels_per_patch = 4;
  cfg.dim = 16;
  cfg.ff_dim = 32;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.num_classes = 5;
  cfg.dropout = 0;
  cfg.moe_layers = {1};
  cfg.experts = 1;
  return cfg;
}

// A block with random parameters; the router input statistics come from x.
MoEBlock random_block(const Tensor& x, std::size_t E, std::size_t top_k, Rng& r) {
  const std::size_t d = x.dim(3), de = 1 + r.index(2 * d);
  MoEBlock block;
  block.router.centroids = random_tensor({E, d}, r, 0, 1);
  block.router.temperature = r.uniform(0.1, 2.0);
  block.router.top_k = top_k;
  block.router.norm_gain = random_tensor({d}, r, 0.5, 1.5);
  block.router.norm_bias = random_tensor({d}, r);
  // Fitted on its own sample, as a built router is: fitting on a one-patch
  // batch would make every channel degenerate and every similarity tie.
  const Tensor fit_sample = random_tensor({4, 4, x.dim(2), d}, r, -2, 2);
  block.router.scaler = minmax_fit(mean_axis(moe_router_input(fit_sample, block), 2));
  for (std::size_t e = 0; e < E; ++e) {
    ExpertMLP m;
    m.norm_gain = random_tensor({d}, r, 0.5, 1.5);
    m.norm_bias = random_tensor({d}, r);
    m.w1 = random_tensor({d, de}, r);
    m.b1 = random_tensor({de}, r);
    m.w2 = random_tensor({de, d}, r);
    m.b2 = random_tensor({d}, r);
    m.gamma = random_tensor({1}, r, 0, 1);
    m.xcorr = random_tensor({d}, r);
    m.indices.resize(de);
    std::iota(m.indices.begin(), m.indices.end(), std::size_t{0});
    block.experts.push_back(m);
  }
  return block;
}

struct RandomSetup {
  Tensor x;
  MoEBlock block;
};

RandomSetup random_setup(std::uint64_t seed) {
  Rng r(seed);
  const std::size_t B = 1 + r.index(3), P = 1 + r.index(6), N = 1 + r.index(4), d = 2 + r.index(7);
  const std::size_t E = 1 + r.index(6), k = 1 + r.index(E);
  Tensor x = random_tensor({B, P, N, d}, r, -2, 2);
  return {x, random_block(x, E, k, r)};
}

}  // namespace

Outcome dense_equivalence(std::size_t inputs, double tolerance) {
  NoGradScope no_grad;
  double worst = 0;
  for (std::size_t s = 0; s < inputs; ++s) {
    const ModelConfig cfg = small_config();
    Model dense(cfg, 40 + s % 5);
    Model moe = dense.clone();
    Rng r(900 + s);
    const Tensor tokens =
        random_tensor({2, cfg.patches(cfg.image_size), cfg.pixels_per_patch, cfg.token_features()}, r, -0.5, 0.5);
    Router router;
    router.centroids = random_tensor({1, cfg.dim}, r, 0, 1);
    router.scaler = minmax_fit(mean_axis(capture_pre_mlp(dense, tokens, 1), 2));
    router.norm_gain = dense.layers[1].mlp.norm.gain.clone();
    router.norm_bias = dense.layers[1].mlp.norm.bias.clone();
    moefy_layer(moe, 1, router, MoefyOptions{1, 0, 0.0});
    const Tensor a = dense.forward(tokens).logits, b = moe.forward(tokens).logits;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::fabs(double(a[i]) - double(b[i])));
  }
  return {worst <= tolerance, fmt("max |dense - moe| = %.3g over %.0f inputs", worst, double(inputs))};
}

Outcome algorithm1_against_oracle(std::size_t instances) {
  std::size_t mismatches = 0, ties = 0;
  for (std::size_t s = 0; s < instances; ++s) {
    Rng r(3000 + s);
    const std::size_t N = 1 + r.index(32), px = 1 + r.index(4), d = 1 + r.index(6);
    const std::size_t K = 1 + r.index(std::min<std::size_t>(8, N)), T = r.index(6);
    // Every other instance draws from a small integer grid so equal scores
    // and duplicate rows are common.
    const bool grid = s % 2 == 0;
    std::vector<oracle::Matrix<double>> xc(N, oracle::Matrix<double>(px, std::vector<double>(d)));
    Tensor t({N, px, d});
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t p = 0; p < px; ++p)
        for (std::size_t j = 0; j < d; ++j) {
          const double v = grid ? double(r.index(4)) : r.uniform(-1, 1);
          xc[i][p][j] = v;
          t[(i * px + p) * d + j] = v;
        }
    if (grid && N > 1 && r.bernoulli(0.5)) {
      // Exact duplicate patch.
      xc[N - 1] = xc[0];
      for (std::size_t k = 0; k < px * d; ++k) t[(N - 1) * px * d + k] = t[k];
    }
    const auto ref = oracle::algorithm1(xc, K, T);
    const PatchSelection got = select_representative_patches(t, K, T);
    bool same = ref.indices == got.indices;
    for (std::size_t k = 0; same && k < K; ++k)
      for (std::size_t j = 0; j < d; ++j) same = same && ref.rows[k][j] == got.rows[k * d + j];
    if (!same) ++mismatches;
    if (grid) ++ties;
  }
  return {mismatches == 0, fmt("%.0f mismatches over %.0f instances", double(mismatches), double(instances)) +
                               fmt(" (%.0f tie-prone)", double(ties))};
}

Outcome ward_against_oracle(std::size_t seeds) {
  std::size_t mismatches = 0, instances = 0;
  double worst_distance = 0;
  for (std::size_t s = 0; s < seeds; ++s)
    for (std::size_t n = 2; n <= 8; ++n) {
      Rng r(5000 + s * 16 + n);
      const std::size_t d = 1 + r.index(4);
      const bool grid = s % 2 == 0;
      std::vector<std::vector<double>> pts(n, std::vector<double>(d));
      Tensor t({n, d});
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) t[i * d + j] = pts[i][j] = grid ? double(r.index(3)) : r.uniform(-1, 1);
      const auto ref = oracle::ward_bruteforce(pts, kWardTieTolerance);
      const ClusterTree tree = ward_cluster(t, 1);
      ++instances;
      bool same = ref.size() == tree.merges.size();
      for (std::size_t m = 0; same && m < ref.size(); ++m) {
        const Merge& g = tree.merges[m];
        same = g.a == ref[m].a && g.b == ref[m].b && g.size == ref[m].size;
        const double err = std::fabs(g.distance - ref[m].distance) / std::max(1.0, ref[m].distance);
        worst_distance = std::max(worst_distance, err);
        same = same && err <= 1e-9;
      }
      if (!same) ++mismatches;
    }
  return {mismatches == 0, fmt("%.0f mismatches over %.0f trees", double(mismatches), double(instances)) +
                               fmt(", worst distance error %.2g", worst_distance)};
}

Outcome pixel_coherence(std::size_t configs) {
  NoGradScope no_grad;
  double worst = 0;
  for (std::size_t s = 0; s < configs; ++s) {
    const RandomSetup su = random_setup(7000 + s);
    const MoEOutput out = moe_forward(su.x, su.block);
    const std::size_t B = su.x.dim(0), P = su.x.dim(1), N = su.x.dim(2), d = su.x.dim(3), k = su.block.router.top_k;
    // Recompute each pixel alone with its patch's experts and gates.
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t p = 0; p < P; ++p)
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t row = (b * P + p) * N + n, patch = b * P + p;
          const Tensor pixel = index_select_rows(su.x.reshape({B * P * N, d}), std::vector<std::size_t>{row});
          std::vector<double> expect(d, 0.0);
          for (std::size_t j = 0; j < k; ++j) {
            const Tensor y = expert_forward(pixel, su.block.experts[out.record.indices[patch * k + j]]);
            for (std::size_t c = 0; c < d; ++c) expect[c] += double(out.record.gates[patch * k + j]) * y[c];
          }
          for (std::size_t c = 0; c < d; ++c)
            worst = std::max(worst, std::fabs(expect[c] - out.output[row * d + c]));
        }
  }
  return {worst <= 1e-9, fmt("max per-pixel deviation %.3g over %.0f configs", worst, double(configs))};
}

Outcome gate_normalization(std::size_t configs, double tolerance) {
  NoGradScope no_grad;
  double worst = 0;
  for (std::size_t s = 0; s < configs; ++s) {
    const RandomSetup su = random_setup(8000 + s);
    const MoEOutput out = moe_forward(su.x, su.block);
    const std::size_t k = su.block.router.top_k, n = out.record.gates.size() / k;
    for (std::size_t i = 0; i < n; ++i) {
      double total = 0;
      for (std::size_t j = 0; j < k; ++j) total += out.record.gates[i * k + j];
      worst = std::max(worst, std::fabs(total - 1));
    }
  }
  return {worst <= tolerance, fmt("max |sum gates - 1| = %.3g over %.0f configs", worst, double(configs))};
}

Outcome rescaling_invariance(std::size_t configs) {
  NoGradScope no_grad;
  std::size_t flips = 0, patches = 0;
  for (std::size_t s = 0; s < configs; ++s) {
    Rng r(9000 + s);
    const std::size_t B = 2, P = 1 + r.index(6), N = 1 + r.index(4), d = 2 + r.index(7), E = 2 + r.index(5);
    const Tensor captured = random_tensor({B, P, N, d}, r, -2, 2);
    Router router;
    router.centroids = random_tensor({E, d}, r, 0, 1);
    router.temperature = r.uniform(0.1, 2.0);
    router.scaler = minmax_fit(mean_axis(captured, 2));

    Tensor rescaled = captured.clone();
    std::vector<double> factor(d);
    for (double& f : factor) f = std::exp(r.uniform(-3, 3));
    for (std::size_t i = 0; i < rescaled.size(); ++i) rescaled[i] *= factor[i % d];
    Router refit = router;
    refit.scaler = minmax_fit(mean_axis(rescaled, 2));

    const Tensor a = routing_logits(captured, router), b = routing_logits(rescaled, refit);
    for (std::size_t i = 0; i < B * P; ++i) {
      const auto row_a = a.values().subspan(i * E, E), row_b = b.values().subspan(i * E, E);
      ++patches;
      if (std::max_element(row_a.begin(), row_a.end()) - row_a.begin() !=
          std::max_element(row_b.begin(), row_b.end()) - row_b.begin())
        ++flips;
    }
  }
  return {flips == 0, fmt("%.0f argmax changes over %.0f patches", double(flips), double(patches)) +
                          fmt(" in %.0f configs", double(configs))};
}

Outcome permutation_equivariance(std::size_t configs) {
  NoGradScope no_grad;
  std::size_t index_mismatches = 0;
  double worst = 0;
  for (std::size_t s = 0; s < configs; ++s) {
    const RandomSetup su = random_setup(10000 + s);
    const std::size_t E = su.block.experts.size(), d = su.x.dim(3);
    Rng r(11000 + s);
    const std::vector<std::size_t> perm = r.permutation(E);  // new slot e holds old expert perm[e]
    MoEBlock permuted = su.block;
    permuted.router.centroids = Tensor({E, d});
    for (std::size_t e = 0; e < E; ++e) {
      permuted.experts[e] = su.block.experts[perm[e]];
      for (std::size_t c = 0; c < d; ++c) permuted.router.centroids[e * d + c] = su.block.router.centroids[perm[e] * d + c];
    }
    const MoEOutput a = moe_forward(su.x, su.block), b = moe_forward(su.x, permuted);
    for (std::size_t i = 0; i < a.record.indices.size(); ++i)
      if (a.record.indices[i] != perm[b.record.indices[i]]) ++index_mismatches;
    for (std::size_t i = 0; i < a.output.size(); ++i)
      worst = std::max(worst, std::fabs(double(a.output[i]) - double(b.output[i])));
  }
  return {index_mismatches == 0 && worst <= 1e-12,
          fmt("%.0f relabelling mismatches, max output change %.3g", double(index_mismatches), worst) +
              fmt(" over %.0f configs", double(configs))};
}

Outcome figure_d_arithmetic() {
  auto run = [](std::size_t E) {
    Rng r(E);
    const std::size_t d = 6, C = 3;
    Tensor centroids({E, d});
    const Tensor shared = random_tensor({d}, r, 0.1, 1);
    for (std::size_t e = 0; e < E; ++e)
      for (std::size_t c = 0; c < d; ++c) centroids[e * d + c] = shared[c];
    std::vector<Tensor> classes;
    for (std::size_t c = 0; c < C; ++c) classes.push_back(random_tensor({4, d}, r, 0, 1));
    return figure_d_variant(centroids, classes);
  };
  const AffinityMatrix m16 = run(16), m64 = run(64);
  bool ok = m16.temperature == kFigureDTemperature && m16.threshold == kFigureDThreshold;
  double min16 = 1, max64 = 0;
  for (double v : m16.values) min16 = std::min(min16, v);
  for (double v : m64.values) max64 = std::max(max64, v);
  ok = ok && std::fabs(min16 - 1.0 / 16) <= 1e-12 && max64 == 0;
  return {ok, fmt("E=16 smallest entry %.6f, E=64 largest entry %.6f", min16, max64)};
}

}  // namespace suite
