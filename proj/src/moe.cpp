#include "patchmoe/moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

namespace patchmoe::inline PATCHMOE_PRECISION {
namespace {

// gates[i, r] = probs[i, idx[i, r]] / sum_s probs[i, idx[i, s]]
Tensor renormalized_gates(const Tensor& probs, const std::vector<std::uint32_t>& idx, std::size_t k) {
  const std::size_t n = probs.dim(0), e_count = probs.dim(1);
  Tensor out({n, k});
  std::vector<real> totals(n);
  auto p = probs.values();
  auto g = out.values();
  for (std::size_t i = 0; i < n; ++i) {
    real total = 0;
    for (std::size_t r = 0; r < k; ++r) total += p[i * e_count + idx[i * k + r]];
    totals[i] = total;
    for (std::size_t r = 0; r < k; ++r) g[i * k + r] = p[i * e_count + idx[i * k + r]] / total;
  }
  if (Tape* tape = recording_tape({&probs})) {
    out.set_requires_grad(true);
    tape->record([probs, out, idx, totals = std::move(totals), n, k, e_count]() mutable {
      auto dg = out.grad();
      auto g = out.values();
      auto dp = probs.grad();
      for (std::size_t i = 0; i < n; ++i) {
        real s = 0;
        for (std::size_t r = 0; r < k; ++r) s += dg[i * k + r] * g[i * k + r];
        for (std::size_t r = 0; r < k; ++r) dp[i * e_count + idx[i * k + r]] += (dg[i * k + r] - s) / totals[i];
      }
    });
  }
  return out;
}

}  // namespace

std::size_t ExpertMLP::mlp_parameter_count() const {
  return w1.size() + b1.size() + w2.size() + b2.size() + xcorr.size() + gamma.size();
}

Tensor ExpertMLP::forward_normalized(const Tensor& z) const {
  const Tensor hidden = activate(linear(z, w1, b1), activation);
  return blend(linear(hidden, w2, b2), gamma, xcorr);
}

Tensor expert_forward(const Tensor& x_pixels, const ExpertMLP& expert) {
  return expert.forward_normalized(layer_norm(x_pixels, expert.norm_gain, expert.norm_bias));
}

namespace {

// Cosine similarity of each patch's scaled pixel-average to every centroid,
// before temperature: [B*P x E].
Tensor patch_similarity(const Tensor& captured, const Router& router) {
  if (captured.rank() != 4 || captured.dim(3) != router.dim())
    throw ShapeError("routing: captured " + to_string(captured.shape()) + " vs router dim " +
                     std::to_string(router.dim()));
  const std::size_t B = captured.dim(0), P = captured.dim(1), d = captured.dim(3);
  const Tensor pooled = mean_axis(captured, 2).reshape({B * P, d});
  return cosine_logits(minmax_apply(router.scaler, pooled), router.centroids, real(1));
}

Tensor logits_from_similarity(const Tensor& similarity, const Router& router) {
  Tensor logits = scale(similarity, real(1) / router.temperature);
  if (!router.log_prior.empty()) {
    if (router.log_prior.size() != router.experts()) throw ShapeError("router: log_prior size must equal E");
    logits = add_broadcast(logits, Tensor({router.experts()}, router.log_prior));
  }
  return logits;
}

}  // namespace

Tensor routing_logits(const Tensor& captured, const Router& router) {
  if (!(router.temperature > 0)) throw UsageError("router temperature must be > 0");
  const Tensor logits = logits_from_similarity(patch_similarity(captured, router), router);
  return logits.reshape({captured.dim(0), captured.dim(1), router.experts()});
}

ExpertSelection select_experts(const Tensor& logits, std::size_t top_k, bool renormalize) {
  const std::size_t e_count = logits.shape().back();
  if (top_k == 0 || top_k > e_count)
    throw UsageError("select_experts: top_k must be in [1, " + std::to_string(e_count) + "]");
  const std::size_t n = logits.size() / e_count;
  ExpertSelection sel;
  sel.probs = softmax(logits.reshape({n, e_count}), 1);
  sel.indices.resize(n * top_k);
  auto p = sel.probs.values();
  std::vector<std::uint32_t> order(e_count);
  for (std::size_t i = 0; i < n; ++i) {
    std::iota(order.begin(), order.end(), 0u);
    const real* row = p.data() + i * e_count;
    std::stable_sort(order.begin(), order.end(), [row](std::uint32_t a, std::uint32_t b) { return row[a] > row[b]; });
    std::copy_n(order.begin(), top_k, sel.indices.begin() + static_cast<std::ptrdiff_t>(i * top_k));
  }
  if (renormalize) {
    sel.gates = renormalized_gates(sel.probs, sel.indices, top_k);
  } else {
    std::vector<std::size_t> flat(n * top_k);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t r = 0; r < top_k; ++r) flat[i * top_k + r] = i * e_count + sel.indices[i * top_k + r];
    sel.gates = gather(sel.probs, flat).reshape({n, top_k});
  }
  return sel;
}

Tensor moe_router_input(const Tensor& x, const MoEBlock& block) {
  return layer_norm(x, block.router.norm_gain, block.router.norm_bias);
}

MoEOutput moe_forward(const Tensor& x, const MoEBlock& block) {
  if (x.rank() != 4) throw ShapeError("moe_forward: expected [B, P, N, d], got " + to_string(x.shape()));
  const Router& router = block.router;
  if (block.experts.size() != router.experts()) throw ShapeError("moe_forward: expert count != centroid count");
  const std::size_t B = x.dim(0), P = x.dim(1), N = x.dim(2), d = x.dim(3);
  const std::size_t E = router.experts(), k = router.top_k;
  const std::size_t patches = B * P;

  const Tensor similarity = patch_similarity(moe_router_input(x, block), router);
  const Tensor logits = logits_from_similarity(similarity, router);
  ExpertSelection sel = select_experts(logits, k, router.renormalize);

  MoEOutput result;
  RoutingRecord& rec = result.record;
  rec.batch = B;
  rec.patches = P;
  rec.experts = E;
  rec.top_k = k;
  rec.indices = sel.indices;
  rec.gates.assign(sel.gates.values().begin(), sel.gates.values().end());
  rec.probs.assign(sel.probs.values().begin(), sel.probs.values().end());
  rec.similarity.assign(similarity.values().begin(), similarity.values().end());
  rec.expert_counts.assign(E, 0);

  // Per-expert pixel rows and the flat gate position feeding each row.
  std::vector<std::vector<std::size_t>> rows(E), gate_pos(E);
  for (std::size_t i = 0; i < patches; ++i) {
    for (std::size_t r = 0; r < k; ++r) {
      const std::uint32_t e = sel.indices[i * k + r];
      ++rec.expert_counts[e];
      for (std::size_t n = 0; n < N; ++n) {
        rows[e].push_back(i * N + n);
        gate_pos[e].push_back(i * k + r);
      }
    }
  }

  const Tensor flat = x.reshape({patches * N, d});
  const Tensor flat_gates = sel.gates.reshape({patches * k});
  Tensor out({patches * N, d});
  for (std::size_t e = 0; e < E; ++e) {
    if (rows[e].empty()) continue;
    const Tensor ye = expert_forward(index_select_rows(flat, rows[e]), block.experts[e]);
    out = index_add_rows(out, rows[e], scale_rows(ye, gather(flat_gates, gate_pos[e])));
  }
  result.output = out.reshape({B, P, N, d});
  return result;
}

UtilizationReport dispatch_stats(const RoutingRecord& record) {
  UtilizationReport rep;
  const std::size_t E = record.expert_counts.size();
  rep.assignments = std::accumulate(record.expert_counts.begin(), record.expert_counts.end(), std::size_t{0});
  rep.load.assign(E, 0.0);
  if (rep.assignments == 0 || E == 0) return rep;
  double mx = 0;
  for (std::size_t e = 0; e < E; ++e) {
    const double f = double(record.expert_counts[e]) / double(rep.assignments);
    rep.load[e] = f;
    if (f > 0) rep.entropy -= f * std::log(f);
    mx = std::max(mx, f);
  }
  rep.max_load_ratio = mx * double(E);
  return rep;
}

void write_routing_csv(std::ostream& os, const RoutingRecord& record) {
  os << "batch,patch,rank,expert,gate\n";
  const std::size_t k = record.top_k;
  for (std::size_t b = 0; b < record.batch; ++b)
    for (std::size_t p = 0; p < record.patches; ++p)
      for (std::size_t r = 0; r < k; ++r) {
        const std::size_t i = (b * record.patches + p) * k + r;
        os << b << ',' << p << ',' << r << ',' << record.indices[i] << ',' << record.gates[i] << '\n';
      }
}

}  // namespace patchmoe::inline PATCHMOE_PRECISION
