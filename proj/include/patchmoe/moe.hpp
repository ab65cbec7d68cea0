#pragma once

// Patch-level mixture-of-experts MLP sublayer.
//
// Routing works on the pre-MLP embedding of each patch: the pixel axis is
// averaged, min-max scaled with the scaler fitted at router initialization,
// and compared to the expert centroids by cosine similarity. The scaled
// vector feeds only the router; experts see the unscaled residual stream and
// apply their own input layer norm.

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "patchmoe/ops.hpp"
#include "patchmoe/scaler.hpp"
#include "patchmoe/tensor.hpp"

namespace patchmoe::inline PATCHMOE_PRECISION {

struct Router {
  Tensor centroids;  // [E x d] in min-max scaled space
  ScalerParams scaler;
  real temperature = 1;
  std::size_t top_k = 1;
  /// true: gates are the selected softmax probabilities renormalized to sum
  /// to 1; false: raw probabilities are used as gates.
  bool renormalize = true;
  /// Optional additive log-prior per expert on the routing logits; empty = off.
  std::vector<real> log_prior;
  /// Layer norm producing the pre-MLP embedding the router sees. Initialized
  /// from the dense MLP's input norm.
  Tensor norm_gain, norm_bias;

  std::size_t experts() const { return centroids.dim(0); }
  std::size_t dim() const { return centroids.dim(1); }
};

struct ExpertMLP {
  std::vector<std::size_t> indices;  // hidden units kept from the dense MLP, ascending
  Tensor norm_gain, norm_bias;       // [d]
  Tensor w1, b1;                     // [d x d_e], [d_e]
  Tensor w2, b2;                     // [d_e x d], [d]
  Tensor gamma;                      // [1], kept in [0, 1]
  Tensor xcorr;                      // [d]
  Activation activation = Activation::silu;

  std::size_t hidden() const { return w1.dim(1); }
  std::size_t dim() const { return w1.dim(0); }
  /// Trainable MLP parameters excluding the layer norm:
  /// d*d_e + d_e + d_e*d + d + d (xcorr) + 1 (gamma).
  std::size_t mlp_parameter_count() const;

  /// Expert on already-normalized rows z[m x d]:
  /// (1 - gamma) * (act(z W1 + b1) W2 + b2) + gamma * xcorr.
  Tensor forward_normalized(const Tensor& z) const;
};

struct MoEBlock {
  Router router;
  std::vector<ExpertMLP> experts;
};

struct RoutingRecord {
  std::size_t batch = 0, patches = 0, experts = 0, top_k = 0;
  std::vector<std::uint32_t> indices;  // [B*P*k], rank order
  std::vector<real> gates;             // [B*P*k]
  std::vector<real> probs;             // [B*P*E] full softmax
  std::vector<real> similarity;        // [B*P*E] cosine similarity before temperature
  std::vector<std::size_t> expert_counts;  // patches routed to each expert, all ranks
};

/// [B, P, N, d] captured embedding -> [B, P, E] routing logits.
Tensor routing_logits(const Tensor& captured, const Router& router);

struct ExpertSelection {
  std::vector<std::uint32_t> indices;  // [n*k], descending probability, ties to lower index
  Tensor gates;                        // [n x k]
  Tensor probs;                        // [n x E]
};

/// Softmax over the last axis of logits[..., E], then top-k per row.
ExpertSelection select_experts(const Tensor& logits, std::size_t top_k, bool renormalize = true);

/// Input layer norm, then forward_normalized. x_pixels is [m x d].
Tensor expert_forward(const Tensor& x_pixels, const ExpertMLP& expert);

struct MoEOutput {
  Tensor output;  // [B, P, N, d], residual not included
  RoutingRecord record;
};

/// x is the residual stream after attention, [B, P, N, d]. Every pixel of a
/// patch goes to that patch's experts; outputs are combined in expert order.
MoEOutput moe_forward(const Tensor& x, const MoEBlock& block);

/// The layer-normed embedding the router of `block` routes on.
Tensor moe_router_input(const Tensor& x, const MoEBlock& block);

struct UtilizationReport {
  std::vector<double> load;  // fraction of assignments per expert
  double entropy = 0;        // nats
  double max_load_ratio = 0; // max load * E; 1 when perfectly balanced
  std::size_t assignments = 0;
};

UtilizationReport dispatch_stats(const RoutingRecord& record);

/// CSV with header batch,patch,rank,expert,gate.
void write_routing_csv(std::ostream& os, const RoutingRecord& record);

}  // namespace patchmoe::inline PATCHMOE_PRECISION
