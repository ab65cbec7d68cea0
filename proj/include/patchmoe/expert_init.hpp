#pragma once

// Conversion of a dense MLP sublayer into sliced experts. Each expert keeps
// the hidden units that fire hardest at its centroid and starts out mostly
// replaced by a constant correction vector: the full MLP's output at that
// centroid.

#include <cstdint>
#include <vector>

#include "json.hpp"
#include "patchmoe/backbone.hpp"
#include "patchmoe/moe.hpp"

namespace patchmoe::inline PATCHMOE_PRECISION {

struct DenseMLPSnapshot {
  NormParams norm;
  LinearParams fc1;  // [d x d_ff]
  LinearParams fc2;  // [d_ff x d]
  Activation activation = Activation::silu;

  std::size_t dim() const { return fc1.weight.dim(0); }
  std::size_t hidden() const { return fc1.weight.dim(1); }
};

DenseMLPSnapshot snapshot_layer(const Model& model, std::size_t layer);

/// FNV-1a 64 over the snapshot's parameter values, as 64-bit floats.
std::uint64_t dense_mlp_hash(const DenseMLPSnapshot& mlp);

/// h = act(c W1 + b1) for the centroid c, which already lives in the
/// normalized space the MLP reads. Returns the indices of the d_e largest
/// entries (ties to the lower index), sorted ascending.
std::vector<std::size_t> importance_permutation(const DenseMLPSnapshot& mlp, std::span<const real> centroid,
                                                std::size_t d_e);

/// Slices fc1 columns, b1 entries and fc2 rows at `indices`; copies b2 and
/// the input norm. xcorr is the unsliced MLP evaluated at the centroid.
ExpertMLP build_expert(const DenseMLPSnapshot& mlp, const std::vector<std::size_t>& indices,
                       std::span<const real> centroid, double gamma_init = 0.9);

struct MoefyOptions {
  std::size_t reduction_factor = 2;
  /// Nonzero: keep exactly this many hidden units per expert instead of
  /// d_ff / reduction_factor.
  std::size_t de_literal = 0;
  double gamma_init = 0.9;
};

nlohmann::json to_json(const MoefyOptions& o);

/// Expert hidden width for the given options and d_ff.
std::size_t expert_hidden(const MoefyOptions& options, std::size_t ff_dim);

/// Replaces the dense MLP of `layer` with an MoE block built from `router`.
/// Centroids are mapped back through the router's scaler before slicing.
void moefy_layer(Model& model, std::size_t layer, const Router& router, const MoefyOptions& options);

/// d*d_e + d_e + d_e*d + d + d + 1: two sliced linear maps, b2, xcorr, gamma.
std::size_t expert_mlp_parameter_formula(std::size_t d, std::size_t d_e);

}  // namespace patchmoe::inline PATCHMOE_PRECISION
