#pragma once

// Small patch transformer with MobileViT-style token layout. An image is cut
// into P non-overlapping patches; each patch is cut into N_px pixel slots of
// token_side x token_side pixels. Activations are [B, P, N_px, d]. Attention
// mixes patches at the same pixel slot; MLP sublayers act on every token and
// can be replaced by MoE blocks that route whole patches.

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "patchmoe/dataset.hpp"
#include "patchmoe/moe.hpp"
#include "patchmoe/ops.hpp"
#include "patchmoe/rng.hpp"
#include "patchmoe/tensor.hpp"

namespace patchmoe::inline PATCHMOE_PRECISION {

struct ModelConfig {
  std::size_t image_size = 64;
  std::size_t patch_size = 8;
  std::size_t pixels_per_patch = 4;  // must be a perfect square
  std::size_t dim = 32;
  std::size_t ff_dim = 64;
  std::size_t layers = 4;
  std::size_t heads = 2;
  std::size_t num_classes = 12;
  double dropout = 0.1;
  Activation activation = Activation::silu;
  std::vector<std::size_t> moe_layers{1, 3};
  std::size_t experts = 4;
  std::size_t top_k = 1;
  double temperature = 1.0;

  /// Throws UsageError naming the first violated constraint.
  void validate() const;
  std::size_t grid(std::size_t image) const { return image / patch_size; }
  std::size_t patches(std::size_t image) const { return grid(image) * grid(image); }
  std::size_t token_side() const;
  std::size_t token_features() const { return token_side() * token_side() * 3; }
  bool is_moe_layer(std::size_t layer) const;

  /// Nine layers with MoE on every other layer starting at the second.
  static ModelConfig every_other_layer_preset();
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Index arithmetic for the (patch, pixel) layout of a square image.
struct PatchLayout {
  std::size_t image = 0, patch_size = 0, pixels = 0, token_side = 0;

  PatchLayout(const ModelConfig& c, std::size_t image_size);
  std::size_t grid() const { return image / patch_size; }
  std::size_t patches() const { return grid() * grid(); }
  std::size_t features(std::size_t channels) const { return token_side * token_side * channels; }
};

/// [H, W, C] row-major values -> [P, N_px, token_side^2 * C].
std::vector<real> unfold(std::span<const real> hwc, std::size_t channels, const PatchLayout& layout);
/// Inverse of unfold.
std::vector<real> fold(std::span<const real> tokens, std::size_t channels, const PatchLayout& layout);

/// Batch of images -> [B, P, N_px, F] token features scaled to [-0.5, 0.5].
/// Every image must be image_size x image_size for the given layout.
Tensor image_tokens(const std::vector<const Image*>& images, const PatchLayout& layout);

struct LinearParams {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]
};

struct NormParams {
  Tensor gain, bias;
};

struct AttentionParams {
  NormParams norm;
  LinearParams qkv;  // d -> 3d, channels [q | k | v]
  LinearParams out;  // d -> d
};

struct DenseMLP {
  NormParams norm;
  LinearParams fc1;  // d -> d_ff
  LinearParams fc2;  // d_ff -> d
};

struct TransformerLayer {
  AttentionParams attn;
  DenseMLP mlp;                // unused once `moe` is set
  std::optional<MoEBlock> moe;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct ForwardOptions {
  bool training = false;  // enables classifier dropout
  Rng* rng = nullptr;     // required when training with dropout > 0
  /// Layer whose pre-MLP embedding is captured, or -1.
  int capture_layer = -1;
  /// Return right after the capture, skipping later layers and the head.
  bool stop_after_capture = false;
};

struct LayerRouting {
  std::size_t layer;
  RoutingRecord record;
};

struct ForwardResult {
  Tensor logits;    // [B x classes]
  Tensor captured;  // [B, P, N_px, d] when requested
  std::vector<LayerRouting> routing;
};

class Model {
 public:
  Model() = default;
  /// Dense model with seeded random weights.
  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  ModelConfig& config() noexcept { return config_; }

  LinearParams embed;  // token features -> d
  Tensor pos_embed;    // [P0 * N_px x d] on the config image grid
  std::vector<TransformerLayer> layers;
  NormParams final_norm;
  LinearParams head;

  /// Every trainable tensor with a stable dotted name, in a fixed order.
  std::vector<NamedTensor> parameters() const;
  std::size_t parameter_count() const;
  void set_requires_grad(bool on);
  void zero_grad();

  /// tokens: [B, P, N_px, F] from image_tokens(). P may differ from the
  /// config grid; positional embeddings are then resampled nearest-neighbour.
  ForwardResult forward(const Tensor& tokens, const ForwardOptions& options = {}) const;

  /// Deep copy (no shared storage).
  Model clone() const;

 private:
  ModelConfig config_;
};

/// Positional rows for a grid of `grid` patches per side, nearest-neighbour
/// mapped onto the base grid.
std::vector<std::size_t> positional_rows(const ModelConfig& c, std::size_t grid);

Tensor embed_tokens(const Model& model, const Tensor& tokens);
Tensor attention_forward(const Tensor& x, const AttentionParams& attn, std::size_t heads);
/// MLP on already-normalized rows, no residual.
Tensor dense_mlp_normalized(const Tensor& z, const DenseMLP& mlp, Activation act);
/// Full dense MLP sublayer output (norm + MLP), no residual.
Tensor dense_mlp_forward(const Tensor& x, const DenseMLP& mlp, Activation act);

/// Final norm, mean over patches and pixels, dropout, linear head.
Tensor classify(const Tensor& x, const Model& model, bool dropout_active, Rng* rng);

/// The tensor the dense MLP (or the router) of `layer` sees: the post
/// attention residual stream after the MLP input layer norm. Eval mode.
Tensor capture_pre_mlp(const Model& model, const Tensor& tokens, std::size_t layer);

}  // namespace patchmoe::inline PATCHMOE_PRECISION
