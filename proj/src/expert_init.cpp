#include "patchmoe/expert_init.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <numeric>

namespace patchmoe::inline PATCHMOE_PRECISION {

DenseMLPSnapshot snapshot_layer(const Model& model, std::size_t layer) {
  if (layer >= model.layers.size()) throw UsageError("snapshot_layer: layer out of range");
  const TransformerLayer& l = model.layers[layer];
  if (l.moe) throw StageError("layer " + std::to_string(layer) + " is already an MoE layer");
  return {{l.mlp.norm.gain.clone(), l.mlp.norm.bias.clone()},
          {l.mlp.fc1.weight.clone(), l.mlp.fc1.bias.clone()},
          {l.mlp.fc2.weight.clone(), l.mlp.fc2.bias.clone()},
          model.config().activation};
}

std::uint64_t dense_mlp_hash(const DenseMLPSnapshot& mlp) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const Tensor* t : {&mlp.norm.gain, &mlp.norm.bias, &mlp.fc1.weight, &mlp.fc1.bias, &mlp.fc2.weight,
                          &mlp.fc2.bias}) {
    for (real v : t->values()) {
      const auto bits = std::bit_cast<std::uint64_t>(double(v));
      for (int k = 0; k < 8; ++k) {
        h ^= (bits >> (8 * k)) & 0xff;
        h *= 0x100000001b3ULL;
      }
    }
  }
  return h;
}

std::vector<std::size_t> importance_permutation(const DenseMLPSnapshot& mlp, std::span<const real> centroid,
                                                std::size_t d_e) {
  const std::size_t d = mlp.dim(), f = mlp.hidden();
  if (centroid.size() != d) throw ShapeError("importance_permutation: centroid has wrong dimension");
  if (d_e == 0 || d_e > f)
    throw UsageError("importance_permutation: d_e=" + std::to_string(d_e) + " must be in [1, " + std::to_string(f) + "]");
  NoGradScope no_grad;
  const Tensor c({1, d}, std::vector<real>(centroid.begin(), centroid.end()));
  const Tensor h = activate(linear(c, mlp.fc1.weight, mlp.fc1.bias), mlp.activation);
  auto hv = h.values();
  std::vector<std::size_t> order(f);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return hv[a] > hv[b]; });
  order.resize(d_e);
  std::sort(order.begin(), order.end());
  return order;
}

ExpertMLP build_expert(const DenseMLPSnapshot& mlp, const std::vector<std::size_t>& indices,
                       std::span<const real> centroid, double gamma_init) {
  const std::size_t d = mlp.dim(), f = mlp.hidden(), de = indices.size();
  if (de == 0) throw UsageError("build_expert: no hidden units selected");
  for (std::size_t i = 0; i < de; ++i)
    if (indices[i] >= f || (i > 0 && indices[i] <= indices[i - 1]))
      throw UsageError("build_expert: indices must be ascending, distinct and < d_ff");
  if (centroid.size() != d) throw ShapeError("build_expert: centroid has wrong dimension");

  NoGradScope no_grad;
  ExpertMLP e;
  e.indices = indices;
  e.activation = mlp.activation;
  e.norm_gain = mlp.norm.gain.clone();
  e.norm_bias = mlp.norm.bias.clone();
  e.w1 = Tensor({d, de});
  e.b1 = Tensor({de});
  e.w2 = Tensor({de, d});
  e.b2 = mlp.fc2.bias.clone();
  auto w1 = mlp.fc1.weight.values(), b1 = mlp.fc1.bias.values(), w2 = mlp.fc2.weight.values();
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t k = 0; k < de; ++k) e.w1[r * de + k] = w1[r * f + indices[k]];
  for (std::size_t k = 0; k < de; ++k) {
    e.b1[k] = b1[indices[k]];
    std::copy_n(w2.begin() + static_cast<std::ptrdiff_t>(indices[k] * d), d,
                e.w2.values().begin() + static_cast<std::ptrdiff_t>(k * d));
  }
  e.gamma = Tensor::scalar(real(gamma_init));
  const Tensor c({1, d}, std::vector<real>(centroid.begin(), centroid.end()));
  const Tensor full = linear(activate(linear(c, mlp.fc1.weight, mlp.fc1.bias), mlp.activation), mlp.fc2.weight,
                             mlp.fc2.bias);
  e.xcorr = full.reshape({d}).clone();
  return e;
}

nlohmann::json to_json(const MoefyOptions& o) {
  return {{"reduction_factor", o.reduction_factor}, {"de_literal", o.de_literal}, {"gamma_init", o.gamma_init}};
}

std::size_t expert_hidden(const MoefyOptions& options, std::size_t ff_dim) {
  if (options.de_literal > 0) {
    if (options.de_literal > ff_dim) throw UsageError("de_literal exceeds d_ff");
    return options.de_literal;
  }
  if (options.reduction_factor == 0 || ff_dim % options.reduction_factor != 0)
    throw UsageError("d_ff=" + std::to_string(ff_dim) + " is not divisible by reduction factor " +
                     std::to_string(options.reduction_factor));
  return ff_dim / options.reduction_factor;
}

void moefy_layer(Model& model, std::size_t layer, const Router& router, const MoefyOptions& options) {
  const DenseMLPSnapshot mlp = snapshot_layer(model, layer);
  const std::size_t d = mlp.dim();
  if (router.dim() != d) throw ShapeError("moefy_layer: router dimension does not match layer");
  const std::size_t de = expert_hidden(options, mlp.hidden());

  NoGradScope no_grad;
  const Tensor raw = minmax_invert(router.scaler, router.centroids);
  MoEBlock block;
  block.router = router;
  block.router.centroids = router.centroids.clone();
  block.router.norm_gain = router.norm_gain.defined() ? router.norm_gain.clone() : mlp.norm.gain.clone();
  block.router.norm_bias = router.norm_bias.defined() ? router.norm_bias.clone() : mlp.norm.bias.clone();
  for (std::size_t e = 0; e < router.experts(); ++e) {
    const auto c = raw.values().subspan(e * d, d);
    block.experts.push_back(build_expert(mlp, importance_permutation(mlp, c, de), c, options.gamma_init));
  }
  TransformerLayer& target = model.layers[layer];
  target.moe = std::move(block);
  target.mlp = DenseMLP{};
}

std::size_t expert_mlp_parameter_formula(std::size_t d, std::size_t d_e) {
  return d * d_e + d_e + d_e * d + d + d + 1;
}

}  // namespace patchmoe::inline PATCHMOE_PRECISION
