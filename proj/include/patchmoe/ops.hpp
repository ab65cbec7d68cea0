#pragma once

// Differentiable tensor operations. Each op computes its forward value
// eagerly and, when a Tape is active and an input requires a gradient,
// records an analytic backward closure.

#include <cstddef>
#include <span>
#include <string_view>

#include "patchmoe/rng.hpp"
#include "patchmoe/tensor.hpp"

namespace patchmoe::inline PATCHMOE_PRECISION {

enum class Activation { silu, relu, gelu };

std::string_view activation_name(Activation act);
Activation parse_activation(std::string_view name);

/// a[m x k] * b[k x n]
Tensor matmul(const Tensor& a, const Tensor& b);

/// x[..., in] * w[in x out] + bias[out]. `bias` may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

/// Elementwise sum of equal-shaped tensors.
Tensor add(const Tensor& a, const Tensor& b);

/// x + y where y is repeated over the leading rows of x (y.size() must divide
/// x.size()). Covers bias rows and positional tables.
Tensor add_broadcast(const Tensor& x, const Tensor& y);

Tensor scale(const Tensor& x, real factor);

/// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);

/// Normalizes over the last axis, then applies gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, real eps = kEps);

real activate(real v, Activation act);
Tensor activate(const Tensor& x, Activation act);

/// Mean over `axis`; the axis is removed from the shape.
Tensor mean_axis(const Tensor& x, std::size_t axis);

/// a.b / (|a||b| + eps). A zero vector gives 0.
real cosine_similarity(std::span<const real> a, std::span<const real> b, real eps = kEps);

/// out[i, e] = cosine(h[i], centroids[e]) / temperature, for h[n x d] and
/// centroids[E x d].
Tensor cosine_logits(const Tensor& h, const Tensor& centroids, real temperature,
                     real eps = kEps);

/// Rows of x[n x d] in the given order.
Tensor index_select_rows(const Tensor& x, std::span<const std::size_t> rows);

/// base[n x d] with y[m x d] added into rows[0..m).
Tensor index_add_rows(const Tensor& base, std::span<const std::size_t> rows, const Tensor& y);

/// Flat elements of x at `index`, shape [m].
Tensor gather(const Tensor& x, std::span<const std::size_t> index);

/// x[m x d] with row i multiplied by s[i].
Tensor scale_rows(const Tensor& x, const Tensor& s);

/// (1 - gamma) * x + gamma * xcorr, with gamma a one-element tensor and
/// xcorr[d] broadcast over the rows of x[m x d].
Tensor blend(const Tensor& x, const Tensor& gamma, const Tensor& xcorr);

/// Inverted dropout with keep probability 1 - p.
Tensor dropout(const Tensor& x, real p, Rng& rng);

/// Mean over the batch of -sum_c t[b, c] log softmax(z[b])_c, for logits
/// z[B x C] and (possibly soft) targets t[B x C].
Tensor cross_entropy(const Tensor& logits, const Tensor& targets);

Tensor sum(const Tensor& x);

/// sum_i x[i] * w[i]; w is treated as a constant.
Tensor weighted_sum(const Tensor& x, const Tensor& w);

/// Self-attention across the patch axis, separately for every (image, pixel
/// slot) pair and head. qkv is [B, P, N, 3d] with channels laid out as
/// [q | k | v]; the result is [B, P, N, d].
Tensor patch_attention(const Tensor& qkv, std::size_t heads);

}  // namespace patchmoe::inline PATCHMOE_PRECISION
