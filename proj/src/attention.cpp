#include <algorithm>
#include <cmath>

#include "patchmoe/kernels.hpp"
#include "patchmoe/ops.hpp"

namespace patchmoe::inline PATCHMOE_PRECISION {
namespace {

using kernels::Trans;

struct AttentionGeometry {
  std::size_t batch, patches, pixels, dim, heads, head_dim;

  std::size_t token_stride_in() const { return 3 * dim; }
  // Offset of token (b, p, n) in a [B, P, N, width] tensor.
  std::size_t token(std::size_t b, std::size_t p, std::size_t n) const {
    return (b * patches + p) * pixels + n;
  }
};

// Copies one head's slice of q/k/v (channel offset `base`) for every patch of
// a given (b, n) group into a contiguous P x head_dim matrix, or adds it back.
void gather_slice(const AttentionGeometry& g, std::span<const real> src, std::size_t width,
                  std::size_t b, std::size_t n, std::size_t base, real* dst) {
  for (std::size_t p = 0; p < g.patches; ++p) {
    const real* row = src.data() + g.token(b, p, n) * width + base;
    std::copy_n(row, g.head_dim, dst + p * g.head_dim);
  }
}

void scatter_add_slice(const AttentionGeometry& g, std::span<real> dst, std::size_t width,
                       std::size_t b, std::size_t n, std::size_t base, const real* src) {
  for (std::size_t p = 0; p < g.patches; ++p) {
    real* row = dst.data() + g.token(b, p, n) * width + base;
    for (std::size_t j = 0; j < g.head_dim; ++j) row[j] += src[p * g.head_dim + j];
  }
}

void softmax_rows(real* s, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    real* row = s + r * cols;
    const real mx = *std::max_element(row, row + cols);
    real total = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      row[c] = std::exp(row[c] - mx);
      total += row[c];
    }
    for (std::size_t c = 0; c < cols; ++c) row[c] /= total;
  }
}

}  // namespace

Tensor patch_attention(const Tensor& qkv, std::size_t heads) {
  if (qkv.rank() != 4 || qkv.dim(3) % 3 != 0)
    throw ShapeError("patch_attention: expected [B, P, N, 3d], got " + to_string(qkv.shape()));
  const std::size_t dim = qkv.dim(3) / 3;
  if (heads == 0 || dim % heads != 0)
    throw ShapeError("patch_attention: " + std::to_string(dim) + " channels not divisible by " +
                     std::to_string(heads) + " heads");
  const AttentionGeometry g{qkv.dim(0), qkv.dim(1), qkv.dim(2), dim, heads, dim / heads};
  const std::size_t P = g.patches, hd = g.head_dim;
  const real scale = real(1) / std::sqrt(real(hd));

  Tensor out({g.batch, g.patches, g.pixels, dim});
  const std::size_t groups = g.batch * g.pixels * heads;
  std::vector<real> attn(groups * P * P);
  std::vector<real> q(P * hd), k(P * hd), v(P * hd), o(P * hd);
  auto in = qkv.values();
  auto y = out.values();

  std::size_t group = 0;
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t n = 0; n < g.pixels; ++n) {
      for (std::size_t h = 0; h < heads; ++h, ++group) {
        gather_slice(g, in, 3 * dim, b, n, h * hd, q.data());
        gather_slice(g, in, 3 * dim, b, n, dim + h * hd, k.data());
        gather_slice(g, in, 3 * dim, b, n, 2 * dim + h * hd, v.data());
        real* a = attn.data() + group * P * P;
        std::fill_n(a, P * P, real(0));
        kernels::gemm<real>(Trans::no, Trans::yes, P, P, hd, q.data(), hd, k.data(), hd, a, P);
        for (std::size_t i = 0; i < P * P; ++i) a[i] *= scale;
        softmax_rows(a, P, P);
        std::fill(o.begin(), o.end(), real(0));
        kernels::gemm<real>(Trans::no, Trans::no, P, hd, P, a, P, v.data(), hd, o.data(), hd);
        for (std::size_t p = 0; p < P; ++p)
          std::copy_n(o.data() + p * hd, hd, y.data() + g.token(b, p, n) * dim + h * hd);
      }
    }
  }
  check_finite(out, "patch_attention");

  if (Tape* tape = recording_tape({&qkv})) {
    out.set_requires_grad(true);
    tape->record([qkv, out, g, attn = std::move(attn), scale]() mutable {
      const std::size_t P = g.patches, hd = g.head_dim, dim = g.dim;
      auto in = qkv.values();
      auto dy = out.grad();
      auto dqkv = qkv.grad();
      std::vector<real> q(P * hd), k(P * hd), v(P * hd), dout(P * hd);
      std::vector<real> dq(P * hd), dk(P * hd), dv(P * hd), ds(P * P);
      std::size_t group = 0;
      for (std::size_t b = 0; b < g.batch; ++b) {
        for (std::size_t n = 0; n < g.pixels; ++n) {
          for (std::size_t h = 0; h < g.heads; ++h, ++group) {
            const real* a = attn.data() + group * P * P;
            gather_slice(g, in, 3 * dim, b, n, h * hd, q.data());
            gather_slice(g, in, 3 * dim, b, n, dim + h * hd, k.data());
            gather_slice(g, in, 3 * dim, b, n, 2 * dim + h * hd, v.data());
            gather_slice(g, dy, dim, b, n, h * hd, dout.data());
            // dV = A^T dO
            std::fill(dv.begin(), dv.end(), real(0));
            kernels::gemm<real>(Trans::yes, Trans::no, P, hd, P, a, P, dout.data(), hd, dv.data(), hd);
            // dA = dO V^T, then through the row softmax and the 1/sqrt(hd) scale
            std::fill(ds.begin(), ds.end(), real(0));
            kernels::gemm<real>(Trans::no, Trans::yes, P, P, hd, dout.data(), hd, v.data(), hd, ds.data(), P);
            for (std::size_t r = 0; r < P; ++r) {
              real dot = 0;
              for (std::size_t c = 0; c < P; ++c) dot += ds[r * P + c] * a[r * P + c];
              for (std::size_t c = 0; c < P; ++c) ds[r * P + c] = a[r * P + c] * (ds[r * P + c] - dot) * scale;
            }
            std::fill(dq.begin(), dq.end(), real(0));
            std::fill(dk.begin(), dk.end(), real(0));
            kernels::gemm<real>(Trans::no, Trans::no, P, hd, P, ds.data(), P, k.data(), hd, dq.data(), hd);
            kernels::gemm<real>(Trans::yes, Trans::no, P, hd, P, ds.data(), P, q.data(), hd, dk.data(), hd);
            scatter_add_slice(g, dqkv, 3 * dim, b, n, h * hd, dq.data());
            scatter_add_slice(g, dqkv, 3 * dim, b, n, dim + h * hd, dk.data());
            scatter_add_slice(g, dqkv, 3 * dim, b, n, 2 * dim + h * hd, dv.data());
          }
        }
      }
    });
  }
  return out;
}

}  // namespace patchmoe::inline PATCHMOE_PRECISION
