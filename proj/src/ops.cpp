#include "patchmoe/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "patchmoe/kernels.hpp"

namespace patchmoe::inline PATCHMOE_PRECISION {
namespace {

using kernels::Trans;

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

std::size_t last_dim(const Tensor& t) {
  require(t.rank() >= 1, "expected rank >= 1");
  return t.shape().back();
}

real sigmoid(real v) { return real(1) / (real(1) + std::exp(-v)); }

real activation_derivative(real v, Activation act) {
  switch (act) {
    case Activation::relu:
      return v > 0 ? real(1) : real(0);
    case Activation::silu: {
      const real s = sigmoid(v);
      return s * (real(1) + v * (real(1) - s));
    }
    case Activation::gelu: {
      const real cdf = real(0.5) * (real(1) + std::erf(v / std::numbers::sqrt2_v<real>));
      const real pdf = std::exp(real(-0.5) * v * v) / std::sqrt(real(2) * std::numbers::pi_v<real>);
      return cdf + v * pdf;
    }
  }
  return 0;
}

}  // namespace

std::string_view activation_name(Activation act) {
  switch (act) {
    case Activation::silu:
      return "silu";
    case Activation::relu:
      return "relu";
    case Activation::gelu:
      return "gelu";
  }
  return "?";
}

Activation parse_activation(std::string_view name) {
  if (name == "silu") return Activation::silu;
  if (name == "relu") return Activation::relu;
  if (name == "gelu") return Activation::gelu;
  throw UsageError("unknown activation '" + std::string(name) + "'");
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul: expected rank-2 operands");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, "matmul: inner dims " + to_string(a.shape()) + " x " + to_string(b.shape()));
  Tensor out({m, n});
  kernels::gemm<real>(Trans::no, Trans::no, m, n, k, a.values().data(), k, b.values().data(), n,
                      out.values().data(), n);
  check_finite(out, "matmul");
  if (Tape* tape = recording_tape({&a, &b})) {
    out.set_requires_grad(true);
    tape->record([a, b, out, m, n, k]() mutable {
      const real* dc = out.grad().data();
      if (a.requires_grad())
        kernels::gemm<real>(Trans::no, Trans::yes, m, k, n, dc, n, b.values().data(), n,
                            a.grad().data(), k);
      if (b.requires_grad())
        kernels::gemm<real>(Trans::yes, Trans::no, k, n, m, a.values().data(), k, dc, n,
                            b.grad().data(), n);
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require(w.rank() == 2, "linear: weight must be rank 2");
  const std::size_t in = w.dim(0), out_dim = w.dim(1);
  require(last_dim(x) == in, "linear: input " + to_string(x.shape()) + " vs weight " + to_string(w.shape()));
  if (bias.defined()) require(bias.size() == out_dim, "linear: bias size");
  const std::size_t rows = x.size() / in;
  Shape shape = x.shape();
  shape.back() = out_dim;
  Tensor out(shape);
  auto y = out.values();
  if (bias.defined())
    for (std::size_t r = 0; r < rows; ++r) std::copy(bias.values().begin(), bias.values().end(), y.begin() + r * out_dim);
  kernels::gemm<real>(Trans::no, Trans::no, rows, out_dim, in, x.values().data(), in, w.values().data(),
                      out_dim, y.data(), out_dim);
  check_finite(out, "linear");
  if (Tape* tape = recording_tape({&x, &w, &bias})) {
    out.set_requires_grad(true);
    tape->record([x, w, bias, out, rows, in, out_dim]() mutable {
      const real* dy = out.grad().data();
      if (x.requires_grad())
        kernels::gemm<real>(Trans::no, Trans::yes, rows, in, out_dim, dy, out_dim, w.values().data(),
                            out_dim, x.grad().data(), in);
      if (w.requires_grad())
        kernels::gemm<real>(Trans::yes, Trans::no, in, out_dim, rows, x.values().data(), in, dy,
                            out_dim, w.grad().data(), out_dim);
      if (bias.defined() && bias.requires_grad()) {
        auto db = bias.grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < out_dim; ++j) db[j] += dy[r * out_dim + j];
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "add: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  Tensor out(a.shape());
  auto y = out.values();
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  check_finite(out, "add");
  if (Tape* tape = recording_tape({&a, &b})) {
    out.set_requires_grad(true);
    tape->record([a, b, out]() mutable {
      auto dy = out.grad();
      if (a.requires_grad()) {
        auto da = a.grad();
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
      }
      if (b.requires_grad()) {
        auto db = b.grad();
        for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i];
      }
    });
  }
  return out;
}

Tensor add_broadcast(const Tensor& x, const Tensor& y) {
  const std::size_t n = y.size();
  require(n > 0 && x.size() % n == 0, "add_broadcast: " + to_string(y.shape()) + " does not tile " + to_string(x.shape()));
  Tensor out(x.shape());
  auto o = out.values();
  auto xv = x.values(), yv = y.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] + yv[i % n];
  check_finite(out, "add_broadcast");
  if (Tape* tape = recording_tape({&x, &y})) {
    out.set_requires_grad(true);
    tape->record([x, y, out, n]() mutable {
      auto d = out.grad();
      if (x.requires_grad()) {
        auto dx = x.grad();
        for (std::size_t i = 0; i < d.size(); ++i) dx[i] += d[i];
      }
      if (y.requires_grad()) {
        auto dy = y.grad();
        for (std::size_t i = 0; i < d.size(); ++i) dy[i % n] += d[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, real factor) {
  Tensor out(x.shape());
  auto o = out.values();
  auto xv = x.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = factor * xv[i];
  check_finite(out, "scale");
  if (Tape* tape = recording_tape({&x})) {
    out.set_requires_grad(true);
    tape->record([x, out, factor]() mutable {
      auto d = out.grad();
      auto dx = x.grad();
      for (std::size_t i = 0; i < d.size(); ++i) dx[i] += factor * d[i];
    });
  }
  return out;
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  require(axis < x.rank(), "softmax: axis out of range");
  const std::size_t len = x.dim(axis);
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t outer = x.size() / (len * inner);
  Tensor out(x.shape());
  auto xv = x.values();
  auto y = out.values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      real mx = xv[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
      real total = 0;
      for (std::size_t j = 0; j < len; ++j) {
        const real e = std::exp(xv[base + j * inner] - mx);
        y[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) y[base + j * inner] /= total;
    }
  }
  check_finite(out, "softmax");
  if (Tape* tape = recording_tape({&x})) {
    out.set_requires_grad(true);
    tape->record([x, out, outer, inner, len]() mutable {
      auto y = out.values();
      auto dy = out.grad();
      auto dx = x.grad();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          real s = 0;
          for (std::size_t j = 0; j < len; ++j) s += dy[base + j * inner] * y[base + j * inner];
          for (std::size_t j = 0; j < len; ++j) {
            const std::size_t i = base + j * inner;
            dx[i] += y[i] * (dy[i] - s);
          }
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, real eps) {
  const std::size_t d = last_dim(x);
  require(gain.size() == d && bias.size() == d, "layer_norm: gain/bias size must equal last dim");
  const std::size_t rows = x.size() / d;
  Tensor out(x.shape());
  std::vector<real> xhat(x.size());
  std::vector<real> rstd(rows);
  auto xv = x.values();
  auto y = out.values();
  auto g = gain.values(), b = bias.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const real* row = xv.data() + r * d;
    real mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= real(d);
    real var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= real(d);
    rstd[r] = real(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const real h = (row[j] - mean) * rstd[r];
      xhat[r * d + j] = h;
      y[r * d + j] = h * g[j] + b[j];
    }
  }
  check_finite(out, "layer_norm");
  if (Tape* tape = recording_tape({&x, &gain, &bias})) {
    out.set_requires_grad(true);
    tape->record([x, gain, bias, out, xhat = std::move(xhat), rstd = std::move(rstd), rows, d]() mutable {
      auto dy = out.grad();
      auto g = gain.values();
      if (gain.requires_grad()) {
        auto dg = gain.grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) dg[j] += dy[r * d + j] * xhat[r * d + j];
      }
      if (bias.requires_grad()) {
        auto db = bias.grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) db[j] += dy[r * d + j];
      }
      if (x.requires_grad()) {
        auto dx = x.grad();
        for (std::size_t r = 0; r < rows; ++r) {
          real mean_dh = 0, mean_dh_h = 0;
          for (std::size_t j = 0; j < d; ++j) {
            const real dh = dy[r * d + j] * g[j];
            mean_dh += dh;
            mean_dh_h += dh * xhat[r * d + j];
          }
          mean_dh /= real(d);
          mean_dh_h /= real(d);
          for (std::size_t j = 0; j < d; ++j) {
            const real dh = dy[r * d + j] * g[j];
            dx[r * d + j] += rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
          }
        }
      }
    });
  }
  return out;
}

real activate(real v, Activation act) {
  switch (act) {
    case Activation::relu:
      return v > 0 ? v : real(0);
    case Activation::silu:
      return v * sigmoid(v);
    case Activation::gelu:
      return real(0.5) * v * (real(1) + std::erf(v / std::numbers::sqrt2_v<real>));
  }
  return v;
}

Tensor activate(const Tensor& x, Activation act) {
  Tensor out(x.shape());
  auto xv = x.values();
  auto y = out.values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = activate(xv[i], act);
  check_finite(out, "activate");
  if (Tape* tape = recording_tape({&x})) {
    out.set_requires_grad(true);
    tape->record([x, out, act]() mutable {
      auto xv = x.values();
      auto dy = out.grad();
      auto dx = x.grad();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * activation_derivative(xv[i], act);
    });
  }
  return out;
}

Tensor mean_axis(const Tensor& x, std::size_t axis) {
  require(axis < x.rank(), "mean_axis: axis out of range");
  const std::size_t len = x.dim(axis);
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t outer = x.size() / (len * inner);
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (shape.empty()) shape = {1};
  Tensor out(shape);
  auto xv = x.values();
  auto y = out.values();
  const real inv = real(1) / real(len);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < len; ++j)
      for (std::size_t in = 0; in < inner; ++in) y[o * inner + in] += xv[(o * len + j) * inner + in];
  for (real& v : y) v *= inv;
  if (Tape* tape = recording_tape({&x})) {
    out.set_requires_grad(true);
    tape->record([x, out, outer, inner, len, inv]() mutable {
      auto dy = out.grad();
      auto dx = x.grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < len; ++j)
          for (std::size_t in = 0; in < inner; ++in) dx[(o * len + j) * inner + in] += dy[o * inner + in] * inv;
    });
  }
  return out;
}

real cosine_similarity(std::span<const real> a, std::span<const real> b, real eps) {
  if (a.size() != b.size()) throw ShapeError("cosine_similarity: length mismatch");
  const real ab = kernels::dot<real>(a, b);
  const real na = std::sqrt(kernels::dot<real>(a, a));
  const real nb = std::sqrt(kernels::dot<real>(b, b));
  return ab / (na * nb + eps);
}

Tensor cosine_logits(const Tensor& h, const Tensor& centroids, real temperature, real eps) {
  require(h.rank() == 2 && centroids.rank() == 2 && h.dim(1) == centroids.dim(1),
          "cosine_logits: " + to_string(h.shape()) + " vs centroids " + to_string(centroids.shape()));
  if (!(temperature > 0)) throw UsageError("cosine_logits: temperature must be > 0");
  const std::size_t n = h.dim(0), e_count = centroids.dim(0), d = h.dim(1);
  std::vector<real> h_norm(n), c_norm(e_count);
  auto hv = h.values(), cv = centroids.values();
  for (std::size_t i = 0; i < n; ++i)
    h_norm[i] = std::sqrt(kernels::dot<real>(hv.subspan(i * d, d), hv.subspan(i * d, d)));
  for (std::size_t e = 0; e < e_count; ++e)
    c_norm[e] = std::sqrt(kernels::dot<real>(cv.subspan(e * d, d), cv.subspan(e * d, d)));
  Tensor out({n, e_count});
  auto y = out.values();
  std::vector<real> dots(n * e_count);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t e = 0; e < e_count; ++e) {
      dots[i * e_count + e] = kernels::dot<real>(hv.subspan(i * d, d), cv.subspan(e * d, d));
      y[i * e_count + e] = dots[i * e_count + e] / ((h_norm[i] * c_norm[e] + eps) * temperature);
    }
  check_finite(out, "cosine_logits");
  if (Tape* tape = recording_tape({&h, &centroids})) {
    out.set_requires_grad(true);
    tape->record([h, centroids, out, h_norm = std::move(h_norm), c_norm = std::move(c_norm),
                  dots = std::move(dots), n, e_count, d, temperature, eps]() mutable {
      auto dy = out.grad();
      auto hv = h.values(), cv = centroids.values();
      const bool want_h = h.requires_grad(), want_c = centroids.requires_grad();
      std::span<real> dh, dc;
      if (want_h) dh = h.grad();
      if (want_c) dc = centroids.grad();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t e = 0; e < e_count; ++e) {
          const real g = dy[i * e_count + e] / temperature;
          if (g == 0) continue;
          const real den = h_norm[i] * c_norm[e] + eps;
          const real num = dots[i * e_count + e];
          const real inv_den = real(1) / den;
          const real k = num * inv_den * inv_den;
          // d/dh: c/den - num * |c| * h/|h| / den^2 (the second term vanishes at h = 0)
          const real h_coef = h_norm[i] > 0 ? k * c_norm[e] / h_norm[i] : real(0);
          const real c_coef = c_norm[e] > 0 ? k * h_norm[i] / c_norm[e] : real(0);
          for (std::size_t j = 0; j < d; ++j) {
            const real hj = hv[i * d + j], cj = cv[e * d + j];
            if (want_h) dh[i * d + j] += g * (cj * inv_den - h_coef * hj);
            if (want_c) dc[e * d + j] += g * (hj * inv_den - c_coef * cj);
          }
        }
      }
    });
  }
  return out;
}

Tensor index_select_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require(x.rank() == 2, "index_select_rows: expected rank 2");
  const std::size_t n = x.dim(0), d = x.dim(1);
  Tensor out({rows.size(), d});
  auto xv = x.values();
  auto y = out.values();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    require(rows[r] < n, "index_select_rows: row out of range");
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(rows[r] * d), d, y.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  if (Tape* tape = recording_tape({&x})) {
    out.set_requires_grad(true);
    tape->record([x, out, idx = std::vector<std::size_t>(rows.begin(), rows.end()), d]() mutable {
      auto dy = out.grad();
      auto dx = x.grad();
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t j = 0; j < d; ++j) dx[idx[r] * d + j] += dy[r * d + j];
    });
  }
  return out;
}

Tensor index_add_rows(const Tensor& base, std::span<const std::size_t> rows, const Tensor& y) {
  require(base.rank() == 2 && y.rank() == 2 && base.dim(1) == y.dim(1) && y.dim(0) == rows.size(),
          "index_add_rows: shape mismatch");
  const std::size_t n = base.dim(0), d = base.dim(1);
  Tensor out = base.clone();
  auto o = out.values();
  auto yv = y.values();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    require(rows[r] < n, "index_add_rows: row out of range");
    for (std::size_t j = 0; j < d; ++j) o[rows[r] * d + j] += yv[r * d + j];
  }
  check_finite(out, "index_add_rows");
  if (Tape* tape = recording_tape({&base, &y})) {
    out.set_requires_grad(true);
    tape->record([base, y, out, idx = std::vector<std::size_t>(rows.begin(), rows.end()), d]() mutable {
      auto dout = out.grad();
      if (base.requires_grad()) {
        auto db = base.grad();
        for (std::size_t i = 0; i < dout.size(); ++i) db[i] += dout[i];
      }
      if (y.requires_grad()) {
        auto dy = y.grad();
        for (std::size_t r = 0; r < idx.size(); ++r)
          for (std::size_t j = 0; j < d; ++j) dy[r * d + j] += dout[idx[r] * d + j];
      }
    });
  }
  return out;
}

Tensor gather(const Tensor& x, std::span<const std::size_t> index) {
  Tensor out({index.size()});
  auto xv = x.values();
  auto y = out.values();
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] < xv.size(), "gather: index out of range");
    y[i] = xv[index[i]];
  }
  if (Tape* tape = recording_tape({&x})) {
    out.set_requires_grad(true);
    tape->record([x, out, idx = std::vector<std::size_t>(index.begin(), index.end())]() mutable {
      auto dy = out.grad();
      auto dx = x.grad();
      for (std::size_t i = 0; i < idx.size(); ++i) dx[idx[i]] += dy[i];
    });
  }
  return out;
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
  require(x.rank() == 2 && s.size() == x.dim(0), "scale_rows: shape mismatch");
  const std::size_t m = x.dim(0), d = x.dim(1);
  Tensor out(x.shape());
  auto xv = x.values(), sv = s.values();
  auto y = out.values();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t j = 0; j < d; ++j) y[r * d + j] = xv[r * d + j] * sv[r];
  check_finite(out, "scale_rows");
  if (Tape* tape = recording_tape({&x, &s})) {
    out.set_requires_grad(true);
    tape->record([x, s, out, m, d]() mutable {
      auto dy = out.grad();
      auto xv = x.values(), sv = s.values();
      if (x.requires_grad()) {
        auto dx = x.grad();
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t j = 0; j < d; ++j) dx[r * d + j] += dy[r * d + j] * sv[r];
      }
      if (s.requires_grad()) {
        auto ds = s.grad();
        for (std::size_t r = 0; r < m; ++r) {
          real acc = 0;
          for (std::size_t j = 0; j < d; ++j) acc += dy[r * d + j] * xv[r * d + j];
          ds[r] += acc;
        }
      }
    });
  }
  return out;
}

Tensor blend(const Tensor& x, const Tensor& gamma, const Tensor& xcorr) {
  const std::size_t d = last_dim(x);
  require(gamma.size() == 1 && xcorr.size() == d, "blend: gamma must be scalar and xcorr match last dim");
  const std::size_t rows = x.size() / d;
  const real g = gamma[0];
  Tensor out(x.shape());
  auto xv = x.values(), cv = xcorr.values();
  auto y = out.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) y[r * d + j] = (real(1) - g) * xv[r * d + j] + g * cv[j];
  check_finite(out, "blend");
  if (Tape* tape = recording_tape({&x, &gamma, &xcorr})) {
    out.set_requires_grad(true);
    tape->record([x, gamma, xcorr, out, rows, d]() mutable {
      auto dy = out.grad();
      auto xv = x.values(), cv = xcorr.values();
      const real g = gamma[0];
      if (x.requires_grad()) {
        auto dx = x.grad();
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += (real(1) - g) * dy[i];
      }
      if (xcorr.requires_grad()) {
        auto dc = xcorr.grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) dc[j] += g * dy[r * d + j];
      }
      if (gamma.requires_grad()) {
        real acc = 0;
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) acc += dy[r * d + j] * (cv[j] - xv[r * d + j]);
        gamma.grad()[0] += acc;
      }
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, real p, Rng& rng) {
  if (p < 0 || p >= 1) throw UsageError("dropout: rate must be in [0, 1)");
  Tensor out(x.shape());
  std::vector<real> mask(x.size());
  const real keep = real(1) / (real(1) - p);
  for (real& m : mask) m = rng.uniform() < double(p) ? real(0) : keep;
  auto xv = x.values();
  auto y = out.values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] * mask[i];
  if (Tape* tape = recording_tape({&x})) {
    out.set_requires_grad(true);
    tape->record([x, out, mask = std::move(mask)]() mutable {
      auto dy = out.grad();
      auto dx = x.grad();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * mask[i];
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, const Tensor& targets) {
  require(logits.rank() == 2 && targets.shape() == logits.shape(), "cross_entropy: logits and targets must be [B x C]");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  std::vector<real> probs(logits.size()), lse_rows(batch);
  auto z = logits.values(), t = targets.values();
  real loss = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    const real* row = z.data() + b * classes;
    const real mx = *std::max_element(row, row + classes);
    real total = 0;
    for (std::size_t c = 0; c < classes; ++c) total += std::exp(row[c] - mx);
    const real lse = mx + std::log(total);
    lse_rows[b] = lse;
    for (std::size_t c = 0; c < classes; ++c) {
      probs[b * classes + c] = std::exp(row[c] - lse);
      loss -= t[b * classes + c] * (row[c] - lse);
    }
  }
  Tensor out = Tensor::scalar(loss / real(batch));
  check_finite(out, "cross_entropy");
  if (Tape* tape = recording_tape({&logits, &targets})) {
    out.set_requires_grad(true);
    tape->record([logits, targets, out, probs = std::move(probs), lse_rows = std::move(lse_rows), batch,
                  classes]() mutable {
      const real g = out.grad()[0] / real(batch);
      auto t = targets.values();
      if (logits.requires_grad()) {
        auto dz = logits.grad();
        for (std::size_t b = 0; b < batch; ++b) {
          real mass = 0;
          for (std::size_t c = 0; c < classes; ++c) mass += t[b * classes + c];
          for (std::size_t c = 0; c < classes; ++c) {
            const std::size_t i = b * classes + c;
            dz[i] += g * (probs[i] * mass - t[i]);
          }
        }
      }
      // Soft targets: d/dt of -t log p is -log p.
      if (targets.requires_grad()) {
        auto dt = targets.grad();
        auto z = logits.values();
        for (std::size_t i = 0; i < probs.size(); ++i) dt[i] -= g * (z[i] - lse_rows[i / classes]);
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  real acc = 0;
  for (real v : x.values()) acc += v;
  Tensor out = Tensor::scalar(acc);
  if (Tape* tape = recording_tape({&x})) {
    out.set_requires_grad(true);
    tape->record([x, out]() mutable {
      const real g = out.grad()[0];
      for (real& v : x.grad()) v += g;
    });
  }
  return out;
}

Tensor weighted_sum(const Tensor& x, const Tensor& w) {
  require(x.size() == w.size(), "weighted_sum: size mismatch");
  real acc = 0;
  auto xv = x.values(), wv = w.values();
  for (std::size_t i = 0; i < xv.size(); ++i) acc += xv[i] * wv[i];
  Tensor out = Tensor::scalar(acc);
  if (Tape* tape = recording_tape({&x})) {
    out.set_requires_grad(true);
    tape->record([x, w, out]() mutable {
      const real g = out.grad()[0];
      auto dx = x.grad();
      auto wv = w.values();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g * wv[i];
    });
  }
  return out;
}

}  // namespace patchmoe::inline PATCHMOE_PRECISION
