#include "patchmoe/scaler.hpp"

#include <algorithm>

namespace patchmoe::inline PATCHMOE_PRECISION {
namespace {

std::size_t check_channels(const ScalerParams& params, const Tensor& x) {
  if (x.rank() == 0 || x.shape().back() != params.channels())
    throw ShapeError("scaler has " + std::to_string(params.channels()) + " channels, input is " +
                     to_string(x.shape()));
  return params.channels();
}

}  // namespace

ScalerParams minmax_fit(const Tensor& samples) {
  if (!samples.defined() || samples.size() == 0 || samples.rank() == 0)
    throw DataError("minmax_fit: no samples");
  const std::size_t d = samples.shape().back();
  const std::size_t rows = samples.size() / d;
  auto v = samples.values();
  ScalerParams p{std::vector<real>(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(d)),
                 std::vector<real>(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(d)),
                 std::vector<std::uint8_t>(d, 0)};
  for (std::size_t r = 1; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) {
      p.min[j] = std::min(p.min[j], v[r * d + j]);
      p.max[j] = std::max(p.max[j], v[r * d + j]);
    }
  for (std::size_t j = 0; j < d; ++j) p.degenerate[j] = p.max[j] == p.min[j] ? 1 : 0;
  return p;
}

Tensor minmax_apply(const ScalerParams& params, const Tensor& x) {
  const std::size_t d = check_channels(params, x);
  std::vector<real> factor(d);
  for (std::size_t j = 0; j < d; ++j)
    factor[j] = params.degenerate[j] ? real(0) : real(1) / (params.max[j] - params.min[j]);
  Tensor out(x.shape());
  auto xv = x.values();
  auto y = out.values();
  for (std::size_t i = 0; i < y.size(); ++i) {
    const std::size_t j = i % d;
    y[i] = params.degenerate[j] ? real(0) : (xv[i] - params.min[j]) * factor[j];
  }
  check_finite(out, "minmax_apply");
  if (Tape* tape = recording_tape({&x})) {
    out.set_requires_grad(true);
    tape->record([x, out, factor = std::move(factor), d]() mutable {
      auto dy = out.grad();
      auto dx = x.grad();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * factor[i % d];
    });
  }
  return out;
}

Tensor minmax_invert(const ScalerParams& params, const Tensor& y) {
  const std::size_t d = check_channels(params, y);
  Tensor out(y.shape());
  auto yv = y.values();
  auto x = out.values();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t j = i % d;
    x[i] = params.degenerate[j] ? yv[i] : params.min[j] + yv[i] * (params.max[j] - params.min[j]);
  }
  return out;
}

}  // namespace patchmoe::inline PATCHMOE_PRECISION
