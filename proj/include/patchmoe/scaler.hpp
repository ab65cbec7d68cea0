#pragma once

#include <cstdint>
#include <vector>

#include "patchmoe/tensor.hpp"

namespace patchmoe::inline PATCHMOE_PRECISION {

/// Per-channel min-max scaler. Channels whose samples are all equal are
/// flagged degenerate: apply() maps them to 0 and invert() passes them through.
struct ScalerParams {
  std::vector<real> min;
  std::vector<real> max;
  std::vector<std::uint8_t> degenerate;

  std::size_t channels() const noexcept { return min.size(); }
};

/// Fits over all rows of samples[..., d]. Throws DataError when empty.
ScalerParams minmax_fit(const Tensor& samples);

/// (x - min) / (max - min) over the last axis. Differentiable in x.
Tensor minmax_apply(const ScalerParams& params, const Tensor& x);

/// min + y * (max - min); degenerate channels are returned unchanged.
Tensor minmax_invert(const ScalerParams& params, const Tensor& y);

}  // namespace patchmoe::inline PATCHMOE_PRECISION
