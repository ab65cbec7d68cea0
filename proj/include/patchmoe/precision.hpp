#pragma once

// Numeric precision is a build switch. The library is compiled twice and each
// build sits in its own inline namespace, so 32-bit training code and 64-bit
// verification code can be linked into the same executable.

#include <type_traits>

#if defined(PATCHMOE_DOUBLE)
#define PATCHMOE_PRECISION f64
#else
#define PATCHMOE_PRECISION f32
#endif

namespace patchmoe::inline PATCHMOE_PRECISION {

#if defined(PATCHMOE_DOUBLE)
using real = double;
#else
using real = float;
#endif

inline constexpr bool kDoublePrecision = std::is_same_v<real, double>;

/// Denominator guard for layer norm and cosine similarity.
inline constexpr real kEps = kDoublePrecision ? real(1e-12) : real(1e-6);

}  // namespace patchmoe::inline PATCHMOE_PRECISION
