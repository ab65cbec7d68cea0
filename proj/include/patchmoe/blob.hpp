#pragma once

// Binary tensor blob:
//   8-byte magic "PMOETNSR", u8 dtype code (1 = f32, 2 = f64), u8 rank,
//   rank little-endian u64 extents, then the little-endian payload.
// A blob file may hold several records back to back; checkpoints address
// them by byte offset.

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "patchmoe/tensor.hpp"

namespace patchmoe::inline PATCHMOE_PRECISION {

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

inline constexpr std::array<char, 8> kBlobMagic{'P', 'M', 'O', 'E', 'T', 'N', 'S', 'R'};
inline constexpr DType kNativeDType = kDoublePrecision ? DType::f64 : DType::f32;

/// Appends one record; returns the number of bytes written.
std::uint64_t write_tensor(std::ostream& os, const Tensor& t, DType dtype = kNativeDType);

/// Reads one record at the current position, converting to `real`.
Tensor read_tensor(std::istream& is);

void save_tensors(const std::filesystem::path& path, const std::vector<Tensor>& tensors);
std::vector<Tensor> load_tensors(const std::filesystem::path& path);

}  // namespace patchmoe::inline PATCHMOE_PRECISION
