#include "patchmoe/blob.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace patchmoe::inline PATCHMOE_PRECISION {

static_assert(std::endian::native == std::endian::little,
              "blob I/O writes the host representation and assumes little-endian");

namespace {

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw DataError("tensor blob: truncated record");
  return v;
}

}  // namespace

std::uint64_t write_tensor(std::ostream& os, const Tensor& t, DType dtype) {
  if (t.rank() > 255) throw ShapeError("tensor blob: rank > 255");
  os.write(kBlobMagic.data(), kBlobMagic.size());
  put<std::uint8_t>(os, static_cast<std::uint8_t>(dtype));
  put<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (std::size_t e : t.shape()) put<std::uint64_t>(os, e);
  std::uint64_t bytes = kBlobMagic.size() + 2 + 8 * t.rank();
  for (real v : t.values()) {
    if (dtype == DType::f32)
      put<float>(os, static_cast<float>(v));
    else
      put<double>(os, static_cast<double>(v));
  }
  bytes += t.size() * (dtype == DType::f32 ? 4 : 8);
  if (!os) throw DataError("tensor blob: write failed");
  return bytes;
}

Tensor read_tensor(std::istream& is) {
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size())) throw DataError("tensor blob: truncated header");
  if (magic != kBlobMagic) throw DataError("tensor blob: bad magic");
  const auto code = get<std::uint8_t>(is);
  if (code != 1 && code != 2) throw DataError("tensor blob: unknown dtype code " + std::to_string(code));
  const auto rank = get<std::uint8_t>(is);
  Shape shape(rank);
  for (auto& e : shape) e = static_cast<std::size_t>(get<std::uint64_t>(is));
  std::vector<real> values(numel(shape));
  for (real& v : values) v = code == 1 ? static_cast<real>(get<float>(is)) : static_cast<real>(get<double>(is));
  return Tensor(std::move(shape), std::move(values));
}

void save_tensors(const std::filesystem::path& path, const std::vector<Tensor>& tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  for (const Tensor& t : tensors) write_tensor(os, t);
}

std::vector<Tensor> load_tensors(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  std::vector<Tensor> out;
  while (is.peek() != std::char_traits<char>::eof()) out.push_back(read_tensor(is));
  return out;
}

}  // namespace patchmoe::inline PATCHMOE_PRECISION
