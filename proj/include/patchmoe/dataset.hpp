#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "patchmoe/precision.hpp"

namespace patchmoe::inline PATCHMOE_PRECISION {

/// 8-bit RGB image, row-major, 3 bytes per pixel.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::size_t w, std::size_t h) : width(w), height(h), pixels(w * h * 3, 0) {}

  std::uint8_t* at(std::size_t x, std::size_t y) { return pixels.data() + (y * width + x) * 3; }
  const std::uint8_t* at(std::size_t x, std::size_t y) const { return pixels.data() + (y * width + x) * 3; }
  bool operator==(const Image&) const = default;
};

enum class Split : std::uint8_t { train, val };

struct LabeledImage {
  Image image;
  std::size_t class_id = 0;
  Split split = Split::train;
  /// Row-major per-patch foreground flags on Dataset::mask_grid; empty if unknown.
  std::vector<std::uint8_t> foreground;
};

struct Dataset {
  std::vector<std::string> class_names;
  std::vector<LabeledImage> images;
  std::uint64_t split_seed = 0;
  std::size_t mask_grid = 0;

  std::size_t num_classes() const noexcept { return class_names.size(); }
  std::vector<std::size_t> indices(Split split) const;
};

/// Synthetic fine-grained set: classes come in families that share a glyph
/// shape and hue; classes inside a family differ by fill pattern and a small
/// hue shift. Backgrounds are drawn from one texture pool for every class.
struct SynthSpec {
  std::size_t num_classes = 12;
  std::size_t families = 4;
  std::size_t image_size = 64;
  std::size_t patch_grid = 8;  // foreground masks are recorded on this grid
  std::size_t images_per_class = 40;
  std::size_t background_textures = 4;
  double family_similarity = 0.5;  // 0: full hue shift and pattern contrast, 1: identical classes
  double noise = 0.04;             // per-pixel Gaussian stddev, fraction of 255
  std::uint64_t seed = 7;

  void validate() const;
};

nlohmann::json to_json(const SynthSpec& spec);
SynthSpec synth_spec_from_json(const nlohmann::json& j);

/// Pure function of `spec`: identical output for identical input.
Dataset generate(const SynthSpec& spec);

/// Seeded 80/20 partition: the first ceil(0.8 n) of a shuffled order train.
void assign_split(Dataset& ds, std::uint64_t seed, double val_fraction = 0.2);

Image read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Image& image);

/// `<root>/<class_name>/<image>.ppm`; classes sorted by name get ids 0..C-1.
/// Splits are assigned with `split_seed`.
Dataset load_ppm_dir(const std::filesystem::path& root, std::uint64_t split_seed = 0);

/// Writes PPMs plus manifest.json (class names, counts, splits, masks, seed).
void save_dataset(const Dataset& ds, const std::filesystem::path& root,
                  const nlohmann::json& extra = {});

/// Reads a directory written by save_dataset, or falls back to load_ppm_dir
/// when there is no manifest.
Dataset load_dataset(const std::filesystem::path& root);

nlohmann::json dataset_manifest(const Dataset& ds);

Image resize_nearest(const Image& image, std::size_t width, std::size_t height);
Image flip_horizontal(const Image& image);

}  // namespace patchmoe::inline PATCHMOE_PRECISION
