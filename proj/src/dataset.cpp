#include "patchmoe/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "patchmoe/errors.hpp"
#include "patchmoe/rng.hpp"

namespace patchmoe::inline PATCHMOE_PRECISION {
namespace fs = std::filesystem;
using nlohmann::json;

std::vector<std::size_t> Dataset::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < images.size(); ++i)
    if (images[i].split == split) out.push_back(i);
  return out;
}

void SynthSpec::validate() const {
  if (num_classes == 0 || families == 0 || num_classes % families != 0)
    throw UsageError("synth: num_classes must be a positive multiple of families");
  if (image_size == 0 || patch_grid == 0 || image_size % patch_grid != 0)
    throw UsageError("synth: image_size must be divisible by patch_grid");
  if (images_per_class == 0) throw UsageError("synth: images_per_class must be > 0");
  if (background_textures == 0 || background_textures > 4)
    throw UsageError("synth: background_textures must be in [1, 4]");
  if (family_similarity < 0 || family_similarity > 1) throw UsageError("synth: family_similarity must be in [0, 1]");
  if (noise < 0) throw UsageError("synth: noise must be >= 0");
}

json to_json(const SynthSpec& s) {
  return json{{"num_classes", s.num_classes},
              {"families", s.families},
              {"image_size", s.image_size},
              {"patch_grid", s.patch_grid},
              {"images_per_class", s.images_per_class},
              {"background_textures", s.background_textures},
              {"family_similarity", s.family_similarity},
              {"noise", s.noise},
              {"seed", s.seed}};
}

SynthSpec synth_spec_from_json(const json& j) {
  static const std::vector<std::string> known = {"num_classes", "families", "image_size", "patch_grid", "images_per_class",
                                                 "background_textures", "family_similarity", "noise", "seed"};
  if (!j.is_object()) throw UsageError("synthetic spec must be a JSON object");
  for (const auto& [key, value] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end()) throw UsageError("unknown spec key '" + key + "'");
  SynthSpec s;
  s.num_classes = j.value("num_classes", s.num_classes);
  s.families = j.value("families", s.families);
  s.image_size = j.value("image_size", s.image_size);
  s.patch_grid = j.value("patch_grid", s.patch_grid);
  s.images_per_class = j.value("images_per_class", s.images_per_class);
  s.background_textures = j.value("background_textures", s.background_textures);
  s.family_similarity = j.value("family_similarity", s.family_similarity);
  s.noise = j.value("noise", s.noise);
  s.seed = j.value("seed", s.seed);
  return s;
}

namespace {

struct Rgb {
  double r, g, b;
};

Rgb hsv(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  Rgb out{0, 0, 0};
  switch (static_cast<int>(hp) % 6) {
    case 0: out = {c, x, 0}; break;
    case 1: out = {x, c, 0}; break;
    case 2: out = {0, c, x}; break;
    case 3: out = {0, x, c}; break;
    case 4: out = {x, 0, c}; break;
    default: out = {c, 0, x}; break;
  }
  const double m = v - c;
  return {255 * (out.r + m), 255 * (out.g + m), 255 * (out.b + m)};
}

Rgb lerp(const Rgb& a, const Rgb& b, double t) {
  return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

// Glyph outline in coordinates normalized by the glyph radius.
bool inside_shape(std::size_t shape, double u, double v) {
  switch (shape % 6) {
    case 0: return u * u + v * v <= 1.0;
    case 1: return std::fabs(u) <= 0.85 && std::fabs(v) <= 0.85;
    case 2: return v >= -1.0 && v <= 0.8 && std::fabs(u) <= (v + 1.0) / 1.8;
    case 3: return (std::fabs(u) <= 0.35 && std::fabs(v) <= 1.0) || (std::fabs(v) <= 0.35 && std::fabs(u) <= 1.0);
    case 4: return std::fabs(u) + std::fabs(v) <= 1.0;
    default: {
      const double r2 = u * u + v * v;
      return r2 >= 0.35 && r2 <= 1.0;
    }
  }
}

// Fill pattern for the class slot within its family: true where the darker
// pattern tone is painted.
bool pattern_dark(std::size_t pattern, std::size_t x, std::size_t y) {
  switch (pattern % 3) {
    case 0: return false;
    case 1: return (y / 2) % 2 == 0;
    default: return (x % 4) < 2 && (y % 4) < 2;
  }
}

Rgb muted(Rng& rng) {
  const double base = rng.uniform(60, 150);
  return {base + rng.uniform(-20, 20), base + rng.uniform(-10, 30), base + rng.uniform(-30, 10)};
}

Rgb background_at(std::size_t texture, std::size_t x, std::size_t y, std::size_t size, const Rgb& a,
                  const Rgb& b, const std::array<std::array<double, 3>, 3>& bumps) {
  switch (texture % 4) {
    case 0: return lerp(a, b, double(y) / double(size));
    case 1: return ((y / 8) % 2) ? a : b;
    case 2: return (((x / 8) + (y / 8)) % 2) ? a : b;
    default: {
      double t = 0;
      for (const auto& bump : bumps) {
        const double dx = double(x) - bump[0], dy = double(y) - bump[1];
        t += std::exp(-(dx * dx + dy * dy) / (2 * bump[2] * bump[2]));
      }
      return lerp(a, b, std::min(1.0, t));
    }
  }
}

std::uint8_t clamp_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

LabeledImage render(const SynthSpec& spec, std::size_t class_id, Rng rng) {
  const std::size_t per_family = spec.num_classes / spec.families;
  const std::size_t family = class_id / per_family;
  const std::size_t slot = class_id % per_family;
  const std::size_t n = spec.image_size;

  const double family_hue = double(family) / double(spec.families);
  const double hue_shift = (double(slot) - double(per_family - 1) / 2.0) * (1.0 - spec.family_similarity) * 0.06;
  // The similarity knob scales both within-family differences: hue shift and
  // fill-pattern contrast. At 1 the classes of a family render identically.
  const Rgb light = hsv(family_hue + hue_shift, 0.85, 0.95);
  const Rgb dark = lerp(light, hsv(family_hue + hue_shift, 0.9, 0.45), 1.0 - spec.family_similarity);

  const std::size_t texture = rng.index(spec.background_textures);
  const Rgb bg_a = muted(rng), bg_b = muted(rng);
  std::array<std::array<double, 3>, 3> bumps{};
  for (auto& bump : bumps) bump = {rng.uniform(0, double(n)), rng.uniform(0, double(n)), rng.uniform(0.1, 0.3) * double(n)};

  const double radius = rng.uniform(0.25, 0.35) * double(n);
  const double cx = rng.uniform(radius, double(n) - radius);
  const double cy = rng.uniform(radius, double(n) - radius);
  const double sigma = spec.noise * 255.0;

  LabeledImage out;
  out.class_id = class_id;
  out.image = Image(n, n);
  const std::size_t cell = n / spec.patch_grid;
  std::vector<std::size_t> covered(spec.patch_grid * spec.patch_grid, 0);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const double u = (double(x) + 0.5 - cx) / radius, v = (double(y) + 0.5 - cy) / radius;
      Rgb c;
      if (inside_shape(family, u, v)) {
        c = pattern_dark(slot, x, y) ? dark : light;
        ++covered[(y / cell) * spec.patch_grid + x / cell];
      } else {
        c = background_at(texture, x, y, n, bg_a, bg_b, bumps);
      }
      std::uint8_t* px = out.image.at(x, y);
      px[0] = clamp_byte(c.r + (sigma > 0 ? rng.normal(0, sigma) : 0));
      px[1] = clamp_byte(c.g + (sigma > 0 ? rng.normal(0, sigma) : 0));
      px[2] = clamp_byte(c.b + (sigma > 0 ? rng.normal(0, sigma) : 0));
    }
  }
  out.foreground.resize(covered.size());
  for (std::size_t i = 0; i < covered.size(); ++i) out.foreground[i] = 4 * covered[i] >= cell * cell ? 1 : 0;
  return out;
}

void skip_ppm_space(std::istream& is) {
  while (true) {
    const int c = is.peek();
    if (c == '#') {
      std::string line;
      std::getline(is, line);
    } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      is.get();
    } else {
      return;
    }
  }
}

std::size_t read_ppm_number(std::istream& is, const fs::path& path) {
  skip_ppm_space(is);
  std::size_t v = 0;
  if (!(is >> v)) throw DataError(path.string() + ": malformed PPM header");
  return v;
}

std::string split_name(Split s) { return s == Split::train ? "train" : "val"; }

}  // namespace

Dataset generate(const SynthSpec& spec) {
  spec.validate();
  const Rng root(spec.seed);
  Dataset ds;
  ds.mask_grid = spec.patch_grid;
  const std::size_t per_family = spec.num_classes / spec.families;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    char name[32];
    std::snprintf(name, sizeof name, "fam%zu_sp%zu", c / per_family, c % per_family);
    ds.class_names.emplace_back(name);
  }
  for (std::size_t c = 0; c < spec.num_classes; ++c)
    for (std::size_t i = 0; i < spec.images_per_class; ++i)
      ds.images.push_back(render(spec, c, root.fork(c * spec.images_per_class + i)));
  assign_split(ds, spec.seed);
  return ds;
}

void assign_split(Dataset& ds, std::uint64_t seed, double val_fraction) {
  const std::size_t n = ds.images.size();
  Rng rng = Rng(seed).fork(0x5911);
  std::vector<std::size_t> order = rng.permutation(n);
  const auto n_train = static_cast<std::size_t>(std::ceil((1.0 - val_fraction) * double(n) - 1e-9));
  for (std::size_t i = 0; i < n; ++i) ds.images[order[i]].split = i < n_train ? Split::train : Split::val;
  ds.split_seed = seed;
}

Image read_ppm(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError(path.string() + ": cannot open");
  char magic[2] = {0, 0};
  if (!is.read(magic, 2) || magic[0] != 'P' || magic[1] != '6') throw DataError(path.string() + ": bad magic (expected P6)");
  const std::size_t w = read_ppm_number(is, path);
  const std::size_t h = read_ppm_number(is, path);
  const std::size_t maxval = read_ppm_number(is, path);
  if (maxval != 255) throw DataError(path.string() + ": maxval " + std::to_string(maxval) + " (only 255 supported)");
  if (w == 0 || h == 0) throw DataError(path.string() + ": empty image");
  const int sep = is.get();
  if (sep != ' ' && sep != '\n' && sep != '\t' && sep != '\r') throw DataError(path.string() + ": malformed PPM header");
  Image img(w, h);
  if (!is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size())))
    throw DataError(path.string() + ": truncated payload");
  return img;
}

void write_ppm(const fs::path& path, const Image& image) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError(path.string() + ": cannot open for writing");
  os << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!os) throw DataError(path.string() + ": write failed");
}

Dataset load_ppm_dir(const fs::path& root, std::uint64_t split_seed) {
  if (!fs::is_directory(root)) throw DataError(root.string() + ": not a directory");
  std::vector<std::string> classes;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) classes.push_back(entry.path().filename().string());
  if (classes.empty()) throw DataError(root.string() + ": no classes");
  std::sort(classes.begin(), classes.end());
  Dataset ds;
  ds.class_names = classes;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(root / classes[c]))
      if (entry.is_regular_file() && entry.path().extension() == ".ppm") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) ds.images.push_back({read_ppm(f), c, Split::train, {}});
  }
  assign_split(ds, split_seed);
  return ds;
}

json dataset_manifest(const Dataset& ds) {
  std::vector<std::size_t> counts(ds.num_classes(), 0);
  for (const auto& img : ds.images) ++counts[img.class_id];
  json images = json::array();
  std::vector<std::size_t> next(ds.num_classes(), 0);
  for (const auto& img : ds.images) {
    char file[96];
    std::snprintf(file, sizeof file, "%s/%05zu.ppm", ds.class_names[img.class_id].c_str(), next[img.class_id]++);
    std::string mask;
    for (auto m : img.foreground) mask.push_back(m ? '1' : '0');
    images.push_back({{"file", file}, {"class", img.class_id}, {"split", split_name(img.split)}, {"foreground", mask}});
  }
  return json{{"format", "patchmoe-dataset/1"},
              {"classes", ds.class_names},
              {"counts", counts},
              {"split_seed", ds.split_seed},
              {"mask_grid", ds.mask_grid},
              {"images", images}};
}

void save_dataset(const Dataset& ds, const fs::path& root, const json& extra) {
  fs::create_directories(root);
  json manifest = dataset_manifest(ds);
  for (const auto& name : ds.class_names) fs::create_directories(root / name);
  for (std::size_t i = 0; i < ds.images.size(); ++i)
    write_ppm(root / manifest["images"][i]["file"].get<std::string>(), ds.images[i].image);
  if (!extra.is_null()) manifest["generator"] = extra;
  std::ofstream os(root / "manifest.json", std::ios::trunc);
  os << manifest.dump(2) << '\n';
}

Dataset load_dataset(const fs::path& root) {
  const fs::path manifest_path = root / "manifest.json";
  if (!fs::exists(manifest_path)) return load_ppm_dir(root);
  std::ifstream is(manifest_path);
  json m;
  try {
    m = json::parse(is);
  } catch (const json::exception& e) {
    throw DataError(manifest_path.string() + ": " + e.what());
  }
  Dataset ds;
  ds.class_names = m.at("classes").get<std::vector<std::string>>();
  ds.split_seed = m.value("split_seed", std::uint64_t{0});
  ds.mask_grid = m.value("mask_grid", std::size_t{0});
  for (const auto& entry : m.at("images")) {
    LabeledImage img;
    img.image = read_ppm(root / entry.at("file").get<std::string>());
    img.class_id = entry.at("class").get<std::size_t>();
    if (img.class_id >= ds.num_classes()) throw DataError(manifest_path.string() + ": class id out of range");
    img.split = entry.at("split").get<std::string>() == "val" ? Split::val : Split::train;
    for (char c : entry.value("foreground", std::string{})) img.foreground.push_back(c == '1' ? 1 : 0);
    ds.images.push_back(std::move(img));
  }
  return ds;
}

Image resize_nearest(const Image& image, std::size_t width, std::size_t height) {
  if (width == 0 || height == 0) throw UsageError("resize_nearest: target size must be > 0");
  Image out(width, height);
  for (std::size_t y = 0; y < height; ++y) {
    const std::size_t sy = y * image.height / height;
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t sx = x * image.width / width;
      std::copy_n(image.at(sx, sy), 3, out.at(x, y));
    }
  }
  return out;
}

Image flip_horizontal(const Image& image) {
  Image out(image.width, image.height);
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x) std::copy_n(image.at(image.width - 1 - x, y), 3, out.at(x, y));
  return out;
}

}  // namespace patchmoe::inline PATCHMOE_PRECISION
