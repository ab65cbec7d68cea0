#include "patchmoe/backbone.hpp"

#include <algorithm>
#include <cmath>

namespace patchmoe::inline PATCHMOE_PRECISION {
namespace {

std::size_t isqrt_exact(std::size_t n) {
  std::size_t r = static_cast<std::size_t>(std::lround(std::sqrt(double(n))));
  return r * r == n ? r : 0;
}

Tensor random_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (real& v : t.values()) v = real(rng.normal(0.0, stddev));
  return t;
}

LinearParams random_linear(std::size_t in, std::size_t out, Rng& rng) {
  return {random_tensor({in, out}, 1.0 / std::sqrt(double(in)), rng), Tensor({out})};
}

NormParams unit_norm(std::size_t d) { return {Tensor::full({d}, real(1)), Tensor({d})}; }

void add_linear(std::vector<NamedTensor>& out, const std::string& prefix, const LinearParams& p) {
  out.push_back({prefix + ".weight", p.weight});
  out.push_back({prefix + ".bias", p.bias});
}

void add_norm(std::vector<NamedTensor>& out, const std::string& prefix, const NormParams& p) {
  out.push_back({prefix + ".gain", p.gain});
  out.push_back({prefix + ".bias", p.bias});
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw UsageError("model config: " + msg); };
  if (layers < 1) fail("layers must be >= 1");
  if (patch_size == 0 || image_size % patch_size != 0) fail("image_size must be a multiple of patch_size");
  if (isqrt_exact(pixels_per_patch) == 0 || patch_size % isqrt_exact(pixels_per_patch) != 0)
    fail("pixels_per_patch must be a square whose side divides patch_size");
  if (dim == 0 || ff_dim == 0) fail("dim and ff_dim must be positive");
  if (heads == 0 || dim % heads != 0) fail("dim must be divisible by heads");
  if (num_classes < 1) fail("num_classes must be >= 1");
  if (dropout < 0 || dropout >= 1) fail("dropout must be in [0, 1)");
  for (std::size_t l : moe_layers)
    if (l >= layers) fail("moe layer " + std::to_string(l) + " out of range");
  if (experts < 1) fail("experts must be >= 1");
  if (top_k < 1 || top_k > experts) fail("top_k must be in [1, experts]");
  if (!(temperature > 0)) fail("temperature must be > 0");
}

std::size_t ModelConfig::token_side() const { return patch_size / isqrt_exact(pixels_per_patch); }

bool ModelConfig::is_moe_layer(std::size_t layer) const {
  return std::find(moe_layers.begin(), moe_layers.end(), layer) != moe_layers.end();
}

ModelConfig ModelConfig::every_other_layer_preset() {
  ModelConfig c;
  c.layers = 9;
  c.moe_layers = {1, 3, 5, 7};
  c.experts = 64;
  return c;
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"image_size", c.image_size},   {"patch_size", c.patch_size},
          {"pixels_per_patch", c.pixels_per_patch},
          {"dim", c.dim},                 {"ff_dim", c.ff_dim},
          {"layers", c.layers},           {"heads", c.heads},
          {"num_classes", c.num_classes}, {"dropout", c.dropout},
          {"activation", std::string(activation_name(c.activation))},
          {"moe_layers", c.moe_layers},   {"experts", c.experts},
          {"top_k", c.top_k},             {"temperature", c.temperature}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.image_size = j.at("image_size");
  c.patch_size = j.at("patch_size");
  c.pixels_per_patch = j.at("pixels_per_patch");
  c.dim = j.at("dim");
  c.ff_dim = j.at("ff_dim");
  c.layers = j.at("layers");
  c.heads = j.at("heads");
  c.num_classes = j.at("num_classes");
  c.dropout = j.at("dropout");
  c.activation = parse_activation(j.at("activation").get<std::string>());
  c.moe_layers = j.at("moe_layers").get<std::vector<std::size_t>>();
  c.experts = j.at("experts");
  c.top_k = j.at("top_k");
  c.temperature = j.at("temperature");
  c.validate();
  return c;
}

PatchLayout::PatchLayout(const ModelConfig& c, std::size_t image_size)
    : image(image_size), patch_size(c.patch_size), pixels(c.pixels_per_patch), token_side(c.token_side()) {
  if (image_size == 0 || image_size % patch_size != 0)
    throw ShapeError("image size " + std::to_string(image_size) + " is not a multiple of patch size " +
                     std::to_string(patch_size));
}

namespace {

// Visits every (token element, image element) pair of the layout.
template <typename F>
void for_each_token_pixel(std::size_t channels, const PatchLayout& l, F&& f) {
  const std::size_t side = l.grid(), slots = isqrt_exact(l.pixels), t = l.token_side;
  const std::size_t features = l.features(channels);
  for (std::size_t py = 0; py < side; ++py)
    for (std::size_t px = 0; px < side; ++px)
      for (std::size_t sy = 0; sy < slots; ++sy)
        for (std::size_t sx = 0; sx < slots; ++sx) {
          const std::size_t token = (py * side + px) * l.pixels + sy * slots + sx;
          for (std::size_t ty = 0; ty < t; ++ty)
            for (std::size_t tx = 0; tx < t; ++tx) {
              const std::size_t y = py * l.patch_size + sy * t + ty;
              const std::size_t x = px * l.patch_size + sx * t + tx;
              for (std::size_t c = 0; c < channels; ++c)
                f(token * features + (ty * t + tx) * channels + c, (y * l.image + x) * channels + c);
            }
        }
}

}  // namespace

std::vector<real> unfold(std::span<const real> hwc, std::size_t channels, const PatchLayout& layout) {
  if (hwc.size() != layout.image * layout.image * channels) throw ShapeError("unfold: image size mismatch");
  std::vector<real> out(hwc.size());
  for_each_token_pixel(channels, layout, [&](std::size_t t, std::size_t i) { out[t] = hwc[i]; });
  return out;
}

std::vector<real> fold(std::span<const real> tokens, std::size_t channels, const PatchLayout& layout) {
  if (tokens.size() != layout.image * layout.image * channels) throw ShapeError("fold: token count mismatch");
  std::vector<real> out(tokens.size());
  for_each_token_pixel(channels, layout, [&](std::size_t t, std::size_t i) { out[i] = tokens[t]; });
  return out;
}

Tensor image_tokens(const std::vector<const Image*>& images, const PatchLayout& layout) {
  const std::size_t P = layout.patches(), N = layout.pixels, F = layout.features(3);
  Tensor out({images.size(), P, N, F});
  auto dst = out.values();
  const std::size_t per_image = P * N * F;
  for (std::size_t b = 0; b < images.size(); ++b) {
    const Image& img = *images[b];
    if (img.width != layout.image || img.height != layout.image)
      throw ShapeError("image_tokens: image is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                       ", layout expects " + std::to_string(layout.image));
    real* base = dst.data() + b * per_image;
    for_each_token_pixel(3, layout, [&](std::size_t t, std::size_t i) {
      base[t] = real(img.pixels[i]) / real(255) - real(0.5);
    });
  }
  return out;
}

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const std::size_t d = config_.dim, f = config_.ff_dim;
  embed = random_linear(config_.token_features(), d, rng);
  pos_embed = random_tensor({config_.patches(config_.image_size) * config_.pixels_per_patch, d}, 0.02, rng);
  layers.resize(config_.layers);
  for (TransformerLayer& layer : layers) {
    layer.attn.norm = unit_norm(d);
    layer.attn.qkv = random_linear(d, 3 * d, rng);
    layer.attn.out = random_linear(d, d, rng);
    layer.mlp.norm = unit_norm(d);
    layer.mlp.fc1 = random_linear(d, f, rng);
    layer.mlp.fc2 = random_linear(f, d, rng);
  }
  final_norm = unit_norm(d);
  head = random_linear(d, config_.num_classes, rng);
}

std::vector<NamedTensor> Model::parameters() const {
  std::vector<NamedTensor> out;
  add_linear(out, "embed", embed);
  out.push_back({"pos_embed", pos_embed});
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const TransformerLayer& layer = layers[i];
    const std::string p = "layers." + std::to_string(i);
    add_norm(out, p + ".attn.norm", layer.attn.norm);
    add_linear(out, p + ".attn.qkv", layer.attn.qkv);
    add_linear(out, p + ".attn.out", layer.attn.out);
    if (!layer.moe) {
      add_norm(out, p + ".mlp.norm", layer.mlp.norm);
      add_linear(out, p + ".mlp.fc1", layer.mlp.fc1);
      add_linear(out, p + ".mlp.fc2", layer.mlp.fc2);
      continue;
    }
    const MoEBlock& moe = *layer.moe;
    add_norm(out, p + ".moe.router.norm", {moe.router.norm_gain, moe.router.norm_bias});
    out.push_back({p + ".moe.router.centroids", moe.router.centroids});
    for (std::size_t e = 0; e < moe.experts.size(); ++e) {
      const ExpertMLP& ex = moe.experts[e];
      const std::string q = p + ".moe.experts." + std::to_string(e);
      add_norm(out, q + ".norm", {ex.norm_gain, ex.norm_bias});
      add_linear(out, q + ".fc1", {ex.w1, ex.b1});
      add_linear(out, q + ".fc2", {ex.w2, ex.b2});
      out.push_back({q + ".gamma", ex.gamma});
      out.push_back({q + ".xcorr", ex.xcorr});
    }
  }
  add_norm(out, "final_norm", final_norm);
  add_linear(out, "head", head);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const NamedTensor& p : parameters()) n += p.tensor.size();
  return n;
}

void Model::set_requires_grad(bool on) {
  for (NamedTensor& p : parameters()) p.tensor.set_requires_grad(on);
}

void Model::zero_grad() {
  for (NamedTensor& p : parameters()) p.tensor.zero_grad();
}

Model Model::clone() const {
  Model m = *this;
  // Rebind every tensor handle in the copy to a deep copy.
  auto re = [](Tensor& t) {
    if (t.defined()) t = t.clone();
  };
  re(m.embed.weight);
  re(m.embed.bias);
  re(m.pos_embed);
  for (TransformerLayer& layer : m.layers) {
    for (Tensor* t : {&layer.attn.norm.gain, &layer.attn.norm.bias, &layer.attn.qkv.weight, &layer.attn.qkv.bias,
                      &layer.attn.out.weight, &layer.attn.out.bias, &layer.mlp.norm.gain, &layer.mlp.norm.bias,
                      &layer.mlp.fc1.weight, &layer.mlp.fc1.bias, &layer.mlp.fc2.weight, &layer.mlp.fc2.bias})
      re(*t);
    if (!layer.moe) continue;
    re(layer.moe->router.centroids);
    re(layer.moe->router.norm_gain);
    re(layer.moe->router.norm_bias);
    for (ExpertMLP& ex : layer.moe->experts)
      for (Tensor* t : {&ex.norm_gain, &ex.norm_bias, &ex.w1, &ex.b1, &ex.w2, &ex.b2, &ex.gamma, &ex.xcorr}) re(*t);
  }
  re(m.final_norm.gain);
  re(m.final_norm.bias);
  re(m.head.weight);
  re(m.head.bias);
  return m;
}

std::vector<std::size_t> positional_rows(const ModelConfig& c, std::size_t grid) {
  const std::size_t base = c.grid(c.image_size), N = c.pixels_per_patch;
  std::vector<std::size_t> rows;
  rows.reserve(grid * grid * N);
  for (std::size_t py = 0; py < grid; ++py)
    for (std::size_t px = 0; px < grid; ++px) {
      const std::size_t sy = py * base / grid, sx = px * base / grid;
      for (std::size_t n = 0; n < N; ++n) rows.push_back((sy * base + sx) * N + n);
    }
  return rows;
}

Tensor embed_tokens(const Model& model, const Tensor& tokens) {
  const ModelConfig& c = model.config();
  if (tokens.rank() != 4 || tokens.dim(2) != c.pixels_per_patch || tokens.dim(3) != c.token_features())
    throw ShapeError("embed: tokens " + to_string(tokens.shape()) + " do not match the model layout");
  const std::size_t P = tokens.dim(1);
  const std::size_t grid = isqrt_exact(P);
  if (grid == 0) throw ShapeError("embed: patch count " + std::to_string(P) + " is not a square grid");
  const Tensor x = linear(tokens, model.embed.weight, model.embed.bias);
  if (grid == c.grid(c.image_size)) return add_broadcast(x, model.pos_embed);
  const std::vector<std::size_t> rows = positional_rows(c, grid);
  return add_broadcast(x, index_select_rows(model.pos_embed, rows));
}

Tensor attention_forward(const Tensor& x, const AttentionParams& attn, std::size_t heads) {
  const Tensor a = layer_norm(x, attn.norm.gain, attn.norm.bias);
  const Tensor mixed = patch_attention(linear(a, attn.qkv.weight, attn.qkv.bias), heads);
  return add(x, linear(mixed, attn.out.weight, attn.out.bias));
}

Tensor dense_mlp_normalized(const Tensor& z, const DenseMLP& mlp, Activation act) {
  return linear(activate(linear(z, mlp.fc1.weight, mlp.fc1.bias), act), mlp.fc2.weight, mlp.fc2.bias);
}

Tensor dense_mlp_forward(const Tensor& x, const DenseMLP& mlp, Activation act) {
  return dense_mlp_normalized(layer_norm(x, mlp.norm.gain, mlp.norm.bias), mlp, act);
}

Tensor classify(const Tensor& x, const Model& model, bool dropout_active, Rng* rng) {
  const std::size_t B = x.dim(0), d = x.dim(3);
  const Tensor normed = layer_norm(x, model.final_norm.gain, model.final_norm.bias);
  Tensor pooled = mean_axis(normed.reshape({B, x.dim(1) * x.dim(2), d}), 1);
  const real rate = real(model.config().dropout);
  if (dropout_active && rate > 0) {
    if (rng == nullptr) throw UsageError("classify: dropout needs an rng");
    pooled = dropout(pooled, rate, *rng);
  }
  return linear(pooled, model.head.weight, model.head.bias);
}

ForwardResult Model::forward(const Tensor& tokens, const ForwardOptions& options) const {
  if (options.capture_layer >= static_cast<int>(layers.size()))
    throw UsageError("capture layer " + std::to_string(options.capture_layer) + " out of range");
  ForwardResult result;
  Tensor x = embed_tokens(*this, tokens);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const TransformerLayer& layer = layers[i];
    x = attention_forward(x, layer.attn, config_.heads);
    const bool capture = options.capture_layer == static_cast<int>(i);
    if (layer.moe) {
      if (capture) result.captured = moe_router_input(x, *layer.moe);
      if (capture && options.stop_after_capture) return result;
      MoEOutput moe = moe_forward(x, *layer.moe);
      result.routing.push_back({i, std::move(moe.record)});
      x = add(x, moe.output);
    } else {
      const Tensor z = layer_norm(x, layer.mlp.norm.gain, layer.mlp.norm.bias);
      if (capture) result.captured = z;
      if (capture && options.stop_after_capture) return result;
      x = add(x, dense_mlp_normalized(z, layer.mlp, config_.activation));
    }
  }
  result.logits = classify(x, *this, options.training, options.rng);
  return result;
}

Tensor capture_pre_mlp(const Model& model, const Tensor& tokens, std::size_t layer) {
  if (layer >= model.layers.size()) throw UsageError("capture_pre_mlp: layer " + std::to_string(layer) + " out of range");
  NoGradScope no_grad;
  ForwardOptions opts;
  opts.capture_layer = static_cast<int>(layer);
  opts.stop_after_capture = true;
  return model.forward(tokens, opts).captured;
}

}  // namespace patchmoe::inline PATCHMOE_PRECISION
