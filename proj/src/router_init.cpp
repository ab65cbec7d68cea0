#include "patchmoe/router_init.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>

#include "patchmoe/blob.hpp"

namespace patchmoe::inline PATCHMOE_PRECISION {

std::vector<std::size_t> default_scales(const ModelConfig& config) {
  std::vector<std::size_t> out;
  for (double f : {0.75, 1.0, 1.25}) {
    const double target = f * double(config.image_size) / double(config.patch_size);
    const std::size_t s = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(target))) * config.patch_size;
    if (std::find(out.begin(), out.end(), s) == out.end()) out.push_back(s);
  }
  return out;
}

std::vector<ClassEmbeddings> collect_embeddings(const Model& model, const Dataset& data,
                                                const CollectOptions& options) {
  const ModelConfig& cfg = model.config();
  if (options.layer >= cfg.layers) throw UsageError("collect_embeddings: layer out of range");
  if (options.samples_per_class == 0) throw UsageError("collect_embeddings: samples_per_class must be >= 1");
  const std::vector<std::size_t> scales = options.scales.empty() ? default_scales(cfg) : options.scales;

  std::vector<std::vector<std::size_t>> by_class(data.num_classes());
  for (std::size_t i : data.indices(Split::train)) by_class.at(data.images[i].class_id).push_back(i);

  const Rng root(options.seed);
  std::vector<ClassEmbeddings> out;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    std::vector<std::size_t> picks = by_class[c];
    if (picks.empty())
      throw DataError("collect_embeddings: class '" + data.class_names[c] + "' has no training images");
    Rng rng = root.fork(c);
    rng.shuffle(picks);
    picks.resize(std::min(picks.size(), options.samples_per_class));

    std::vector<real> rows;
    std::size_t n_rows = 0;
    for (std::size_t scale : scales) {
      const PatchLayout layout(cfg, scale);
      std::vector<Image> resized;
      resized.reserve(picks.size());
      for (std::size_t i : picks) {
        const Image& img = data.images[i].image;
        resized.push_back(img.width == scale && img.height == scale ? img : resize_nearest(img, scale, scale));
      }
      std::vector<const Image*> ptrs;
      for (const Image& img : resized) ptrs.push_back(&img);
      const Tensor captured = capture_pre_mlp(model, image_tokens(ptrs, layout), options.layer);
      rows.insert(rows.end(), captured.values().begin(), captured.values().end());
      n_rows += captured.dim(0) * captured.dim(1);
    }
    out.push_back({c, Tensor({n_rows, cfg.pixels_per_patch, cfg.dim}, std::move(rows)), options.layer});
  }
  return out;
}

PatchSelection select_representative_patches(const Tensor& class_patches, std::size_t K, std::size_t T) {
  if (class_patches.rank() != 3) throw ShapeError("select_representative_patches: expected [N, N_px, d]");
  const std::size_t N = class_patches.dim(0), px = class_patches.dim(1), d = class_patches.dim(2);
  if (K == 0 || N < K)
    throw UsageError("select_representative_patches: need 1 <= K <= N, got K=" + std::to_string(K) +
                     " N=" + std::to_string(N));
  auto src = class_patches.values();

  // Max over the pixel axis.
  std::vector<real> x(N * d);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      real m = src[(i * px) * d + j];
      for (std::size_t p = 1; p < px; ++p) m = std::max(m, src[(i * px + p) * d + j]);
      x[i * d + j] = m;
    }

  std::vector<real> centroid(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(d));
  for (std::size_t i = 1; i < N; ++i)
    for (std::size_t j = 0; j < d; ++j) centroid[j] = std::max(centroid[j], x[i * d + j]);

  std::vector<real> score(N);
  std::vector<std::size_t> order(N), selected;
  auto select = [&] {
    for (std::size_t i = 0; i < N; ++i) {
      real s = 0;
      for (std::size_t j = 0; j < d; ++j) s += centroid[j] * x[i * d + j];
      score[i] = s;
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
    selected.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(K));
  };
  select();
  for (std::size_t step = 0; step < T; ++step) {
    std::vector<std::size_t> ascending = selected;
    std::sort(ascending.begin(), ascending.end());
    std::fill(centroid.begin(), centroid.end(), real(0));
    for (std::size_t i : ascending)
      for (std::size_t j = 0; j < d; ++j) centroid[j] += x[i * d + j];
    for (real& v : centroid) v /= real(K);
    select();
  }

  PatchSelection out{selected, Tensor({K, d})};
  auto rows = out.rows.values();
  for (std::size_t r = 0; r < K; ++r)
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(selected[r] * d), d, rows.begin() + static_cast<std::ptrdiff_t>(r * d));
  return out;
}

std::vector<std::size_t> ClusterTree::cut(std::size_t clusters) const {
  if (clusters == 0 || clusters > leaves) throw UsageError("ClusterTree::cut: cluster count out of range");
  std::vector<std::size_t> slot(leaves);
  std::iota(slot.begin(), slot.end(), std::size_t{0});
  for (std::size_t m = 0; m + clusters < leaves; ++m)
    for (std::size_t& s : slot)
      if (s == merges[m].b) s = merges[m].a;
  // Slots are smallest leaves, so sorting them orders clusters by smallest leaf.
  std::vector<std::size_t> ids = slot;
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  std::vector<std::size_t> labels(leaves);
  for (std::size_t i = 0; i < leaves; ++i)
    labels[i] = static_cast<std::size_t>(std::lower_bound(ids.begin(), ids.end(), slot[i]) - ids.begin());
  return labels;
}

ClusterTree ward_cluster(const Tensor& points, std::size_t clusters) {
  if (points.rank() != 2) throw ShapeError("ward_cluster: expected [n x d] points");
  const std::size_t n = points.dim(0), d = points.dim(1);
  if (clusters == 0 || n < clusters)
    throw UsageError("ward_cluster: need 1 <= clusters <= points, got " + std::to_string(clusters) + " and " +
                     std::to_string(n));
  auto p = points.values();
  std::vector<double> D(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = double(p[i * d + k]) - double(p[j * d + k]);
        s += diff * diff;
      }
      D[i * n + j] = D[j * n + i] = s;
    }

  std::vector<std::size_t> size(n, 1);
  std::vector<bool> active(n, true);
  ClusterTree tree;
  tree.leaves = n;
  for (std::size_t step = 0; step + 1 < n; ++step) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i)
      if (active[i])
        for (std::size_t j = i + 1; j < n; ++j)
          if (active[j]) best = std::min(best, D[i * n + j]);
    const double limit = best + kWardTieTolerance * best;
    std::size_t a = n, b = n;
    for (std::size_t i = 0; i < n && a == n; ++i)
      if (active[i])
        for (std::size_t j = i + 1; j < n; ++j)
          if (active[j] && D[i * n + j] <= limit) {
            a = i;
            b = j;
            break;
          }
    const double na = double(size[a]), nb = double(size[b]);
    for (std::size_t k = 0; k < n; ++k) {
      if (!active[k] || k == a || k == b) continue;
      const double nk = double(size[k]);
      const double v = ((na + nk) * D[a * n + k] + (nb + nk) * D[b * n + k] - nk * D[a * n + b]) / (na + nb + nk);
      D[a * n + k] = D[k * n + a] = v;
    }
    size[a] += size[b];
    active[b] = false;
    tree.merges.push_back({a, b, std::sqrt(std::max(0.0, D[a * n + b])), size[a]});
  }
  return tree;
}

Tensor initial_centroids(const std::vector<std::size_t>& labels, const Tensor& points, std::size_t clusters) {
  const std::size_t n = points.dim(0);
  if (labels.size() != n) throw ShapeError("initial_centroids: one label per point required");
  Tensor w({n, clusters});
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= clusters) throw ShapeError("initial_centroids: label out of range");
    w[i * clusters + labels[i]] = 1;
  }
  const Tensor previous({clusters, points.dim(1)});
  Tensor c = weighted_centroids(points, w, previous);
  std::vector<std::size_t> counts(clusters, 0);
  for (std::size_t l : labels) ++counts[l];
  for (std::size_t e = 0; e < clusters; ++e)
    if (counts[e] == 0) throw UsageError("initial_centroids: cluster " + std::to_string(e) + " is empty");
  return c;
}

Tensor weighted_centroids(const Tensor& points, const Tensor& weights, const Tensor& previous) {
  const std::size_t n = points.dim(0), d = points.dim(1), E = weights.dim(1);
  if (weights.dim(0) != n || previous.dim(0) != E || previous.dim(1) != d)
    throw ShapeError("weighted_centroids: shape mismatch");
  Tensor out = previous.clone();
  auto p = points.values();
  auto w = weights.values();
  auto c = out.values();
  for (std::size_t e = 0; e < E; ++e) {
    double total = 0;
    std::vector<double> acc(d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double wi = w[i * E + e];
      if (wi == 0) continue;
      total += wi;
      for (std::size_t j = 0; j < d; ++j) acc[j] += wi * double(p[i * d + j]);
    }
    if (total > 0)
      for (std::size_t j = 0; j < d; ++j) c[e * d + j] = real(acc[j] / total);
  }
  return out;
}

Tensor refine_centroids_weighted(const Tensor& centroids, const Tensor& points, double temperature,
                                 double threshold) {
  if (!(temperature > 0)) throw UsageError("refine_centroids_weighted: temperature must be > 0");
  const std::size_t n = points.dim(0), E = centroids.dim(0), d = points.dim(1);
  Tensor w({n, E});
  auto pv = points.values();
  auto cv = centroids.values();
  std::vector<double> logits(E);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t e = 0; e < E; ++e)
      logits[e] = double(cosine_similarity(pv.subspan(i * d, d), cv.subspan(e * d, d))) / temperature;
    const double mx = *std::max_element(logits.begin(), logits.end());
    double total = 0;
    for (double& v : logits) total += (v = std::exp(v - mx));
    for (std::size_t e = 0; e < E; ++e) {
      const double prob = logits[e] / total;
      w[i * E + e] = prob < threshold ? real(0) : real(prob);
    }
  }
  return weighted_centroids(points, w, centroids);
}

namespace {

template <typename E>
E parse_enum(std::string_view s, std::initializer_list<std::pair<std::string_view, E>> table, const char* what) {
  for (const auto& [name, value] : table)
    if (name == s) return value;
  throw UsageError(std::string("unknown ") + what + " '" + std::string(s) + "'");
}

// Per-patch vectors [N x d] from [N, N_px, d].
Tensor reduce_pixels(const Tensor& patches, PatchRepr repr) {
  const std::size_t N = patches.dim(0), px = patches.dim(1), d = patches.dim(2);
  Tensor out({N, d});
  auto s = patches.values();
  auto o = out.values();
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      real acc = repr == PatchRepr::max ? s[(i * px) * d + j] : real(0);
      for (std::size_t p = 0; p < px; ++p) {
        const real v = s[(i * px + p) * d + j];
        acc = repr == PatchRepr::max ? std::max(acc, v) : acc + v;
      }
      o[i * d + j] = repr == PatchRepr::max ? acc : acc / real(px);
    }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  std::size_t rows = 0;
  const std::size_t d = parts.front().dim(parts.front().rank() - 1);
  std::vector<real> data;
  for (const Tensor& t : parts) {
    rows += t.size() / d;
    data.insert(data.end(), t.values().begin(), t.values().end());
  }
  return Tensor({rows, d}, std::move(data));
}

}  // namespace

std::string_view router_init_name(RouterInit m) { return m == RouterInit::cluster ? "cluster" : "random"; }
RouterInit parse_router_init(std::string_view s) {
  return parse_enum<RouterInit>(s, {{"cluster", RouterInit::cluster}, {"random", RouterInit::random}}, "router init");
}
std::string_view patch_repr_name(PatchRepr r) { return r == PatchRepr::mean ? "mean" : "max"; }
PatchRepr parse_patch_repr(std::string_view s) {
  return parse_enum<PatchRepr>(s, {{"mean", PatchRepr::mean}, {"max", PatchRepr::max}}, "patch representation");
}
std::string_view selection_space_name(SelectionSpace s) { return s == SelectionSpace::raw ? "raw" : "scaled"; }
SelectionSpace parse_selection_space(std::string_view s) {
  return parse_enum<SelectionSpace>(s, {{"raw", SelectionSpace::raw}, {"scaled", SelectionSpace::scaled}},
                                    "selection space");
}

nlohmann::json to_json(const RouterInitParams& p) {
  return {{"mode", router_init_name(p.mode)},
          {"K", p.K},
          {"T", p.T},
          {"samples_per_class", p.samples_per_class},
          {"scales", p.scales},
          {"patch_repr", patch_repr_name(p.patch_repr)},
          {"selection_space", selection_space_name(p.selection_space)},
          {"refine", p.refine},
          {"refine_temperature", p.refine_temperature},
          {"refine_threshold", p.refine_threshold},
          {"temperature", p.temperature},
          {"top_k", p.top_k},
          {"renormalize", p.renormalize},
          {"seed", p.seed}};
}

RouterBuild build_router(const Model& model, const Dataset& data, std::size_t layer, std::size_t experts,
                         const RouterInitParams& params) {
  const ModelConfig& cfg = model.config();
  if (layer >= model.layers.size() || model.layers[layer].moe)
    throw StageError("build_router: layer " + std::to_string(layer) + " is not a dense layer");
  if (experts == 0) throw UsageError("build_router: experts must be >= 1");
  if (params.top_k == 0 || params.top_k > experts) throw UsageError("build_router: top_k must be in [1, experts]");

  RouterBuild out;
  out.layer = layer;
  out.scales = params.scales.empty() ? default_scales(cfg) : params.scales;

  CollectOptions collect{layer, out.scales, params.samples_per_class, params.seed};
  const std::vector<ClassEmbeddings> classes = collect_embeddings(model, data, collect);
  const std::size_t C = classes.size();

  // Selection runs on raw embeddings unless the scaled mode is requested, in
  // which case a scaler fitted on every collected pixel row is applied first.
  std::vector<Tensor> selected_raw;
  ScalerParams selection_scaler;
  if (params.selection_space == SelectionSpace::scaled) {
    std::vector<Tensor> all;
    for (const ClassEmbeddings& ce : classes) all.push_back(ce.patches);
    selection_scaler = minmax_fit(concat_rows(all));
  }
  for (const ClassEmbeddings& ce : classes) {
    Tensor source = ce.patches;
    if (params.selection_space == SelectionSpace::scaled)
      source = minmax_apply(selection_scaler, ce.patches.reshape({ce.patches.size() / cfg.dim, cfg.dim}))
                   .reshape(ce.patches.shape());
    const PatchSelection sel = select_representative_patches(source, params.K, params.T);
    selected_raw.push_back(index_select_rows(reduce_pixels(ce.patches, params.patch_repr), sel.indices));
  }

  NoGradScope no_grad;
  Router& router = out.router;
  router.scaler = minmax_fit(concat_rows(selected_raw));
  router.temperature = real(params.temperature);
  router.top_k = params.top_k;
  router.renormalize = params.renormalize;
  const DenseMLP& mlp = model.layers[layer].mlp;
  router.norm_gain = mlp.norm.gain.clone();
  router.norm_bias = mlp.norm.bias.clone();

  out.class_points = Tensor({C, cfg.dim});
  for (std::size_t c = 0; c < C; ++c) {
    out.class_topk.push_back(minmax_apply(router.scaler, selected_raw[c]));
    const Tensor mean = mean_axis(out.class_topk.back(), 0);
    std::copy(mean.values().begin(), mean.values().end(), out.class_points.values().begin() + static_cast<std::ptrdiff_t>(c * cfg.dim));
  }

  nlohmann::json prov = {{"params", to_json(params)}, {"layer", layer}, {"experts", experts}, {"scales", out.scales}};
  if (params.mode == RouterInit::random) {
    Rng rng = Rng(params.seed).fork(0x7a11d0);
    router.centroids = Tensor({experts, cfg.dim});
    for (real& v : router.centroids.values()) v = real(rng.uniform());
  } else {
    if (C < experts)
      throw DataError("build_router: " + std::to_string(C) + " classes cannot fill " + std::to_string(experts) +
                      " clusters");
    out.tree = ward_cluster(out.class_points, experts);
    out.class_to_cluster = out.tree.cut(experts);
    router.centroids = initial_centroids(out.class_to_cluster, out.class_points, experts);
    if (params.refine) {
      router.centroids = refine_centroids_weighted(router.centroids, concat_rows(out.class_topk),
                                                   params.refine_temperature, params.refine_threshold);
    }
    prov["class_to_cluster"] = out.class_to_cluster;
    nlohmann::json merges = nlohmann::json::array();
    for (const Merge& m : out.tree.merges) merges.push_back({m.a, m.b, m.distance, m.size});
    prov["merges"] = merges;
  }
  out.provenance = std::move(prov);
  return out;
}

void save_embedding_dump(const std::filesystem::path& path, const RouterBuild& build,
                         const std::vector<std::string>& class_names) {
  save_tensors(path, build.class_topk);
  nlohmann::json side = {{"layer", build.layer},
                         {"scales", build.scales},
                         {"class_names", class_names},
                         {"space", "minmax_scaled"},
                         {"rows_per_class", build.class_topk.empty() ? 0 : build.class_topk.front().dim(0)}};
  std::ofstream os(path.string() + ".json");
  if (!os) throw DataError("cannot write " + path.string() + ".json");
  os << side.dump(2) << '\n';
}

EmbeddingDump load_embedding_dump(const std::filesystem::path& path) {
  std::ifstream is(path.string() + ".json");
  if (!is) throw DataError("cannot read " + path.string() + ".json");
  nlohmann::json side;
  try {
    side = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ".json: " + e.what());
  }
  EmbeddingDump out;
  out.layer = side.at("layer");
  out.scales = side.at("scales").get<std::vector<std::size_t>>();
  out.class_names = side.at("class_names").get<std::vector<std::string>>();
  out.class_topk = load_tensors(path);
  if (out.class_topk.size() != out.class_names.size()) throw DataError(path.string() + ": class count mismatch");
  return out;
}

double adjusted_rand_index(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  if (a.size() != b.size()) throw ShapeError("adjusted_rand_index: label vectors differ in length");
  const std::size_t n = a.size();
  std::map<std::pair<std::size_t, std::size_t>, double> table;
  std::map<std::size_t, double> rows, cols;
  for (std::size_t i = 0; i < n; ++i) {
    table[{a[i], b[i]}] += 1;
    rows[a[i]] += 1;
    cols[b[i]] += 1;
  }
  auto c2 = [](double v) { return v * (v - 1) / 2; };
  double index = 0, sa = 0, sb = 0;
  for (const auto& [k, v] : table) index += c2(v);
  for (const auto& [k, v] : rows) sa += c2(v);
  for (const auto& [k, v] : cols) sb += c2(v);
  const double expected = sa * sb / c2(double(n));
  const double max_index = (sa + sb) / 2;
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

}  // namespace patchmoe::inline PATCHMOE_PRECISION
