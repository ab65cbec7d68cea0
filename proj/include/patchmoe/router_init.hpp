#pragma once

// Router initialization from a pretrained dense model.
//
// Pipeline: collect pre-MLP patch embeddings per class at several input
// scales, keep the K most representative patches of each class, fit the
// min-max scaler on the kept patches, cluster the per-class means with Ward
// linkage, and place one centroid per cluster.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "patchmoe/backbone.hpp"
#include "patchmoe/dataset.hpp"
#include "patchmoe/moe.hpp"
#include "patchmoe/scaler.hpp"

namespace patchmoe::inline PATCHMOE_PRECISION {

struct ClassEmbeddings {
  std::size_t class_id = 0;
  Tensor patches;  // [N, N_px, d]
  std::size_t layer = 0;
};

struct CollectOptions {
  std::size_t layer = 0;
  std::vector<std::size_t> scales;  // empty: default_scales(config)
  std::size_t samples_per_class = 8;
  std::uint64_t seed = 0;
};

/// Config image size scaled by 0.75, 1 and 1.25, each rounded to the nearest
/// positive multiple of the patch size, duplicates removed.
std::vector<std::size_t> default_scales(const ModelConfig& config);

/// Training-split images only. Throws DataError for a class with no images.
std::vector<ClassEmbeddings> collect_embeddings(const Model& model, const Dataset& data,
                                                const CollectOptions& options);

struct PatchSelection {
  std::vector<std::size_t> indices;  // K distinct rows, in selection order
  Tensor rows;                       // [K x d] pixel-maxed rows at `indices`
};

/// Top-K representative patches of one class. Each patch is reduced to its
/// elementwise max over the pixel axis; the starting centroid is the
/// elementwise max over all patches; each of the T refinement steps replaces
/// the centroid by the mean of the current selection and reselects. Scores
/// are dot products; ties go to the lower row index.
PatchSelection select_representative_patches(const Tensor& class_patches, std::size_t K, std::size_t T);

struct Merge {
  std::size_t a, b;     // merged cluster slots, a < b; a cluster's slot is its smallest leaf
  double distance;      // sqrt of the Lance-Williams Ward value
  std::size_t size;     // points in the merged cluster
};

struct ClusterTree {
  std::size_t leaves = 0;
  std::vector<Merge> merges;  // leaves - 1 merges in order

  /// Labels 0..clusters-1 per leaf after undoing all but the first
  /// leaves - clusters merges. Cluster ids follow their smallest leaf.
  std::vector<std::size_t> cut(std::size_t clusters) const;
};

/// Relative tolerance under which two merge costs count as tied; ties go to
/// the lexicographically smallest (a, b) slot pair.
inline constexpr double kWardTieTolerance = 1e-12;

/// Agglomerative clustering with Ward's minimum-variance criterion via the
/// Lance-Williams recurrence on squared Euclidean distances. Throws
/// UsageError when points has fewer rows than `clusters`.
ClusterTree ward_cluster(const Tensor& points, std::size_t clusters);

/// [E x d] per-cluster unweighted means of points[n x d].
Tensor initial_centroids(const std::vector<std::size_t>& labels, const Tensor& points, std::size_t clusters);

/// centroid_e = sum_i w[i, e] p_i / sum_i w[i, e]; columns with zero total
/// weight keep previous[e]. weights is [n x E].
Tensor weighted_centroids(const Tensor& points, const Tensor& weights, const Tensor& previous);

/// Weights are the softmax over experts of cosine(point, centroid) /
/// temperature, with entries below `threshold` set to zero.
Tensor refine_centroids_weighted(const Tensor& centroids, const Tensor& points, double temperature,
                                 double threshold);

enum class RouterInit { cluster, random };
enum class PatchRepr { mean, max };
enum class SelectionSpace { raw, scaled };

std::string_view router_init_name(RouterInit m);
RouterInit parse_router_init(std::string_view s);
std::string_view patch_repr_name(PatchRepr r);
PatchRepr parse_patch_repr(std::string_view s);
std::string_view selection_space_name(SelectionSpace s);
SelectionSpace parse_selection_space(std::string_view s);

struct RouterInitParams {
  RouterInit mode = RouterInit::cluster;
  std::size_t K = 128;
  std::size_t T = 5;
  std::size_t samples_per_class = 8;
  std::vector<std::size_t> scales;  // empty: default_scales
  /// Per-patch vector used for the scaler, the class means and affinity:
  /// the pixel average (what the router sees at runtime) or the pixel max.
  PatchRepr patch_repr = PatchRepr::mean;
  SelectionSpace selection_space = SelectionSpace::raw;
  bool refine = false;
  double refine_temperature = 0.001;
  double refine_threshold = 0.05;
  double temperature = 1.0;
  std::size_t top_k = 1;
  bool renormalize = true;
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const RouterInitParams& p);

struct RouterBuild {
  Router router;
  std::size_t layer = 0;
  std::vector<std::size_t> scales;
  std::vector<std::size_t> class_to_cluster;   // empty for random init
  std::vector<Tensor> class_topk;              // per class [K x d], scaled
  Tensor class_points;                         // [C x d] scaled class means
  ClusterTree tree;                            // empty for random init
  nlohmann::json provenance;
};

/// Runs the full pipeline for one layer of a dense model. With
/// RouterInit::random the scaler is fitted the same way and the centroids are
/// drawn uniformly from [0, 1]^d instead of clustering.
RouterBuild build_router(const Model& model, const Dataset& data, std::size_t layer, std::size_t experts,
                         const RouterInitParams& params);

/// Selected patches per class as a tensor blob file plus a JSON sidecar
/// (`<path>.json`) holding class ids, layer and scales.
void save_embedding_dump(const std::filesystem::path& path, const RouterBuild& build,
                         const std::vector<std::string>& class_names);

struct EmbeddingDump {
  std::size_t layer = 0;
  std::vector<std::size_t> scales;
  std::vector<std::string> class_names;
  std::vector<Tensor> class_topk;
};

EmbeddingDump load_embedding_dump(const std::filesystem::path& path);

/// Adjusted Rand index between two labelings of the same items.
double adjusted_rand_index(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b);

}  // namespace patchmoe::inline PATCHMOE_PRECISION
