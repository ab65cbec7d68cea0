#pragma once

// Class-expert affinity: the average routing distribution of each class's
// patches over the experts.

#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "patchmoe/backbone.hpp"
#include "patchmoe/dataset.hpp"

namespace patchmoe::inline PATCHMOE_PRECISION {

enum class AffinityMode { pre_init, post_finetune };

std::string_view affinity_mode_name(AffinityMode m);

struct AffinityMatrix {
  std::size_t classes = 0, experts = 0;
  std::vector<double> values;        // [classes x experts], row-major
  std::vector<std::uint8_t> missing; // per class: no patches were observed
  std::vector<std::string> class_names;
  AffinityMode mode = AffinityMode::pre_init;
  double temperature = 1;
  double threshold = 0;
  nlohmann::json provenance = nlohmann::json::object();

  double at(std::size_t c, std::size_t e) const { return values[c * experts + e]; }
};

/// Softmax over experts of similarity / temperature, with entries below
/// threshold set to zero. `similarity` holds n rows of E values.
std::vector<double> routing_distribution(std::span<const double> similarity, std::size_t experts,
                                         double temperature, double threshold);

/// Per class: cosine similarity of every selected patch to every centroid,
/// routing_distribution, then the mean over the class's patches.
AffinityMatrix affinity_pre(const Tensor& centroids, const std::vector<Tensor>& class_points_topk,
                            double temperature, double threshold);

/// affinity_pre at temperature 0.001 with threshold 0.05.
AffinityMatrix figure_d_variant(const Tensor& centroids, const std::vector<Tensor>& class_points_topk);

inline constexpr double kFigureDTemperature = 0.001;
inline constexpr double kFigureDThreshold = 0.05;

struct AffinityPostOptions {
  std::size_t layer = 0;
  std::size_t batches = 50;
  std::size_t batch_size = 128;
  Split split = Split::val;
  /// Analysis temperature; 0 uses the router's own temperature.
  double temperature = 0;
  double threshold = 0;
  std::uint64_t seed = 0;
};

/// Eval-mode forwards over `batches` random batches of the split (each batch
/// drawn without replacement). Each patch contributes its full routing
/// distribution to its image's class. Classes never sampled are flagged in
/// `missing` and left at zero.
AffinityMatrix affinity_post(const Model& model, const Dataset& data, const AffinityPostOptions& options);

struct CollapseReport {
  double threshold = 0;
  std::vector<std::size_t> background_score;  // per expert: classes with affinity > threshold
  std::vector<double> column_mass;            // per expert, normalized to sum to 1
  double mass_entropy = 0;                    // nats
  double mass_gini = 0;
  std::vector<std::size_t> starved;           // experts with background_score 0
};

/// Rows flagged missing are ignored.
CollapseReport collapse_metrics(const AffinityMatrix& m, double threshold = kFigureDThreshold);

nlohmann::json to_json(const AffinityMatrix& m);
nlohmann::json to_json(const CollapseReport& r);

/// CSV columns class,expert,value; one row per cell, values printed with
/// 17 significant digits. Missing classes print "missing" as the value.
void write_affinity_csv(std::ostream& os, const AffinityMatrix& m);
AffinityMatrix read_affinity_csv(std::istream& is);

/// Heatmap with one rect per cell, classes as rows and experts as columns,
/// linear white-to-blue scale and a provenance footer.
void write_affinity_svg(std::ostream& os, const AffinityMatrix& m);

}  // namespace patchmoe::inline PATCHMOE_PRECISION
