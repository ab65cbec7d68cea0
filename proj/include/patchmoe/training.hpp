#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "patchmoe/backbone.hpp"
#include "patchmoe/dataset.hpp"

namespace patchmoe::inline PATCHMOE_PRECISION {

struct OptimConfig {
  double lr_moe = 0.005;
  double lr_classifier = 1e-5;
  double lr_rest = 5e-5;
  double wd_classifier = 1e-8;
  double wd_other = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  std::size_t batch_size = 32;
  std::size_t epochs = 80;

  void validate() const;
  /// One learning rate and weight decay for every group (dense pretraining).
  static OptimConfig uniform(double lr, double weight_decay, std::size_t batch_size, std::size_t epochs);
};

struct AugmentConfig {
  double hflip_p = 0.5;
  double mixup_alpha = 0.2;
  double classifier_dropout = 0.1;

  void validate() const;
};

nlohmann::json to_json(const OptimConfig& c);
nlohmann::json to_json(const AugmentConfig& c);

enum class ParamGroup { moe, classifier, rest };

/// MoE block tensors -> moe, the classifier head -> classifier, the rest -> rest.
ParamGroup param_group(const std::string& name);

/// One decoupled-weight-decay Adam update of a single tensor:
///   p *= 1 - lr*wd; m = b1 m + (1-b1) g; v = b2 v + (1-b2) g^2;
///   p -= lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps).
void adamw_update(std::span<real> p, std::span<const real> g, std::span<real> m, std::span<real> v, std::size_t t,
                  double lr, double wd, double beta1, double beta2, double eps);

class AdamW {
 public:
  AdamW(std::vector<NamedTensor> params, const OptimConfig& config);

  /// Applies one update from the accumulated gradients, then clamps every
  /// ".gamma" tensor to [0, 1].
  void step();
  std::size_t steps() const noexcept { return t_; }

 private:
  struct Slot {
    NamedTensor param;
    double lr, wd;
    std::vector<real> m, v;
  };
  std::vector<Slot> slots_;
  OptimConfig config_;
  std::size_t t_ = 0;
};

struct MixupBatch {
  Tensor x;       // same shape as the input batch
  Tensor y;       // [B x C]
  double lambda = 1;
  std::vector<std::size_t> partner;  // row i is mixed with row partner[i]
};

/// lambda ~ Beta(alpha, alpha), x' = lambda x + (1 - lambda) x[perm]; same
/// for labels. alpha = 0 returns the batch unchanged with lambda = 1.
MixupBatch mixup(const Tensor& x, const Tensor& y, double alpha, Rng& rng);

/// Mirrors the width axis with probability p.
Image hflip(const Image& image, double p, Rng& rng);

/// [B x C] one-hot rows.
Tensor one_hot(const std::vector<std::size_t>& labels, std::size_t classes);

struct EpochMetrics {
  std::size_t epoch = 0;
  std::string split;
  double loss = 0;
  double top1 = 0;
  std::vector<double> expert_entropy;  // one per MoE layer, nats
};

struct TrainLog {
  std::vector<std::size_t> moe_layers;
  std::vector<EpochMetrics> rows;
  std::size_t steps = 0;
};

/// Header: epoch,split,loss,top1,expert_entropy_layer_<i>...
void write_metrics_csv(std::ostream& os, const TrainLog& log);

struct TrainOptions {
  OptimConfig optim;
  AugmentConfig augment;
  std::uint64_t seed = 0;
  bool eval_val = true;
  std::size_t eval_batch = 64;
};

/// Mini-batch training on the train split; appends one train row and, when
/// eval_val is set, one val row per epoch. Deterministic given the seed.
/// Throws DataError on an empty train split and NumericError on divergence.
TrainLog train(Model& model, const Dataset& data, const TrainOptions& options);

struct LayerUtilization {
  std::size_t layer;
  UtilizationReport report;
};

struct EvalResult {
  double loss = 0;
  double top1 = 0;
  std::size_t samples = 0;
  std::vector<double> per_class_accuracy;  // NaN-free: classes without samples report 0
  std::vector<std::size_t> per_class_count;
  std::vector<LayerUtilization> utilization;
};

/// Eval-mode pass over one split. Throws DataError if the split is empty.
EvalResult evaluate(const Model& model, const Dataset& data, Split split, std::size_t batch_size = 64);

/// Token tensor and labels for the given dataset rows at the model's image size.
Tensor batch_tokens(const Model& model, const Dataset& data, const std::vector<std::size_t>& rows);

}  // namespace patchmoe::inline PATCHMOE_PRECISION
