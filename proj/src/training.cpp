#include "patchmoe/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

namespace patchmoe::inline PATCHMOE_PRECISION {

void OptimConfig::validate() const {
  if (!(lr_moe >= 0 && lr_classifier >= 0 && lr_rest >= 0)) throw UsageError("optim: learning rates must be >= 0");
  if (!(wd_classifier >= 0 && wd_other >= 0)) throw UsageError("optim: weight decay must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw UsageError("optim: betas must be in [0, 1)");
  if (!(eps > 0)) throw UsageError("optim: eps must be > 0");
  if (batch_size == 0) throw UsageError("optim: batch_size must be >= 1");
}

OptimConfig OptimConfig::uniform(double lr, double weight_decay, std::size_t batch_size, std::size_t epochs) {
  OptimConfig c;
  c.lr_moe = c.lr_classifier = c.lr_rest = lr;
  c.wd_classifier = c.wd_other = weight_decay;
  c.batch_size = batch_size;
  c.epochs = epochs;
  return c;
}

void AugmentConfig::validate() const {
  if (!(hflip_p >= 0 && hflip_p <= 1)) throw UsageError("augment: hflip_p must be in [0, 1]");
  if (!(mixup_alpha >= 0)) throw UsageError("augment: mixup_alpha must be >= 0");
  if (!(classifier_dropout >= 0 && classifier_dropout < 1))
    throw UsageError("augment: classifier_dropout must be in [0, 1)");
}

nlohmann::json to_json(const OptimConfig& c) {
  return {{"lr_moe", c.lr_moe},         {"lr_classifier", c.lr_classifier}, {"lr_rest", c.lr_rest},
          {"wd_classifier", c.wd_classifier}, {"wd_other", c.wd_other},   {"beta1", c.beta1},
          {"beta2", c.beta2},           {"eps", c.eps},                     {"batch_size", c.batch_size},
          {"epochs", c.epochs}};
}

nlohmann::json to_json(const AugmentConfig& c) {
  return {{"hflip_p", c.hflip_p}, {"mixup_alpha", c.mixup_alpha}, {"classifier_dropout", c.classifier_dropout}};
}

ParamGroup param_group(const std::string& name) {
  if (name.find(".moe.") != std::string::npos) return ParamGroup::moe;
  if (name.rfind("head.", 0) == 0) return ParamGroup::classifier;
  return ParamGroup::rest;
}

void adamw_update(std::span<real> p, std::span<const real> g, std::span<real> m, std::span<real> v, std::size_t t,
                  double lr, double wd, double beta1, double beta2, double eps) {
  const double c1 = 1 - std::pow(beta1, double(t));
  const double c2 = 1 - std::pow(beta2, double(t));
  const double decay = 1 - lr * wd;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double gi = g[i];
    const double mi = beta1 * double(m[i]) + (1 - beta1) * gi;
    const double vi = beta2 * double(v[i]) + (1 - beta2) * gi * gi;
    m[i] = real(mi);
    v[i] = real(vi);
    const double update = lr * (mi / c1) / (std::sqrt(vi / c2) + eps);
    p[i] = real(double(p[i]) * decay - update);
  }
}

AdamW::AdamW(std::vector<NamedTensor> params, const OptimConfig& config) : config_(config) {
  config_.validate();
  for (NamedTensor& p : params) {
    Slot s{std::move(p), 0, 0, {}, {}};
    switch (param_group(s.param.name)) {
      case ParamGroup::moe: s.lr = config.lr_moe; s.wd = config.wd_other; break;
      case ParamGroup::classifier: s.lr = config.lr_classifier; s.wd = config.wd_classifier; break;
      case ParamGroup::rest: s.lr = config.lr_rest; s.wd = config.wd_other; break;
    }
    s.m.assign(s.param.tensor.size(), real(0));
    s.v.assign(s.param.tensor.size(), real(0));
    slots_.push_back(std::move(s));
  }
}

void AdamW::step() {
  ++t_;
  NoGradScope no_grad;
  for (Slot& s : slots_) {
    Tensor& t = s.param.tensor;
    if (!t.has_grad()) {
      // No gradient reached this tensor; only the decoupled decay applies.
      if (s.wd > 0 && s.lr > 0) {
        const std::vector<real> zeros(t.size(), real(0));
        adamw_update(t.values(), zeros, s.m, s.v, t_, s.lr, s.wd, config_.beta1, config_.beta2, config_.eps);
      }
      continue;
    }
    adamw_update(t.values(), t.grad(), s.m, s.v, t_, s.lr, s.wd, config_.beta1, config_.beta2, config_.eps);
    const std::string& n = s.param.name;
    if (n.size() >= 6 && n.compare(n.size() - 6, 6, ".gamma") == 0)
      for (real& v : t.values()) v = std::clamp(v, real(0), real(1));
  }
}

MixupBatch mixup(const Tensor& x, const Tensor& y, double alpha, Rng& rng) {
  if (alpha < 0) throw UsageError("mixup: alpha must be >= 0");
  const std::size_t B = x.dim(0);
  if (y.dim(0) != B) throw ShapeError("mixup: batch size mismatch");
  MixupBatch out;
  out.partner.resize(B);
  for (std::size_t i = 0; i < B; ++i) out.partner[i] = i;
  if (alpha == 0 || B == 0) {
    out.x = x.clone();
    out.y = y.clone();
    return out;
  }
  out.lambda = rng.beta(alpha, alpha);
  out.partner = rng.permutation(B);
  auto mix = [&](const Tensor& src) {
    Tensor dst(src.shape());
    const std::size_t row = src.size() / B;
    auto s = src.values();
    auto d = dst.values();
    const real l = real(out.lambda);
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t k = 0; k < row; ++k)
        d[i * row + k] = l * s[i * row + k] + (real(1) - l) * s[out.partner[i] * row + k];
    return dst;
  };
  out.x = mix(x);
  out.y = mix(y);
  return out;
}

Image hflip(const Image& image, double p, Rng& rng) {
  return rng.bernoulli(p) ? flip_horizontal(image) : image;
}

Tensor one_hot(const std::vector<std::size_t>& labels, std::size_t classes) {
  Tensor out({labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) throw DataError("label " + std::to_string(labels[i]) + " out of range");
    out[i * classes + labels[i]] = 1;
  }
  return out;
}

namespace {

std::vector<const Image*> resized_batch(const Model& model, const std::vector<const Image*>& images,
                                        std::vector<Image>& storage) {
  const std::size_t s = model.config().image_size;
  storage.clear();
  storage.reserve(images.size());
  std::vector<const Image*> out;
  for (const Image* img : images) {
    if (img->width == s && img->height == s) {
      out.push_back(img);
    } else {
      storage.push_back(resize_nearest(*img, s, s));
      out.push_back(&storage.back());
    }
  }
  return out;
}

std::size_t argmax_row(std::span<const real> logits, std::size_t row, std::size_t classes) {
  const real* r = logits.data() + row * classes;
  return static_cast<std::size_t>(std::max_element(r, r + classes) - r);
}

struct RoutingTally {
  std::vector<std::size_t> layers;
  std::vector<std::vector<std::size_t>> counts;

  void add(const std::vector<LayerRouting>& routing) {
    if (layers.empty())
      for (const LayerRouting& lr : routing) {
        layers.push_back(lr.layer);
        counts.emplace_back(lr.record.expert_counts.size(), 0);
      }
    for (std::size_t i = 0; i < routing.size(); ++i)
      for (std::size_t e = 0; e < counts[i].size(); ++e) counts[i][e] += routing[i].record.expert_counts[e];
  }

  std::vector<LayerUtilization> reports() const {
    std::vector<LayerUtilization> out;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      RoutingRecord r;
      r.expert_counts = counts[i];
      out.push_back({layers[i], dispatch_stats(r)});
    }
    return out;
  }
};

std::vector<std::size_t> moe_layer_indices(const Model& model) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < model.layers.size(); ++i)
    if (model.layers[i].moe) out.push_back(i);
  return out;
}

}  // namespace

Tensor batch_tokens(const Model& model, const Dataset& data, const std::vector<std::size_t>& rows) {
  std::vector<const Image*> images;
  for (std::size_t r : rows) images.push_back(&data.images.at(r).image);
  std::vector<Image> storage;
  const PatchLayout layout(model.config(), model.config().image_size);
  return image_tokens(resized_batch(model, images, storage), layout);
}

void write_metrics_csv(std::ostream& os, const TrainLog& log) {
  os << "epoch,split,loss,top1";
  for (std::size_t l : log.moe_layers) os << ",expert_entropy_layer_" << l;
  os << '\n';
  char buf[64];
  for (const EpochMetrics& m : log.rows) {
    os << m.epoch << ',' << m.split;
    std::snprintf(buf, sizeof buf, ",%.6f,%.6f", m.loss, m.top1);
    os << buf;
    for (double e : m.expert_entropy) {
      std::snprintf(buf, sizeof buf, ",%.6f", e);
      os << buf;
    }
    os << '\n';
  }
}

EvalResult evaluate(const Model& model, const Dataset& data, Split split, std::size_t batch_size) {
  const std::vector<std::size_t> rows = data.indices(split);
  if (rows.empty()) throw DataError("evaluate: split is empty");
  if (batch_size == 0) throw UsageError("evaluate: batch_size must be >= 1");
  NoGradScope no_grad;
  const std::size_t C = model.config().num_classes;
  EvalResult res;
  res.per_class_count.assign(C, 0);
  std::vector<std::size_t> correct(C, 0);
  RoutingTally tally;
  double loss_sum = 0;
  for (std::size_t start = 0; start < rows.size(); start += batch_size) {
    const std::vector<std::size_t> chunk(rows.begin() + static_cast<std::ptrdiff_t>(start),
                                         rows.begin() + static_cast<std::ptrdiff_t>(std::min(rows.size(), start + batch_size)));
    std::vector<std::size_t> labels;
    for (std::size_t r : chunk) labels.push_back(data.images[r].class_id);
    const ForwardResult fr = model.forward(batch_tokens(model, data, chunk));
    loss_sum += double(cross_entropy(fr.logits, one_hot(labels, C)).item()) * double(chunk.size());
    auto logits = fr.logits.values();
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      ++res.per_class_count[labels[i]];
      if (argmax_row(logits, i, C) == labels[i]) ++correct[labels[i]];
    }
    tally.add(fr.routing);
  }
  std::size_t total_correct = 0;
  res.per_class_accuracy.assign(C, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    total_correct += correct[c];
    if (res.per_class_count[c] > 0) res.per_class_accuracy[c] = double(correct[c]) / double(res.per_class_count[c]);
  }
  res.samples = rows.size();
  res.loss = loss_sum / double(rows.size());
  res.top1 = double(total_correct) / double(rows.size());
  res.utilization = tally.reports();
  return res;
}

TrainLog train(Model& model, const Dataset& data, const TrainOptions& options) {
  options.optim.validate();
  options.augment.validate();
  std::vector<std::size_t> train_rows = data.indices(Split::train);
  if (train_rows.empty()) throw DataError("train: the train split is empty");
  const std::size_t C = model.config().num_classes;
  model.config().dropout = options.augment.classifier_dropout;

  TrainLog log;
  log.moe_layers = moe_layer_indices(model);
  model.set_requires_grad(true);
  AdamW opt(model.parameters(), options.optim);
  const Rng root(options.seed);
  const bool has_val = options.eval_val && !data.indices(Split::val).empty();

  for (std::size_t epoch = 0; epoch < options.optim.epochs; ++epoch) {
    Rng rng = root.fork(epoch);
    std::vector<std::size_t> order = train_rows;
    rng.shuffle(order);
    double loss_sum = 0;
    std::size_t correct = 0;
    RoutingTally tally;
    for (std::size_t start = 0; start < order.size(); start += options.optim.batch_size) {
      const std::size_t end = std::min(order.size(), start + options.optim.batch_size);
      std::vector<Image> flipped;
      flipped.reserve(end - start);
      std::vector<std::size_t> labels;
      for (std::size_t i = start; i < end; ++i) {
        flipped.push_back(hflip(data.images[order[i]].image, options.augment.hflip_p, rng));
        labels.push_back(data.images[order[i]].class_id);
      }
      std::vector<const Image*> ptrs;
      for (const Image& img : flipped) ptrs.push_back(&img);
      std::vector<Image> storage;
      const PatchLayout layout(model.config(), model.config().image_size);
      const Tensor tokens = image_tokens(resized_batch(model, ptrs, storage), layout);
      const MixupBatch mixed = mixup(tokens, one_hot(labels, C), options.augment.mixup_alpha, rng);

      model.zero_grad();
      Tape tape;
      ForwardOptions fo;
      fo.training = true;
      fo.rng = &rng;
      const ForwardResult fr = model.forward(mixed.x, fo);
      Tensor loss = cross_entropy(fr.logits, mixed.y);
      const double lv = loss.item();
      if (!std::isfinite(lv)) throw NumericError("train: loss diverged at epoch " + std::to_string(epoch));
      tape.backward(loss);
      opt.step();

      loss_sum += lv * double(labels.size());
      auto logits = fr.logits.values();
      // Under mixup the target is the label carrying the larger weight.
      for (std::size_t i = 0; i < labels.size(); ++i) {
        const std::size_t target = mixed.lambda >= 0.5 ? labels[i] : labels[mixed.partner[i]];
        if (argmax_row(logits, i, C) == target) ++correct;
      }
      tally.add(fr.routing);
    }
    EpochMetrics row{epoch, "train", loss_sum / double(order.size()), double(correct) / double(order.size()), {}};
    for (const LayerUtilization& u : tally.reports()) row.expert_entropy.push_back(u.report.entropy);
    log.rows.push_back(std::move(row));

    if (has_val) {
      const EvalResult ev = evaluate(model, data, Split::val, options.eval_batch);
      EpochMetrics vrow{epoch, "val", ev.loss, ev.top1, {}};
      for (const LayerUtilization& u : ev.utilization) vrow.expert_entropy.push_back(u.report.entropy);
      log.rows.push_back(std::move(vrow));
    }
  }
  log.steps = opt.steps();
  model.set_requires_grad(false);
  model.zero_grad();
  return log;
}

}  // namespace patchmoe::inline PATCHMOE_PRECISION
