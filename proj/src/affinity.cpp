#include "patchmoe/affinity.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>

#include "patchmoe/training.hpp"

namespace patchmoe::inline PATCHMOE_PRECISION {

std::string_view affinity_mode_name(AffinityMode m) {
  return m == AffinityMode::pre_init ? "pre_init" : "post_finetune";
}

std::vector<double> routing_distribution(std::span<const double> similarity, std::size_t experts,
                                         double temperature, double threshold) {
  if (!(temperature > 0)) throw UsageError("affinity: temperature must be > 0");
  if (experts == 0 || similarity.size() % experts != 0) throw ShapeError("affinity: similarity size mismatch");
  std::vector<double> out(similarity.size());
  for (std::size_t r = 0; r < similarity.size() / experts; ++r) {
    const double* s = similarity.data() + r * experts;
    double* o = out.data() + r * experts;
    const double mx = *std::max_element(s, s + experts);
    double total = 0;
    for (std::size_t e = 0; e < experts; ++e) total += (o[e] = std::exp((s[e] - mx) / temperature));
    for (std::size_t e = 0; e < experts; ++e) {
      o[e] /= total;
      if (o[e] < threshold) o[e] = 0;
    }
  }
  return out;
}

AffinityMatrix affinity_pre(const Tensor& centroids, const std::vector<Tensor>& class_points_topk,
                            double temperature, double threshold) {
  const std::size_t E = centroids.dim(0), d = centroids.dim(1);
  AffinityMatrix m;
  m.classes = class_points_topk.size();
  m.experts = E;
  m.values.assign(m.classes * E, 0.0);
  m.missing.assign(m.classes, 0);
  m.mode = AffinityMode::pre_init;
  m.temperature = temperature;
  m.threshold = threshold;
  auto cv = centroids.values();
  for (std::size_t c = 0; c < m.classes; ++c) {
    const Tensor& pts = class_points_topk[c];
    if (pts.rank() != 2 || pts.dim(1) != d) throw ShapeError("affinity_pre: class points must be [K x d]");
    const std::size_t n = pts.dim(0);
    if (n == 0) {
      m.missing[c] = 1;
      continue;
    }
    auto pv = pts.values();
    std::vector<double> sims(n * E);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t e = 0; e < E; ++e)
        sims[i * E + e] = double(cosine_similarity(pv.subspan(i * d, d), cv.subspan(e * d, d)));
    const std::vector<double> dist = routing_distribution(sims, E, temperature, threshold);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t e = 0; e < E; ++e) m.values[c * E + e] += dist[i * E + e];
    for (std::size_t e = 0; e < E; ++e) m.values[c * E + e] /= double(n);
  }
  m.provenance = {{"mode", "pre_init"}, {"temperature", temperature}, {"threshold", threshold}};
  return m;
}

AffinityMatrix figure_d_variant(const Tensor& centroids, const std::vector<Tensor>& class_points_topk) {
  AffinityMatrix m = affinity_pre(centroids, class_points_topk, kFigureDTemperature, kFigureDThreshold);
  m.provenance["variant"] = "figure_d";
  return m;
}

AffinityMatrix affinity_post(const Model& model, const Dataset& data, const AffinityPostOptions& options) {
  if (options.layer >= model.layers.size() || !model.layers[options.layer].moe)
    throw StageError("affinity_post: layer " + std::to_string(options.layer) + " is not an MoE layer");
  if (options.batches == 0 || options.batch_size == 0) throw UsageError("affinity_post: empty sampling plan");
  const std::vector<std::size_t> rows = data.indices(options.split);
  if (rows.empty()) throw DataError("affinity_post: split is empty");
  const Router& router = model.layers[options.layer].moe->router;
  const std::size_t E = router.experts(), C = model.config().num_classes;
  const bool own_temperature = options.temperature == 0;

  AffinityMatrix m;
  m.classes = C;
  m.experts = E;
  m.values.assign(C * E, 0.0);
  m.class_names = data.class_names;
  m.mode = AffinityMode::post_finetune;
  m.temperature = own_temperature ? double(router.temperature) : options.temperature;
  m.threshold = options.threshold;
  std::vector<std::size_t> patches(C, 0);

  NoGradScope no_grad;
  const Rng root(options.seed);
  for (std::size_t b = 0; b < options.batches; ++b) {
    Rng rng = root.fork(b);
    std::vector<std::size_t> pick = rows;
    rng.shuffle(pick);
    pick.resize(std::min(pick.size(), options.batch_size));
    const ForwardResult fr = model.forward(batch_tokens(model, data, pick));
    const RoutingRecord* rec = nullptr;
    for (const LayerRouting& lr : fr.routing)
      if (lr.layer == options.layer) rec = &lr.record;
    if (rec == nullptr) throw StageError("affinity_post: no routing record for the layer");
    const std::size_t P = rec->patches;
    std::vector<double> dist;
    if (own_temperature) {
      dist.assign(rec->probs.begin(), rec->probs.end());
      for (double& v : dist)
        if (v < options.threshold) v = 0;
    } else {
      const std::vector<double> sims(rec->similarity.begin(), rec->similarity.end());
      dist = routing_distribution(sims, E, options.temperature, options.threshold);
    }
    for (std::size_t i = 0; i < pick.size(); ++i) {
      const std::size_t c = data.images[pick[i]].class_id;
      patches[c] += P;
      for (std::size_t p = 0; p < P; ++p)
        for (std::size_t e = 0; e < E; ++e) m.values[c * E + e] += dist[(i * P + p) * E + e];
    }
  }
  m.missing.assign(C, 0);
  for (std::size_t c = 0; c < C; ++c) {
    if (patches[c] == 0) {
      m.missing[c] = 1;
      continue;
    }
    for (std::size_t e = 0; e < E; ++e) m.values[c * E + e] /= double(patches[c]);
  }
  m.provenance = {{"mode", "post_finetune"}, {"layer", options.layer},        {"batches", options.batches},
                  {"batch_size", options.batch_size}, {"seed", options.seed}, {"temperature", m.temperature},
                  {"threshold", m.threshold}, {"split", options.split == Split::val ? "val" : "train"}};
  return m;
}

CollapseReport collapse_metrics(const AffinityMatrix& m, double threshold) {
  CollapseReport r;
  r.threshold = threshold;
  r.background_score.assign(m.experts, 0);
  r.column_mass.assign(m.experts, 0.0);
  for (std::size_t c = 0; c < m.classes; ++c) {
    if (!m.missing.empty() && m.missing[c]) continue;
    for (std::size_t e = 0; e < m.experts; ++e) {
      const double v = m.at(c, e);
      if (v > threshold) ++r.background_score[e];
      r.column_mass[e] += v;
    }
  }
  double total = 0;
  for (double v : r.column_mass) total += v;
  if (total > 0)
    for (double& v : r.column_mass) v /= total;
  for (double v : r.column_mass)
    if (v > 0) r.mass_entropy -= v * std::log(v);
  std::vector<double> sorted = r.column_mass;
  std::sort(sorted.begin(), sorted.end());
  const double n = double(sorted.size());
  double acc = 0, sum = 0;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    acc += (2.0 * double(i + 1) - n - 1.0) * sorted[i];
    sum += sorted[i];
  }
  r.mass_gini = sum > 0 ? acc / (n * sum) : 0.0;
  for (std::size_t e = 0; e < m.experts; ++e)
    if (r.background_score[e] == 0) r.starved.push_back(e);
  return r;
}

nlohmann::json to_json(const AffinityMatrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t c = 0; c < m.classes; ++c) {
    if (!m.missing.empty() && m.missing[c]) {
      rows.push_back(nullptr);
      continue;
    }
    rows.push_back(std::vector<double>(m.values.begin() + static_cast<std::ptrdiff_t>(c * m.experts),
                                       m.values.begin() + static_cast<std::ptrdiff_t>((c + 1) * m.experts)));
  }
  return {{"classes", m.classes},
          {"experts", m.experts},
          {"class_names", m.class_names},
          {"mode", affinity_mode_name(m.mode)},
          {"temperature", m.temperature},
          {"threshold", m.threshold},
          {"values", rows},
          {"provenance", m.provenance}};
}

nlohmann::json to_json(const CollapseReport& r) {
  return {{"threshold", r.threshold},       {"background_score", r.background_score},
          {"column_mass", r.column_mass},   {"mass_entropy", r.mass_entropy},
          {"mass_gini", r.mass_gini},       {"starved", r.starved},
          {"starved_count", r.starved.size()}};
}

namespace {

std::string class_label(const AffinityMatrix& m, std::size_t c) {
  return c < m.class_names.size() ? m.class_names[c] : std::to_string(c);
}

}  // namespace

void write_affinity_csv(std::ostream& os, const AffinityMatrix& m) {
  os << "class,expert,value\n";
  char buf[40];
  for (std::size_t c = 0; c < m.classes; ++c)
    for (std::size_t e = 0; e < m.experts; ++e) {
      os << class_label(m, c) << ',' << e << ',';
      if (!m.missing.empty() && m.missing[c]) {
        os << "missing\n";
        continue;
      }
      std::snprintf(buf, sizeof buf, "%.17g", m.at(c, e));
      os << buf << '\n';
    }
}

AffinityMatrix read_affinity_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "class,expert,value") throw DataError("affinity csv: bad header");
  std::vector<std::string> names;
  std::vector<std::vector<std::pair<std::size_t, std::string>>> cells;
  std::size_t experts = 0;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto p1 = line.find(','), p2 = line.find(',', p1 == std::string::npos ? 0 : p1 + 1);
    if (p1 == std::string::npos || p2 == std::string::npos)
      throw DataError("affinity csv: malformed line " + std::to_string(line_no));
    const std::string cls = line.substr(0, p1);
    std::size_t e = 0;
    try {
      e = std::stoul(line.substr(p1 + 1, p2 - p1 - 1));
    } catch (const std::exception&) {
      throw DataError("affinity csv: bad expert index on line " + std::to_string(line_no));
    }
    if (names.empty() || names.back() != cls) {
      names.push_back(cls);
      cells.emplace_back();
    }
    cells.back().emplace_back(e, line.substr(p2 + 1));
    experts = std::max(experts, e + 1);
  }
  AffinityMatrix m;
  m.classes = names.size();
  m.experts = experts;
  m.class_names = names;
  m.values.assign(m.classes * experts, 0.0);
  m.missing.assign(m.classes, 0);
  for (std::size_t c = 0; c < m.classes; ++c) {
    if (cells[c].size() != experts) throw DataError("affinity csv: class '" + names[c] + "' has a ragged row");
    for (const auto& [e, text] : cells[c]) {
      if (text == "missing") {
        m.missing[c] = 1;
        continue;
      }
      try {
        m.values[c * experts + e] = std::stod(text);
      } catch (const std::exception&) {
        throw DataError("affinity csv: bad value '" + text + "'");
      }
    }
  }
  return m;
}

void write_affinity_svg(std::ostream& os, const AffinityMatrix& m) {
  const int cell = 18, left = 120, top = 24, footer = 40;
  const int width = left + int(m.experts) * cell + 20;
  const int height = top + int(m.classes) * cell + footer;
  double vmax = 0;
  for (double v : m.values) vmax = std::max(vmax, v);
  if (vmax <= 0) vmax = 1;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" font-family=\"monospace\" font-size=\"10\">\n";
  for (std::size_t e = 0; e < m.experts; ++e)
    os << "<text x=\"" << left + int(e) * cell + 4 << "\" y=\"" << top - 6 << "\">" << e << "</text>\n";
  char fill[16];
  for (std::size_t c = 0; c < m.classes; ++c) {
    const int y = top + int(c) * cell;
    os << "<text x=\"4\" y=\"" << y + 13 << "\">" << class_label(m, c) << "</text>\n";
    for (std::size_t e = 0; e < m.experts; ++e) {
      const bool miss = !m.missing.empty() && m.missing[c];
      const double t = miss ? 0 : std::clamp(m.at(c, e) / vmax, 0.0, 1.0);
      std::snprintf(fill, sizeof fill, "#%02x%02x%02x", int(std::lround(255 - 225 * t)),
                    int(std::lround(255 - 165 * t)), 255);
      os << "<rect class=\"cell\" x=\"" << left + int(e) * cell << "\" y=\"" << y << "\" width=\"" << cell
         << "\" height=\"" << cell << "\" fill=\"" << (miss ? "#dddddd" : fill) << "\"/>\n";
    }
  }
  std::ostringstream foot;
  foot << affinity_mode_name(m.mode) << " temperature=" << m.temperature << " threshold=" << m.threshold
       << " max=" << vmax;
  os << "<text x=\"4\" y=\"" << height - 12 << "\">" << foot.str() << "</text>\n</svg>\n";
}

}  // namespace patchmoe::inline PATCHMOE_PRECISION
