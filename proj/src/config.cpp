#include "patchmoe/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace patchmoe::inline PATCHMOE_PRECISION {
namespace {

namespace pt = boost::property_tree;

std::size_t to_size(const std::string& s) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    if (!s.empty() && s[0] == '-') throw std::invalid_argument("negative");
    v = std::stoull(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != s.size()) throw UsageError("expected a non-negative integer, got '" + s + "'");
  return static_cast<std::size_t>(v);
}

double to_double(const std::string& s) {
  std::size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != s.size()) throw UsageError("expected a number, got '" + s + "'");
  return v;
}

bool to_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw UsageError("expected true or false, got '" + s + "'");
}

std::vector<std::size_t> to_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(' '), e = item.find_last_not_of(' ');
    if (b == std::string::npos) continue;
    out.push_back(to_size(item.substr(b, e - b + 1)));
  }
  return out;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt(std::size_t v) { return std::to_string(v); }
std::string fmt(bool v) { return v ? "true" : "false"; }
std::string fmt(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

struct Field {
  const char* section;
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define PM_SIZE(sec, key, member) \
  Field{sec, key, [](const RunConfig& c) { return fmt(std::size_t(c.member)); }, \
        [](RunConfig& c, const std::string& v) { c.member = to_size(v); }}
#define PM_DOUBLE(sec, key, member) \
  Field{sec, key, [](const RunConfig& c) { return fmt(double(c.member)); }, \
        [](RunConfig& c, const std::string& v) { c.member = to_double(v); }}
#define PM_BOOL(sec, key, member) \
  Field{sec, key, [](const RunConfig& c) { return fmt(bool(c.member)); }, \
        [](RunConfig& c, const std::string& v) { c.member = to_bool(v); }}
#define PM_LIST(sec, key, member) \
  Field{sec, key, [](const RunConfig& c) { return fmt(c.member); }, \
        [](RunConfig& c, const std::string& v) { c.member = to_list(v); }}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      PM_SIZE("model", "image_size", model.image_size),
      PM_SIZE("model", "patch_size", model.patch_size),
      PM_SIZE("model", "pixels_per_patch", model.pixels_per_patch),
      PM_SIZE("model", "dim", model.dim),
      PM_SIZE("model", "ff_dim", model.ff_dim),
      PM_SIZE("model", "layers", model.layers),
      PM_SIZE("model", "heads", model.heads),
      PM_SIZE("model", "num_classes", model.num_classes),
      Field{"model", "activation", [](const RunConfig& c) { return std::string(activation_name(c.model.activation)); },
            [](RunConfig& c, const std::string& v) { c.model.activation = parse_activation(v); }},
      PM_LIST("model", "moe_layers", model.moe_layers),
      PM_SIZE("model", "experts", model.experts),
      PM_SIZE("model", "top_k", model.top_k),
      PM_DOUBLE("model", "temperature", model.temperature),

      PM_SIZE("moe", "reduction_factor", moe.reduction_factor),
      PM_SIZE("moe", "de_literal", moe.de_literal),
      PM_DOUBLE("moe", "gamma_init", moe.gamma_init),
      PM_BOOL("moe", "renormalize", router_init.renormalize),
      Field{"moe", "router_init", [](const RunConfig& c) { return std::string(router_init_name(c.router_init.mode)); },
            [](RunConfig& c, const std::string& v) { c.router_init.mode = parse_router_init(v); }},

      PM_SIZE("router_init", "K", router_init.K),
      PM_SIZE("router_init", "T", router_init.T),
      PM_SIZE("router_init", "samples_per_class", router_init.samples_per_class),
      PM_LIST("router_init", "scales", router_init.scales),
      Field{"router_init", "patch_repr",
            [](const RunConfig& c) { return std::string(patch_repr_name(c.router_init.patch_repr)); },
            [](RunConfig& c, const std::string& v) { c.router_init.patch_repr = parse_patch_repr(v); }},
      Field{"router_init", "selection_space",
            [](const RunConfig& c) { return std::string(selection_space_name(c.router_init.selection_space)); },
            [](RunConfig& c, const std::string& v) { c.router_init.selection_space = parse_selection_space(v); }},
      PM_BOOL("router_init", "refine", router_init.refine),
      PM_DOUBLE("router_init", "refine_temperature", router_init.refine_temperature),
      PM_DOUBLE("router_init", "refine_threshold", router_init.refine_threshold),

      PM_DOUBLE("optim", "lr_moe", optim.lr_moe),
      PM_DOUBLE("optim", "lr_classifier", optim.lr_classifier),
      PM_DOUBLE("optim", "lr_rest", optim.lr_rest),
      PM_DOUBLE("optim", "wd_classifier", optim.wd_classifier),
      PM_DOUBLE("optim", "wd_other", optim.wd_other),
      PM_DOUBLE("optim", "beta1", optim.beta1),
      PM_DOUBLE("optim", "beta2", optim.beta2),
      PM_DOUBLE("optim", "eps", optim.eps),
      PM_SIZE("optim", "batch_size", optim.batch_size),
      PM_SIZE("optim", "epochs", optim.epochs),

      PM_DOUBLE("augment", "hflip_p", augment.hflip_p),
      PM_DOUBLE("augment", "mixup_alpha", augment.mixup_alpha),
      PM_DOUBLE("augment", "classifier_dropout", augment.classifier_dropout),

      PM_DOUBLE("pretrain", "lr", pretrain.lr),
      PM_DOUBLE("pretrain", "weight_decay", pretrain.weight_decay),
      PM_SIZE("pretrain", "batch_size", pretrain.batch_size),
      PM_SIZE("pretrain", "epochs", pretrain.epochs),
      PM_DOUBLE("pretrain", "hflip_p", pretrain.hflip_p),
      PM_DOUBLE("pretrain", "mixup_alpha", pretrain.mixup_alpha),

      PM_SIZE("data", "eval_batch", data.eval_batch),
      PM_SIZE("data", "affinity_batches", data.affinity_batches),
      PM_SIZE("data", "affinity_batch_size", data.affinity_batch_size),

      PM_SIZE("seed", "value", seed),
  };
  return table;
}

#undef PM_SIZE
#undef PM_DOUBLE
#undef PM_BOOL
#undef PM_LIST

const Field& find_field(const std::string& section, const std::string& key) {
  for (const Field& f : fields())
    if (section == f.section && key == f.key) return f;
  throw UsageError("unknown config key '" + section + "." + key + "'");
}

void apply(RunConfig& c, const std::string& section, const std::string& key, const std::string& value) {
  const Field& f = find_field(section, key);
  try {
    f.set(c, value);
  } catch (const UsageError& e) {
    throw UsageError(section + "." + key + ": " + e.what());
  }
}

void apply_overrides(RunConfig& c, const std::vector<std::string>& overrides) {
  for (const std::string& o : overrides) {
    const auto eq = o.find('=');
    const auto dot = o.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq)
      throw UsageError("override must look like section.key=value, got '" + o + "'");
    apply(c, o.substr(0, dot), o.substr(dot + 1, eq - dot - 1), o.substr(eq + 1));
  }
}

// Values that live in more than one struct are copied from their single
// config key here.
RunConfig finish(RunConfig c) {
  c.model.dropout = c.augment.classifier_dropout;
  c.router_init.temperature = c.model.temperature;
  c.router_init.top_k = c.model.top_k;
  c.router_init.seed = c.seed;
  c.validate();
  return c;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  optim.validate();
  augment.validate();
  if (router_init.K == 0) throw UsageError("router_init.K must be >= 1");
  if (!(router_init.refine_temperature > 0)) throw UsageError("router_init.refine_temperature must be > 0");
  if (moe.de_literal == 0) expert_hidden(moe, model.ff_dim);
  if (moe.de_literal > model.ff_dim) throw UsageError("moe.de_literal exceeds model.ff_dim");
  if (!(moe.gamma_init >= 0 && moe.gamma_init <= 1)) throw UsageError("moe.gamma_init must be in [0, 1]");
  if (pretrain.batch_size == 0 || !(pretrain.lr >= 0)) throw UsageError("pretrain: invalid batch_size or lr");
  for (std::size_t s : router_init.scales)
    if (s == 0 || s % model.patch_size != 0) throw UsageError("router_init.scales must be multiples of patch_size");
}

RunConfig parse_run_config(std::istream& is, const std::vector<std::string>& overrides) {
  pt::ptree tree;
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  RunConfig c;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty())
      throw UsageError("config: key '" + section + "' outside a section");
    for (const auto& [key, value] : body) apply(c, section, key, value.data());
  }
  apply_overrides(c, overrides);
  return finish(c);
}

RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot read config file " + path.string());
  return parse_run_config(is, overrides);
}

RunConfig default_run_config(const std::vector<std::string>& overrides) {
  RunConfig c;
  apply_overrides(c, overrides);
  return finish(c);
}

nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json out = nlohmann::json::object();
  for (const Field& f : fields()) out[f.section][f.key] = f.get(c);
  return out;
}

void write_run_config(std::ostream& os, const RunConfig& c) {
  std::string current;
  for (const Field& f : fields()) {
    if (current != f.section) {
      os << (current.empty() ? "" : "\n") << '[' << f.section << "]\n";
      current = f.section;
    }
    os << f.key << " = " << f.get(c) << '\n';
  }
}

}  // namespace patchmoe::inline PATCHMOE_PRECISION
