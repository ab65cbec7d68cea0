#include "patchmoe/checkpoint.hpp"

#include <fstream>
#include <map>

#include "patchmoe/blob.hpp"
#include "patchmoe/expert_init.hpp"

namespace patchmoe::inline PATCHMOE_PRECISION {
namespace {

std::filesystem::path with_suffix(const std::filesystem::path& prefix, const char* suffix) {
  return std::filesystem::path(prefix.string() + suffix);
}

nlohmann::json scaler_json(const ScalerParams& s) {
  return {{"min", s.min}, {"max", s.max}, {"degenerate", s.degenerate}};
}

ScalerParams scaler_from_json(const nlohmann::json& j) {
  ScalerParams s;
  s.min = j.at("min").get<std::vector<real>>();
  s.max = j.at("max").get<std::vector<real>>();
  s.degenerate = j.at("degenerate").get<std::vector<std::uint8_t>>();
  if (s.max.size() != s.min.size() || s.degenerate.size() != s.min.size())
    throw DataError("checkpoint: inconsistent scaler");
  return s;
}

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

std::string_view stage_name(Stage s) {
  switch (s) {
    case Stage::dense: return "dense";
    case Stage::moe: return "moe";
    case Stage::moe_finetuned: return "moe-finetuned";
  }
  return "dense";
}

Stage parse_stage(std::string_view s) {
  if (s == "dense") return Stage::dense;
  if (s == "moe") return Stage::moe;
  if (s == "moe-finetuned") return Stage::moe_finetuned;
  throw DataError("unknown checkpoint stage '" + std::string(s) + "'");
}

void save_checkpoint(const std::filesystem::path& prefix, const Model& model, Stage stage,
                     const nlohmann::json& extra, const nlohmann::json& moe_meta) {
  const std::filesystem::path bin = with_suffix(prefix, ".bin");
  std::ofstream os(bin, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open " + bin.string() + " for writing");
  nlohmann::json params = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const NamedTensor& p : model.parameters()) {
    const std::uint64_t bytes = write_tensor(os, p.tensor);
    params.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"offset", offset}, {"bytes", bytes}});
    offset += bytes;
  }
  os.close();
  if (!os) throw DataError("write failed: " + bin.string());

  nlohmann::json moe = nlohmann::json::array();
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    if (!model.layers[i].moe) continue;
    const MoEBlock& b = *model.layers[i].moe;
    nlohmann::json experts = nlohmann::json::array();
    for (const ExpertMLP& e : b.experts) experts.push_back({{"indices", e.indices}, {"gamma", e.gamma.item()}});
    nlohmann::json entry = {{"layer", i},
                            {"experts", b.experts.size()},
                            {"expert_hidden", b.experts.empty() ? 0 : b.experts.front().hidden()},
                            {"router",
                             {{"temperature", b.router.temperature},
                              {"top_k", b.router.top_k},
                              {"renormalize", b.router.renormalize},
                              {"log_prior", b.router.log_prior},
                              {"scaler", scaler_json(b.router.scaler)}}},
                            {"expert_config", experts}};
    const std::string key = std::to_string(i);
    if (moe_meta.contains(key)) entry["meta"] = moe_meta.at(key);
    moe.push_back(std::move(entry));
  }

  const nlohmann::json manifest = {{"format", kCheckpointFormat},
                                   {"stage", stage_name(stage)},
                                   {"dtype", kDoublePrecision ? "f64" : "f32"},
                                   {"config", to_json(model.config())},
                                   {"blob", bin.filename().string()},
                                   {"params", params},
                                   {"moe", moe},
                                   {"extra", extra}};
  const std::filesystem::path json_path = with_suffix(prefix, ".json");
  std::ofstream js(json_path, std::ios::trunc);
  if (!js) throw DataError("cannot open " + json_path.string() + " for writing");
  js << manifest.dump(2) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& prefix) {
  const std::filesystem::path json_path = with_suffix(prefix, ".json");
  std::ifstream js(json_path);
  if (!js) throw DataError("cannot read checkpoint manifest " + json_path.string());
  Checkpoint ck;
  try {
    ck.manifest = nlohmann::json::parse(js);
    if (ck.manifest.at("format") != kCheckpointFormat) throw DataError(json_path.string() + ": unknown format");
    ck.stage = parse_stage(ck.manifest.at("stage").get<std::string>());
    const ModelConfig cfg = model_config_from_json(ck.manifest.at("config"));
    ck.model = Model(cfg, 0);

    for (const nlohmann::json& entry : ck.manifest.at("moe")) {
      const std::size_t layer = entry.at("layer");
      if (layer >= cfg.layers) throw DataError("checkpoint: MoE layer out of range");
      const std::size_t E = entry.at("experts"), de = entry.at("expert_hidden"), d = cfg.dim;
      const nlohmann::json& r = entry.at("router");
      MoEBlock b;
      b.router.centroids = Tensor({E, d});
      b.router.scaler = scaler_from_json(r.at("scaler"));
      b.router.temperature = r.at("temperature").get<real>();
      b.router.top_k = r.at("top_k");
      b.router.renormalize = r.at("renormalize");
      b.router.log_prior = r.at("log_prior").get<std::vector<real>>();
      b.router.norm_gain = Tensor({d});
      b.router.norm_bias = Tensor({d});
      const nlohmann::json& ex = entry.at("expert_config");
      if (ex.size() != E) throw DataError("checkpoint: expert list length mismatch");
      for (std::size_t e = 0; e < E; ++e) {
        ExpertMLP m;
        m.indices = ex[e].at("indices").get<std::vector<std::size_t>>();
        if (m.indices.size() != de) throw DataError("checkpoint: expert index count mismatch");
        m.activation = cfg.activation;
        m.norm_gain = Tensor({d});
        m.norm_bias = Tensor({d});
        m.w1 = Tensor({d, de});
        m.b1 = Tensor({de});
        m.w2 = Tensor({de, d});
        m.b2 = Tensor({d});
        m.gamma = Tensor({1});
        m.xcorr = Tensor({d});
        b.experts.push_back(std::move(m));
      }
      ck.model.layers[layer].moe = std::move(b);
      ck.model.layers[layer].mlp = DenseMLP{};
    }

    const std::filesystem::path bin = prefix.parent_path() / ck.manifest.at("blob").get<std::string>();
    std::ifstream is(bin, std::ios::binary);
    if (!is) throw DataError("cannot read checkpoint blob " + bin.string());
    std::map<std::string, Tensor> targets;
    for (const NamedTensor& p : ck.model.parameters()) targets.emplace(p.name, p.tensor);
    std::size_t loaded = 0;
    for (const nlohmann::json& p : ck.manifest.at("params")) {
      const std::string name = p.at("name");
      auto it = targets.find(name);
      if (it == targets.end()) throw DataError("checkpoint: unexpected parameter " + name);
      is.seekg(static_cast<std::streamoff>(p.at("offset").get<std::uint64_t>()));
      const Tensor t = read_tensor(is);
      if (t.shape() != it->second.shape())
        throw DataError("checkpoint: " + name + " has shape " + to_string(t.shape()) + ", expected " +
                        to_string(it->second.shape()));
      std::copy(t.values().begin(), t.values().end(), it->second.values().begin());
      ++loaded;
    }
    if (loaded != targets.size()) throw DataError("checkpoint: missing parameters in " + json_path.string());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(json_path.string() + ": " + e.what());
  }
  return ck;
}

void require_stage(const Checkpoint& ckpt, std::initializer_list<Stage> allowed, std::string_view command) {
  for (Stage s : allowed)
    if (s == ckpt.stage) return;
  std::string want;
  for (Stage s : allowed) want += (want.empty() ? "" : " or ") + std::string(stage_name(s));
  throw StageError(std::string(command) + " needs a " + want + " checkpoint, got " +
                   std::string(stage_name(ckpt.stage)));
}

ParameterReport parameter_report(const Model& model) {
  ParameterReport r;
  std::map<std::pair<std::size_t, std::size_t>, ExpertParameterCount> experts;
  for (const NamedTensor& p : model.parameters()) {
    const std::size_t n = p.tensor.size();
    r.total += n;
    const auto moe_pos = p.name.find(".moe.");
    if (moe_pos != std::string::npos) {
      r.moe += n;
      const auto ex = p.name.find(".moe.experts.");
      if (ex == std::string::npos) continue;
      const std::size_t layer = std::stoul(p.name.substr(7, moe_pos - 7));
      const std::size_t start = ex + 13;
      const std::size_t dot = p.name.find('.', start);
      const std::size_t expert = std::stoul(p.name.substr(start, dot - start));
      ExpertParameterCount& c = experts[{layer, expert}];
      c.layer = layer;
      c.expert = expert;
      if (p.name.find(".norm.", dot) != std::string::npos)
        c.norm += n;
      else
        c.mlp += n;
      if (ends_with(p.name, ".fc1.bias")) c.hidden = n;
    } else if (p.name.find(".mlp.") != std::string::npos) {
      r.dense_mlp += n;
    } else if (p.name.find(".attn.") != std::string::npos) {
      r.attention += n;
    } else {
      r.other += n;
    }
  }
  for (auto& [key, c] : experts) {
    c.formula = expert_mlp_parameter_formula(model.config().dim, c.hidden);
    r.experts.push_back(c);
  }
  return r;
}

nlohmann::json to_json(const ParameterReport& r) {
  nlohmann::json experts = nlohmann::json::array();
  for (const ExpertParameterCount& c : r.experts)
    experts.push_back({{"layer", c.layer},
                       {"expert", c.expert},
                       {"hidden", c.hidden},
                       {"mlp_params", c.mlp},
                       {"norm_params", c.norm},
                       {"formula", c.formula}});
  return {{"total", r.total},         {"moe", r.moe},   {"dense_mlp", r.dense_mlp},
          {"attention", r.attention}, {"other", r.other}, {"experts", experts}};
}

}  // namespace patchmoe::inline PATCHMOE_PRECISION
