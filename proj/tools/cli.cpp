#include "cli.hpp"

#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "patchmoe/affinity.hpp"
#include "patchmoe/checkpoint.hpp"
#include "patchmoe/config.hpp"
#include "patchmoe/dataset.hpp"
#include "patchmoe/expert_init.hpp"
#include "patchmoe/kernels.hpp"
#include "patchmoe/router_init.hpp"
#include "patchmoe/training.hpp"

namespace patchmoe::cli {
namespace fs = std::filesystem;
using nlohmann::json;
using namespace patchmoe::f32;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config, "INI run configuration")->check(CLI::ExistingFile);
    cmd->add_option("--set", sets, "Override one config value, section.key=value (repeatable)");
    cmd->add_option("--seed", seed, "Seed; overrides seed.value");
  }

  RunConfig resolve() const {
    std::vector<std::string> all = sets;
    if (seed) all.push_back("seed.value=" + std::to_string(*seed));
    return config.empty() ? default_run_config(all) : load_run_config(config, all);
  }
};

std::string hex64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

json environment() {
  return {{"kernels", std::string(kernels::active().name)},
          {"precision", kDoublePrecision ? "f64" : "f32"},
          {"rng", std::string(Rng::kAlgorithm)}};
}

// Everything needed to repeat the run: the command line, the resolved
// configuration, and the execution environment.
void write_run_manifest(const fs::path& path, const std::vector<std::string>& args, const json& config,
                        const json& outputs) {
  json m = {{"argv", args}, {"environment", environment()}, {"outputs", outputs}};
  if (!config.is_null()) m["config"] = config;
  write_text(path, m.dump(2) + "\n");
}

std::string csv_of(const TrainLog& log) {
  std::ostringstream os;
  write_metrics_csv(os, log);
  return os.str();
}

std::vector<std::size_t> moe_layers_of(const Model& m) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < m.layers.size(); ++i)
    if (m.layers[i].moe) out.push_back(i);
  return out;
}

Dataset load_data(const std::string& dir, const Model& model) {
  Dataset ds = load_dataset(dir);
  if (ds.num_classes() != model.config().num_classes)
    throw DataError("dataset has " + std::to_string(ds.num_classes()) + " classes, model expects " +
                    std::to_string(model.config().num_classes));
  return ds;
}

int cmd_gen_data(const std::string& spec_path, const std::string& out_dir, const std::vector<std::string>& args,
                 std::ostream& out) {
  SynthSpec spec;
  try {
    spec = synth_spec_from_json(json::parse(read_text(spec_path)));
  } catch (const json::exception& e) {
    throw UsageError("spec " + spec_path + ": " + e.what());
  }
  spec.validate();
  const Dataset ds = generate(spec);
  save_dataset(ds, out_dir, {{"spec", to_json(spec)}});
  write_run_manifest(fs::path(out_dir) / "run.json", args, nullptr, {{"dataset", out_dir}});
  out << "wrote " << ds.images.size() << " images in " << ds.num_classes() << " classes to " << out_dir << '\n';
  return kOk;
}

int cmd_pretrain(const Common& common, const std::string& data_dir, const std::string& out_prefix,
                 const std::string& metrics_path, const std::vector<std::string>& args, std::ostream& out) {
  RunConfig cfg = common.resolve();
  Dataset ds = load_dataset(data_dir);
  cfg.model.num_classes = ds.num_classes();
  cfg.validate();
  Model model(cfg.model, cfg.seed);
  TrainOptions opts;
  opts.optim = OptimConfig::uniform(cfg.pretrain.lr, cfg.pretrain.weight_decay, cfg.pretrain.batch_size,
                                    cfg.pretrain.epochs);
  opts.augment = {cfg.pretrain.hflip_p, cfg.pretrain.mixup_alpha, cfg.augment.classifier_dropout};
  opts.seed = cfg.seed;
  opts.eval_batch = cfg.data.eval_batch;
  const TrainLog log = train(model, ds, opts);
  const std::string metrics = metrics_path.empty() ? out_prefix + ".metrics.csv" : metrics_path;
  write_text(metrics, csv_of(log));
  save_checkpoint(out_prefix, model, Stage::dense, {{"command", "pretrain"}, {"seed", cfg.seed}});
  write_run_manifest(out_prefix + ".run.json", args, to_json(cfg),
                     {{"checkpoint", out_prefix}, {"metrics", metrics}, {"steps", log.steps}});
  const EpochMetrics& last = log.rows.back();
  out << "pretrain: " << log.steps << " steps, final " << last.split << " top1 " << last.top1 << '\n';
  return kOk;
}

int cmd_moefy(const Common& common, const std::string& ckpt_prefix, const std::string& data_dir,
              const std::string& out_prefix, const std::string& router_init, std::optional<std::size_t> de_literal,
              const std::vector<std::string>& args, std::ostream& out) {
  RunConfig cfg = common.resolve();
  if (!router_init.empty()) cfg.router_init.mode = parse_router_init(router_init);
  if (de_literal) cfg.moe.de_literal = *de_literal;
  Checkpoint ck = load_checkpoint(ckpt_prefix);
  require_stage(ck, {Stage::dense}, "moefy");
  Model& model = ck.model;
  ModelConfig& mc = model.config();
  mc.moe_layers = cfg.model.moe_layers;
  mc.experts = cfg.model.experts;
  mc.top_k = cfg.model.top_k;
  mc.temperature = cfg.model.temperature;
  mc.validate();
  cfg.model = mc;
  cfg.validate();
  const Dataset ds = load_data(data_dir, model);

  // Every router is built from the dense model's embeddings before any layer
  // is converted.
  std::vector<RouterBuild> builds;
  for (std::size_t layer : mc.moe_layers)
    builds.push_back(build_router(model, ds, layer, mc.experts, cfg.router_init));
  json meta = json::object();
  json dumps = json::array();
  for (std::size_t i = 0; i < builds.size(); ++i) {
    const std::size_t layer = mc.moe_layers[i];
    const std::uint64_t hash = dense_mlp_hash(snapshot_layer(model, layer));
    moefy_layer(model, layer, builds[i].router, cfg.moe);
    const std::string dump = out_prefix + ".layer" + std::to_string(layer) + ".emb";
    save_embedding_dump(dump, builds[i], ds.class_names);
    dumps.push_back(dump);
    meta[std::to_string(layer)] = {{"router_provenance", builds[i].provenance},
                                   {"source_dense_hash", hex64(hash)},
                                   {"moefy", to_json(cfg.moe)},
                                   {"expert_hidden", expert_hidden(cfg.moe, mc.ff_dim)},
                                   {"embedding_dump", dump}};
  }
  save_checkpoint(out_prefix, model, Stage::moe, {{"command", "moefy"}, {"source", ckpt_prefix}}, meta);
  write_run_manifest(out_prefix + ".run.json", args, to_json(cfg), {{"checkpoint", out_prefix}, {"dumps", dumps}});
  out << "moefy: " << mc.moe_layers.size() << " layers, " << mc.experts << " experts each, d_e="
      << expert_hidden(cfg.moe, mc.ff_dim) << ", router init " << router_init_name(cfg.router_init.mode) << '\n';
  return kOk;
}

int cmd_finetune(const Common& common, const std::string& ckpt_prefix, const std::string& data_dir,
                 const std::string& out_prefix, const std::string& metrics_path, const std::vector<std::string>& args,
                 std::ostream& out) {
  RunConfig cfg = common.resolve();
  Checkpoint ck = load_checkpoint(ckpt_prefix);
  require_stage(ck, {Stage::moe, Stage::moe_finetuned}, "finetune");
  const Dataset ds = load_data(data_dir, ck.model);
  TrainOptions opts;
  opts.optim = cfg.optim;
  opts.augment = cfg.augment;
  opts.seed = cfg.seed;
  opts.eval_batch = cfg.data.eval_batch;
  const TrainLog log = train(ck.model, ds, opts);
  const std::string metrics = metrics_path.empty() ? out_prefix + ".metrics.csv" : metrics_path;
  write_text(metrics, csv_of(log));
  json meta = json::object();
  for (const json& entry : ck.manifest.at("moe"))
    if (entry.contains("meta")) meta[std::to_string(entry.at("layer").get<std::size_t>())] = entry.at("meta");
  save_checkpoint(out_prefix, ck.model, Stage::moe_finetuned, {{"command", "finetune"}, {"source", ckpt_prefix}},
                  meta);
  write_run_manifest(out_prefix + ".run.json", args, to_json(cfg),
                     {{"checkpoint", out_prefix}, {"metrics", metrics}, {"steps", log.steps}});
  const EpochMetrics& last = log.rows.back();
  out << "finetune: " << log.steps << " steps, final " << last.split << " top1 " << last.top1 << '\n';
  return kOk;
}

int cmd_eval(const Common& common, const std::string& ckpt_prefix, const std::string& data_dir,
             const std::string& split_name, const std::string& out_path, const std::string& routing_path,
             const std::vector<std::string>& args, std::ostream& out) {
  const RunConfig cfg = common.resolve();
  const Checkpoint ck = load_checkpoint(ckpt_prefix);
  const Dataset ds = load_data(data_dir, ck.model);
  const Split split = split_name == "train" ? Split::train : Split::val;
  const EvalResult ev = evaluate(ck.model, ds, split, cfg.data.eval_batch);
  TrainLog log;
  log.moe_layers = moe_layers_of(ck.model);
  EpochMetrics row{0, split_name, ev.loss, ev.top1, {}};
  for (const LayerUtilization& u : ev.utilization) row.expert_entropy.push_back(u.report.entropy);
  log.rows.push_back(row);
  const std::string csv = csv_of(log);
  if (out_path.empty())
    out << csv;
  else
    write_text(out_path, csv);
  if (!routing_path.empty()) {
    if (log.moe_layers.empty()) throw StageError("eval --routing needs an MoE checkpoint");
    NoGradScope no_grad;
    std::ostringstream os;
    const std::vector<std::size_t> rows = ds.indices(split);
    os << "batch,patch,rank,expert,gate\n";
    for (std::size_t start = 0; start < rows.size(); start += cfg.data.eval_batch) {
      const std::vector<std::size_t> chunk(rows.begin() + static_cast<std::ptrdiff_t>(start),
                                           rows.begin() + static_cast<std::ptrdiff_t>(std::min(rows.size(), start + cfg.data.eval_batch)));
      const ForwardResult fr = ck.model.forward(batch_tokens(ck.model, ds, chunk));
      std::ostringstream part;
      write_routing_csv(part, fr.routing.front().record);
      std::istringstream lines(part.str());
      std::string line;
      std::getline(lines, line);
      while (std::getline(lines, line)) {
        const auto comma = line.find(',');
        os << start + std::stoul(line.substr(0, comma)) << line.substr(comma) << '\n';
      }
    }
    write_text(routing_path, os.str());
  }
  if (!out_path.empty()) {
    write_run_manifest(out_path + ".run.json", args, to_json(cfg), {{"metrics", out_path}});
    out << "eval: " << split_name << " top1 " << ev.top1 << " loss " << ev.loss << '\n';
  }
  return kOk;
}

int cmd_affinity(const Common& common, const std::string& ckpt_prefix, const std::string& mode,
                 const std::string& dump_path, const std::string& data_dir, std::optional<std::size_t> layer_opt,
                 const std::string& format, const std::string& out_path, std::optional<double> temperature,
                 std::optional<double> threshold, const std::string& collapse_path,
                 const std::vector<std::string>& args, std::ostream& out) {
  const RunConfig cfg = common.resolve();
  const Checkpoint ck = load_checkpoint(ckpt_prefix);
  require_stage(ck, {Stage::moe, Stage::moe_finetuned}, "affinity");
  const std::vector<std::size_t> layers = moe_layers_of(ck.model);
  const std::size_t layer = layer_opt.value_or(layers.front());
  if (layer >= ck.model.layers.size() || !ck.model.layers[layer].moe)
    throw UsageError("layer " + std::to_string(layer) + " is not an MoE layer");
  const Router& router = ck.model.layers[layer].moe->router;

  AffinityMatrix m;
  if (mode == "pre" || mode == "figure-d") {
    std::string dump = dump_path;
    if (dump.empty())
      for (const json& entry : ck.manifest.at("moe"))
        if (entry.at("layer") == layer && entry.contains("meta")) dump = entry["meta"].value("embedding_dump", "");
    if (dump.empty()) throw UsageError("affinity --mode " + mode + " needs --dump");
    const EmbeddingDump ed = load_embedding_dump(dump);
    if (mode == "figure-d") {
      m = figure_d_variant(router.centroids, ed.class_topk);
    } else {
      m = affinity_pre(router.centroids, ed.class_topk, temperature.value_or(1.0), threshold.value_or(0.0));
    }
    m.class_names = ed.class_names;
    m.provenance["layer"] = layer;
    m.provenance["dump"] = dump;
  } else if (mode == "post") {
    if (data_dir.empty()) throw UsageError("affinity --mode post needs --data");
    const Dataset ds = load_data(data_dir, ck.model);
    AffinityPostOptions opts;
    opts.layer = layer;
    opts.batches = cfg.data.affinity_batches;
    opts.batch_size = cfg.data.affinity_batch_size;
    opts.temperature = temperature.value_or(0.0);
    opts.threshold = threshold.value_or(0.0);
    opts.seed = cfg.seed;
    m = affinity_post(ck.model, ds, opts);
  } else {
    throw UsageError("unknown affinity mode '" + mode + "'");
  }
  m.provenance["checkpoint"] = ckpt_prefix;

  std::ostringstream body;
  if (format == "csv")
    write_affinity_csv(body, m);
  else if (format == "json")
    body << to_json(m).dump(2) << '\n';
  else if (format == "svg")
    write_affinity_svg(body, m);
  else
    throw UsageError("unknown format '" + format + "'");
  if (out_path.empty())
    out << body.str();
  else
    write_text(out_path, body.str());
  if (!collapse_path.empty()) write_text(collapse_path, to_json(collapse_metrics(m)).dump(2) + "\n");
  if (!out_path.empty()) write_run_manifest(out_path + ".run.json", args, to_json(cfg), {{"affinity", out_path}});
  return kOk;
}

int cmd_inspect(const std::string& ckpt_prefix, bool as_json, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(ckpt_prefix);
  const ParameterReport rep = parameter_report(ck.model);
  json layers = json::array();
  for (const json& entry : ck.manifest.at("moe")) {
    json l = {{"layer", entry.at("layer")},
              {"experts", entry.at("experts")},
              {"expert_hidden", entry.at("expert_hidden")},
              {"ff_dim", ck.model.config().ff_dim},
              {"router", entry.at("router")}};
    l["router"].erase("scaler");
    if (entry.contains("meta")) {
      l["router_provenance"] = entry["meta"].value("router_provenance", json::object());
      l["source_dense_hash"] = entry["meta"].value("source_dense_hash", "");
      l["moefy"] = entry["meta"].value("moefy", json::object());
    }
    layers.push_back(l);
  }
  const json report = {{"checkpoint", ckpt_prefix},
                       {"stage", ck.manifest.at("stage")},
                       {"config", ck.manifest.at("config")},
                       {"parameters", to_json(rep)},
                       {"moe_layers", layers},
                       {"environment", environment()}};
  if (as_json) {
    out << report.dump(2) << '\n';
    return kOk;
  }
  out << "stage: " << ck.manifest.at("stage").get<std::string>() << '\n'
      << "parameters: total " << rep.total << ", moe " << rep.moe << ", dense mlp " << rep.dense_mlp
      << ", attention " << rep.attention << ", other " << rep.other << '\n';
  for (const json& l : layers) {
    out << "layer " << l["layer"] << ": " << l["experts"] << " experts, d_e " << l["expert_hidden"] << " of d_ff "
        << l["ff_dim"] << ", top_k " << l["router"]["top_k"] << ", temperature " << l["router"]["temperature"];
    if (l.contains("router_provenance") && l["router_provenance"].contains("params"))
      out << ", router init " << l["router_provenance"]["params"]["mode"].get<std::string>() << " (K "
          << l["router_provenance"]["params"]["K"] << ", T " << l["router_provenance"]["params"]["T"] << ")";
    out << '\n';
  }
  for (const ExpertParameterCount& c : rep.experts)
    out << "  layer " << c.layer << " expert " << c.expert << ": mlp " << c.mlp << " (formula " << c.formula
        << "), norm " << c.norm << '\n';
  out << "kernels: " << kernels::active().name << '\n';
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Patch-level mixture-of-experts pipeline for small vision transformers", "patchmoe"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  std::string spec, out_dir;
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic fine-grained dataset");
  gen->add_option("--spec", spec, "JSON generator spec")->required();
  gen->add_option("--out", out_dir, "Output directory")->required();

  Common c_pre, c_moefy, c_fine, c_eval, c_aff;
  std::string data, out_prefix, ckpt, metrics, router_init, split = "val", routing, mode, dump, format = "csv",
                                                                  collapse;
  std::optional<std::size_t> de_literal, layer;
  std::optional<double> temperature, threshold;
  bool as_json = false;

  auto* pre = app.add_subcommand("pretrain", "Train the dense backbone");
  c_pre.attach(pre);
  pre->add_option("--data", data, "Dataset directory")->required();
  pre->add_option("--out", out_prefix, "Checkpoint prefix to write")->required();
  pre->add_option("--metrics", metrics, "Metrics CSV path (default <out>.metrics.csv)");

  auto* moefy = app.add_subcommand("moefy", "Convert dense MLP layers into MoE blocks");
  c_moefy.attach(moefy);
  moefy->add_option("--checkpoint", ckpt, "Dense checkpoint prefix")->required();
  moefy->add_option("--data", data, "Dataset directory")->required();
  moefy->add_option("--out", out_prefix, "Checkpoint prefix to write")->required();
  moefy->add_option("--router-init", router_init, "cluster or random")->check(CLI::IsMember({"cluster", "random"}));
  moefy->add_option("--de-literal", de_literal, "Keep exactly N hidden units per expert");

  auto* fine = app.add_subcommand("finetune", "Finetune an MoE checkpoint");
  c_fine.attach(fine);
  fine->add_option("--checkpoint", ckpt, "MoE checkpoint prefix")->required();
  fine->add_option("--data", data, "Dataset directory")->required();
  fine->add_option("--out", out_prefix, "Checkpoint prefix to write")->required();
  fine->add_option("--metrics", metrics, "Metrics CSV path (default <out>.metrics.csv)");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on one split");
  c_eval.attach(ev);
  ev->add_option("--checkpoint", ckpt, "Checkpoint prefix")->required();
  ev->add_option("--data", data, "Dataset directory")->required();
  ev->add_option("--split", split, "train or val")->check(CLI::IsMember({"train", "val"}));
  ev->add_option("--out", out_dir, "Metrics CSV path (default stdout)");
  ev->add_option("--routing", routing, "Write the first MoE layer's routing CSV here");

  auto* aff = app.add_subcommand("affinity", "Class-expert affinity matrices");
  c_aff.attach(aff);
  aff->add_option("--checkpoint", ckpt, "MoE checkpoint prefix")->required();
  aff->add_option("--mode", mode, "pre, post or figure-d")->required()->check(CLI::IsMember({"pre", "post", "figure-d"}));
  aff->add_option("--dump", dump, "Embedding dump (pre modes; default from the checkpoint)");
  aff->add_option("--data", data, "Dataset directory (post mode)");
  aff->add_option("--layer", layer, "MoE layer (default: first)");
  aff->add_option("--format", format, "csv, json or svg")->check(CLI::IsMember({"csv", "json", "svg"}));
  aff->add_option("--out", out_dir, "Output file (default stdout)");
  aff->add_option("--temperature", temperature, "Softmax temperature");
  aff->add_option("--threshold", threshold, "Zero probabilities below this");
  aff->add_option("--collapse", collapse, "Write collapse metrics JSON here");

  auto* insp = app.add_subcommand("inspect", "Parameter counts, expert config and router provenance");
  insp->add_option("--checkpoint", ckpt, "Checkpoint prefix")->required();
  insp->add_flag("--json", as_json, "Print JSON");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  if (!reversed.empty()) reversed.pop_back();
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) return cmd_gen_data(spec, out_dir, args, out);
    if (*pre) return cmd_pretrain(c_pre, data, out_prefix, metrics, args, out);
    if (*moefy) return cmd_moefy(c_moefy, ckpt, data, out_prefix, router_init, de_literal, args, out);
    if (*fine) return cmd_finetune(c_fine, ckpt, data, out_prefix, metrics, args, out);
    if (*ev) return cmd_eval(c_eval, ckpt, data, split, out_dir, routing, args, out);
    if (*aff)
      return cmd_affinity(c_aff, ckpt, mode, dump, data, layer, format, out_dir, temperature, threshold, collapse, args,
                          out);
    if (*insp) return cmd_inspect(ckpt, as_json, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    err << "numeric divergence: " << e.what() << '\n';
    return kNumeric;
  } catch (const StageError& e) {
    err << "stage error: " << e.what() << '\n';
    return kData;
  } catch (const Error& e) {
    err << "data error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kInternal;
  }
  return kUsage;
}

}  // namespace patchmoe::cli
