#pragma once

// Run configuration: an INI file with the sections model, moe, router_init,
// optim, augment, pretrain, data and seed, resolved against built-in
// defaults. Unknown sections and keys are rejected. `section.key=value`
// overrides are applied on top of the file.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "patchmoe/backbone.hpp"
#include "patchmoe/expert_init.hpp"
#include "patchmoe/router_init.hpp"
#include "patchmoe/training.hpp"

namespace patchmoe::inline PATCHMOE_PRECISION {

struct PretrainConfig {
  double lr = 2e-3;
  double weight_decay = 0.0;
  std::size_t batch_size = 32;
  std::size_t epochs = 30;
  double hflip_p = 0.5;
  double mixup_alpha = 0.0;
};

struct DataConfig {
  std::size_t eval_batch = 64;
  std::size_t affinity_batches = 50;
  std::size_t affinity_batch_size = 128;
};

struct RunConfig {
  ModelConfig model;
  MoefyOptions moe;
  RouterInitParams router_init;
  OptimConfig optim;
  AugmentConfig augment;
  PretrainConfig pretrain;
  DataConfig data;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Parses INI text. Throws UsageError for unknown keys or bad values.
RunConfig parse_run_config(std::istream& is, const std::vector<std::string>& overrides = {});
RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});
/// Defaults plus overrides, no file.
RunConfig default_run_config(const std::vector<std::string>& overrides = {});

nlohmann::json to_json(const RunConfig& c);
/// INI text that parses back to the same configuration.
void write_run_config(std::ostream& os, const RunConfig& c);

}  // namespace patchmoe::inline PATCHMOE_PRECISION
