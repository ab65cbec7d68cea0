#pragma once

// Checkpoint = <prefix>.json manifest + <prefix>.bin tensor blob records.
// The manifest lists every parameter with its shape and byte offset, the
// model config, the pipeline stage, and for each MoE layer the router state
// and expert slicing that are not plain tensors.

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "patchmoe/backbone.hpp"

namespace patchmoe::inline PATCHMOE_PRECISION {

enum class Stage { dense, moe, moe_finetuned };

std::string_view stage_name(Stage s);
Stage parse_stage(std::string_view s);

inline constexpr std::string_view kCheckpointFormat = "patchmoe-checkpoint/1";

struct Checkpoint {
  Model model;
  Stage stage = Stage::dense;
  nlohmann::json manifest;
};

/// `extra` is stored under "extra"; `moe_meta` maps layer index (as string)
/// to additional per-layer fields such as provenance and the dense hash.
void save_checkpoint(const std::filesystem::path& prefix, const Model& model, Stage stage,
                     const nlohmann::json& extra = nlohmann::json::object(),
                     const nlohmann::json& moe_meta = nlohmann::json::object());

/// Throws DataError for missing or malformed files.
Checkpoint load_checkpoint(const std::filesystem::path& prefix);

/// Throws StageError unless the checkpoint's stage is one of `allowed`.
void require_stage(const Checkpoint& ckpt, std::initializer_list<Stage> allowed, std::string_view command);

struct ExpertParameterCount {
  std::size_t layer = 0, expert = 0;
  std::size_t hidden = 0;      // d_e
  std::size_t mlp = 0;         // counted from the parameter list, norm excluded
  std::size_t norm = 0;        // the expert's input layer norm
  std::size_t formula = 0;     // expert_mlp_parameter_formula(d, d_e)
};

struct ParameterReport {
  std::size_t total = 0;
  std::size_t moe = 0;          // all tensors under a ".moe." prefix
  std::size_t dense_mlp = 0;    // remaining dense MLP sublayers
  std::size_t attention = 0;
  std::size_t other = 0;        // embedding, positions, final norm, head
  std::vector<ExpertParameterCount> experts;
};

ParameterReport parameter_report(const Model& model);
nlohmann::json to_json(const ParameterReport& r);

}  // namespace patchmoe::inline PATCHMOE_PRECISION
