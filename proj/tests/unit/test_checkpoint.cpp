#include <doctest.h>

#include <fstream>

#include "../support/temp_dir.hpp"
#include "patchmoe/errors.hpp"
#include "patchmoe/checkpoint.hpp"
#include "patchmoe/expert_init.hpp"

using namespace patchmoe::f64;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
  Tensor t(shape);
  for (real& v : t.values()) v = lo + (hi - lo) * rng.uniform();
  return t;
}

Model moe_model() {
  ModelConfig cfg;
  cfg.image_size = 16;
  cfg.dim = 6;
  cfg.heads = 2;
  cfg.ff_dim = 12;
  cfg.layers = 2;
  cfg.num_classes = 3;
  cfg.moe_layers = {1};
  cfg.experts = 3;
  cfg.top_k = 2;
  Model m(cfg, 21);
  Rng rng(22);
  Router r;
  r.centroids = random_tensor({3, 6}, rng, 0, 1);
  r.scaler = minmax_fit(random_tensor({12, 6}, rng));
  r.temperature = 0.7;
  r.top_k = 2;
  r.log_prior = {0.1, -0.2, 0.0};
  moefy_layer(m, 1, r, MoefyOptions{2, 0, 0.8});
  return m;
}

}  // namespace

TEST_SUITE("checkpoint") {
  TEST_CASE("save and load reproduce parameters, router state and outputs") {
    testing::TempDir dir("ckpt");
    const Model m = moe_model();
    save_checkpoint(dir / "m", m, Stage::moe, {{"note", 1}}, {{"1", {{"router_provenance", "test"}}}});
    CHECK(std::filesystem::exists(dir / "m.json"));
    CHECK(std::filesystem::exists(dir / "m.bin"));
    const Checkpoint ck = load_checkpoint(dir / "m");
    CHECK(ck.stage == Stage::moe);
    CHECK(ck.manifest.at("format") == std::string(kCheckpointFormat));
    CHECK(ck.manifest.at("extra").at("note") == 1);

    const auto a = m.parameters(), b = ck.model.parameters();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].name == b[i].name);
      CHECK(a[i].tensor.shape() == b[i].tensor.shape());
      for (std::size_t k = 0; k < a[i].tensor.size(); ++k) CHECK(a[i].tensor[k] == b[i].tensor[k]);
    }
    const Router& r = ck.model.layers[1].moe->router;
    CHECK(r.temperature == 0.7);
    CHECK(r.top_k == 2);
    CHECK(r.log_prior == std::vector<real>{0.1, -0.2, 0.0});
    CHECK(r.scaler.min == m.layers[1].moe->router.scaler.min);
    for (std::size_t e = 0; e < 3; ++e)
      CHECK(ck.model.layers[1].moe->experts[e].indices == m.layers[1].moe->experts[e].indices);

    Rng rng(5);
    const Tensor tokens = random_tensor({2, 4, 4, m.config().token_features()}, rng, -0.5, 0.5);
    const Tensor la = m.forward(tokens).logits, lb = ck.model.forward(tokens).logits;
    for (std::size_t i = 0; i < la.size(); ++i) CHECK(la[i] == lb[i]);
  }

  TEST_CASE("stage guard and malformed files") {
    testing::TempDir dir("ckpt_bad");
    ModelConfig cfg;
    cfg.image_size = 16;
    cfg.dim = 4;
    cfg.ff_dim = 8;
    cfg.layers = 1;
    cfg.moe_layers = {};
    const Model m(cfg, 1);
    save_checkpoint(dir / "d", m, Stage::dense);
    const Checkpoint ck = load_checkpoint(dir / "d");
    CHECK_NOTHROW(require_stage(ck, {Stage::dense}, "moefy"));
    CHECK_THROWS_AS(require_stage(ck, {Stage::moe, Stage::moe_finetuned}, "finetune"), patchmoe::StageError);
    CHECK(parse_stage(stage_name(Stage::moe_finetuned)) == Stage::moe_finetuned);

    CHECK_THROWS_AS(load_checkpoint(dir / "missing"), patchmoe::DataError);
    std::filesystem::resize_file(dir / "d.bin", 10);
    CHECK_THROWS_AS(load_checkpoint(dir / "d"), patchmoe::DataError);
    std::ofstream(dir / "d.json") << "{ not json";
    CHECK_THROWS_AS(load_checkpoint(dir / "d"), patchmoe::DataError);
  }

  TEST_CASE("parameter report counts expert tensors from their names") {
    const Model m = moe_model();
    const ParameterReport r = parameter_report(m);
    CHECK(r.total == m.parameter_count());
    CHECK(r.total == r.moe + r.dense_mlp + r.attention + r.other);
    REQUIRE(r.experts.size() == 3);
    for (const ExpertParameterCount& e : r.experts) {
      CHECK(e.layer == 1);
      CHECK(e.hidden == 6);
      CHECK(e.mlp == e.formula);
      CHECK(e.norm == 12);
    }
    CHECK(to_json(r).at("experts").size() == 3);
  }
}
