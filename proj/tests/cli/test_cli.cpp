#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <iterator>
#include <sstream>

#include "../support/temp_dir.hpp"
#include "cli.hpp"
#include "json.hpp"

namespace cli = patchmoe::cli;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "patchmoe");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

// Small enough that the whole pipeline runs in a few seconds.
void write_fixtures(const testing::TempDir& dir) {
  std::ofstream(dir / "spec.json") << R"({"num_classes": 4, "families": 2, "image_size": 16, "patch_grid": 2,
    "images_per_class": 10, "background_textures": 2, "seed": 3})";
  std::ofstream(dir / "run.ini") << "[model]\nimage_size = 16\npatch_size = 8\ndim = 8\nff_dim = 16\nlayers = 2\n"
                                    "heads = 2\nmoe_layers = 1\nexperts = 2\n"
                                    "[router_init]\nK = 4\nT = 2\nsamples_per_class = 4\nscales = 16\n"
                                    "[optim]\nbatch_size = 8\nepochs = 1\n"
                                    "[pretrain]\nbatch_size = 8\nepochs = 2\n"
                                    "[data]\naffinity_batches = 2\naffinity_batch_size = 8\n";
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("usage errors exit with 2") {
    CHECK(run({}).code == cli::kUsage);
    CHECK(run({"gen-data", "--out", "/tmp/x"}).code == cli::kUsage);
    CHECK(run({"frobnicate"}).code == cli::kUsage);
    CHECK(run({"--help"}).code == cli::kOk);
    testing::TempDir dir("cli_usage");
    std::ofstream(dir / "bad.json") << R"({"num_classes": "many"})";
    CHECK(run({"gen-data", "--spec", (dir / "bad.json").string(), "--out", (dir / "d").string()}).code == cli::kUsage);
    std::ofstream(dir / "odd.json") << R"({"shade": 1})";
    CHECK(run({"gen-data", "--spec", (dir / "odd.json").string(), "--out", (dir / "d").string()}).code == cli::kUsage);
  }

  TEST_CASE("full pipeline, manifests, determinism, stage errors") {
    testing::TempDir dir("cli_pipe");
    write_fixtures(dir);
    const std::string spec = (dir / "spec.json").string(), ini = (dir / "run.ini").string();
    const std::string data = (dir / "data").string(), data2 = (dir / "data2").string();

    REQUIRE(run({"gen-data", "--spec", spec, "--out", data}).code == cli::kOk);
    REQUIRE(run({"gen-data", "--spec", spec, "--out", data2}).code == cli::kOk);
    CHECK(slurp(dir / "data" / "manifest.json") == slurp(dir / "data2" / "manifest.json"));
    const json gen_manifest = json::parse(slurp(dir / "data" / "run.json"));
    CHECK(gen_manifest.contains("argv"));
    CHECK(gen_manifest.contains("environment"));

    const std::string dense = (dir / "dense").string();
    CHECK(run({"pretrain", "--config", ini, "--data", data, "--out", dense, "--set", "model.ff_dim=7"}).code ==
          cli::kUsage);
    CHECK(run({"pretrain", "--config", ini, "--data", data, "--out", dense, "--set", "model.shade=1"}).code ==
          cli::kUsage);
    REQUIRE(run({"pretrain", "--config", ini, "--data", data, "--out", dense}).code == cli::kOk);
    CHECK(std::filesystem::exists(dense + ".json"));
    CHECK(std::filesystem::exists(dense + ".metrics.csv"));
    CHECK(std::filesystem::exists(dense + ".run.json"));

    const std::string moe = (dir / "moe").string(), fine = (dir / "fine").string();
    CHECK(run({"finetune", "--config", ini, "--checkpoint", dense, "--data", data, "--out", fine}).code ==
          cli::kData);
    REQUIRE(run({"moefy", "--config", ini, "--checkpoint", dense, "--data", data, "--out", moe}).code == cli::kOk);
    CHECK(run({"moefy", "--config", ini, "--checkpoint", moe, "--data", data, "--out", moe + "2"}).code ==
          cli::kData);

    const Result insp = run({"inspect", "--checkpoint", moe, "--json"});
    REQUIRE(insp.code == cli::kOk);
    const json report = json::parse(insp.out);
    CHECK(report.at("stage") == "moe");
    REQUIRE(report.at("moe_layers").size() == 1);
    CHECK(report["moe_layers"][0].at("expert_hidden") == 8);
    CHECK(report["moe_layers"][0].at("ff_dim") == 16);
    for (const json& e : report.at("parameters").at("experts")) CHECK(e.at("mlp_params") == e.at("formula"));
    CHECK(run({"inspect", "--checkpoint", moe}).out.find("d_e 8 of d_ff 16") != std::string::npos);

    REQUIRE(run({"finetune", "--config", ini, "--checkpoint", moe, "--data", data, "--out", fine}).code == cli::kOk);
    const std::string csv1 = (dir / "e1.csv").string(), csv2 = (dir / "e2.csv").string();
    const std::string route = (dir / "route.csv").string();
    REQUIRE(run({"eval", "--checkpoint", fine, "--data", data, "--out", csv1, "--routing", route}).code == cli::kOk);
    REQUIRE(run({"eval", "--checkpoint", fine, "--data", data, "--out", csv2}).code == cli::kOk);
    CHECK(slurp(csv1) == slurp(csv2));
    CHECK_FALSE(slurp(route).empty());

    const std::string a1 = (dir / "a1.csv").string(), a2 = (dir / "a2.csv").string();
    for (const std::string& p : {a1, a2})
      REQUIRE(run({"affinity", "--config", ini, "--checkpoint", fine, "--mode", "post", "--data", data, "--out", p})
                  .code == cli::kOk);
    CHECK(slurp(a1) == slurp(a2));
    CHECK(slurp(a1).rfind("class,expert,value\n", 0) == 0);
    const std::string svg = (dir / "pre.svg").string(), col = (dir / "collapse.json").string();
    CHECK(run({"affinity", "--checkpoint", moe, "--mode", "figure-d", "--format", "svg", "--out", svg, "--collapse",
               col})
              .code == cli::kOk);
    CHECK(slurp(svg).find("<svg") != std::string::npos);
    CHECK(json::parse(slurp(col)).contains("starved"));
    CHECK(run({"affinity", "--checkpoint", dense, "--mode", "post", "--data", data}).code == cli::kData);
  }
}
