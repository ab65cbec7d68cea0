#include <doctest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "../support/temp_dir.hpp"
#include "patchmoe/dataset.hpp"
#include "patchmoe/errors.hpp"

using namespace patchmoe::f64;

namespace {

SynthSpec small_spec() {
  SynthSpec s;
  s.num_classes = 6;
  s.families = 3;
  s.image_size = 16;
  s.patch_grid = 4;
  s.images_per_class = 7;
  return s;
}

}  // namespace

TEST_SUITE("dataset") {
  TEST_CASE("generation is a pure function of the SynthSpec") {
    const SynthSpec s = small_spec();
    const Dataset a = generate(s), b = generate(s);
    REQUIRE(a.images.size() == 42);
    CHECK(a.num_classes() == 6);
    CHECK(a.mask_grid == 4);
    for (std::size_t i = 0; i < a.images.size(); ++i) {
      CHECK(a.images[i].image == b.images[i].image);
      CHECK(a.images[i].split == b.images[i].split);
      CHECK(a.images[i].foreground == b.images[i].foreground);
      CHECK(a.images[i].image.width == 16);
      CHECK(a.images[i].foreground.size() == 16);
    }
    SynthSpec other = s;
    other.seed = 8;
    CHECK_FALSE(generate(other).images[0].image == a.images[0].image);

    std::vector<std::size_t> per_class(6, 0);
    for (const auto& li : a.images) ++per_class[li.class_id];
    for (std::size_t n : per_class) CHECK(n == 7);

    std::size_t fg = 0, total = 0;
    for (const auto& li : a.images)
      for (auto m : li.foreground) {
        fg += m;
        ++total;
      }
    CHECK(fg > 0);
    CHECK(fg < total);
  }

  TEST_CASE("spec validation and json") {
    SynthSpec bad = small_spec();
    bad.num_classes = 7;
    CHECK_THROWS_AS(bad.validate(), patchmoe::UsageError);
    bad = small_spec();
    bad.image_size = 15;
    CHECK_THROWS_AS(bad.validate(), patchmoe::UsageError);
    const SynthSpec s = small_spec();
    const SynthSpec back = synth_spec_from_json(to_json(s));
    CHECK(back.num_classes == s.num_classes);
    CHECK(back.noise == s.noise);
    CHECK(back.seed == s.seed);
    CHECK_THROWS_AS(synth_spec_from_json(nlohmann::json{{"colour", 3}}), patchmoe::UsageError);
    CHECK_THROWS_AS(synth_spec_from_json(nlohmann::json::array()), patchmoe::UsageError);
  }

  TEST_CASE("split: first ceil(0.8 n) train, seeded, disjoint") {
    for (std::size_t n : {1, 5, 10, 11, 42}) {
      Dataset ds;
      ds.class_names = {"x"};
      ds.images.resize(n);
      assign_split(ds, 3);
      const auto tr = ds.indices(Split::train), va = ds.indices(Split::val);
      CHECK(tr.size() == std::size_t(std::ceil(0.8 * double(n))));
      CHECK(tr.size() + va.size() == n);
      std::set<std::size_t> all(tr.begin(), tr.end());
      all.insert(va.begin(), va.end());
      CHECK(all.size() == n);
      Dataset again = ds;
      assign_split(again, 3);
      CHECK(again.indices(Split::val) == va);
    }
  }

  TEST_CASE("ppm read and write") {
    testing::TempDir dir("ppm");
    Image white(1, 1);
    std::fill(white.pixels.begin(), white.pixels.end(), 255);
    write_ppm(dir / "w.ppm", white);
    const Image back = read_ppm(dir / "w.ppm");
    CHECK(back.width == 1);
    CHECK(back.height == 1);
    CHECK(back.pixels == std::vector<std::uint8_t>{255, 255, 255});

    Image img(3, 2);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = std::uint8_t(i * 13);
    write_ppm(dir / "i.ppm", img);
    CHECK(read_ppm(dir / "i.ppm") == img);

    std::ofstream(dir / "bad.ppm") << "P3\n1 1\n255\n0 0 0\n";
    CHECK_THROWS_AS(read_ppm(dir / "bad.ppm"), patchmoe::DataError);
    std::ofstream(dir / "short.ppm", std::ios::binary) << "P6\n2 2\n255\n" << std::string(5, 'a');
    CHECK_THROWS_AS(read_ppm(dir / "short.ppm"), patchmoe::DataError);
    CHECK_THROWS_AS(read_ppm(dir / "none.ppm"), patchmoe::DataError);
  }

  TEST_CASE("ppm directory loading") {
    testing::TempDir dir("ppmdir");
    CHECK_THROWS_AS(load_ppm_dir(dir.path()), patchmoe::DataError);
    for (const char* cls : {"zebra", "apple"}) {
      std::filesystem::create_directories(dir / cls);
      for (int i = 0; i < 3; ++i) {
        Image img(2, 2);
        img.pixels[0] = std::uint8_t(i);
        write_ppm(dir.path() / cls / ("img" + std::to_string(2 - i) + ".ppm"), img);
      }
    }
    const Dataset ds = load_ppm_dir(dir.path(), 4);
    CHECK(ds.class_names == std::vector<std::string>{"apple", "zebra"});
    REQUIRE(ds.images.size() == 6);
    CHECK(ds.images[0].class_id == 0);
    CHECK(ds.images[5].class_id == 1);
    // Files within a class come in sorted name order: img0 holds pixel value 2.
    CHECK(ds.images[0].image.pixels[0] == 2);
    CHECK(ds.images[2].image.pixels[0] == 0);
  }

  TEST_CASE("nearest-neighbour resize") {
    Image img(2, 2);
    for (std::size_t i = 0; i < 4; ++i) std::fill_n(img.pixels.data() + i * 3, 3, std::uint8_t(10 * (i + 1)));
    const Image up = resize_nearest(img, 4, 4);
    CHECK(up.at(0, 0)[0] == 10);
    CHECK(up.at(1, 1)[0] == 10);
    CHECK(up.at(2, 0)[0] == 20);
    CHECK(up.at(3, 3)[0] == 40);
    CHECK(resize_nearest(img, 2, 2) == img);
    const Image down = resize_nearest(up, 2, 2);
    CHECK(down == img);
    CHECK_THROWS_AS(resize_nearest(img, 0, 2), patchmoe::UsageError);
    const Image f = flip_horizontal(img);
    CHECK(f.at(0, 0)[0] == 20);
    CHECK(flip_horizontal(f) == img);
  }

  TEST_CASE("save and load keep images, labels, splits, masks") {
    testing::TempDir dir("save");
    const Dataset ds = generate(small_spec());
    save_dataset(ds, dir.path(), {{"note", "x"}});
    CHECK(std::filesystem::exists(dir / "manifest.json"));
    const Dataset back = load_dataset(dir.path());
    CHECK(back.class_names == ds.class_names);
    CHECK(back.mask_grid == ds.mask_grid);
    REQUIRE(back.images.size() == ds.images.size());
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
      CHECK(back.images[i].image == ds.images[i].image);
      CHECK(back.images[i].class_id == ds.images[i].class_id);
      CHECK(back.images[i].split == ds.images[i].split);
      CHECK(back.images[i].foreground == ds.images[i].foreground);
    }
  }
}
