#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "cordseg/centerline.hpp"
#include "cordseg/dataset.hpp"
#include "cordseg/error.hpp"
#include "cordseg/metrics.hpp"
#include "cordseg/phantom.hpp"
#include "doctest.h"

using namespace cordseg;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / "cordseg_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<SubjectRecord> records(std::size_t n) {
  std::vector<SubjectRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    SubjectRecord r;
    r.id = "s" + std::to_string(i);
    r.image = r.id + ".nii";
    r.cord_mask = r.id + "_cord.nii";
    out.push_back(r);
  }
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::size_t count_split(const DatasetIndex& idx, Split s) { return idx.in_split(s).size(); }

}  // namespace

TEST_CASE("subject-level split") {
  const auto idx = split_dataset(records(10), {0.8, 0.1, 0.1}, 3);
  CHECK(count_split(idx, Split::train) == 8);
  CHECK(count_split(idx, Split::val) == 1);
  CHECK(count_split(idx, Split::test) == 1);
  const auto again = split_dataset(records(10), {0.8, 0.1, 0.1}, 3);
  for (std::size_t i = 0; i < 10; ++i) CHECK(again.subjects[i].split == idx.subjects[i].split);

  const auto big = split_dataset(records(30), {0.8, 0.1, 0.1}, 1);
  CHECK(count_split(big, Split::train) == 24);
  CHECK(count_split(big, Split::val) == 3);

  auto twice = records(5);
  auto extra = twice[2];
  extra.image = "s2_second.nii";
  twice.push_back(extra);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto s = split_dataset(twice, {0.6, 0.2, 0.2}, seed);
    CHECK(s.subjects[2].split == s.subjects[5].split);
    s.validate();
  }
  CHECK_THROWS_AS(split_dataset(records(2), {0.8, 0.1, 0.1}, 1), ConfigError);
  CHECK_THROWS_AS(split_dataset(records(10), {0.8, 0.1, 0.2}, 1), ConfigError);
}

TEST_CASE("dataset index round trip and strict keys") {
  const auto dir = temp_dir("index");
  auto idx = split_dataset(records(4), {0.5, 0.25, 0.25}, 2);
  idx.subjects[0].lesion_mask = "s0_lesion.nii";
  idx.write(dir / "index.json");
  const auto r = DatasetIndex::read(dir / "index.json");
  REQUIRE(r.subjects.size() == 4);
  CHECK(r.subjects[0].lesion_mask.value() == "s0_lesion.nii");
  CHECK_FALSE(r.subjects[1].lesion_mask.has_value());
  CHECK(r.resolve("a.nii") == dir / "a.nii");
  for (std::size_t i = 0; i < 4; ++i) CHECK(r.subjects[i].split == idx.subjects[i].split);

  std::ofstream(dir / "bad.json") << R"({"subjects": [], "extra": 1})";
  CHECK_THROWS_AS(DatasetIndex::read(dir / "bad.json"), ConfigError);
  std::ofstream(dir / "bad2.json") << R"({"subjects": [{"id": "a", "contrast": "t2", "image": "x",
      "cord_mask": "y", "colour": "red"}]})";
  CHECK_THROWS_AS(DatasetIndex::read(dir / "bad2.json"), ConfigError);
  CHECK_THROWS_AS(DatasetIndex::read(dir / "missing.json"), IoError);
  CHECK_THROWS_AS(parse_contrast("flair"), ConfigError);
}

TEST_CASE("phantom basics") {
  PhantomConfig cfg;
  cfg.dims = {48, 48, 40};
  const auto p = generate_phantom(cfg, 5);
  CHECK(p.image.geom.same_grid(p.cord.geom));
  CHECK(count_nonzero(p.cord) > 0);
  // Lesions are intramedullary.
  for (std::size_t i = 0; i < p.lesion.data.size(); ++i)
    if (p.lesion.data[i]) CHECK(p.cord.data[i] == 1);
  // The analytic centerline agrees with the mask centroid line.
  const auto c = centerline_from_mask(p.cord);
  CHECK(centerline_mse(c, p.centerline) < 0.5);
  const auto again = generate_phantom(cfg, 5);
  CHECK(again.image.data == p.image.data);
  CHECK(again.lesion.data == p.lesion.data);
  CHECK(generate_phantom(cfg, 6).image.data != p.image.data);

  cfg.lesion_count = {0, 0};
  CHECK(count_nonzero(generate_phantom(cfg, 5).lesion) == 0);
}

TEST_CASE("phantom contrast presets") {
  PhantomConfig cfg;
  cfg.dims = {40, 40, 16};
  cfg.noise = 0;
  cfg.bias = 0;
  cfg.lesion_count = {0, 0};
  cfg.distractors = {0, 0};
  const auto p = generate_phantom(cfg, 1);
  // Sample the CSF ring just outside the cord on the mid slice.
  float cord_max = 0, csf_min = 1e9f;
  const auto [W, H, D] = p.cord.dims();
  for (std::size_t z = 0; z < D; ++z)
    for (std::size_t y = 1; y + 1 < H; ++y)
      for (std::size_t x = 1; x + 1 < W; ++x) {
        if (p.cord.at(x, y, z)) {
          // Cord voxels whose in-plane neighbours are all cord, to stay clear of partial volumes.
          if (p.cord.at(x - 1, y, z) && p.cord.at(x + 1, y, z) && p.cord.at(x, y - 1, z) && p.cord.at(x, y + 1, z))
            cord_max = std::max(cord_max, p.image.at(x, y, z));
        }
      }
  const auto& c = p.centerline.points[D / 2];
  const double r = p.log["cord_radius_mm"].get<double>();
  const double csf = p.log["csf_thickness_mm"].get<double>();
  // Point on the CSF annulus straight to the left of the centre.
  const auto x = static_cast<std::size_t>(std::lround(c.x + r + csf / 2));
  const auto y = static_cast<std::size_t>(std::lround(c.y));
  csf_min = p.image.at(x, y, static_cast<std::size_t>(c.z));
  CHECK(csf_min > cord_max);
}

TEST_CASE("straight tube volume") {
  PhantomConfig cfg;
  cfg.dims = {48, 48, 30};
  cfg.amplitude = {0, 0};
  cfg.radius_variation = 0;
  cfg.cord_radius = {6, 6};
  cfg.ellipticity = {1, 1};
  cfg.lesion_count = {0, 0};
  const auto p = generate_phantom(cfg, 2);
  const double analytic = std::numbers::pi * 36.0 * 30.0;
  const double measured = double(count_nonzero(p.cord)) * p.cord.geom.voxel_volume();
  CHECK(std::abs(measured - analytic) / analytic < 0.10);
}

TEST_CASE("phantom config validation and JSON") {
  PhantomConfig cfg;
  cfg.lesion_radius = {6, 7};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = PhantomConfig{};
  cfg.cord_radius = {20, 20};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  const auto j = to_json(PhantomConfig{});
  const auto back = phantom_config_from_json(j, PhantomConfig{});
  CHECK(to_json(back) == j);
  CHECK_THROWS_AS(phantom_config_from_json(nlohmann::json{{"radius", 3}}, PhantomConfig{}), ConfigError);
  const auto c = phantom_config_from_json(nlohmann::json{{"noise", 0.1}, {"lesion_count", 2}}, PhantomConfig{});
  CHECK(c.noise == 0.1);
  CHECK(c.lesion_count.lo == 2);
  CHECK(c.lesion_count.hi == 2);
}

TEST_CASE("phantom datasets are reproducible") {
  PhantomConfig cfg;
  cfg.dims = {32, 32, 24};
  const auto a = temp_dir("ds_a"), b = temp_dir("ds_b");
  const auto ia = generate_dataset(10, cfg, a, 9);
  generate_dataset(10, cfg, b, 9);
  for (const auto& e : fs::directory_iterator(a)) CHECK(slurp(e.path()) == slurp(b / e.path().filename()));
  std::size_t clean = 0;
  for (const auto& r : ia.subjects) clean += count_nonzero(read_mask(ia.resolve(*r.lesion_mask))) == 0;
  CHECK(clean == 2);
  const auto idx = DatasetIndex::read(a / "index.json");
  idx.validate();
  CHECK(idx.subjects.size() == 10);
  CHECK(idx.in_split(Split::train).size() == 8);
  CHECK_THROWS_AS(generate_dataset(2, cfg, temp_dir("ds_c"), 1), ConfigError);
}
