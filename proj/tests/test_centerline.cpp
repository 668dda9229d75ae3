#include <cmath>
#include <filesystem>

#include "cordseg/centerline.hpp"
#include "cordseg/error.hpp"
#include "cordseg/rng.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace cordseg;

namespace {

// Dyadic heat values keep every partial cost exact in double precision.
Volume random_heat(Rng& rng, std::size_t W, std::size_t H, std::size_t D, std::size_t max_hot) {
  Geometry g;
  g.dims = {W, H, D};
  Volume v(g);
  for (std::size_t z = 0; z < D; ++z) {
    if (z > 0 && z + 1 < D && rng.bernoulli(0.2)) continue;  // gap slice
    const auto n = static_cast<std::size_t>(rng.uniform_int(1, static_cast<long>(max_hot)));
    for (std::size_t k = 0; k < n; ++k)
      v.at(std::size_t(rng.uniform_int(0, long(W) - 1)), std::size_t(rng.uniform_int(0, long(H) - 1)), z) =
          float(rng.uniform_int(1, 64)) / 8.0f;
  }
  return v;
}

}  // namespace

TEST_CASE("distance heatmap matches exhaustive search") {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    Geometry g;
    g.dims = {std::size_t(rng.uniform_int(1, 9)), std::size_t(rng.uniform_int(1, 9)),
              std::size_t(rng.uniform_int(1, 6))};
    g.spacing = {rng.uniform(0.3, 2), rng.uniform(0.3, 2), rng.uniform(0.3, 3)};
    Mask m(g);
    const double fill = rng.uniform(0.3, 0.9);
    for (auto& v : m.data) v = rng.bernoulli(fill);
    const auto h = distance_heatmap(m);
    const auto ref = oracle::edt_brute(m);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(h.data[i] == doctest::Approx(ref[i]).epsilon(1e-6));
  }
}

TEST_CASE("distance heatmap peaks at the centre of a disc") {
  Geometry g;
  g.dims = {21, 21, 21};
  Mask m(g);
  for (std::size_t z = 0; z < 21; ++z)
    for (std::size_t y = 0; y < 21; ++y)
      for (std::size_t x = 0; x < 21; ++x)
        m.at(x, y, z) = (double(x) - 10) * (double(x) - 10) + (double(y) - 10) * (double(y) - 10) <= 36.0;
  const auto h = distance_heatmap(m);
  float best = 0;
  std::size_t bx = 0, by = 0;
  for (std::size_t y = 0; y < 21; ++y)
    for (std::size_t x = 0; x < 21; ++x)
      if (h.at(x, y, 10) > best) {
        best = h.at(x, y, 10);
        bx = x;
        by = y;
      }
  CHECK(bx == 10);
  CHECK(by == 10);
  CHECK(best == doctest::Approx(std::sqrt(37.0)));  // nearest background is (16, 11)
  CHECK(h.at(0, 0, 10) == 0.0f);
}

TEST_CASE("curve optimisation is exactly optimal") {
  Rng rng(2);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t D = std::size_t(rng.uniform_int(1, 5));
    auto heat = random_heat(rng, 9, 7, D, D <= 3 ? 30 : 12);
    const double lambda = std::array<double, 5>{0, 0.25, 0.5, 1, 2}[rng.uniform_int(0, 4)];
    CurveOptConfig cfg;
    cfg.smooth_weight = lambda;
    cfg.margin = 0;
    const auto line = optimize_centerline(heat, cfg);
    const auto best = oracle::path_brute(heat, lambda);
    std::vector<std::array<long, 2>> path;
    for (long z : best.zs) {
      const auto* p = line.find(z);
      REQUIRE(p != nullptr);
      path.push_back({long(p->x), long(p->y)});
    }
    CHECK(path_cost(heat, best.zs, path, lambda) == best.cost);
    line.validate();
    CHECK(line.first_slice() == best.zs.front());
    CHECK(line.last_slice() == best.zs.back());
  }
}

TEST_CASE("smoothness pulls the path toward its neighbours") {
  Geometry g;
  g.dims = {10, 1, 3};
  Volume heat(g);
  heat.at(2, 0, 0) = 4;
  heat.at(2, 0, 2) = 4;
  heat.at(2, 0, 1) = 1;
  heat.at(9, 0, 1) = 2;
  CurveOptConfig cfg;
  cfg.margin = 0;
  cfg.smooth_weight = 0;
  CHECK(optimize_centerline(heat, cfg).find(1)->x == 9.0);
  cfg.smooth_weight = 0.5;
  CHECK(optimize_centerline(heat, cfg).find(1)->x == 2.0);
}

TEST_CASE("empty heatmaps report no cord") {
  Geometry g;
  g.dims = {4, 4, 4};
  CHECK_THROWS_AS(optimize_centerline(Volume(g)), NoCordFound);
  Volume bad(g);
  bad.data[0] = -1;
  CHECK_THROWS_AS(optimize_centerline(bad), ConfigError);
}

TEST_CASE("gap slices are interpolated") {
  Geometry g;
  g.dims = {10, 10, 5};
  Volume heat(g);
  heat.at(2, 2, 0) = 1;
  heat.at(6, 4, 4) = 1;
  CurveOptConfig cfg;
  cfg.margin = 0;
  const auto c = optimize_centerline(heat, cfg);
  REQUIRE(c.points.size() == 5);
  CHECK(c.find(2)->x == doctest::Approx(4.0));
  CHECK(c.find(2)->y == doctest::Approx(3.0));
}

TEST_CASE("centerline from mask") {
  Geometry g;
  g.dims = {20, 20, 12};
  Mask m(g);
  for (std::size_t z = 1; z < 11; ++z) {
    if (z == 5) continue;  // interior gap
    for (std::size_t y = 6; y <= 8; ++y)
      for (std::size_t x = 3 + z; x <= 5 + z; ++x) m.at(x, y, z) = 1;
  }
  const auto c = centerline_from_mask(m, 5);
  CHECK(c.first_slice() == 1);
  CHECK(c.last_slice() == 10);
  // A linear path survives gap filling and the symmetric moving average.
  for (const auto& p : c.points) {
    CHECK(p.x == doctest::Approx(4.0 + double(p.z)));
    CHECK(p.y == doctest::Approx(7.0));
  }
  CHECK_THROWS_AS(centerline_from_mask(Mask(g)), MissingDataError);
  CHECK_THROWS_AS(centerline_from_mask(m, 4), ConfigError);
}

TEST_CASE("centerline CSV round trip") {
  Centerline c;
  c.points = {{0, 1.25, 2.5}, {1, 1.5, 2.75}, {3, -0.125, 7}};
  const auto p = std::filesystem::temp_directory_path() / "cordseg_tests" / "line.csv";
  std::filesystem::create_directories(p.parent_path());
  write_centerline_csv(c, p);
  const auto r = read_centerline_csv(p, {0.5, 0.5, 0.5});
  CHECK(r.points == c.points);
  CHECK(r.spacing[0] == 0.5);
  CHECK(c.nearest(2).z == 1);
  CHECK(c.find(2) == nullptr);
}
