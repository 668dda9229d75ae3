#include <filesystem>
#include <fstream>
#include <sstream>

#include "cordseg/error.hpp"
#include "cordseg/metrics.hpp"
#include "cordseg/rng.hpp"
#include "doctest.h"
#include "json.hpp"
#include "oracles.hpp"

using namespace cordseg;

namespace {

Mask random_mask(const Dims& d, double p, Rng& rng) {
  Geometry g;
  g.dims = d;
  Mask m(g);
  for (auto& v : m.data) v = rng.bernoulli(p);
  return m;
}

// Manual lesion of 8 voxels (a 2x2x2 cube) with `k` of them covered.
std::pair<Mask, Mask> cube_case(int k) {
  Geometry g;
  g.dims = {6, 6, 6};
  Mask man(g), aut(g);
  int n = 0;
  for (std::size_t z = 2; z < 4; ++z)
    for (std::size_t y = 2; y < 4; ++y)
      for (std::size_t x = 2; x < 4; ++x) {
        man.at(x, y, z) = 1;
        if (n++ < k) aut.at(x, y, z) = 1;
      }
  return {aut, man};
}

}  // namespace

TEST_CASE("voxel metrics match counting oracles") {
  Rng rng(1);
  for (int trial = 0; trial < 60; ++trial) {
    const Dims d{std::size_t(rng.uniform_int(1, 7)), std::size_t(rng.uniform_int(1, 7)),
                 std::size_t(rng.uniform_int(1, 5))};
    const auto a = random_mask(d, rng.uniform(0, 0.6), rng);
    const auto m = random_mask(d, rng.uniform(0, 0.6), rng);
    const auto o = oracle::voxel_metrics(a, m);
    const auto dc = dice(a, m);
    CHECK(dc.value == doctest::Approx(o.dice));
    CHECK(dc.both_empty == (count_nonzero(a) + count_nonzero(m) == 0));
    const auto pr = voxelwise_pr(a, m);
    CHECK(pr.sensitivity.has_value() == (o.sens >= 0));
    CHECK(pr.precision.has_value() == (o.prec >= 0));
    if (pr.sensitivity) CHECK(*pr.sensitivity == doctest::Approx(o.sens));
    if (pr.precision) CHECK(*pr.precision == doctest::Approx(o.prec));
  }
}

TEST_CASE("connected components match breadth-first search") {
  Rng rng(2);
  for (int trial = 0; trial < 60; ++trial) {
    const Dims d{std::size_t(rng.uniform_int(1, 8)), std::size_t(rng.uniform_int(1, 8)),
                 std::size_t(rng.uniform_int(1, 6))};
    const auto m = random_mask(d, rng.uniform(0.05, 0.5), rng);
    for (int conn : {6, 18, 26}) {
      long n = 0;
      const auto ids = oracle::components_bfs(m, conn, &n);
      const auto lab = connected_components(m, conn);
      REQUIRE(lab.count() == std::size_t(n));
      for (std::size_t i = 0; i < ids.size(); ++i) CHECK(lab.labels[i] == ids[i] + 1);
    }
  }
}

TEST_CASE("lesion-wise detection uses a strict 25 percent overlap") {
  {
    auto [aut, man] = cube_case(2);
    const auto r = lesionwise_pr(aut, man);
    CHECK(r.true_positives == 0);
    CHECK(r.false_negatives == 1);
    CHECK(r.false_positives == 1);
    CHECK(*r.rates.sensitivity == 0.0);
  }
  {
    auto [aut, man] = cube_case(3);
    const auto r = lesionwise_pr(aut, man);
    CHECK(r.true_positives == 1);
    CHECK(r.false_negatives == 0);
    CHECK(r.correct_auto == 1);
    CHECK(*r.rates.sensitivity == 100.0);
    CHECK(*r.rates.precision == 100.0);
  }
  Rng rng(3);
  for (int trial = 0; trial < 60; ++trial) {
    const Dims d{std::size_t(rng.uniform_int(2, 8)), std::size_t(rng.uniform_int(2, 8)),
                 std::size_t(rng.uniform_int(1, 6))};
    const auto a = random_mask(d, rng.uniform(0.05, 0.4), rng);
    const auto m = random_mask(d, rng.uniform(0.05, 0.4), rng);
    const double overlap = std::array<double, 3>{0.25, 0.5, 0.1}[trial % 3];
    const int conn = std::array<int, 3>{26, 6, 18}[trial % 3];
    const auto o = oracle::lesion_metrics(a, m, overlap, conn);
    const auto r = lesionwise_pr(a, m, {overlap, conn});
    CHECK(long(r.true_positives) == o.tp);
    CHECK(long(r.false_negatives) == o.fn);
    CHECK(long(r.correct_auto) == o.correct);
    CHECK(long(r.false_positives) == o.fp);
  }
}

TEST_CASE("relative volume difference sign") {
  auto [small, big] = cube_case(4);
  CHECK(relative_volume_difference(small, big) == doctest::Approx(-50.0));
  CHECK(relative_volume_difference(big, small) == doctest::Approx(100.0));
  CHECK(relative_volume_difference(big, big) == 0.0);
  Geometry g;
  g.dims = {6, 6, 6};
  CHECK_THROWS_AS(relative_volume_difference(big, Mask(g)), MissingDataError);
}

TEST_CASE("majority vote needs strictly more than half") {
  Geometry g;
  g.dims = {2, 1, 1};
  std::vector<Mask> r(7, Mask(g));
  for (int i = 0; i < 4; ++i) r[i].data[0] = 1;
  for (int i = 0; i < 3; ++i) r[i].data[1] = 1;
  const auto v = majority_vote(r);
  CHECK(v.data[0] == 1);
  CHECK(v.data[1] == 0);
  std::vector<Mask> two(2, Mask(g));
  two[0].data[0] = 1;
  CHECK(majority_vote(two).data[0] == 0);
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = std::size_t(rng.uniform_int(2, 9));
    std::vector<Mask> ms;
    for (std::size_t k = 0; k < n; ++k) ms.push_back(random_mask({4, 3, 2}, 0.5, rng));
    const auto out = majority_vote(ms);
    for (std::size_t i = 0; i < out.data.size(); ++i) {
      std::size_t votes = 0;
      for (const auto& m : ms) votes += m.data[i];
      CHECK(out.data[i] == (votes * 2 > n ? 1 : 0));
    }
  }
}

TEST_CASE("quantiles and aggregates") {
  CHECK(quantile({3, 1, 2}, 0.5) == 2.0);
  CHECK(quantile({4, 1, 3, 2}, 0.5) == 2.5);
  CHECK(quantile({1, 2, 3, 4, 5}, 0.25) == 2.0);
  CHECK(quantile({1, 2, 3, 4}, 0.25) == doctest::Approx(1.75));
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v(std::size_t(rng.uniform_int(1, 12)));
    for (auto& x : v) x = rng.uniform(-10, 10);
    const auto a = aggregate("m", v);
    CHECK(a.median == doctest::Approx(oracle::quantile_linear(v, 0.5)));
    CHECK(a.iqr == doctest::Approx(oracle::quantile_linear(v, 0.75) - oracle::quantile_linear(v, 0.25)));
    CHECK(a.count == v.size());
  }
  CHECK_THROWS_AS(quantile({}, 0.5), ConfigError);
}

TEST_CASE("centerline error and localisation") {
  Geometry g;
  g.dims = {10, 10, 4};
  g.spacing = {0.5, 0.5, 1};
  Mask m(g);
  for (std::size_t z = 0; z < 3; ++z) m.at(5, 5, z) = 1;
  Centerline a, b;
  a.spacing = b.spacing = g.spacing;
  a.points = {{0, 5, 5}, {1, 5, 5}, {2, 8, 5}};
  b.points = {{0, 5, 5}, {1, 5, 9}, {2, 5, 5}, {3, 5, 5}};
  // distances 0, 2 mm and 1.5 mm
  CHECK(centerline_mse(a, b) == doctest::Approx(std::sqrt((0 + 4 + 2.25) / 3.0)));
  CHECK(localization_rate(a, m) == doctest::Approx(200.0 / 3.0));
  Centerline c = a;
  c.spacing = {1, 1, 1};
  CHECK_THROWS_AS(centerline_mse(c, b), ConfigError);
  CHECK_THROWS_AS(localization_rate(a, Mask(g)), MissingDataError);
}

TEST_CASE("volume-wise specificity") {
  Geometry g;
  g.dims = {2, 2, 2};
  std::vector<Mask> v(4, Mask(g));
  v[1].data[3] = 1;
  CHECK(volumewise_specificity(v) == 75.0);
}

TEST_CASE("reports") {
  MetricsReport r;
  r.rows.push_back({"a", "dice", 90.0, "%", ""});
  r.rows.push_back({"b", "dice", 80.0, "%", ""});
  r.rows.push_back({"a", "rvd", std::nullopt, "%", "empty reference"});
  r.rows.push_back({"b", "rvd", -5.0, "%", ""});
  r.finalize();
  REQUIRE(r.aggregates.size() == 2);
  CHECK(r.aggregates[0].metric == "dice");
  CHECK(r.aggregates[0].median == 85.0);
  CHECK(r.aggregates[1].count == 1);
  const auto dir = std::filesystem::temp_directory_path() / "cordseg_tests";
  std::filesystem::create_directories(dir);
  r.write_json(dir / "report.json");
  r.write_csv(dir / "report.csv");
  std::ifstream jf(dir / "report.json");
  const auto j = nlohmann::json::parse(jf);
  CHECK(j["rows"].size() == 4);
  CHECK(j["rows"][2]["value"].is_null());
  std::ifstream cf(dir / "report.csv");
  std::stringstream ss;
  ss << cf.rdbuf();
  CHECK(ss.str().rfind("metric,n,median (IQR)\n", 0) == 0);
  CHECK(ss.str().find("dice,2,85") != std::string::npos);
}
