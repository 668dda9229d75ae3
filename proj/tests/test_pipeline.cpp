#include <algorithm>
#include <filesystem>

#include "cordseg/error.hpp"
#include "cordseg/metrics.hpp"
#include "cordseg/phantom.hpp"
#include "cordseg/pipeline.hpp"
#include "doctest.h"
#include "tiny.hpp"

using namespace cordseg;
namespace fs = std::filesystem;

TEST_CASE("training config defaults and JSON") {
  const auto c1 = TrainConfig::defaults(Stage::centerline);
  CHECK(c1.lr == 1e-4);
  CHECK(c1.batch_size == 32);
  CHECK(c1.epochs == 100);
  CHECK(c1.dropout == 0.2);
  const auto c2 = TrainConfig::defaults(Stage::cord);
  CHECK(c2.lr == 5e-5);
  CHECK(c2.batch_size == 4);
  CHECK(c2.epochs == 300);
  CHECK(c2.dropout == 0.4);
  CHECK(c2.patch.stage2_size == std::array<std::size_t, 3>{48, 64, 64});
  const auto c3 = TrainConfig::defaults(Stage::lesion);
  CHECK(c3.patch.stage2_size == std::array<std::size_t, 3>{48, 48, 48});
  CHECK(c3.augment.border_jitter);

  const auto j = to_json(c3);
  CHECK(to_json(train_config_from_json(j, TrainConfig::defaults(Stage::cord))) == j);
  const auto o = train_config_from_json(nlohmann::json{{"lr", 0.01}, {"patch", {{"stage2_size", {16, 16, 16}}}}}, c2);
  CHECK(o.lr == 0.01);
  CHECK(o.patch.stage2_size[1] == 16);
  CHECK(o.batch_size == 4);
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"learning_rate", 1}}, c2), ConfigError);
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"lr", "fast"}}, c2), ConfigError);
  auto bad = c2;
  bad.patch.stage2_size = {48, 62, 64};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS(parse_stage("brain"), ConfigError);
}

TEST_CASE("working space and mapping back") {
  Geometry g;
  g.dims = {10, 12, 7};
  g.spacing = {1.0, 0.8, 2.0};
  g.orientation = Orientation("LAS");
  auto a = default_affine(g.dims, g.spacing, g.orientation);
  a[0][3] += 3;
  a[1][3] -= 4;
  g.affine = a;
  Volume native(g, 1.0f);
  const auto w = to_working(native);
  CHECK(w.geom.orientation == Orientation("RPI"));
  CHECK(w.geom.spacing == Vec3{0.5, 0.5, 0.5});
  CHECK(w.dims() == Dims{20, 19, 28});

  SUBCASE("threshold is strictly above one half") {
    Volume p(w.geom, 0.49f);
    CHECK(count_nonzero(map_to_native(p, g)) == 0);
    std::fill(p.data.begin(), p.data.end(), 0.51f);
    const auto m = map_to_native(p, g);
    CHECK(count_nonzero(m) == m.data.size());
    std::fill(p.data.begin(), p.data.end(), 0.5f);
    CHECK(count_nonzero(map_to_native(p, g)) == 0);
  }
  SUBCASE("native geometry is preserved exactly") {
    const Volume p(w.geom, 0.7f);
    const auto m = map_to_native(p, g);
    CHECK(m.geom.dims == g.dims);
    CHECK(m.geom.spacing == g.spacing);
    CHECK(m.geom.orientation == g.orientation);
    CHECK(m.geom.affine == g.affine);
    const auto q = map_probability_to_native(p, g);
    CHECK(q.geom.affine == g.affine);
  }
  SUBCASE("a mask survives the round trip") {
    Mask m(g);
    for (std::size_t z = 2; z < 5; ++z)
      for (std::size_t y = 3; y < 9; ++y)
        for (std::size_t x = 4; x < 7; ++x) m.at(x, y, z) = 1;
    const auto wm = to_working(m);
    Volume p(wm.geom);
    for (std::size_t i = 0; i < p.data.size(); ++i) p.data[i] = wm.data[i] ? 0.9f : 0.1f;
    CHECK(map_to_native(p, g).data == m.data);
  }
}

TEST_CASE("centerline extension") {
  Centerline c;
  c.points = {{2, 1, 1}, {3, 2, 2}};
  const auto e = extend_centerline(c, 6);
  REQUIRE(e.points.size() == 6);
  CHECK(e.find(0)->x == 1.0);
  CHECK(e.find(5)->x == 2.0);
  CHECK(e.find(3)->y == 2.0);
}

TEST_CASE("training is deterministic and bundles round trip") {
  const auto& ds = tiny::dataset();
  const auto c1 = tiny::config(Stage::centerline);
  std::vector<double> losses;
  const auto a = train_centerline_model(ds, c1, [&](const EpochLog& e) { losses.push_back(e.train_loss); });
  const auto b = train_centerline_model(ds, c1);
  CHECK(tiny::flat(a.params) == tiny::flat(b.params));
  CHECK(losses.size() == c1.epochs);
  REQUIRE(a.log.epochs.size() == b.log.epochs.size());
  for (std::size_t i = 0; i < a.log.epochs.size(); ++i) CHECK(a.log.epochs[i].val_loss == b.log.epochs[i].val_loss);

  const auto cord = train_seg_model(ds, tiny::config(Stage::cord));
  const auto dir = tiny::scratch("bundle");
  save_component(dir, Contrast::t2, a);
  save_component(dir, Contrast::t2, cord);
  CHECK(fs::exists(dir / "manifest.json"));
  CHECK(fs::exists(dir / "cord_log.csv"));
  const auto bundle = load_bundle(dir);
  REQUIRE(bundle.centerline.has_value());
  REQUIRE(bundle.cord.has_value());
  CHECK(tiny::flat(bundle.centerline->params) == tiny::flat(a.params));
  CHECK(tiny::flat(bundle.cord->params) == tiny::flat(cord.params));
  CHECK(bundle.cord->landmarks.values == cord.landmarks.values);
  CHECK(bundle.cord->stats.mean == cord.stats.mean);
  CHECK_THROWS_AS(bundle.seg(Stage::lesion), ConfigError);
  CHECK_THROWS_AS(save_component(dir, Contrast::t1, cord), ConfigError);

  const auto img = read_volume(ds.resolve(ds.subjects[0].image));
  const auto s = segment(img, bundle, Stage::cord, Contrast::t2);
  CHECK(s.mask.geom.affine == img.geom.affine);
  CHECK(s.mask.geom.dims == img.geom.dims);
  CHECK(s.probability.geom.dims == img.geom.dims);
  CHECK_THROWS_AS(segment(img, bundle, Stage::lesion, Contrast::t2), ConfigError);
  CHECK_THROWS_AS(segment(img, bundle, Stage::cord, Contrast::t1), ConfigError);
}

TEST_CASE("missing data is reported") {
  auto ds = tiny::dataset();
  for (auto& r : ds.subjects) r.lesion_mask.reset();
  CHECK_THROWS_AS(train_seg_model(ds, tiny::config(Stage::lesion)), MissingDataError);
  auto t1 = tiny::config(Stage::cord);
  t1.contrast = Contrast::t1;
  CHECK_THROWS_AS(train_seg_model(tiny::dataset(), t1), MissingDataError);
}

TEST_CASE("a small cord network fits its training data") {
  auto cfg = tiny::config(Stage::cord);
  cfg.epochs = 30;
  cfg.lr = 3e-3;
  cfg.base_channels = 4;
  cfg.samples_per_epoch = 8;
  cfg.patience = 0;
  const auto m = train_seg_model(tiny::dataset(), cfg);
  const double first = m.log.epochs.front().train_loss;
  double last5 = 0;
  for (std::size_t i = m.log.epochs.size() - 5; i < m.log.epochs.size(); ++i) last5 += m.log.epochs[i].train_loss / 5;
  MESSAGE("first ", first, " last five ", last5);
  CHECK(last5 < 0.5 * first);
  CHECK(last5 < 0.3);
}
