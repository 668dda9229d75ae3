#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "oracles.hpp"

using namespace cordseg;
using namespace cordseg::nn;

namespace {

template <class T>
Tensor<T> random_tensor(const Shape& s, Rng& rng) {
  Tensor<T> t(s);
  oracle::fill_uniform(t, rng);
  return t;
}

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "cordseg_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("conv2d matches the sliding-window oracle bit for bit") {
  Rng rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    const int dil = trial % 2 ? 3 : 1;
    const std::size_t N = rng.uniform_int(1, 2), C = rng.uniform_int(1, 4), O = rng.uniform_int(1, 5);
    const std::size_t K = rng.uniform_int(0, 1) ? 3 : 1;
    const std::size_t H = rng.uniform_int(1, 12), W = rng.uniform_int(1, 40);
    auto x = random_tensor<double>({N, C, H, W}, rng);
    auto w = random_tensor<double>({O, C, K, K}, rng);
    auto b = random_tensor<double>({O}, rng);
    CHECK(conv2d(x, w, b, dil) == oracle::conv(x, w, b, dil));
    auto xf = random_tensor<float>({N, C, H, W}, rng);
    auto wf = random_tensor<float>({O, C, K, K}, rng);
    auto bf = random_tensor<float>({O}, rng);
    CHECK(conv2d(xf, wf, bf, dil) == oracle::conv(xf, wf, bf, dil));
  }
}

TEST_CASE("conv3d matches the sliding-window oracle bit for bit") {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const int dil = trial % 3 == 2 ? 2 : 1;
    const std::size_t C = rng.uniform_int(1, 3), O = rng.uniform_int(1, 4);
    const std::size_t D = rng.uniform_int(1, 8), H = rng.uniform_int(1, 8), W = rng.uniform_int(1, 8);
    auto x = random_tensor<double>({1, C, D, H, W}, rng);
    auto w = random_tensor<double>({O, C, 3, 3, 3}, rng);
    auto b = random_tensor<double>({O}, rng);
    CHECK(conv3d(x, w, b, dil) == oracle::conv(x, w, b, dil));
  }
}

TEST_CASE("conv rejects inconsistent shapes") {
  Tensor<double> x({1, 2, 5, 5}), w({3, 2, 3, 3}), b({3});
  CHECK_THROWS_AS(conv2d(x, Tensor<double>({3, 1, 3, 3}), b), ShapeError);
  CHECK_THROWS_AS(conv2d(x, Tensor<double>({3, 2, 2, 2}), b), ConfigError);
  CHECK_THROWS_AS(conv2d(x, w, Tensor<double>({2})), ShapeError);
  CHECK_THROWS_AS(conv2d(x, w, b, 0), ConfigError);
  CHECK_THROWS_AS(conv3d(x, w, b), ShapeError);
  CHECK(receptive_field(3, 1) == 3);
  CHECK(receptive_field(3, 3) == 7);
}

TEST_CASE("conv_backward matches finite differences") {
  Rng rng(13);
  for (int dil : {1, 2}) {
    auto x = random_tensor<double>({2, 2, 5, 6}, rng);
    auto w = random_tensor<double>({3, 2, 3, 3}, rng);
    auto b = random_tensor<double>({3}, rng);
    auto probe = random_tensor<double>({2, 3, 5, 6}, rng);
    auto f = [&] {
      auto y = conv2d(x, w, b, dil);
      double s = 0;
      for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * probe[i];
      return s;
    };
    auto g = conv_backward(x, w, dil, probe, true);
    CHECK(oracle::max_rel_error(w.storage(), g.weights.storage(), f, 1e-6, 1e-8) < 1e-5);
    CHECK(oracle::max_rel_error(b.storage(), g.bias.storage(), f, 1e-6, 1e-8) < 1e-5);
    CHECK(oracle::max_rel_error(x.storage(), g.input.storage(), f, 1e-6, 1e-8) < 1e-5);
  }
}

TEST_CASE("batch norm normalises per channel and tracks running statistics") {
  Tensor<double> x({2, 1, 2}, std::vector<double>{1, 3, 5, 7});
  Tensor<double> g({1}, 1.0), s({1}), rm({1}), rv({1}, 1.0);
  auto y = batch_norm(x, g, s, rm, rv, Mode::train, {});
  double mean = 0, var = 0;
  for (auto v : y.values()) mean += v / 4;
  for (auto v : y.values()) var += (v - mean) * (v - mean) / 4;
  CHECK(mean == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(var == doctest::Approx(5.0 / (5.0 + 1e-5)));
  CHECK(rm[0] == doctest::Approx(0.4));
  CHECK(rv[0] == doctest::Approx(0.9 + 0.1 * 20.0 / 3.0));
  const auto before = rm;
  batch_norm(x, g, s, rm, rv, Mode::infer, {});
  CHECK(rm == before);
}

TEST_CASE("dropout, pooling and upsampling") {
  Rng rng(14);
  auto x = random_tensor<double>({2, 3, 4, 4}, rng);
  CHECK(dropout(x, 0.0, 5) == x);
  CHECK(dropout(x, 0.5, 5) == dropout(x, 0.5, 5));
  std::vector<std::uint8_t> keep;
  auto d = dropout(x, 0.5, 5, &keep);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(d[i] == (keep[i] ? x[i] * 2.0 : 0.0));

  Tensor<double> p({1, 1, 2, 2}, std::vector<double>{1, 4, 2, 3});
  CHECK(maxpool(p, 2)[0] == 4.0);
  auto up = upsample(p, 2);
  CHECK(up.shape() == Shape{1, 1, 4, 4});
  CHECK(up[0] == 1.0);
  CHECK(up[3] == 4.0);
  CHECK(up[15] == 3.0);
  CHECK_THROWS_AS(maxpool(Tensor<double>({1, 1, 3, 4}), 2), ShapeError);

  auto s = sigmoid(Tensor<double>({3}, std::vector<double>{-1000, 0, 1000}));
  CHECK(s[0] == 0.0);
  CHECK(s[1] == 0.5);
  CHECK(s[2] == 1.0);
}

TEST_CASE("dice loss value and gradient") {
  Tensor<double> p({4}, std::vector<double>{0.9, 0.1, 0.8, 0.0});
  Tensor<double> t({4}, std::vector<double>{1, 0, 1, 0});
  const auto r = dice_loss(p, t);
  const double num = 2 * (0.9 + 0.8) + 1, den = 0.81 + 0.01 + 0.64 + 2 + 1;
  CHECK(r.loss == doctest::Approx(1 - num / den).epsilon(1e-14));
  CHECK(dice_loss(t, t).loss == doctest::Approx(0.0));

  Rng rng(15);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor<double> pr({2, 1, 5, 5}), tg({2, 1, 5, 5});
    oracle::fill_uniform(pr, rng, 0, 1);
    for (auto& v : tg.values()) v = rng.uniform() < 0.3;
    auto g = dice_loss(pr, tg).grad;
    auto f = [&] { return dice_loss(pr, tg).loss; };
    CHECK(oracle::max_rel_error(pr.storage(), g.storage(), f, 1e-6, 1e-8) < 1e-4);
  }
  CHECK_THROWS_AS(dice_loss(p, Tensor<double>({3})), ShapeError);
}

TEST_CASE("micro U-net gradients match finite differences") {
  UNetConfig c2;
  c2.spatial_rank = 2;
  c2.base_channels = 2;
  c2.contracting_dilation = 3;
  c2.dropout = 0.2;
  const auto r2 = oracle::gradcheck_network(build_unet(c2), {2, 1, 8, 8}, 21);
  CHECK(r2.worst < 1e-3);

  UNetConfig c3 = c2;
  c3.spatial_rank = 3;
  c3.contracting_dilation = 1;
  const auto r3 = oracle::gradcheck_network(build_unet(c3), {1, 1, 8, 8, 8}, 22);
  CHECK(r3.worst < 1e-3);
}

TEST_CASE("network specs") {
  const auto a = build_cnn1(8), b = build_cnn1(8), c = build_cnn1(16);
  CHECK(a.fingerprint() == b.fingerprint());
  CHECK(a.fingerprint() != c.fingerprint());
  CHECK(a.downsampling_factor() == 4);
  CHECK_THROWS_AS(build_cnn2({48, 64, 62}), ConfigError);
  CHECK_NOTHROW(build_cnn2({48, 48, 48}, 4));

  NetworkSpec bad = a;
  bad.layers.push_back(Relu{});
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = a;
  bad.layers.insert(bad.layers.begin(), ConcatSkip{3});
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  auto p = init_params<float>(a, 1);
  CHECK_THROWS_AS(predict(a, p, Tensor<float>({1, 1, 64, 64})), ShapeError);
  CHECK_THROWS_AS(predict(a, p, Tensor<float>({1, 2, 96, 96})), ShapeError);
}

TEST_CASE("forward is deterministic and infer mode leaves parameters alone") {
  const auto spec = build_cnn1(4);
  auto p = init_params<float>(spec, 3);
  Rng rng(4);
  auto x = random_tensor<float>({2, 1, 96, 96}, rng);
  const auto before = p.layers;
  const auto y1 = predict(spec, p, x);
  const auto y2 = predict(spec, p, x);
  CHECK(y1 == y2);
  for (std::size_t i = 0; i < p.layers.size(); ++i) CHECK(p.layers[i].running_mean == before[i].running_mean);
  for (auto v : y1.values()) CHECK((v >= 0.0f && v <= 1.0f));

  ActivationCache<float> cache;
  forward(spec, p, x, {Mode::train, 9, {}}, &cache);
  auto other = build_cnn1(8);
  CHECK_THROWS_AS(backward(other, init_params<float>(other, 1), cache, Tensor<float>({2, 1, 96, 96})), ConfigError);
}

TEST_CASE("adam update against a hand-computed step") {
  UNetConfig cfg;
  cfg.base_channels = 1;
  const auto spec = build_unet(cfg);
  auto p = init_params<double>(spec, 1);
  auto g = zero_like(p);
  for (auto* t : g.trainable()) t->fill(0.5);
  auto state = make_adam(p, AdamConfig{0.01, 0.9, 0.999, 1e-8});
  const double w0 = p.trainable()[0]->storage()[0];
  adam_step(p, g, state);
  // First step: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps).
  CHECK(p.trainable()[0]->storage()[0] == doctest::Approx(w0 - 0.01 * 0.5 / (0.5 + 1e-8)).epsilon(1e-12));
  CHECK_THROWS_AS(make_adam(p, AdamConfig{0.0}), ConfigError);
}

TEST_CASE("parameter files round-trip and reject foreign or damaged data") {
  const auto spec = build_cnn1(4);
  auto p = init_params<float>(spec, 77);
  p.layers[1].running_mean.fill(0.25f);
  const auto path = temp_path("cnn1.params");
  save_params(p, spec, path);
  const auto q = load_params<float>(spec, path);
  CHECK(q.seed == 77);
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    CHECK(q.layers[i].weight == p.layers[i].weight);
    CHECK(q.layers[i].running_mean == p.layers[i].running_mean);
  }
  const auto qd = load_params<double>(spec, path);
  CHECK(qd.layers[0].weight[0] == static_cast<double>(p.layers[0].weight[0]));

  CHECK_THROWS_AS(load_params<float>(build_cnn1(8), path), ConfigError);

  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 7);
  CHECK_THROWS_AS(load_params<float>(spec, path), FormatError);
  {
    std::ofstream junk(path, std::ios::binary | std::ios::trunc);
    junk << "not a parameter file";
  }
  CHECK_THROWS_AS(load_params<float>(spec, path), FormatError);
  CHECK_THROWS_AS(load_params<float>(spec, temp_path("missing.params")), IoError);
}
