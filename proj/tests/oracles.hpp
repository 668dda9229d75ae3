// Reference implementations used only by the tests. They are deliberately
// written as plain loops with no sharing of code with the library kernels.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "cordseg/centerline.hpp"
#include "cordseg/network.hpp"
#include "cordseg/volume.hpp"
#include "cordseg/rng.hpp"

namespace oracle {

using cordseg::nn::Shape;
using cordseg::nn::Tensor;

// Zero-padded "same" convolution by direct sliding window. 2D inputs are
// [N,C,H,W] with weights [O,C,k,k]; 3D inputs are [N,C,D,H,W].
template <class T>
Tensor<T> conv(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int dil) {
  const bool is3d = x.rank() == 5;
  const long N = x.dim(0), C = x.dim(1);
  const long D = is3d ? x.dim(2) : 1, H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
  const long O = w.dim(0), K = w.dim(w.rank() - 1);
  const long KD = is3d ? K : 1;
  const long r = (K - 1) / 2 * dil, rd = is3d ? r : 0;
  Shape os = x.shape();
  os[1] = O;
  Tensor<T> y(os);
  for (long n = 0; n < N; ++n)
    for (long o = 0; o < O; ++o)
      for (long z = 0; z < D; ++z)
        for (long i = 0; i < H; ++i)
          for (long j = 0; j < W; ++j) {
            T acc = b[o];
            for (long c = 0; c < C; ++c)
              for (long kz = 0; kz < KD; ++kz)
                for (long ky = 0; ky < K; ++ky)
                  for (long kx = 0; kx < K; ++kx) {
                    const long zz = z + kz * dil - rd, ii = i + ky * dil - r, jj = j + kx * dil - r;
                    T v = 0;
                    if (zz >= 0 && zz < D && ii >= 0 && ii < H && jj >= 0 && jj < W)
                      v = x[(((n * C + c) * D + zz) * H + ii) * W + jj];
                    const T wt = w[((o * C + c) * KD + kz) * K * K + ky * K + kx];
                    acc = acc + wt * v;
                  }
            y[(((n * O + o) * D + z) * H + i) * W + j] = acc;
          }
  return y;
}

template <class T>
void fill_uniform(Tensor<T>& t, cordseg::Rng& rng, double lo = -1.0, double hi = 1.0) {
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(lo, hi));
}

// Central finite difference of f at every element of *param; returns the
// worst relative error |a - n| / max(|a|, |n|, floor) against `analytic`.
inline double max_rel_error(std::vector<double>& param, const std::vector<double>& analytic,
                            const std::function<double()>& f, double h, double floor,
                            std::size_t* worst_index = nullptr) {
  double worst = 0.0;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double keep = param[i];
    param[i] = keep + h;
    const double up = f();
    param[i] = keep - h;
    const double down = f();
    param[i] = keep;
    const double numeric = (up - down) / (2.0 * h);
    const double err = std::abs(analytic[i] - numeric) / std::max({std::abs(analytic[i]), std::abs(numeric), floor});
    if (err > worst) {
      worst = err;
      if (worst_index) *worst_index = i;
    }
  }
  return worst;
}

}  // namespace oracle

namespace oracle {

// Worst relative error between backward() and central differences over every
// trainable parameter of `spec` for a Dice loss on a random batch.
struct GradReport {
  double worst = 0.0;
  std::size_t tensor = 0, index = 0, checked = 0;
};

inline GradReport gradcheck_network(const cordseg::nn::NetworkSpec& spec, const Shape& input_shape,
                                    std::uint64_t seed, double h = 1e-6, double floor = 1e-6) {
  using namespace cordseg::nn;
  cordseg::Rng rng(seed);
  auto params = init_params<double>(spec, seed);
  for (auto& l : params.layers) {
    if (!l.bias.empty()) fill_uniform(l.bias, rng, -0.1, 0.1);
    if (!l.scale.empty()) fill_uniform(l.scale, rng, 0.5, 1.5);
    if (!l.shift.empty()) fill_uniform(l.shift, rng, -0.2, 0.2);
  }
  Tensor<double> x(input_shape);
  fill_uniform(x, rng);
  Shape ts = input_shape;
  ts[1] = 1;
  Tensor<double> target(ts);
  for (auto& v : target.values()) v = rng.uniform() < 0.3 ? 1.0 : 0.0;

  const ForwardOptions opt{Mode::train, seed ^ 0x5eedULL, {}};
  auto loss = [&]() {
    auto p = params;  // running statistics must not drift between evaluations
    return dice_loss(forward(spec, p, x, opt), target).loss;
  };
  ActivationCache<double> cache;
  auto p0 = params;
  const auto out = forward(spec, p0, x, opt, &cache);
  const auto grads = backward(spec, params, cache, dice_loss(out, target).grad);

  GradReport rep;
  auto ps = params.trainable();
  auto gs = grads.trainable();
  for (std::size_t t = 0; t < ps.size(); ++t) {
    std::size_t idx = 0;
    const double e = max_rel_error(ps[t]->storage(), gs[t]->storage(), loss, h, floor, &idx);
    rep.checked += ps[t]->size();
    if (e > rep.worst) {
      rep.worst = e;
      rep.tensor = t;
      rep.index = idx;
    }
  }
  return rep;
}

// ---- geometry ------------------------------------------------------------

// Distance (mm) from every foreground voxel to the nearest background voxel,
// by scanning all voxels. Voxels just outside the grid count as background.
inline std::vector<double> edt_brute(const cordseg::Mask& m) {
  const auto [W, H, D] = m.dims();
  const auto& s = m.geom.spacing;
  std::vector<double> out(m.data.size(), 0.0);
  for (std::size_t z = 0; z < D; ++z)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        if (!m.at(x, y, z)) continue;
        double best = std::min({(x + 1.0) * s[0], (W - x) * s[0], (y + 1.0) * s[1], (H - y) * s[1],
                                (z + 1.0) * s[2], (D - z) * s[2]});
        best *= best;
        for (std::size_t zz = 0; zz < D; ++zz)
          for (std::size_t yy = 0; yy < H; ++yy)
            for (std::size_t xx = 0; xx < W; ++xx) {
              if (m.at(xx, yy, zz)) continue;
              const double dx = (double(xx) - double(x)) * s[0], dy = (double(yy) - double(y)) * s[1],
                           dz = (double(zz) - double(z)) * s[2];
              best = std::min(best, dx * dx + dy * dy + dz * dz);
            }
        out[m.geom.index(x, y, z)] = std::sqrt(best);
      }
  return out;
}

struct PathOptimum {
  double cost = std::numeric_limits<double>::infinity();
  std::vector<long> zs;
};

// Exhaustive minimum of  -sum heat + lambda * sum |dp|^2 / gap  over every
// combination of positive-heat voxels on the slices that carry heat.
inline PathOptimum path_brute(const cordseg::Volume& heat, double lambda) {
  const auto [W, H, D] = heat.dims();
  std::vector<long> zs;
  std::vector<std::vector<std::array<long, 3>>> cands;  // x, y, heat index
  for (std::size_t z = 0; z < D; ++z) {
    std::vector<std::array<long, 3>> c;
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        if (heat.at(x, y, z) > 0.0f) c.push_back({long(x), long(y), long(heat.geom.index(x, y, z))});
    if (!c.empty()) {
      zs.push_back(long(z));
      cands.push_back(std::move(c));
    }
  }
  PathOptimum best;
  best.zs = zs;
  std::vector<std::size_t> pick(zs.size(), 0);
  std::function<void(std::size_t, double)> rec = [&](std::size_t k, double acc) {
    if (k == zs.size()) {
      best.cost = std::min(best.cost, acc);
      return;
    }
    for (std::size_t c = 0; c < cands[k].size(); ++c) {
      const auto& q = cands[k][c];
      double a = acc;
      if (k > 0) {
        const auto& p = cands[k - 1][pick[k - 1]];
        const double dx = double(q[0] - p[0]), dy = double(q[1] - p[1]);
        a = a + lambda * (dx * dx + dy * dy) / double(zs[k] - zs[k - 1]);
      }
      a = a + -double(heat.data[std::size_t(q[2])]);
      pick[k] = c;
      rec(k + 1, a);
    }
  };
  rec(0, 0.0);
  return best;
}

// Cost of one path (x, y per entry of zs) accumulated in the same order as
// path_brute.
inline double path_cost_of(const cordseg::Volume& heat, const std::vector<long>& zs,
                           const std::vector<std::array<long, 2>>& xy, double lambda) {
  double acc = 0.0;
  for (std::size_t k = 0; k < zs.size(); ++k) {
    if (k > 0) {
      const double dx = double(xy[k][0] - xy[k - 1][0]), dy = double(xy[k][1] - xy[k - 1][1]);
      acc = acc + lambda * (dx * dx + dy * dy) / double(zs[k] - zs[k - 1]);
    }
    acc = acc + -double(heat.at(std::size_t(xy[k][0]), std::size_t(xy[k][1]), std::size_t(zs[k])));
  }
  return acc;
}

// ---- metrics -------------------------------------------------------------

// Component id per voxel (-1 background) by breadth-first search; components
// are numbered in raster order of their first voxel.
inline std::vector<long> components_bfs(const cordseg::Mask& m, int connectivity, long* count = nullptr) {
  const auto [W, H, D] = m.dims();
  std::vector<long> id(m.data.size(), -1);
  long next = 0;
  std::vector<std::array<long, 3>> queue;
  for (std::size_t i = 0; i < m.data.size(); ++i) {
    if (!m.data[i] || id[i] >= 0) continue;
    queue.clear();
    queue.push_back({long(i % W), long((i / W) % H), long(i / (W * H))});
    id[i] = next;
    for (std::size_t q = 0; q < queue.size(); ++q) {
      const auto c = queue[q];
      for (long dz = -1; dz <= 1; ++dz)
        for (long dy = -1; dy <= 1; ++dy)
          for (long dx = -1; dx <= 1; ++dx) {
            const int order = std::abs(dx) + std::abs(dy) + std::abs(dz);
            if (order == 0 || (connectivity == 6 && order > 1) || (connectivity == 18 && order > 2)) continue;
            const long x = c[0] + dx, y = c[1] + dy, z = c[2] + dz;
            if (x < 0 || y < 0 || z < 0 || x >= long(W) || y >= long(H) || z >= long(D)) continue;
            const std::size_t j = std::size_t(x) + W * (std::size_t(y) + H * std::size_t(z));
            if (!m.data[j] || id[j] >= 0) continue;
            id[j] = next;
            queue.push_back({x, y, z});
          }
    }
    ++next;
  }
  if (count) *count = next;
  return id;
}

struct MetricOracle {
  double dice = 0.0;  // percent; 100 when both masks are empty
  double sens = -1.0, prec = -1.0;  // percent; -1 when undefined
};

inline MetricOracle voxel_metrics(const cordseg::Mask& a, const cordseg::Mask& m) {
  double inter = 0, na = 0, nm = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    na += a.data[i];
    nm += m.data[i];
    inter += a.data[i] * m.data[i];
  }
  MetricOracle r;
  r.dice = na + nm == 0 ? 100.0 : 200.0 * inter / (na + nm);
  if (nm > 0) r.sens = 100.0 * inter / nm;
  if (na > 0) r.prec = 100.0 * inter / na;
  return r;
}

struct LesionOracle {
  long tp = 0, fn = 0, correct = 0, fp = 0;
};

// Manual lesion detected when strictly more than `overlap` of its voxels are
// automatic; an automatic component is correct when it touches a detected lesion.
inline LesionOracle lesion_metrics(const cordseg::Mask& a, const cordseg::Mask& m, double overlap, int conn) {
  long nm = 0, na = 0;
  const auto lm = components_bfs(m, conn, &nm);
  const auto la = components_bfs(a, conn, &na);
  std::vector<long> size(nm, 0), hit(nm, 0);
  for (std::size_t i = 0; i < lm.size(); ++i)
    if (lm[i] >= 0) {
      ++size[lm[i]];
      if (a.data[i]) ++hit[lm[i]];
    }
  LesionOracle r;
  std::vector<bool> det(nm);
  for (long k = 0; k < nm; ++k) {
    // hit / size > overlap, compared without division
    det[k] = double(hit[k]) > overlap * double(size[k]);
    (det[k] ? r.tp : r.fn)++;
  }
  std::vector<bool> good(na, false);
  for (std::size_t i = 0; i < la.size(); ++i)
    if (la[i] >= 0 && lm[i] >= 0 && det[lm[i]]) good[la[i]] = true;
  for (long k = 0; k < na; ++k) (good[k] ? r.correct : r.fp)++;
  return r;
}

// Quantile by the textbook "(n - 1) p" rule.
inline double quantile_linear(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double h = (double(v.size()) - 1.0) * p;
  const double lo = std::floor(h);
  const auto i = std::size_t(lo);
  return i + 1 < v.size() ? v[i] + (h - lo) * (v[i + 1] - v[i]) : v[i];
}

}  // namespace oracle
