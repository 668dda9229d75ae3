#include "cordseg/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "cordseg/error.hpp"
#include "cordseg/labeling.hpp"
#include "cordseg/rng.hpp"

namespace cordseg {

void AugmentConfig::validate() const {
  if (!(shift_max >= 0 && rotate_max >= 0 && elastic_alpha >= 0))
    throw ConfigError("augmentation magnitudes must be >= 0");
  if (!(elastic_sigma > 0)) throw ConfigError("elastic_sigma must be > 0");
  if (border_jitter_radius < 1) throw ConfigError("border_jitter_radius must be >= 1");
}

AugmentConfig AugmentConfig::stage2_default() {
  AugmentConfig c;
  c.shift = c.rotate = c.elastic = false;
  return c;
}

AugmentConfig AugmentConfig::none() {
  AugmentConfig c;
  c.shift = c.rotate = c.elastic = c.flip = c.border_jitter = false;
  return c;
}

namespace {

std::size_t voxels(const Dims& d) { return d[0] * d[1] * d[2]; }

void check_size(std::size_t n, const Dims& d, const char* what) {
  if (n != voxels(d))
    throw ShapeError(std::string(what) + " has " + std::to_string(n) + " voxels, expected " +
                     std::to_string(voxels(d)));
}

void smooth_axis(std::vector<double>& f, const Dims& d, int axis, const std::vector<double>& kernel) {
  const long R = static_cast<long>(kernel.size() / 2);
  const std::size_t stride = axis == 0 ? 1 : axis == 1 ? d[0] : d[0] * d[1];
  const auto n = static_cast<long>(d[axis]);
  std::vector<double> line(static_cast<std::size_t>(n)), out(static_cast<std::size_t>(n));
  const std::size_t lines = voxels(d) / static_cast<std::size_t>(n);
  for (std::size_t l = 0; l < lines; ++l) {
    // Base index of line l: enumerate the other two axes.
    std::size_t base;
    if (axis == 0)
      base = l * d[0];
    else if (axis == 1)
      base = (l % d[0]) + (l / d[0]) * d[0] * d[1];
    else
      base = l;
    for (long i = 0; i < n; ++i) line[i] = f[base + static_cast<std::size_t>(i) * stride];
    for (long i = 0; i < n; ++i) {
      double s = 0.0;
      for (long k = -R; k <= R; ++k) s += kernel[k + R] * line[std::clamp(i + k, 0L, n - 1)];
      out[i] = s;
    }
    for (long i = 0; i < n; ++i) f[base + static_cast<std::size_t>(i) * stride] = out[i];
  }
}

// alpha * smoothed uniform noise; one x-fastest field per displaced axis.
std::vector<std::vector<double>> displacement(const Dims& d, double alpha, double sigma, std::uint64_t seed) {
  const int comps = d[2] == 1 ? 2 : 3;
  const long R = std::max(1L, static_cast<long>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(static_cast<std::size_t>(2 * R + 1));
  double total = 0.0;
  for (long k = -R; k <= R; ++k) total += kernel[k + R] = std::exp(-0.5 * k * k / (sigma * sigma));
  for (auto& w : kernel) w /= total;
  Rng rng(seed);
  std::vector<std::vector<double>> field(comps, std::vector<double>(voxels(d)));
  for (auto& f : field) {
    for (auto& v : f) v = rng.uniform(-1.0, 1.0);
    for (int axis = 0; axis < comps; ++axis)
      if (d[axis] > 1) smooth_axis(f, d, axis, kernel);
    for (auto& v : f) v *= alpha;
  }
  return field;
}

struct Warp {
  std::array<double, 3> shift{};
  double theta = 0.0;
  std::vector<std::vector<double>> disp;
  std::array<bool, 3> flip{};
};

template <class Sample>
void warp_each(const Dims& d, const Warp& w, Sample&& sample) {
  const double cx = (static_cast<double>(d[0]) - 1.0) / 2.0, cy = (static_cast<double>(d[1]) - 1.0) / 2.0;
  const double c = std::cos(w.theta), s = std::sin(w.theta);
  std::size_t i = 0;
  for (std::size_t z = 0; z < d[2]; ++z)
    for (std::size_t y = 0; y < d[1]; ++y)
      for (std::size_t x = 0; x < d[0]; ++x, ++i) {
        double q[3] = {static_cast<double>(w.flip[0] ? d[0] - 1 - x : x),
                       static_cast<double>(w.flip[1] ? d[1] - 1 - y : y),
                       static_cast<double>(w.flip[2] ? d[2] - 1 - z : z)};
        if (!w.disp.empty()) {
          const std::size_t qi = static_cast<std::size_t>(q[0]) +
                                 d[0] * (static_cast<std::size_t>(q[1]) + d[1] * static_cast<std::size_t>(q[2]));
          for (std::size_t a = 0; a < w.disp.size(); ++a) q[a] += w.disp[a][qi];
        }
        const double rx = q[0] - cx, ry = q[1] - cy;
        const double sx = cx + c * rx + s * ry, sy = cy - s * rx + c * ry;
        sample(i, sx - w.shift[0], sy - w.shift[1], q[2] - w.shift[2]);
      }
}

// Linear interpolation with zero outside the grid.
double sample_linear(std::span<const float> f, const Dims& d, double x, double y, double z) {
  const double fx = std::floor(x), fy = std::floor(y), fz = std::floor(z);
  const long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy), z0 = static_cast<long>(fz);
  const double tx = x - fx, ty = y - fy, tz = z - fz;
  double acc = 0.0;
  for (int k = 0; k < 2; ++k) {
    const double wz = k ? tz : 1.0 - tz;
    const long zz = z0 + k;
    if (wz == 0.0 || zz < 0 || zz >= static_cast<long>(d[2])) continue;
    for (int j = 0; j < 2; ++j) {
      const double wy = j ? ty : 1.0 - ty;
      const long yy = y0 + j;
      if (wy == 0.0 || yy < 0 || yy >= static_cast<long>(d[1])) continue;
      for (int i = 0; i < 2; ++i) {
        const double wx = i ? tx : 1.0 - tx;
        const long xx = x0 + i;
        if (wx == 0.0 || xx < 0 || xx >= static_cast<long>(d[0])) continue;
        acc += wx * wy * wz * f[static_cast<std::size_t>(xx) + d[0] * (static_cast<std::size_t>(yy) + d[1] * static_cast<std::size_t>(zz))];
      }
    }
  }
  return acc;
}

template <class T>
T sample_nearest(std::span<const T> f, const Dims& d, double x, double y, double z) {
  const long xx = static_cast<long>(std::floor(x + 0.5)), yy = static_cast<long>(std::floor(y + 0.5)),
             zz = static_cast<long>(std::floor(z + 0.5));
  if (xx < 0 || yy < 0 || zz < 0 || xx >= static_cast<long>(d[0]) || yy >= static_cast<long>(d[1]) ||
      zz >= static_cast<long>(d[2]))
    return T{};
  return f[static_cast<std::size_t>(xx) + d[0] * (static_cast<std::size_t>(yy) + d[1] * static_cast<std::size_t>(zz))];
}

std::vector<std::array<int, 3>> ball(int r, bool planar) {
  std::vector<std::array<int, 3>> out;
  const int rz = planar ? 0 : r;
  for (int dz = -rz; dz <= rz; ++dz)
    for (int dy = -r; dy <= r; ++dy)
      for (int dx = -r; dx <= r; ++dx)
        if (dx * dx + dy * dy + dz * dz <= r * r) out.push_back({dx, dy, dz});
  return out;
}

}  // namespace

template <class T>
std::vector<T> flip(std::span<const T> patch, const Dims& d, int axis) {
  check_size(patch.size(), d, "patch");
  if (axis < 0 || axis > 2) throw ConfigError("flip axis must be 0, 1 or 2");
  std::vector<T> out(patch.size());
  std::size_t i = 0;
  for (std::size_t z = 0; z < d[2]; ++z)
    for (std::size_t y = 0; y < d[1]; ++y)
      for (std::size_t x = 0; x < d[0]; ++x, ++i) {
        const std::size_t sx = axis == 0 ? d[0] - 1 - x : x, sy = axis == 1 ? d[1] - 1 - y : y,
                          sz = axis == 2 ? d[2] - 1 - z : z;
        out[i] = patch[sx + d[0] * (sy + d[1] * sz)];
      }
  return out;
}

std::vector<float> elastic_deform(std::span<const float> patch, const Dims& d, double alpha, double sigma,
                                  std::uint64_t seed, Interp interp) {
  check_size(patch.size(), d, "patch");
  if (!(alpha >= 0.0) || !(sigma > 0.0)) throw ConfigError("elastic deformation needs alpha >= 0 and sigma > 0");
  if (alpha == 0.0) return {patch.begin(), patch.end()};
  Warp w;
  w.disp = displacement(d, alpha, sigma, seed);
  std::vector<float> out(patch.size());
  warp_each(d, w, [&](std::size_t i, double x, double y, double z) {
    out[i] = interp == Interp::nearest ? sample_nearest(patch, d, x, y, z)
                                       : static_cast<float>(sample_linear(patch, d, x, y, z));
  });
  return out;
}

std::vector<std::uint8_t> border_jitter(std::span<const std::uint8_t> label, const Dims& d, int radius,
                                        std::uint64_t seed, std::vector<int>* log) {
  check_size(label.size(), d, "label");
  if (radius < 1) throw ConfigError("border jitter radius must be >= 1");
  const auto lab = label_components(label, d, 26);
  std::vector<std::uint8_t> out(label.begin(), label.end());
  if (lab.count() == 0) return out;
  Rng rng(seed);
  std::vector<int> draws;
  for (std::size_t c = 0; c < lab.count(); ++c) {
    const bool grow = rng.bernoulli(0.5);
    const int r = static_cast<int>(rng.uniform_int(1, radius));
    draws.push_back(grow ? r : -r);
  }
  const bool planar = d[2] == 1;
  auto offset = [&](std::size_t v, const std::array<int, 3>& o, std::size_t& u) {
    const long x = static_cast<long>(v % d[0]) + o[0], y = static_cast<long>((v / d[0]) % d[1]) + o[1],
               z = static_cast<long>(v / (d[0] * d[1])) + o[2];
    if (x < 0 || y < 0 || z < 0 || x >= static_cast<long>(d[0]) || y >= static_cast<long>(d[1]) ||
        z >= static_cast<long>(d[2]))
      return false;
    u = static_cast<std::size_t>(x) + d[0] * (static_cast<std::size_t>(y) + d[1] * static_cast<std::size_t>(z));
    return true;
  };
  // Erosions first, against each lesion's own extent, then dilations.
  for (std::size_t c = 0; c < lab.count(); ++c) {
    if (draws[c] > 0) continue;
    const auto b = ball(-draws[c], planar);
    const auto id = static_cast<std::int32_t>(c + 1);
    for (std::size_t v : lab.components[c])
      for (const auto& o : b) {
        std::size_t u;
        if (!offset(v, o, u) || lab.labels[u] != id) {
          out[v] = 0;
          break;
        }
      }
  }
  for (std::size_t c = 0; c < lab.count(); ++c) {
    if (draws[c] < 0) continue;
    const auto b = ball(draws[c], planar);
    for (std::size_t v : lab.components[c])
      for (const auto& o : b) {
        std::size_t u;
        if (offset(v, o, u)) out[u] = 1;
      }
  }
  if (log) *log = std::move(draws);
  return out;
}

AugmentedPair augment_pair(std::span<const float> image, std::span<const std::uint8_t> label, const Dims& d,
                           const AugmentConfig& cfg, std::uint64_t sample_seed) {
  cfg.validate();
  check_size(image.size(), d, "image patch");
  check_size(label.size(), d, "label patch");
  for (auto v : label)
    if (v > 1) throw ConfigError("label patch must be binary");
  const bool planar = d[2] == 1;
  const int axes = planar ? 2 : 3;
  Rng rng(derive_seed(cfg.seed, sample_seed));
  AugmentedPair out;
  Warp w;
  if (cfg.shift)
    for (int a = 0; a < axes; ++a) w.shift[a] = out.log.shift[a] = rng.uniform(-cfg.shift_max, cfg.shift_max);
  if (cfg.rotate) {
    out.log.rotation_deg = rng.uniform(-cfg.rotate_max, cfg.rotate_max);
    w.theta = out.log.rotation_deg * std::numbers::pi / 180.0;
  }
  if (cfg.elastic) {
    const std::uint64_t s = rng.next();
    out.log.elastic = cfg.elastic_alpha > 0.0;
    if (out.log.elastic) w.disp = displacement(d, cfg.elastic_alpha, cfg.elastic_sigma, s);
  }
  if (cfg.flip)
    for (int a = 0; a < axes; ++a) w.flip[a] = out.log.flip[a] = rng.bernoulli(0.5);
  const std::uint64_t jitter_seed = rng.next();

  if (cfg.shift || cfg.rotate || !w.disp.empty()) {
    out.image.resize(image.size());
    out.label.resize(label.size());
    warp_each(d, w, [&](std::size_t i, double x, double y, double z) {
      out.image[i] = static_cast<float>(sample_linear(image, d, x, y, z));
      out.label[i] = sample_nearest(label, d, x, y, z);
    });
  } else {
    out.image.assign(image.begin(), image.end());
    out.label.assign(label.begin(), label.end());
    for (int a = 0; a < 3; ++a)
      if (w.flip[a]) {
        out.image = flip<float>(out.image, d, a);
        out.label = flip<std::uint8_t>(out.label, d, a);
      }
  }
  if (cfg.border_jitter)
    out.label = border_jitter(out.label, d, cfg.border_jitter_radius, jitter_seed, &out.log.jitter);
  return out;
}

template std::vector<float> flip(std::span<const float>, const Dims&, int);
template std::vector<std::uint8_t> flip(std::span<const std::uint8_t>, const Dims&, int);

}  // namespace cordseg
