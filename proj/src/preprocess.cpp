#include "cordseg/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cordseg/error.hpp"
#include "cordseg/rng.hpp"

namespace cordseg {

void PatchConfig::validate() const {
  if (stage1_size == 0) throw ConfigError("stage-1 patch size must be positive");
  for (auto s : stage2_size)
    if (s == 0) throw ConfigError("stage-2 patch extents must be positive");
  if (inference_stride_z == 0 || inference_stride_z > stage2_size[0])
    throw ConfigError("inference stride must be in [1, patch depth]");
}

PatchConfig PatchConfig::for_lesion() {
  PatchConfig c;
  c.stage2_size = {48, 48, 48};
  return c;
}

template <class T>
std::vector<T> crop(const Image<T>& img, const Placement& p) {
  std::vector<T> out(p.voxel_count(), T{});
  const auto& d = img.dims();
  for (std::size_t k = 0; k < p.depth; ++k) {
    const long z = p.z0 + static_cast<long>(k);
    if (z < 0 || z >= static_cast<long>(d[2])) continue;
    for (std::size_t j = 0; j < p.height; ++j) {
      const long y = p.y0 + static_cast<long>(j);
      if (y < 0 || y >= static_cast<long>(d[1])) continue;
      const long xa = std::max(0L, p.x0), xb = std::min(static_cast<long>(d[0]), p.x0 + static_cast<long>(p.width));
      if (xa >= xb) continue;
      const T* src = &img.data[img.geom.index(static_cast<std::size_t>(xa), static_cast<std::size_t>(y),
                                              static_cast<std::size_t>(z))];
      std::copy(src, src + (xb - xa), &out[(xa - p.x0) + p.width * (j + p.height * k)]);
    }
  }
  return out;
}

std::vector<long> tile_starts(std::size_t n, std::size_t size) {
  if (size == 0) throw ConfigError("tile size must be positive");
  if (n <= size) return {0};
  const std::size_t count = (n + size - 1) / size;
  std::vector<long> s;
  for (std::size_t k = 0; k + 1 < count; ++k) s.push_back(static_cast<long>(k * size));
  s.push_back(static_cast<long>(n - size));
  return s;
}

std::vector<Placement> axial_placements(const Geometry& g, std::size_t size) {
  const auto xs = tile_starts(g.dims[0], size), ys = tile_starts(g.dims[1], size);
  std::vector<Placement> out;
  for (std::size_t z = 0; z < g.dims[2]; ++z)
    for (long y : ys)
      for (long x : xs) out.push_back({x, y, static_cast<long>(z), size, size, 1});
  return out;
}

std::vector<Patch> extract_axial_patches(const Volume& vol, std::size_t size) {
  std::vector<Patch> out;
  for (const auto& p : axial_placements(vol.geom, size)) out.push_back({p, crop(vol, p)});
  return out;
}

void NormStats::validate() const {
  if (!std::isfinite(mean) || !(std > 0.0) || !std::isfinite(std))
    throw ConfigError("normalisation statistics need a finite mean and a positive standard deviation");
}

NormStats compute_norm_stats(const std::vector<std::span<const float>>& samples) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& s : samples) {
    for (float v : s) sum += v;
    n += s.size();
  }
  if (n == 0) throw ConfigError("cannot compute normalisation statistics without training voxels");
  const double mean = sum / static_cast<double>(n);
  double ss = 0.0;
  for (const auto& s : samples)
    for (float v : s) ss += (v - mean) * (v - mean);
  NormStats st{mean, std::sqrt(ss / static_cast<double>(n))};
  if (!(st.std > 0.0)) throw ConfigError("training patches have zero intensity variance");
  return st;
}

NormStats compute_norm_stats(const std::vector<Patch>& patches) {
  std::vector<std::span<const float>> s;
  for (const auto& p : patches) s.emplace_back(p.data);
  return compute_norm_stats(s);
}

void apply_zscore(std::span<float> values, const NormStats& stats) {
  stats.validate();
  for (auto& v : values) v = static_cast<float>((v - stats.mean) / stats.std);
}

void IntensityLandmarks::validate() const {
  if (percentiles.size() < 2 || values.size() != percentiles.size())
    throw ConfigError("intensity landmarks need matching percentile and value lists");
  for (std::size_t i = 1; i < percentiles.size(); ++i) {
    if (!(percentiles[i] > percentiles[i - 1])) throw ConfigError("landmark percentiles must increase");
    if (values[i] < values[i - 1]) throw ConfigError("landmark values must not decrease");
  }
  if (percentiles.front() < 0.0 || percentiles.back() > 100.0) throw ConfigError("percentiles outside [0, 100]");
}

std::vector<double> percentile_values(std::span<const float> values, const std::vector<double>& percentiles) {
  if (values.empty()) throw ConfigError("percentiles of an empty stack");
  std::vector<float> v(values.begin(), values.end());
  std::vector<double> out;
  const double last = static_cast<double>(v.size() - 1);
  for (double q : percentiles) {
    const auto k = static_cast<std::size_t>(std::llround(q / 100.0 * last));
    std::nth_element(v.begin(), v.begin() + static_cast<long>(k), v.end());
    out.push_back(v[k]);
  }
  return out;
}

namespace {

std::vector<double> stack_knots(std::span<const float> stack, const std::vector<double>& percentiles) {
  auto k = percentile_values(stack, percentiles);
  if (!(k.back() > k.front()))
    throw ConfigError("degenerate intensity stack: all landmark percentiles are equal");
  return k;
}

}  // namespace

IntensityLandmarks learn_landmarks(const std::vector<std::vector<float>>& stacks,
                                   const IntensityLandmarks& percentile_set) {
  if (stacks.empty()) throw ConfigError("learning landmarks needs at least one training stack");
  IntensityLandmarks lm;
  lm.percentiles = percentile_set.percentiles;
  lm.values.assign(lm.percentiles.size(), 0.0);
  for (const auto& s : stacks) {
    const auto k = stack_knots(s, lm.percentiles);
    for (std::size_t i = 0; i < k.size(); ++i)
      lm.values[i] += 100.0 * (k[i] - k.front()) / (k.back() - k.front());
  }
  for (auto& v : lm.values) v /= static_cast<double>(stacks.size());
  lm.values.front() = 0.0;
  lm.values.back() = 100.0;
  lm.validate();
  return lm;
}

double map_intensity(double v, const std::vector<double>& knots, const IntensityLandmarks& lm) {
  if (v <= knots.front()) return lm.values.front();
  if (v >= knots.back()) return lm.values.back();
  // Last knot at or below v; the next one is then strictly above it.
  const auto it = std::upper_bound(knots.begin(), knots.end(), v);
  const auto k = static_cast<std::size_t>(it - knots.begin()) - 1;
  const double t = (v - knots[k]) / (knots[k + 1] - knots[k]);
  return lm.values[k] + t * (lm.values[k + 1] - lm.values[k]);
}

void standardize_with(std::span<float> values, const std::vector<double>& knots, const IntensityLandmarks& lm) {
  lm.validate();
  if (knots.size() != lm.values.size()) throw ConfigError("knot count does not match the landmarks");
  for (auto& v : values) v = static_cast<float>(map_intensity(v, knots, lm));
}

std::vector<float> standardize(std::span<const float> stack, const IntensityLandmarks& lm) {
  lm.validate();
  const auto knots = stack_knots(stack, lm.percentiles);
  std::vector<float> out(stack.begin(), stack.end());
  standardize_with(out, knots, lm);
  return out;
}

namespace {

Placement centred(const Centerline& c, const PatchConfig& cfg, long z0) {
  const auto [D, H, W] = cfg.stage2_size;
  const auto& p = c.nearest(z0 + static_cast<long>(D / 2));
  return {std::lround(p.x) - static_cast<long>(W / 2), std::lround(p.y) - static_cast<long>(H / 2), z0, W, H, D};
}

long clamp_start(const Geometry& g, std::size_t depth, long z0) {
  const auto n = static_cast<long>(g.dims[2]), d = static_cast<long>(depth);
  if (n < d) return z0;
  return std::clamp(z0, 0L, n - d);
}

}  // namespace

std::vector<Placement> centerline_placements(const Geometry& g, const Centerline& c, const PatchConfig& cfg,
                                             PatchMode mode, std::uint64_t seed, std::size_t count) {
  cfg.validate();
  if (c.empty()) throw ConfigError("cannot place patches along an empty centerline");
  const long depth = static_cast<long>(cfg.stage2_size[0]);
  std::vector<Placement> out;
  if (mode == PatchMode::infer) {
    const long first = c.first_slice();
    const long last = std::max(first, c.last_slice() + 1 - depth);
    std::vector<long> starts;
    for (long z = first; z < last; z += static_cast<long>(cfg.inference_stride_z)) starts.push_back(z);
    starts.push_back(last);
    long prev = std::numeric_limits<long>::min();
    for (long z : starts) {
      const long s = clamp_start(g, cfg.stage2_size[0], z);
      if (s == prev) continue;
      prev = s;
      out.push_back(centred(c, cfg, s));
    }
  } else {
    Rng rng(seed);
    for (std::size_t i = 0; i < count; ++i) {
      const auto& p = c.points[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(c.points.size()) - 1))];
      out.push_back(centred(c, cfg, clamp_start(g, cfg.stage2_size[0], p.z - depth / 2)));
    }
  }
  return out;
}

std::vector<Patch> extract_patches_along_centerline(const Volume& vol, const Centerline& c, const PatchConfig& cfg,
                                                    PatchMode mode, std::uint64_t seed, std::size_t count) {
  std::vector<Patch> out;
  for (const auto& p : centerline_placements(vol.geom, c, cfg, mode, seed, count)) out.push_back({p, crop(vol, p)});
  return out;
}

std::vector<float> gather_stack(const Volume& vol, const std::vector<Placement>& placements) {
  std::vector<float> out;
  const auto& d = vol.dims();
  for (const auto& p : placements)
    for (std::size_t k = 0; k < p.depth; ++k) {
      const long z = p.z0 + static_cast<long>(k);
      if (z < 0 || z >= static_cast<long>(d[2])) continue;
      for (std::size_t j = 0; j < p.height; ++j) {
        const long y = p.y0 + static_cast<long>(j);
        if (y < 0 || y >= static_cast<long>(d[1])) continue;
        const long xa = std::max(0L, p.x0), xb = std::min(static_cast<long>(d[0]), p.x0 + static_cast<long>(p.width));
        for (long x = xa; x < xb; ++x)
          out.push_back(vol.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), static_cast<std::size_t>(z)));
      }
    }
  return out;
}

Volume reconstruct_volume(const std::vector<Patch>& predictions, const Geometry& g) {
  if (predictions.empty()) throw ConfigError("reconstruction needs at least one prediction");
  std::vector<double> sum(g.voxel_count(), 0.0);
  std::vector<std::uint32_t> n(g.voxel_count(), 0);
  for (const auto& pr : predictions) {
    const auto& p = pr.at;
    if (pr.data.size() != p.voxel_count())
      throw ShapeError("prediction of " + std::to_string(pr.data.size()) + " voxels does not fill its placement");
    for (std::size_t k = 0; k < p.depth; ++k) {
      const long z = p.z0 + static_cast<long>(k);
      if (z < 0 || z >= static_cast<long>(g.dims[2])) continue;
      for (std::size_t j = 0; j < p.height; ++j) {
        const long y = p.y0 + static_cast<long>(j);
        if (y < 0 || y >= static_cast<long>(g.dims[1])) continue;
        for (std::size_t i = 0; i < p.width; ++i) {
          const long x = p.x0 + static_cast<long>(i);
          if (x < 0 || x >= static_cast<long>(g.dims[0])) continue;
          const std::size_t idx =
              g.index(static_cast<std::size_t>(x), static_cast<std::size_t>(y), static_cast<std::size_t>(z));
          sum[idx] += pr.data[i + p.width * (j + p.height * k)];
          ++n[idx];
        }
      }
    }
  }
  Volume out(g, 0.0f);
  for (std::size_t i = 0; i < sum.size(); ++i)
    if (n[i]) out.data[i] = static_cast<float>(sum[i] / n[i]);
  return out;
}

template <class T>
Image<T> pad_slices(const Image<T>& img, std::size_t depth) {
  const auto& d = img.dims();
  if (d[2] >= depth) return img;
  Geometry g = img.geom;
  g.dims[2] = depth;
  Image<T> out(g);
  const std::size_t plane = d[0] * d[1];
  std::copy(img.data.begin(), img.data.end(), out.data.begin());
  for (std::size_t z = d[2]; z < depth; ++z)
    std::copy(img.data.end() - static_cast<long>(plane), img.data.end(), out.data.begin() + static_cast<long>(z * plane));
  return out;
}

template <class T>
Image<T> crop_slices(const Image<T>& img, std::size_t depth) {
  const auto& d = img.dims();
  if (depth > d[2]) throw ShapeError("cannot crop to more slices than the image has");
  Geometry g = img.geom;
  g.dims[2] = depth;
  Image<T> out(g);
  std::copy(img.data.begin(), img.data.begin() + static_cast<long>(g.voxel_count()), out.data.begin());
  return out;
}

template std::vector<float> crop(const Image<float>&, const Placement&);
template std::vector<std::uint8_t> crop(const Image<std::uint8_t>&, const Placement&);
template Image<float> pad_slices(const Image<float>&, std::size_t);
template Image<std::uint8_t> pad_slices(const Image<std::uint8_t>&, std::size_t);
template Image<float> crop_slices(const Image<float>&, std::size_t);
template Image<std::uint8_t> crop_slices(const Image<std::uint8_t>&, std::size_t);

}  // namespace cordseg
