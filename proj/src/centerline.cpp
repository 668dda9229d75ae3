#include "cordseg/centerline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "cordseg/error.hpp"

namespace cordseg {

const CenterlinePoint* Centerline::find(long z) const {
  auto it = std::lower_bound(points.begin(), points.end(), z,
                             [](const CenterlinePoint& p, long v) { return p.z < v; });
  return it != points.end() && it->z == z ? &*it : nullptr;
}

const CenterlinePoint& Centerline::nearest(long z) const {
  if (points.empty()) throw ConfigError("centerline is empty");
  if (z <= points.front().z) return points.front();
  if (z >= points.back().z) return points.back();
  auto it = std::lower_bound(points.begin(), points.end(), z,
                             [](const CenterlinePoint& p, long v) { return p.z < v; });
  if (it->z == z) return *it;
  const auto prev = std::prev(it);
  return (z - prev->z) <= (it->z - z) ? *prev : *it;
}

void Centerline::validate() const {
  for (std::size_t i = 1; i < points.size(); ++i)
    if (points[i].z <= points[i - 1].z) throw ConfigError("centerline slices must be strictly increasing");
  for (const auto& p : points)
    if (!std::isfinite(p.x) || !std::isfinite(p.y)) throw ConfigError("centerline has non-finite coordinates");
}

void CurveOptConfig::validate() const {
  if (!(smooth_weight >= 0.0)) throw ConfigError("smooth_weight must be >= 0");
  if (candidate_stride < 1) throw ConfigError("candidate_stride must be >= 1");
  if (search_radius < 0) throw ConfigError("search_radius must be >= 0");
}

namespace {

// Lower envelope of parabolas (Felzenszwalb & Huttenlocher) on a strided
// line; f holds squared distances, s is the sample spacing.
void edt_line(double* f, std::size_t n, std::size_t stride, double s, std::vector<double>& d, std::vector<int>& v,
              std::vector<double>& zb) {
  const double s2 = s * s;
  d.resize(n);
  v.resize(n);
  zb.resize(n + 1);
  int k = 0;
  v[0] = 0;
  zb[0] = -std::numeric_limits<double>::infinity();
  zb[1] = std::numeric_limits<double>::infinity();
  auto at = [&](std::size_t q) { return f[q * stride]; };
  for (std::size_t q = 1; q < n; ++q) {
    const double qd = static_cast<double>(q);
    double inter;
    while (true) {
      const double qv = static_cast<double>(v[k]);
      inter = ((at(q) + s2 * qd * qd) - (at(v[k]) + s2 * qv * qv)) / (2.0 * s2 * (qd - qv));
      if (inter > zb[k]) break;
      --k;
    }
    ++k;
    v[k] = static_cast<int>(q);
    zb[k] = inter;
    zb[k + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (zb[k + 1] < static_cast<double>(q)) ++k;
    const double dq = static_cast<double>(q) - v[k];
    d[q] = s2 * dq * dq + at(v[k]);
  }
  for (std::size_t q = 0; q < n; ++q) f[q * stride] = d[q];
}

}  // namespace

Volume distance_heatmap(const Mask& pred) {
  const auto [W, H, D] = pred.dims();
  const std::size_t PW = W + 2, PH = H + 2, PD = D + 2;
  constexpr double big = 1e30;
  std::vector<double> f(PW * PH * PD, 0.0);
  bool any = false;
  for (std::size_t z = 0; z < D; ++z)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        if (pred.at(x, y, z)) {
          f[(x + 1) + PW * ((y + 1) + PH * (z + 1))] = big;
          any = true;
        }
  Volume out(pred.geom, 0.0f);
  if (!any) return out;
  std::vector<double> d, zb;
  std::vector<int> v;
  const auto& sp = pred.geom.spacing;
  for (std::size_t z = 0; z < PD; ++z)
    for (std::size_t y = 0; y < PH; ++y) edt_line(&f[PW * (y + PH * z)], PW, 1, sp[0], d, v, zb);
  for (std::size_t z = 0; z < PD; ++z)
    for (std::size_t x = 0; x < PW; ++x) edt_line(&f[x + PW * PH * z], PH, PW, sp[1], d, v, zb);
  for (std::size_t y = 0; y < PH; ++y)
    for (std::size_t x = 0; x < PW; ++x) edt_line(&f[x + PW * y], PD, PW * PH, sp[2], d, v, zb);
  for (std::size_t z = 0; z < D; ++z)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        if (pred.at(x, y, z))
          out.at(x, y, z) = static_cast<float>(std::sqrt(f[(x + 1) + PW * ((y + 1) + PH * (z + 1))]));
  return out;
}

namespace {

struct Stage {
  long z;
  std::vector<std::array<long, 2>> cand;  // (x, y), ordered by y then x
  std::vector<double> heat;
};

double step_penalty(const std::array<long, 2>& a, const std::array<long, 2>& b, long gap, double lambda) {
  const double dx = static_cast<double>(b[0] - a[0]), dy = static_cast<double>(b[1] - a[1]);
  return lambda * (dx * dx + dy * dy) / static_cast<double>(gap);
}

std::vector<std::uint8_t> dilate_square(const std::vector<std::uint8_t>& m, std::size_t W, std::size_t H, int r) {
  std::vector<std::uint8_t> tmp(m.size()), out(m.size());
  const long R = r;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      std::uint8_t v = 0;
      for (long dx = -R; dx <= R && !v; ++dx) {
        const long xx = static_cast<long>(x) + dx;
        if (xx >= 0 && xx < static_cast<long>(W)) v = m[xx + W * y];
      }
      tmp[x + W * y] = v;
    }
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      std::uint8_t v = 0;
      for (long dy = -R; dy <= R && !v; ++dy) {
        const long yy = static_cast<long>(y) + dy;
        if (yy >= 0 && yy < static_cast<long>(H)) v = tmp[x + W * yy];
      }
      out[x + W * y] = v;
    }
  return out;
}

}  // namespace

Centerline optimize_centerline(const Volume& heat, const CurveOptConfig& cfg) {
  cfg.validate();
  const auto [W, H, D] = heat.dims();
  std::vector<Stage> stages;
  for (std::size_t z = 0; z < D; ++z) {
    std::vector<std::uint8_t> hot(W * H, 0);
    bool any = false;
    for (std::size_t i = 0; i < W * H; ++i) {
      const float h = heat.data[i + W * H * z];
      if (!(h >= 0.0f) || !std::isfinite(h)) throw ConfigError("heatmap values must be finite and non-negative");
      hot[i] = h > 0.0f;
      any = any || hot[i];
    }
    if (!any) continue;
    std::vector<std::uint8_t> allowed;
    if (cfg.margin < 0)
      allowed.assign(W * H, 1);
    else
      allowed = cfg.margin > 0 ? dilate_square(hot, W, H, cfg.margin) : hot;
    Stage st;
    st.z = static_cast<long>(z);
    const auto s = static_cast<std::size_t>(cfg.candidate_stride);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t i = x + W * y;
        if (!allowed[i]) continue;
        if (!hot[i] && (x % s || y % s)) continue;
        st.cand.push_back({static_cast<long>(x), static_cast<long>(y)});
        st.heat.push_back(heat.data[i + W * H * z]);
      }
    stages.push_back(std::move(st));
  }
  if (stages.empty()) throw NoCordFound("no cord found: the centerline heatmap is empty");

  const double lambda = cfg.smooth_weight;
  std::vector<double> best(stages[0].cand.size());
  for (std::size_t c = 0; c < best.size(); ++c) best[c] = -stages[0].heat[c];
  std::vector<std::vector<std::uint32_t>> from(stages.size());
  for (std::size_t k = 1; k < stages.size(); ++k) {
    const auto& prev = stages[k - 1];
    const auto& cur = stages[k];
    const long gap = cur.z - prev.z;
    std::vector<double> next(cur.cand.size());
    from[k].resize(cur.cand.size());
    for (std::size_t c = 0; c < cur.cand.size(); ++c) {
      double m = std::numeric_limits<double>::infinity();
      std::uint32_t arg = 0;
      bool found = false;
      for (int pass = 0; pass < 2 && !found; ++pass) {
        const bool capped = pass == 0 && cfg.search_radius > 0;
        if (pass == 1 && cfg.search_radius == 0) break;
        for (std::size_t p = 0; p < prev.cand.size(); ++p) {
          if (capped && std::max(std::labs(prev.cand[p][0] - cur.cand[c][0]),
                                 std::labs(prev.cand[p][1] - cur.cand[c][1])) > cfg.search_radius)
            continue;
          const double v = best[p] + step_penalty(prev.cand[p], cur.cand[c], gap, lambda);
          if (!found || v < m) {
            m = v;
            arg = static_cast<std::uint32_t>(p);
            found = true;
          }
        }
      }
      next[c] = m + -cur.heat[c];
      from[k][c] = arg;
    }
    best = std::move(next);
  }
  std::size_t arg = 0;
  for (std::size_t c = 1; c < best.size(); ++c)
    if (best[c] < best[arg]) arg = c;

  std::vector<std::array<long, 2>> path(stages.size());
  for (std::size_t k = stages.size(); k-- > 0;) {
    path[k] = stages[k].cand[arg];
    if (k > 0) arg = from[k][arg];
  }

  Centerline out;
  out.spacing = heat.geom.spacing;
  for (std::size_t k = 0; k < stages.size(); ++k) {
    if (k > 0) {
      const long z0 = stages[k - 1].z, z1 = stages[k].z;
      for (long z = z0 + 1; z < z1; ++z) {
        const double t = static_cast<double>(z - z0) / static_cast<double>(z1 - z0);
        out.points.push_back({z, path[k - 1][0] + t * (path[k][0] - path[k - 1][0]),
                              path[k - 1][1] + t * (path[k][1] - path[k - 1][1])});
      }
    }
    out.points.push_back({stages[k].z, static_cast<double>(path[k][0]), static_cast<double>(path[k][1])});
  }
  return out;
}

double path_cost(const Volume& heat, const std::vector<long>& zs, const std::vector<std::array<long, 2>>& path,
                 double smooth_weight) {
  if (zs.size() != path.size() || zs.empty()) throw ConfigError("path_cost: path and slice lists differ");
  const auto& g = heat.geom;
  auto h = [&](std::size_t k) {
    return static_cast<double>(heat.at(static_cast<std::size_t>(path[k][0]), static_cast<std::size_t>(path[k][1]),
                                       static_cast<std::size_t>(zs[k])));
  };
  for (std::size_t k = 0; k < zs.size(); ++k)
    if (path[k][0] < 0 || path[k][1] < 0 || path[k][0] >= static_cast<long>(g.dims[0]) ||
        path[k][1] >= static_cast<long>(g.dims[1]) || zs[k] < 0 || zs[k] >= static_cast<long>(g.dims[2]))
      throw ConfigError("path_cost: position outside the heatmap");
  double acc = -h(0);
  for (std::size_t k = 1; k < zs.size(); ++k)
    acc = (acc + step_penalty(path[k - 1], path[k], zs[k] - zs[k - 1], smooth_weight)) + -h(k);
  return acc;
}

Centerline centerline_from_mask(const Mask& mask, int window) {
  if (window < 1 || window % 2 == 0) throw ConfigError("centerline smoothing window must be a positive odd number");
  const auto [W, H, D] = mask.dims();
  struct Acc {
    double sx = 0, sy = 0;
    std::size_t n = 0;
  };
  std::vector<Acc> acc(D);
  for (std::size_t z = 0; z < D; ++z)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        if (mask.at(x, y, z)) {
          acc[z].sx += static_cast<double>(x);
          acc[z].sy += static_cast<double>(y);
          ++acc[z].n;
        }
  std::vector<long> filled;
  for (std::size_t z = 0; z < D; ++z)
    if (acc[z].n) filled.push_back(static_cast<long>(z));
  if (filled.empty()) throw MissingDataError("cannot derive a centerline from an empty mask");
  if (filled.size() < 2) throw ConfigError("a mask centerline needs foreground on at least 2 slices");

  const long z0 = filled.front(), z1 = filled.back();
  const std::size_t n = static_cast<std::size_t>(z1 - z0 + 1);
  std::vector<double> xs(n), ys(n);
  for (std::size_t k = 0; k < filled.size(); ++k) {
    const auto z = static_cast<std::size_t>(filled[k]);
    const std::size_t i = z - static_cast<std::size_t>(z0);
    xs[i] = acc[z].sx / static_cast<double>(acc[z].n);
    ys[i] = acc[z].sy / static_cast<double>(acc[z].n);
    if (k > 0) {
      const auto zp = static_cast<std::size_t>(filled[k - 1]);
      const std::size_t ip = zp - static_cast<std::size_t>(z0);
      for (std::size_t j = ip + 1; j < i; ++j) {
        const double t = static_cast<double>(j - ip) / static_cast<double>(i - ip);
        xs[j] = xs[ip] + t * (xs[i] - xs[ip]);
        ys[j] = ys[ip] + t * (ys[i] - ys[ip]);
      }
    }
  }
  Centerline out;
  out.spacing = mask.geom.spacing;
  const std::size_t half = static_cast<std::size_t>(window / 2);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t h = std::min({half, i, n - 1 - i});
    double sx = 0, sy = 0;
    for (std::size_t j = i - h; j <= i + h; ++j) {
      sx += xs[j];
      sy += ys[j];
    }
    const double m = static_cast<double>(2 * h + 1);
    out.points.push_back({z0 + static_cast<long>(i), sx / m, sy / m});
  }
  return out;
}

void write_centerline_csv(const Centerline& c, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << "z,x,y\n";
  char buf[96];
  for (const auto& p : c.points) {
    std::snprintf(buf, sizeof(buf), "%ld,%.6f,%.6f\n", p.z, p.x, p.y);
    out << buf;
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

Centerline read_centerline_csv(const std::filesystem::path& path, const Vec3& spacing) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || line.rfind("z,x,y", 0) != 0)
    throw FormatError("'" + path.string() + "' is not a centerline CSV (expected header z,x,y)");
  Centerline c;
  c.spacing = spacing;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    CenterlinePoint p;
    char tail = 0;
    if (std::sscanf(line.c_str(), "%ld,%lf,%lf%c", &p.z, &p.x, &p.y, &tail) < 3)
      throw FormatError("'" + path.string() + "' line " + std::to_string(row) + ": malformed row");
    c.points.push_back(p);
  }
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError("'" + path.string() + "': " + e.what());
  }
  return c;
}

Vec3 centerline_point_world(const Geometry& g, const CenterlinePoint& p) {
  return cordseg::apply(affine_or_default(g), Vec3{p.x, p.y, static_cast<double>(p.z)});
}

}  // namespace cordseg
