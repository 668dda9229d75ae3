#include "cordseg/volume.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "cordseg/error.hpp"

namespace cordseg {

namespace {

int axis_of(char c) {
  switch (c) {
    case 'R': case 'L': return 0;
    case 'A': case 'P': return 1;
    case 'S': case 'I': return 2;
    default: return -1;
  }
}

// Letters name the starting side, so an axis starting at L runs toward R (+x).
int sign_of(char c) { return (c == 'L' || c == 'P' || c == 'I') ? +1 : -1; }

char letter_for(int world_axis, int sign) {
  static constexpr char pos[3] = {'L', 'P', 'I'};
  static constexpr char neg[3] = {'R', 'A', 'S'};
  return sign > 0 ? pos[world_axis] : neg[world_axis];
}

}  // namespace

Orientation::Orientation(std::string_view code) {
  if (!is_valid(code)) throw ConfigError("invalid orientation code '" + std::string(code) + "'");
  std::copy(code.begin(), code.end(), code_.begin());
}

bool Orientation::is_valid(std::string_view code) {
  if (code.size() != 3) return false;
  std::array<bool, 3> seen{};
  for (char c : code) {
    const int a = axis_of(c);
    if (a < 0 || seen[a]) return false;
    seen[a] = true;
  }
  return true;
}

int Orientation::world_axis(int axis) const { return axis_of(code_[axis]); }
int Orientation::world_sign(int axis) const { return sign_of(code_[axis]); }

bool Geometry::same_grid(const Geometry& other, double tol) const {
  if (dims != other.dims || !(orientation == other.orientation)) return false;
  for (int i = 0; i < 3; ++i)
    if (std::abs(spacing[i] - other.spacing[i]) > tol) return false;
  return true;
}

void validate(const Geometry& g) {
  for (int i = 0; i < 3; ++i) {
    if (g.dims[i] < 1) throw ConfigError("volume dimensions must be >= 1");
    if (!(g.spacing[i] > 0.0) || !std::isfinite(g.spacing[i]))
      throw ConfigError("voxel spacing must be strictly positive");
  }
}

void validate(const Volume& v) {
  validate(v.geom);
  if (v.data.size() != v.geom.voxel_count()) throw ShapeError("volume data size does not match dims");
}

void validate(const Mask& m) {
  validate(m.geom);
  if (m.data.size() != m.geom.voxel_count()) throw ShapeError("mask data size does not match dims");
  for (auto v : m.data)
    if (v > 1) throw ConfigError("mask voxels must be 0 or 1");
}

Affine default_affine(const Dims&, const Vec3& spacing, const Orientation& o) {
  Affine a{};
  for (int i = 0; i < 3; ++i) a[o.world_axis(i)][i] = o.world_sign(i) * spacing[i];
  a[3][3] = 1.0;
  return a;
}

Orientation orientation_from_affine(const Affine& a) {
  std::string code(3, '?');
  std::array<bool, 3> used{};
  for (int col = 0; col < 3; ++col) {
    double norm = 0.0;
    for (int r = 0; r < 3; ++r) norm += a[r][col] * a[r][col];
    norm = std::sqrt(norm);
    if (!(norm > 0.0)) throw FormatError("degenerate affine: zero column");
    int best = 0;
    for (int r = 1; r < 3; ++r)
      if (std::abs(a[r][col]) > std::abs(a[best][col])) best = r;
    const double cosine = std::abs(a[best][col]) / norm;
    if (cosine <= std::numbers::sqrt2 / 2.0 + 1e-9 || used[best])
      throw FormatError("ambiguous oblique affine: cannot derive an orientation code");
    used[best] = true;
    code[col] = letter_for(best, a[best][col] > 0 ? +1 : -1);
  }
  return Orientation(code);
}

Affine multiply(const Affine& a, const Affine& b) {
  Affine c{};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      double s = 0.0;
      for (int k = 0; k < 4; ++k) s += a[i][k] * b[k][j];
      c[i][j] = s;
    }
  return c;
}

Affine inverse(const Affine& a) {
  // Affine with last row (0,0,0,1): invert the 3x3 block and the translation.
  const double m00 = a[0][0], m01 = a[0][1], m02 = a[0][2];
  const double m10 = a[1][0], m11 = a[1][1], m12 = a[1][2];
  const double m20 = a[2][0], m21 = a[2][1], m22 = a[2][2];
  const double c00 = m11 * m22 - m12 * m21;
  const double c01 = m02 * m21 - m01 * m22;
  const double c02 = m01 * m12 - m02 * m11;
  const double c10 = m12 * m20 - m10 * m22;
  const double c11 = m00 * m22 - m02 * m20;
  const double c12 = m02 * m10 - m00 * m12;
  const double c20 = m10 * m21 - m11 * m20;
  const double c21 = m01 * m20 - m00 * m21;
  const double c22 = m00 * m11 - m01 * m10;
  const double det = m00 * c00 + m01 * c10 + m02 * c20;
  if (std::abs(det) < 1e-12) throw ConfigError("singular affine");
  Affine inv{};
  const double r[3][3] = {{c00, c01, c02}, {c10, c11, c12}, {c20, c21, c22}};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) inv[i][j] = r[i][j] / det;
  for (int i = 0; i < 3; ++i)
    inv[i][3] = -(inv[i][0] * a[0][3] + inv[i][1] * a[1][3] + inv[i][2] * a[2][3]);
  inv[3][3] = 1.0;
  return inv;
}

Vec3 apply(const Affine& a, const Vec3& p) {
  Vec3 out{};
  for (int i = 0; i < 3; ++i) out[i] = a[i][0] * p[0] + a[i][1] * p[1] + a[i][2] * p[2] + a[i][3];
  return out;
}

Affine affine_or_default(const Geometry& g) {
  return g.affine ? *g.affine : default_affine(g.dims, g.spacing, g.orientation);
}

Volume to_volume(const Mask& m) {
  Volume v(m.geom);
  std::transform(m.data.begin(), m.data.end(), v.data.begin(),
                 [](std::uint8_t x) { return static_cast<float>(x); });
  return v;
}

Mask threshold(const Volume& v, double thr) {
  Mask m(v.geom);
  std::transform(v.data.begin(), v.data.end(), m.data.begin(),
                 [thr](float x) { return static_cast<std::uint8_t>(x > thr ? 1 : 0); });
  return m;
}

std::size_t count_nonzero(const Mask& m) {
  return static_cast<std::size_t>(std::count_if(m.data.begin(), m.data.end(), [](auto x) { return x != 0; }));
}

template <class T>
Image<T> reorient(const Image<T>& img, const Orientation& target) {
  const Geometry& g = img.geom;
  if (g.orientation == target) return img;

  std::array<int, 3> src_axis{};
  std::array<bool, 3> flip{};
  for (int a = 0; a < 3; ++a) {
    for (int i = 0; i < 3; ++i)
      if (g.orientation.world_axis(i) == target.world_axis(a)) src_axis[a] = i;
    flip[a] = g.orientation.world_sign(src_axis[a]) != target.world_sign(a);
  }

  Geometry out_geom;
  out_geom.orientation = target;
  for (int a = 0; a < 3; ++a) {
    out_geom.dims[a] = g.dims[src_axis[a]];
    out_geom.spacing[a] = g.spacing[src_axis[a]];
  }
  if (g.affine) {
    // old_index = M * new_index
    Affine m{};
    m[3][3] = 1.0;
    for (int a = 0; a < 3; ++a) {
      const int s = src_axis[a];
      m[s][a] = flip[a] ? -1.0 : 1.0;
      m[s][3] = flip[a] ? static_cast<double>(g.dims[s] - 1) : 0.0;
    }
    out_geom.affine = multiply(*g.affine, m);
  }

  Image<T> out(out_geom);
  const Dims& od = out_geom.dims;
  std::array<std::size_t, 3> src{};
  for (std::size_t z = 0; z < od[2]; ++z)
    for (std::size_t y = 0; y < od[1]; ++y)
      for (std::size_t x = 0; x < od[0]; ++x) {
        const std::size_t idx[3] = {x, y, z};
        for (int a = 0; a < 3; ++a) {
          const int s = src_axis[a];
          src[s] = flip[a] ? g.dims[s] - 1 - idx[a] : idx[a];
        }
        out.data[out_geom.index(x, y, z)] = img.data[g.index(src[0], src[1], src[2])];
      }
  return out;
}

template Image<float> reorient(const Image<float>&, const Orientation&);
template Image<std::uint8_t> reorient(const Image<std::uint8_t>&, const Orientation&);

namespace {

Geometry resampled_geometry(const Geometry& g, const Dims& dims, const Vec3& spacing) {
  Geometry out;
  out.dims = dims;
  out.spacing = spacing;
  out.orientation = g.orientation;
  if (g.affine) {
    Affine m{};
    m[3][3] = 1.0;
    for (int i = 0; i < 3; ++i) {
      const double r = spacing[i] / g.spacing[i];
      m[i][i] = r;
      m[i][3] = 0.5 * (r - 1.0);
    }
    out.affine = multiply(*g.affine, m);
  }
  return out;
}

// Source coordinate of each output index along one axis (corner-anchored).
std::vector<double> source_coords(std::size_t n_out, double s_in, double s_out) {
  std::vector<double> u(n_out);
  const double r = s_out / s_in;
  for (std::size_t j = 0; j < n_out; ++j) u[j] = (static_cast<double>(j) + 0.5) * r - 0.5;
  return u;
}

std::size_t nearest_index(double u, std::size_t n) {
  const double f = std::floor(u + 0.5);
  if (f <= 0.0) return 0;
  return std::min(static_cast<std::size_t>(f), n - 1);
}

template <class T>
Image<T> resample_nearest(const Image<T>& img, const Dims& dims, const Vec3& spacing) {
  const Geometry& g = img.geom;
  Image<T> out(resampled_geometry(g, dims, spacing));
  std::array<std::vector<std::size_t>, 3> idx;
  for (int a = 0; a < 3; ++a) {
    const auto u = source_coords(dims[a], g.spacing[a], spacing[a]);
    idx[a].resize(u.size());
    for (std::size_t j = 0; j < u.size(); ++j) idx[a][j] = nearest_index(u[j], g.dims[a]);
  }
  for (std::size_t z = 0; z < dims[2]; ++z)
    for (std::size_t y = 0; y < dims[1]; ++y)
      for (std::size_t x = 0; x < dims[0]; ++x)
        out.data[out.geom.index(x, y, z)] = img.data[g.index(idx[0][x], idx[1][y], idx[2][z])];
  return out;
}

Volume resample_linear(const Volume& img, const Dims& dims, const Vec3& spacing) {
  const Geometry& g = img.geom;
  Volume out(resampled_geometry(g, dims, spacing));
  struct Tap {
    std::size_t i0, i1;
    double t;
  };
  std::array<std::vector<Tap>, 3> taps;
  for (int a = 0; a < 3; ++a) {
    const auto u = source_coords(dims[a], g.spacing[a], spacing[a]);
    const double hi = static_cast<double>(g.dims[a] - 1);
    for (double c : u) {
      c = std::clamp(c, 0.0, hi);
      const auto i0 = static_cast<std::size_t>(std::floor(c));
      const std::size_t i1 = std::min(i0 + 1, g.dims[a] - 1);
      taps[a].push_back({i0, i1, c - static_cast<double>(i0)});
    }
  }
  for (std::size_t z = 0; z < dims[2]; ++z) {
    const Tap tz = taps[2][z];
    for (std::size_t y = 0; y < dims[1]; ++y) {
      const Tap ty = taps[1][y];
      for (std::size_t x = 0; x < dims[0]; ++x) {
        const Tap tx = taps[0][x];
        auto v = [&](std::size_t i, std::size_t j, std::size_t k) {
          return static_cast<double>(img.data[g.index(i, j, k)]);
        };
        // a + t (b - a) reproduces constant neighbourhoods exactly.
        auto lerp = [](double a, double b, double t) { return a + t * (b - a); };
        const double c00 = lerp(v(tx.i0, ty.i0, tz.i0), v(tx.i1, ty.i0, tz.i0), tx.t);
        const double c10 = lerp(v(tx.i0, ty.i1, tz.i0), v(tx.i1, ty.i1, tz.i0), tx.t);
        const double c01 = lerp(v(tx.i0, ty.i0, tz.i1), v(tx.i1, ty.i0, tz.i1), tx.t);
        const double c11 = lerp(v(tx.i0, ty.i1, tz.i1), v(tx.i1, ty.i1, tz.i1), tx.t);
        const double c0 = lerp(c00, c10, ty.t);
        const double c1 = lerp(c01, c11, ty.t);
        out.data[out.geom.index(x, y, z)] = static_cast<float>(lerp(c0, c1, tz.t));
      }
    }
  }
  return out;
}

Dims dims_for_spacing(const Geometry& g, const Vec3& spacing) {
  Dims d{};
  for (int i = 0; i < 3; ++i) {
    if (!(spacing[i] > 0.0)) throw ConfigError("target spacing must be strictly positive");
    const double n = std::round(static_cast<double>(g.dims[i]) * g.spacing[i] / spacing[i]);
    d[i] = static_cast<std::size_t>(std::max(1.0, n));
  }
  return d;
}

}  // namespace

Volume resample(const Volume& v, const Vec3& spacing, Interp interp) {
  return resample_to_grid(v, dims_for_spacing(v.geom, spacing), spacing, interp);
}

Mask resample(const Mask& m, const Vec3& spacing, Interp interp) {
  if (interp != Interp::nearest) throw ConfigError("masks must be resampled with nearest-neighbour interpolation");
  return resample_to_grid(m, dims_for_spacing(m.geom, spacing), spacing);
}

Volume resample_to_grid(const Volume& v, const Dims& dims, const Vec3& spacing, Interp interp) {
  for (int i = 0; i < 3; ++i)
    if (!(spacing[i] > 0.0) || dims[i] < 1) throw ConfigError("target grid must have positive spacing and dims");
  return interp == Interp::nearest ? resample_nearest(v, dims, spacing) : resample_linear(v, dims, spacing);
}

Mask resample_to_grid(const Mask& m, const Dims& dims, const Vec3& spacing) {
  for (int i = 0; i < 3; ++i)
    if (!(spacing[i] > 0.0) || dims[i] < 1) throw ConfigError("target grid must have positive spacing and dims");
  return resample_nearest(m, dims, spacing);
}

Mask resample_to_geometry(const Mask& mask, const Geometry& reference) {
  if (!mask.geom.affine || !reference.affine)
    throw ConfigError("resample_to_geometry requires affines on both mask and reference");
  Mask out(Geometry{reference.dims, reference.spacing, reference.orientation, reference.affine});
  const Affine to_mask = multiply(inverse(*mask.geom.affine), *reference.affine);
  const Dims& md = mask.geom.dims;
  for (std::size_t z = 0; z < reference.dims[2]; ++z)
    for (std::size_t y = 0; y < reference.dims[1]; ++y)
      for (std::size_t x = 0; x < reference.dims[0]; ++x) {
        const Vec3 u = apply(to_mask, {double(x), double(y), double(z)});
        std::array<std::size_t, 3> i{};
        bool inside = true;
        for (int a = 0; a < 3 && inside; ++a) {
          const double f = std::floor(u[a] + 0.5);
          inside = f >= 0.0 && f < static_cast<double>(md[a]);
          if (inside) i[a] = static_cast<std::size_t>(f);
        }
        if (inside) out.data[out.geom.index(x, y, z)] = mask.data[mask.geom.index(i[0], i[1], i[2])];
      }
  return out;
}

}  // namespace cordseg
