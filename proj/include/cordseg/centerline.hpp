#pragma once

#include <array>
#include <filesystem>
#include <vector>

#include "cordseg/volume.hpp"

namespace cordseg {

struct CenterlinePoint {
  long z = 0;
  double x = 0.0, y = 0.0;  // voxels
  bool operator==(const CenterlinePoint&) const = default;
};

// One in-plane point per slice, z strictly increasing.
struct Centerline {
  std::vector<CenterlinePoint> points;
  Vec3 spacing{1.0, 1.0, 1.0};

  bool empty() const { return points.empty(); }
  long first_slice() const { return points.front().z; }
  long last_slice() const { return points.back().z; }
  // Point on slice z, or nullptr when the slice is not covered.
  const CenterlinePoint* find(long z) const;
  // Point on the covered slice nearest to z.
  const CenterlinePoint& nearest(long z) const;
  void validate() const;
};

struct CurveOptConfig {
  double smooth_weight = 0.5;  // per squared voxel of in-plane displacement
  int candidate_stride = 1;
  // Candidates are voxels with heat > 0 dilated by this many voxels in-plane.
  // A negative margin makes every voxel of a decided slice a candidate.
  int margin = 2;
  // When positive, transitions further than this (Chebyshev, voxels) are
  // excluded unless no transition would remain.
  int search_radius = 0;
  void validate() const;
};

// Euclidean distance (mm) from each foreground voxel to the nearest
// background voxel; voxels beyond the grid count as background.
Volume distance_heatmap(const Mask& pred);

// Minimises  sum_z -heat(p_z) + lambda * sum_z |p_{z+1} - p_z|^2  over the
// slices that carry any heat, by dynamic programming. Slices without heat
// between decided slices are filled by linear interpolation.
Centerline optimize_centerline(const Volume& heat, const CurveOptConfig& cfg = {});

// The objective above for a path of integer positions (x, y) on consecutive
// decided slices `zs`.
double path_cost(const Volume& heat, const std::vector<long>& zs, const std::vector<std::array<long, 2>>& path,
                 double smooth_weight);

// Per-slice centroid of the mask, interior gaps interpolated, then smoothed
// by a centred moving average (window shrinks symmetrically at the ends).
Centerline centerline_from_mask(const Mask& mask, int window = 5);

void write_centerline_csv(const Centerline& c, const std::filesystem::path& path);
Centerline read_centerline_csv(const std::filesystem::path& path, const Vec3& spacing = {1.0, 1.0, 1.0});

// World (mm) position of a centerline point through the geometry's affine.
Vec3 centerline_point_world(const Geometry& g, const CenterlinePoint& p);

}  // namespace cordseg
