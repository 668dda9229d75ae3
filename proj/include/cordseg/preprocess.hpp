#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "cordseg/centerline.hpp"
#include "cordseg/volume.hpp"

namespace cordseg {

struct PatchConfig {
  std::size_t stage1_size = 96;                  // in-plane, voxels
  std::array<std::size_t, 3> stage2_size{48, 64, 64};  // (D, H, W)
  std::size_t inference_stride_z = 24;
  void validate() const;
  static PatchConfig for_lesion();  // 48x48x48 patches
};

// Patch origin in volume index space (may lie outside the grid) and extent.
struct Placement {
  long x0 = 0, y0 = 0, z0 = 0;
  std::size_t width = 0, height = 0, depth = 0;
  std::size_t voxel_count() const { return width * height * depth; }
  bool operator==(const Placement&) const = default;
};

// Patch voxels, x fastest, zero outside the source grid.
struct Patch {
  Placement at;
  std::vector<float> data;
};

template <class T>
std::vector<T> crop(const Image<T>& img, const Placement& p);

// Tile starts covering n voxels with tiles of `size`; the trailing tile is
// aligned to the far edge when size does not divide n.
std::vector<long> tile_starts(std::size_t n, std::size_t size);

std::vector<Placement> axial_placements(const Geometry& g, std::size_t size);
// size x size tiles covering every axial slice, ordered by z, y, x.
std::vector<Patch> extract_axial_patches(const Volume& vol, std::size_t size);

struct NormStats {
  double mean = 0.0;
  double std = 1.0;
  void validate() const;
};

// Pooled over every voxel of every patch.
NormStats compute_norm_stats(const std::vector<Patch>& patches);
NormStats compute_norm_stats(const std::vector<std::span<const float>>& samples);
void apply_zscore(std::span<float> values, const NormStats& stats);

struct IntensityLandmarks {
  std::vector<double> percentiles{1, 10, 20, 30, 40, 50, 60, 70, 80, 90, 99};
  std::vector<double> values;  // standard scale [0, 100]
  void validate() const;
};

// Order statistic at rank round(q / 100 * (n - 1)) for each q.
std::vector<double> percentile_values(std::span<const float> values, const std::vector<double>& percentiles);

// Throws ConfigError when the stack is degenerate (first and last landmark equal).
IntensityLandmarks learn_landmarks(const std::vector<std::vector<float>>& stacks,
                                   const IntensityLandmarks& percentile_set = {});

// Piecewise-linear map sending the stack's own landmark values (`knots`) onto
// the standard scale, clamped beyond the outer landmarks.
double map_intensity(double v, const std::vector<double>& knots, const IntensityLandmarks& lm);
void standardize_with(std::span<float> values, const std::vector<double>& knots, const IntensityLandmarks& lm);
std::vector<float> standardize(std::span<const float> stack, const IntensityLandmarks& lm);

enum class PatchMode { train, infer };

// Infer mode tiles the centerline's slice range with the configured stride
// (last placement aligned to the end of the range, all placements kept
// inside the volume when it is deep enough). Train mode draws `count`
// placements at random centerline slices from `seed`. In-plane, each patch
// is centred on the rounded centerline point at its central slice.
std::vector<Placement> centerline_placements(const Geometry& g, const Centerline& c, const PatchConfig& cfg,
                                             PatchMode mode, std::uint64_t seed = 0, std::size_t count = 0);
std::vector<Patch> extract_patches_along_centerline(const Volume& vol, const Centerline& c, const PatchConfig& cfg,
                                                    PatchMode mode, std::uint64_t seed = 0, std::size_t count = 0);

// In-grid voxels of all placements, concatenated in placement order.
std::vector<float> gather_stack(const Volume& vol, const std::vector<Placement>& placements);

// Averages overlapping predictions (accumulated in double); uncovered voxels are 0.
Volume reconstruct_volume(const std::vector<Patch>& predictions, const Geometry& g);

// Repeats the last slice until the image has at least `depth` slices.
template <class T>
Image<T> pad_slices(const Image<T>& img, std::size_t depth);
template <class T>
Image<T> crop_slices(const Image<T>& img, std::size_t depth);

}  // namespace cordseg
