#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "cordseg/volume.hpp"

namespace cordseg {

struct AugmentConfig {
  double shift_max = 10.0;   // voxels per axis
  double rotate_max = 20.0;  // degrees, in-plane
  double elastic_alpha = 100.0;
  double elastic_sigma = 16.0;  // voxels
  int border_jitter_radius = 1;
  bool shift = true;
  bool rotate = true;
  bool elastic = true;
  bool flip = true;
  bool border_jitter = false;  // lesion labels only
  std::uint64_t seed = 0;

  void validate() const;
  // Flips only; border jitter is switched on by the lesion trainer.
  static AugmentConfig stage2_default();
  static AugmentConfig none();
};

// Parameters actually drawn for one sample.
struct AugmentLog {
  std::array<double, 3> shift{};  // voxels (x, y, z)
  double rotation_deg = 0.0;
  bool elastic = false;
  std::array<bool, 3> flip{};
  std::vector<int> jitter;  // per lesion: +r dilation, -r erosion
};

struct AugmentedPair {
  std::vector<float> image;
  std::vector<std::uint8_t> label;
  AugmentLog log;
};

// Patches are x-fastest grids of `dims` (W, H, D); D = 1 for 2D patches.
// Shift, rotation, elastic displacement and flips are composed into one
// backward warp (image: linear interpolation, label: nearest neighbour,
// zero outside the field). Deterministic in (cfg.seed, sample_seed).
AugmentedPair augment_pair(std::span<const float> image, std::span<const std::uint8_t> label, const Dims& dims,
                           const AugmentConfig& cfg, std::uint64_t sample_seed);

// Displacement = alpha * Gaussian-smoothed uniform noise in [-1, 1] per axis.
std::vector<float> elastic_deform(std::span<const float> patch, const Dims& dims, double alpha, double sigma,
                                  std::uint64_t seed, Interp interp = Interp::trilinear);

template <class T>
std::vector<T> flip(std::span<const T> patch, const Dims& dims, int axis);

// Per 26-connected lesion: erode or dilate by a ball of radius in
// [1, radius]. Only voxels within that radius of the lesion boundary change.
std::vector<std::uint8_t> border_jitter(std::span<const std::uint8_t> label, const Dims& dims, int radius,
                                        std::uint64_t seed, std::vector<int>* log = nullptr);

}  // namespace cordseg
