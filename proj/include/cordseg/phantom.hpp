#pragma once

#include <array>
#include <cstdint>
#include <filesystem>

#include "cordseg/centerline.hpp"
#include "cordseg/dataset.hpp"
#include "cordseg/volume.hpp"
#include "json.hpp"

namespace cordseg {

struct Range {
  double lo = 0.0, hi = 0.0;
};

// Parameter ranges; every phantom draws its own values from them.
struct PhantomConfig {
  Dims dims{64, 64, 64};
  Vec3 spacing{1.0, 1.0, 1.0};
  std::string orientation = "RPI";
  Contrast contrast = Contrast::t2;
  Range cord_radius{4.5, 5.5};    // left-right semi-axis, mm
  Range ellipticity{0.7, 0.8};    // anterior-posterior / left-right
  double radius_variation = 0.1;  // relative modulation along the cord
  Range csf_thickness{2.0, 3.0};  // mm
  Range amplitude{2.0, 5.0};      // centerline excursion, mm
  Range period{40.0, 80.0};       // mm
  Range lesion_count{1, 3};
  Range lesion_radius{2.0, 2.5};    // mm, in-plane
  Range lesion_elongation{1.5, 2.5};  // along the cord
  // Lesion intensity as a fraction of the way from cord to CSF intensity.
  Range lesion_contrast{0.6, 0.9};
  Range distractors{2, 4};
  double noise = 0.05;  // std as a fraction of |CSF - cord|
  double bias = 0.2;    // amplitude of the multiplicative S-I bias field
  double atrophy = 1.0;  // scales the cord radius

  void validate() const;
};

struct Phantom {
  Volume image;
  Mask cord;
  Mask lesion;
  Centerline centerline;  // analytic, voxel coordinates
  nlohmann::ordered_json log;  // drawn parameters
};

nlohmann::ordered_json to_json(const PhantomConfig& c);
// Overrides fields of `base`; ranges are [lo, hi] arrays. Unknown keys throw ConfigError.
PhantomConfig phantom_config_from_json(const nlohmann::json& j, PhantomConfig base);

Phantom generate_phantom(const PhantomConfig& cfg, std::uint64_t seed);

struct DatasetOptions {
  double lesion_free_fraction = 0.2;
  bool gzip = false;
  std::array<double, 3> split{0.8, 0.1, 0.1};
};

// Writes <id>_<contrast>.nii, <id>_cord.nii, <id>_lesion.nii and
// <id>_centerline.csv per subject plus index.json and phantoms.json.
DatasetIndex generate_dataset(std::size_t n, const PhantomConfig& cfg, const std::filesystem::path& out_dir,
                              std::uint64_t seed, const DatasetOptions& opt = {});

}  // namespace cordseg
