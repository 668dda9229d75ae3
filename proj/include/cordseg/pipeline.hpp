#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cordseg/augment.hpp"
#include "cordseg/centerline.hpp"
#include "cordseg/dataset.hpp"
#include "cordseg/network.hpp"
#include "cordseg/preprocess.hpp"
#include "cordseg/volume.hpp"
#include "json.hpp"

namespace cordseg {

enum class Stage { centerline, cord, lesion };
std::string to_string(Stage s);
Stage parse_stage(const std::string& s);

// Isotropic spacing (mm) of the RPI working space.
inline constexpr double kWorkingSpacing = 0.5;

struct TrainConfig {
  Stage stage = Stage::centerline;
  Contrast contrast = Contrast::t2;
  double lr = 1e-4;
  std::size_t batch_size = 32;
  std::size_t epochs = 100;
  double dropout = 0.2;
  std::uint64_t seed = 1;
  AugmentConfig augment;
  std::size_t patience = 20;  // epochs without a better validation loss; 0 disables
  std::size_t samples_per_epoch = 0;  // 0 = one pass over the training samples
  std::size_t val_samples = 0;        // 0 = every validation sample
  int base_channels = 32;
  PatchConfig patch;
  CurveOptConfig curve;  // centerline stage only

  // centerline: lr 1e-4, batch 32, 100 epochs, dropout 0.2, all augmentations.
  // cord/lesion: lr 5e-5, batch 4, 300 epochs, dropout 0.4, flips (+ border
  // jitter for lesions), 48x64x64 cord and 48x48x48 lesion patches.
  static TrainConfig defaults(Stage s);
  void validate() const;
};

nlohmann::ordered_json to_json(const TrainConfig& c);
// Overrides fields of `base` from `j`; unknown keys throw ConfigError.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base);

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  void write_csv(const std::filesystem::path& path) const;  // epoch,train_loss,val_loss
};

using EpochCallback = std::function<void(const EpochLog&)>;

struct CenterlineModel {
  nn::NetworkSpec spec;
  nn::ModelParams<float> params;
  NormStats stats;
  TrainConfig config;
  TrainLog log;
};

struct SegModel {
  Stage target = Stage::cord;
  nn::NetworkSpec spec;
  nn::ModelParams<float> params;
  IntensityLandmarks landmarks;
  NormStats stats;
  TrainConfig config;
  TrainLog log;
};

struct Bundle {
  Contrast contrast = Contrast::t2;
  std::optional<CenterlineModel> centerline;
  std::optional<SegModel> cord, lesion;

  const SegModel& seg(Stage target) const;  // throws ConfigError when absent
};

// Adds (or replaces) one trained component in a bundle directory; the
// manifest records contrast, config, network fingerprint and seed.
void save_component(const std::filesystem::path& dir, Contrast contrast, const CenterlineModel& m);
void save_component(const std::filesystem::path& dir, Contrast contrast, const SegModel& m);
Bundle load_bundle(const std::filesystem::path& dir);

// Reorient to RPI, then resample to 0.5 mm isotropic.
Volume to_working(const Volume& native);
Mask to_working(const Mask& native);

// Pads a centerline to every slice of a volume of `depth` slices by
// repeating its end points.
Centerline extend_centerline(const Centerline& c, std::size_t depth);

CenterlineModel train_centerline_model(const DatasetIndex& index, const TrainConfig& cfg,
                                       const EpochCallback& on_epoch = {});
SegModel train_seg_model(const DatasetIndex& index, const TrainConfig& cfg, const EpochCallback& on_epoch = {});

struct Detection {
  Centerline centerline;  // working-space voxels
  Volume probability;     // CNN1 output in working space
};

// `working` must already be in working space.
Detection detect_centerline_working(const Volume& working, const CenterlineModel& model);
Detection detect_centerline(const Volume& native, const Bundle& bundle, Contrast contrast);

struct Segmentation {
  Mask mask;                  // native geometry
  Volume probability;         // reconstructed probabilities on the native grid
  Volume working_probability; // before mapping back
  Centerline centerline;      // working space
};

// Detect the centerline, segment 3D patches along it, average the patch
// probabilities, threshold at 0.5 and map back to the native grid.
Segmentation segment(const Volume& native, const Bundle& bundle, Stage target, Contrast contrast);

// Working-space probability mask -> binary mask on the native grid.
Mask map_to_native(const Volume& working_probability, const Geometry& native);
Volume map_probability_to_native(const Volume& working_probability, const Geometry& native);

}  // namespace cordseg
