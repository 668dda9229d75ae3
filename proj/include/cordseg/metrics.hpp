#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cordseg/centerline.hpp"
#include "cordseg/labeling.hpp"
#include "cordseg/volume.hpp"

namespace cordseg {

// Root mean square of per-slice in-plane distances (mm) over shared slices.
double centerline_mse(const Centerline& pred, const Centerline& ref);

// Percentage of slices with manual foreground whose rounded centerline
// point lies inside the mask. Slices the centerline does not cover count as misses.
double localization_rate(const Centerline& pred, const Mask& manual);

struct DiceResult {
  double value = 0.0;  // percent
  bool both_empty = false;
};
DiceResult dice(const Mask& a, const Mask& b);

// 100 * (V_auto - V_manual) / V_manual.
double relative_volume_difference(const Mask& automatic, const Mask& manual);

struct SensPrec {
  std::optional<double> sensitivity;  // percent; empty when undefined
  std::optional<double> precision;
};
SensPrec voxelwise_pr(const Mask& automatic, const Mask& manual);

Labeling connected_components(const Mask& mask, int connectivity = 26);

struct LesionMatchConfig {
  double overlap = 0.25;  // fraction of the manual lesion, strict >
  int connectivity = 26;
  void validate() const;
};

struct LesionwiseResult {
  SensPrec rates;
  std::size_t true_positives = 0;   // detected manual lesions
  std::size_t false_negatives = 0;  // missed manual lesions
  std::size_t correct_auto = 0;     // automatic components matching a detected lesion
  std::size_t false_positives = 0;  // remaining automatic components
};
LesionwiseResult lesionwise_pr(const Mask& automatic, const Mask& manual, const LesionMatchConfig& cfg = {});

// Percentage of lesion-free volumes whose automatic lesion mask is empty.
double volumewise_specificity(const std::vector<Mask>& automatic);

// Voxel set iff strictly more than half of the raters set it.
Mask majority_vote(const std::vector<Mask>& raters);

// Linear-interpolation quantile at position q * (n - 1) of the sorted values.
double quantile(std::vector<double> values, double q);

struct Aggregate {
  std::string metric;
  std::size_t count = 0;
  double median = 0.0;
  double iqr = 0.0;
  double q1 = 0.0, q3 = 0.0;
};
Aggregate aggregate(const std::string& metric, const std::vector<double>& values);

struct MetricRow {
  std::string id;
  std::string metric;
  std::optional<double> value;  // empty = not applicable
  std::string units;
  std::string note;
};

struct MetricsReport {
  std::vector<MetricRow> rows;
  std::vector<Aggregate> aggregates;
  // Aggregates every metric over its applicable values, in first-seen order.
  void finalize();
  void write_json(const std::filesystem::path& path) const;
  // metric,n,median (IQR) table.
  void write_csv(const std::filesystem::path& path) const;
};

}  // namespace cordseg
