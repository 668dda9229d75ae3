#include "cordseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "cordseg/error.hpp"
#include "json.hpp"

namespace cordseg {

namespace {

void require_same_grid(const Mask& a, const Mask& b, const char* what) {
  if (!a.geom.same_grid(b.geom)) throw ShapeError(std::string(what) + ": geometry mismatch between masks");
  if (a.data.size() != b.data.size()) throw ShapeError(std::string(what) + ": mask sizes differ");
}

std::optional<double> percent(std::size_t num, std::size_t den) {
  if (den == 0) return std::nullopt;
  return 100.0 * static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

double centerline_mse(const Centerline& pred, const Centerline& ref) {
  for (int a = 0; a < 3; ++a)
    if (std::abs(pred.spacing[a] - ref.spacing[a]) > 1e-6)
      throw ConfigError("centerlines are expressed on grids with different spacing");
  double ss = 0.0;
  std::size_t n = 0;
  for (const auto& p : pred.points)
    if (const auto* r = ref.find(p.z)) {
      const double dx = (p.x - r->x) * pred.spacing[0], dy = (p.y - r->y) * pred.spacing[1];
      ss += dx * dx + dy * dy;
      ++n;
    }
  if (n == 0) throw ConfigError("centerlines share no slice");
  return std::sqrt(ss / static_cast<double>(n));
}

double localization_rate(const Centerline& pred, const Mask& manual) {
  const auto [W, H, D] = manual.dims();
  std::size_t evaluated = 0, inside = 0;
  for (std::size_t z = 0; z < D; ++z) {
    bool any = false;
    for (std::size_t i = 0; i < W * H && !any; ++i) any = manual.data[i + W * H * z] != 0;
    if (!any) continue;
    ++evaluated;
    const auto* p = pred.find(static_cast<long>(z));
    if (!p) continue;
    const long x = std::lround(p->x), y = std::lround(p->y);
    if (x >= 0 && y >= 0 && x < static_cast<long>(W) && y < static_cast<long>(H) &&
        manual.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), z))
      ++inside;
  }
  if (evaluated == 0) throw MissingDataError("localization rate needs a non-empty manual mask");
  return 100.0 * static_cast<double>(inside) / static_cast<double>(evaluated);
}

DiceResult dice(const Mask& a, const Mask& b) {
  require_same_grid(a, b, "dice");
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    na += a.data[i] != 0;
    nb += b.data[i] != 0;
    both += a.data[i] && b.data[i];
  }
  if (na + nb == 0) return {100.0, true};
  return {200.0 * static_cast<double>(both) / static_cast<double>(na + nb), false};
}

double relative_volume_difference(const Mask& automatic, const Mask& manual) {
  const double vm = static_cast<double>(count_nonzero(manual)) * manual.geom.voxel_volume();
  if (vm == 0.0) throw MissingDataError("relative volume difference needs a non-empty manual mask");
  const double va = static_cast<double>(count_nonzero(automatic)) * automatic.geom.voxel_volume();
  return 100.0 * (va - vm) / vm;
}

SensPrec voxelwise_pr(const Mask& automatic, const Mask& manual) {
  require_same_grid(automatic, manual, "voxelwise_pr");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < manual.data.size(); ++i) {
    const bool a = automatic.data[i] != 0, m = manual.data[i] != 0;
    tp += a && m;
    fp += a && !m;
    fn += !a && m;
  }
  return {percent(tp, tp + fn), percent(tp, tp + fp)};
}

Labeling connected_components(const Mask& mask, int connectivity) {
  return label_components(mask.data, mask.dims(), connectivity);
}

void LesionMatchConfig::validate() const {
  if (!(overlap > 0.0 && overlap <= 1.0)) throw ConfigError("lesion overlap threshold must lie in (0, 1]");
  if (connectivity != 6 && connectivity != 18 && connectivity != 26)
    throw ConfigError("connectivity must be 6, 18 or 26");
}

LesionwiseResult lesionwise_pr(const Mask& automatic, const Mask& manual, const LesionMatchConfig& cfg) {
  cfg.validate();
  require_same_grid(automatic, manual, "lesionwise_pr");
  const auto man = connected_components(manual, cfg.connectivity);
  const auto aut = connected_components(automatic, cfg.connectivity);
  LesionwiseResult r;
  std::vector<bool> detected(man.count(), false);
  for (std::size_t i = 0; i < man.count(); ++i) {
    std::size_t overlap = 0;
    for (auto v : man.components[i]) overlap += automatic.data[v] != 0;
    detected[i] = static_cast<double>(overlap) > cfg.overlap * static_cast<double>(man.components[i].size());
    (detected[i] ? r.true_positives : r.false_negatives) += 1;
  }
  for (std::size_t j = 0; j < aut.count(); ++j) {
    bool correct = false;
    for (auto v : aut.components[j]) {
      const auto l = man.labels[v];
      if (l > 0 && detected[static_cast<std::size_t>(l - 1)]) {
        correct = true;
        break;
      }
    }
    (correct ? r.correct_auto : r.false_positives) += 1;
  }
  r.rates = {percent(r.true_positives, r.true_positives + r.false_negatives),
             percent(r.correct_auto, r.correct_auto + r.false_positives)};
  return r;
}

double volumewise_specificity(const std::vector<Mask>& automatic) {
  if (automatic.empty()) throw ConfigError("volume-wise specificity needs at least one volume");
  std::size_t clean = 0;
  for (const auto& m : automatic) clean += count_nonzero(m) == 0;
  return 100.0 * static_cast<double>(clean) / static_cast<double>(automatic.size());
}

Mask majority_vote(const std::vector<Mask>& raters) {
  if (raters.size() < 2) throw ConfigError("majority vote needs at least two rater masks");
  for (std::size_t r = 1; r < raters.size(); ++r) require_same_grid(raters[0], raters[r], "majority_vote");
  Mask out(raters[0].geom, 0);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    std::size_t votes = 0;
    for (const auto& m : raters) votes += m.data[i] != 0;
    out.data[i] = 2 * votes > raters.size();
  }
  return out;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw ConfigError("quantile of an empty set");
  if (!(q >= 0.0 && q <= 1.0)) throw ConfigError("quantile level must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const double frac = pos - static_cast<double>(lo);
  if (lo + 1 >= values.size()) return values.back();
  return values[lo] + frac * (values[lo + 1] - values[lo]);
}

Aggregate aggregate(const std::string& metric, const std::vector<double>& values) {
  if (values.empty()) throw ConfigError("no values to aggregate for metric '" + metric + "'");
  Aggregate a;
  a.metric = metric;
  a.count = values.size();
  a.median = quantile(values, 0.5);
  a.q1 = quantile(values, 0.25);
  a.q3 = quantile(values, 0.75);
  a.iqr = a.q3 - a.q1;
  return a;
}

void MetricsReport::finalize() {
  std::vector<std::string> order;
  std::map<std::string, std::vector<double>> values;
  for (const auto& r : rows) {
    if (!values.count(r.metric)) order.push_back(r.metric);
    auto& v = values[r.metric];
    if (r.value) v.push_back(*r.value);
  }
  aggregates.clear();
  for (const auto& m : order)
    if (!values[m].empty()) aggregates.push_back(aggregate(m, values[m]));
}

void MetricsReport::write_json(const std::filesystem::path& path) const {
  nlohmann::ordered_json j;
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json o;
    o["id"] = r.id;
    o["metric"] = r.metric;
    o["value"] = r.value ? nlohmann::ordered_json(*r.value) : nlohmann::ordered_json(nullptr);
    o["units"] = r.units;
    if (!r.note.empty()) o["note"] = r.note;
    j["rows"].push_back(o);
  }
  j["aggregates"] = nlohmann::ordered_json::array();
  for (const auto& a : aggregates)
    j["aggregates"].push_back(
        {{"metric", a.metric}, {"n", a.count}, {"median", a.median}, {"iqr", a.iqr}, {"q1", a.q1}, {"q3", a.q3}});
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << j.dump(2) << "\n";
}

void MetricsReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << "metric,n,median (IQR)\n";
  char buf[128];
  for (const auto& a : aggregates) {
    std::snprintf(buf, sizeof(buf), "%s,%zu,%.2f (%.2f)\n", a.metric.c_str(), a.count, a.median, a.iqr);
    out << buf;
  }
}

}  // namespace cordseg
