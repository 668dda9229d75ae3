#include "cordseg/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>

#include "cordseg/error.hpp"
#include "cordseg/rng.hpp"

namespace cordseg {

using nlohmann::json;
using nlohmann::ordered_json;

std::string to_string(Stage s) {
  switch (s) {
    case Stage::centerline: return "centerline";
    case Stage::cord: return "cord";
    case Stage::lesion: return "lesion";
  }
  return "?";
}

Stage parse_stage(const std::string& s) {
  if (s == "centerline") return Stage::centerline;
  if (s == "cord") return Stage::cord;
  if (s == "lesion") return Stage::lesion;
  throw ConfigError("unknown stage '" + s + "' (expected centerline, cord or lesion)");
}

TrainConfig TrainConfig::defaults(Stage s) {
  TrainConfig c;
  c.stage = s;
  if (s == Stage::centerline) return c;
  c.lr = 5e-5;
  c.batch_size = 4;
  c.epochs = 300;
  c.dropout = 0.4;
  c.augment = AugmentConfig::stage2_default();
  if (s == Stage::lesion) {
    c.augment.border_jitter = true;
    c.patch = PatchConfig::for_lesion();
  }
  return c;
}

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be positive");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  if (epochs == 0) throw ConfigError("epoch count must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (base_channels <= 0) throw ConfigError("base channel count must be positive");
  augment.validate();
  patch.validate();
  curve.validate();
  for (auto e : patch.stage2_size)
    if (e % 4 != 0) throw ConfigError("patch extents must be divisible by 4");
}

// ---- JSON ----------------------------------------------------------------

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : keys) known = known || it.key() == k;
    if (!known) throw ConfigError("unknown key '" + it.key() + "' in " + where);
  }
}

template <class T>
void read_field(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

ordered_json augment_json(const AugmentConfig& a) {
  return {{"shift_max", a.shift_max},         {"rotate_max", a.rotate_max},
          {"elastic_alpha", a.elastic_alpha}, {"elastic_sigma", a.elastic_sigma},
          {"border_jitter_radius", a.border_jitter_radius},
          {"shift", a.shift},                 {"rotate", a.rotate},
          {"elastic", a.elastic},             {"flip", a.flip},
          {"border_jitter", a.border_jitter}, {"seed", a.seed}};
}

AugmentConfig augment_from(const json& j, AugmentConfig a) {
  reject_unknown(j,
                 {"shift_max", "rotate_max", "elastic_alpha", "elastic_sigma", "border_jitter_radius", "shift",
                  "rotate", "elastic", "flip", "border_jitter", "seed"},
                 "augment");
  read_field(j, "shift_max", a.shift_max);
  read_field(j, "rotate_max", a.rotate_max);
  read_field(j, "elastic_alpha", a.elastic_alpha);
  read_field(j, "elastic_sigma", a.elastic_sigma);
  read_field(j, "border_jitter_radius", a.border_jitter_radius);
  read_field(j, "shift", a.shift);
  read_field(j, "rotate", a.rotate);
  read_field(j, "elastic", a.elastic);
  read_field(j, "flip", a.flip);
  read_field(j, "border_jitter", a.border_jitter);
  read_field(j, "seed", a.seed);
  return a;
}

ordered_json patch_json(const PatchConfig& p) {
  return {{"stage1_size", p.stage1_size},
          {"stage2_size", p.stage2_size},
          {"inference_stride_z", p.inference_stride_z}};
}

PatchConfig patch_from(const json& j, PatchConfig p) {
  reject_unknown(j, {"stage1_size", "stage2_size", "inference_stride_z"}, "patch");
  read_field(j, "stage1_size", p.stage1_size);
  read_field(j, "stage2_size", p.stage2_size);
  read_field(j, "inference_stride_z", p.inference_stride_z);
  return p;
}

ordered_json curve_json(const CurveOptConfig& c) {
  return {{"smooth_weight", c.smooth_weight},
          {"candidate_stride", c.candidate_stride},
          {"margin", c.margin},
          {"search_radius", c.search_radius}};
}

CurveOptConfig curve_from(const json& j, CurveOptConfig c) {
  reject_unknown(j, {"smooth_weight", "candidate_stride", "margin", "search_radius"}, "curve");
  read_field(j, "smooth_weight", c.smooth_weight);
  read_field(j, "candidate_stride", c.candidate_stride);
  read_field(j, "margin", c.margin);
  read_field(j, "search_radius", c.search_radius);
  return c;
}

}  // namespace

ordered_json to_json(const TrainConfig& c) {
  return {{"stage", to_string(c.stage)},
          {"contrast", to_string(c.contrast)},
          {"lr", c.lr},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"dropout", c.dropout},
          {"seed", c.seed},
          {"patience", c.patience},
          {"samples_per_epoch", c.samples_per_epoch},
          {"val_samples", c.val_samples},
          {"base_channels", c.base_channels},
          {"augment", augment_json(c.augment)},
          {"patch", patch_json(c.patch)},
          {"curve", curve_json(c.curve)}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  reject_unknown(j,
                 {"stage", "contrast", "lr", "batch_size", "epochs", "dropout", "seed", "patience",
                  "samples_per_epoch", "val_samples", "base_channels", "augment", "patch", "curve"},
                 "train config");
  if (j.contains("stage")) {
    std::string s;
    read_field(j, "stage", s);
    c.stage = parse_stage(s);
  }
  if (j.contains("contrast")) {
    std::string s;
    read_field(j, "contrast", s);
    c.contrast = parse_contrast(s);
  }
  read_field(j, "lr", c.lr);
  read_field(j, "batch_size", c.batch_size);
  read_field(j, "epochs", c.epochs);
  read_field(j, "dropout", c.dropout);
  read_field(j, "seed", c.seed);
  read_field(j, "patience", c.patience);
  read_field(j, "samples_per_epoch", c.samples_per_epoch);
  read_field(j, "val_samples", c.val_samples);
  read_field(j, "base_channels", c.base_channels);
  if (j.contains("augment")) c.augment = augment_from(j.at("augment"), c.augment);
  if (j.contains("patch")) c.patch = patch_from(j.at("patch"), c.patch);
  if (j.contains("curve")) c.curve = curve_from(j.at("curve"), c.curve);
  return c;
}

void TrainLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << "epoch,train_loss,val_loss\n";
  char buf[96];
  for (const auto& e : epochs) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g\n", e.epoch, e.train_loss, e.val_loss);
    f << buf;
  }
  if (!f) throw IoError("cannot write " + path.string());
}

// ---- bundles -------------------------------------------------------------

const SegModel& Bundle::seg(Stage target) const {
  const auto& m = target == Stage::cord ? cord : lesion;
  if (target == Stage::centerline || !m)
    throw ConfigError("bundle has no " + to_string(target) + " segmentation model");
  return *m;
}

namespace {

constexpr const char* kManifest = "manifest.json";
constexpr const char* kFormat = "cordseg-bundle";

nn::NetworkSpec network_for(Stage s, const TrainConfig& c) {
  if (s == Stage::centerline) {
    auto spec = nn::build_cnn1(c.base_channels, c.dropout);
    spec.input_shape = {c.patch.stage1_size, c.patch.stage1_size};
    return spec;
  }
  const auto& p = c.patch.stage2_size;
  return nn::build_cnn2({p[0], p[1], p[2]}, c.base_channels, c.dropout);
}

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw FormatError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_json_file(const ordered_json& j, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << j.dump(2) << "\n";
  if (!f) throw IoError("cannot write " + path.string());
}

ordered_json load_manifest(const std::filesystem::path& dir, Contrast contrast) {
  const auto path = dir / kManifest;
  if (!std::filesystem::exists(path))
    return {{"format", kFormat}, {"version", 1}, {"contrast", to_string(contrast)}, {"components", ordered_json::object()}};
  ordered_json m;
  {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read " + path.string());
    try {
      m = ordered_json::parse(f);
    } catch (const json::exception& e) {
      throw FormatError("malformed bundle manifest: " + std::string(e.what()));
    }
  }
  if (m.value("format", "") != kFormat) throw FormatError(path.string() + " is not a bundle manifest");
  if (m.value("contrast", "") != to_string(contrast))
    throw ConfigError("bundle contrast " + m.value("contrast", std::string("?")) + " does not match " +
                      to_string(contrast));
  return m;
}

template <class Model>
void save_common(const std::filesystem::path& dir, Contrast contrast, Stage stage, const Model& m,
                 const ordered_json& norm) {
  if (m.config.contrast != contrast)
    throw ConfigError("model was trained on " + to_string(m.config.contrast) + ", not " + to_string(contrast));
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create bundle directory " + dir.string());
  auto manifest = load_manifest(dir, contrast);
  const auto name = to_string(stage);
  nn::save_params(m.params, m.spec, dir / (name + ".params"));
  write_json_file(norm, dir / (name + "_norm.json"));
  m.log.write_csv(dir / (name + "_log.csv"));
  manifest["components"][name] = {{"params", name + ".params"},
                                  {"norm", name + "_norm.json"},
                                  {"log", name + "_log.csv"},
                                  {"network", m.spec.name},
                                  {"fingerprint", hex64(m.spec.fingerprint())},
                                  {"seed", m.params.seed},
                                  {"best_epoch", m.log.best_epoch},
                                  {"best_val_loss", m.log.best_val_loss},
                                  {"config", to_json(m.config)}};
  write_json_file(manifest, dir / kManifest);
}

ordered_json stats_json(const NormStats& s) { return {{"mean", s.mean}, {"std", s.std}}; }

NormStats stats_from(const json& j) {
  NormStats s;
  try {
    s.mean = j.at("mean").get<double>();
    s.std = j.at("std").get<double>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad normalisation file: ") + e.what());
  }
  s.validate();
  return s;
}

TrainLog read_log(const std::filesystem::path& path, std::size_t best_epoch, double best_val) {
  TrainLog log;
  log.best_epoch = best_epoch;
  log.best_val_loss = best_val;
  std::ifstream f(path);
  if (!f) return log;
  std::string line;
  std::getline(f, line);
  while (std::getline(f, line)) {
    EpochLog e;
    if (std::sscanf(line.c_str(), "%zu,%lf,%lf", &e.epoch, &e.train_loss, &e.val_loss) == 3) log.epochs.push_back(e);
  }
  return log;
}

}  // namespace

void save_component(const std::filesystem::path& dir, Contrast contrast, const CenterlineModel& m) {
  save_common(dir, contrast, Stage::centerline, m, stats_json(m.stats));
}

void save_component(const std::filesystem::path& dir, Contrast contrast, const SegModel& m) {
  ordered_json norm = stats_json(m.stats);
  norm["landmarks"] = {{"percentiles", m.landmarks.percentiles}, {"values", m.landmarks.values}};
  save_common(dir, contrast, m.target, m, norm);
}

Bundle load_bundle(const std::filesystem::path& dir) {
  const auto mpath = dir / kManifest;
  if (!std::filesystem::exists(mpath)) throw IoError("no bundle manifest at " + mpath.string());
  const json m = read_json_file(mpath);
  Bundle b;
  try {
    if (m.at("format").get<std::string>() != kFormat) throw FormatError(mpath.string() + " is not a bundle manifest");
    b.contrast = parse_contrast(m.at("contrast").get<std::string>());
    for (const auto& [name, c] : m.at("components").items()) {
      const Stage stage = parse_stage(name);
      TrainConfig cfg = train_config_from_json(c.at("config"), TrainConfig::defaults(stage));
      cfg.validate();
      const auto spec = network_for(stage, cfg);
      if (c.at("fingerprint").get<std::string>() != hex64(spec.fingerprint()))
        throw ConfigError("bundle component " + name + " was saved for a different network");
      auto params = nn::load_params<float>(spec, dir / c.at("params").get<std::string>());
      const json norm = read_json_file(dir / c.at("norm").get<std::string>());
      auto log = read_log(dir / c.at("log").get<std::string>(), c.at("best_epoch").get<std::size_t>(),
                          c.at("best_val_loss").get<double>());
      if (stage == Stage::centerline) {
        b.centerline = CenterlineModel{spec, std::move(params), stats_from(norm), cfg, std::move(log)};
      } else {
        SegModel s{stage, spec, std::move(params), {}, stats_from(norm), cfg, std::move(log)};
        s.landmarks.percentiles = norm.at("landmarks").at("percentiles").get<std::vector<double>>();
        s.landmarks.values = norm.at("landmarks").at("values").get<std::vector<double>>();
        s.landmarks.validate();
        (stage == Stage::cord ? b.cord : b.lesion) = std::move(s);
      }
    }
  } catch (const json::exception& e) {
    throw FormatError("malformed bundle " + dir.string() + ": " + e.what());
  }
  return b;
}

// ---- working space -------------------------------------------------------

namespace {
const Vec3 kWorking{kWorkingSpacing, kWorkingSpacing, kWorkingSpacing};
const Orientation kRpi("RPI");
}  // namespace

Volume to_working(const Volume& native) {
  return resample(reorient(native, kRpi), kWorking, Interp::trilinear);
}

Mask to_working(const Mask& native) { return resample(reorient(native, kRpi), kWorking, Interp::nearest); }

Centerline extend_centerline(const Centerline& c, std::size_t depth) {
  if (c.empty()) throw ConfigError("cannot extend an empty centerline");
  Centerline out;
  out.spacing = c.spacing;
  const long n = static_cast<long>(depth);
  for (long z = 0; z < std::min(n, c.first_slice()); ++z) out.points.push_back({z, c.points.front().x, c.points.front().y});
  for (const auto& p : c.points)
    if (p.z >= 0 && p.z < n) out.points.push_back(p);
  for (long z = std::max(0L, c.last_slice() + 1); z < n; ++z) out.points.push_back({z, c.points.back().x, c.points.back().y});
  return out;
}

// ---- training ------------------------------------------------------------

namespace {

struct Sample {
  std::vector<float> image;
  std::vector<std::uint8_t> label;
};

struct Subject {
  std::string id;
  Volume image;  // working space, normalised for the stage
  Mask target;
  Centerline centerline;
};

void load_pair(const DatasetIndex& index, const SubjectRecord& r, Stage stage, Volume& image, Mask& cord,
               Mask& target) {
  const Volume img = read_volume(index.resolve(r.image));
  const Mask c = read_mask(index.resolve(r.cord_mask));
  if (!img.geom.same_grid(c.geom)) throw ShapeError("cord mask of " + r.id + " does not match its image grid");
  image = to_working(img);
  cord = to_working(c);
  if (stage == Stage::lesion) {
    const Mask l = read_mask(index.resolve(*r.lesion_mask));
    if (!img.geom.same_grid(l.geom)) throw ShapeError("lesion mask of " + r.id + " does not match its image grid");
    target = to_working(l);
  } else {
    target = cord;
  }
}

std::vector<SubjectRecord> records_for(const DatasetIndex& index, Split split, const TrainConfig& cfg) {
  std::vector<SubjectRecord> out;
  for (auto& r : index.in_split(split)) {
    if (r.contrast != cfg.contrast) continue;
    if (cfg.stage == Stage::lesion && !r.lesion_mask) continue;
    out.push_back(r);
  }
  return out;
}

void check_splits(const DatasetIndex& index, const TrainConfig& cfg, const std::vector<SubjectRecord>& train,
                  const std::vector<SubjectRecord>& val) {
  if (cfg.stage == Stage::lesion) {
    bool any = false;
    for (const auto& r : index.subjects) any = any || r.lesion_mask.has_value();
    if (!any) throw MissingDataError("lesion training needs lesion masks; the index has none");
  }
  if (train.empty())
    throw MissingDataError("no " + to_string(cfg.contrast) + " training volumes" +
                           (cfg.stage == Stage::lesion ? " with lesion masks" : ""));
  if (val.empty()) throw ConfigError("the validation split is empty");
}

nn::Tensor<float> batch_tensor(const std::vector<const Sample*>& batch, const nn::Shape& spatial, bool label) {
  nn::Shape shape{batch.size(), 1};
  shape.insert(shape.end(), spatial.begin(), spatial.end());
  nn::Tensor<float> t(shape);
  const std::size_t n = nn::shape_size(spatial);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    float* dst = t.data() + b * n;
    if (label)
      for (std::size_t i = 0; i < n; ++i) dst[i] = batch[b]->label[i];
    else
      std::copy(batch[b]->image.begin(), batch[b]->image.end(), dst);
  }
  return t;
}

// Evenly spaced subset of at most `cap` items (all when cap is 0).
template <class T>
std::vector<T> cap_evenly(std::vector<T> v, std::size_t cap) {
  if (cap == 0 || v.size() <= cap) return v;
  std::vector<T> out;
  out.reserve(cap);
  for (std::size_t i = 0; i < cap; ++i) out.push_back(std::move(v[i * v.size() / cap]));
  return out;
}

double validation_loss(const nn::NetworkSpec& spec, const nn::ModelParams<float>& params,
                       const std::vector<Sample>& val, const nn::Shape& spatial, std::size_t batch) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < val.size(); i += batch) {
    std::vector<const Sample*> b;
    for (std::size_t k = i; k < std::min(val.size(), i + batch); ++k) b.push_back(&val[k]);
    const auto pred = nn::predict(spec, params, batch_tensor(b, spatial, false));
    sum += nn::dice_loss(pred, batch_tensor(b, spatial, true)).loss;
    ++n;
  }
  return sum / static_cast<double>(n);
}

struct Trained {
  nn::ModelParams<float> params;
  TrainLog log;
};

// Mini-batch Adam on the soft Dice loss. `draw(epoch)` returns that epoch's
// (already shuffled and augmented) samples. The parameters with the lowest
// validation loss are kept.
Trained train_network(const nn::NetworkSpec& spec, const TrainConfig& cfg, const nn::Shape& spatial,
                      const std::function<std::vector<Sample>(std::size_t)>& draw, const std::vector<Sample>& val,
                      const EpochCallback& on_epoch) {
  Trained out;
  auto params = nn::init_params<float>(spec, derive_seed(cfg.seed, 0x1417));
  auto adam = nn::make_adam(params, nn::AdamConfig{cfg.lr});
  out.params = params;
  out.log.best_val_loss = std::numeric_limits<double>::infinity();
  std::uint64_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto samples = draw(epoch);
    double sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t i = 0; i < samples.size(); i += cfg.batch_size) {
      std::vector<const Sample*> b;
      for (std::size_t k = i; k < std::min(samples.size(), i + cfg.batch_size); ++k) b.push_back(&samples[k]);
      nn::ForwardOptions opt;
      opt.mode = nn::Mode::train;
      opt.seed = derive_seed(cfg.seed ^ 0xd0d0, step++);
      nn::ActivationCache<float> cache;
      const auto pred = nn::forward(spec, params, batch_tensor(b, spatial, false), opt, &cache);
      const auto loss = nn::dice_loss(pred, batch_tensor(b, spatial, true));
      const auto grads = nn::backward(spec, params, cache, loss.grad);
      nn::adam_step(params, grads, adam);
      sum += loss.loss;
      ++batches;
    }
    EpochLog e{epoch, batches ? sum / static_cast<double>(batches) : 0.0,
               validation_loss(spec, params, val, spatial, cfg.batch_size)};
    out.log.epochs.push_back(e);
    if (e.val_loss < out.log.best_val_loss) {
      out.log.best_val_loss = e.val_loss;
      out.log.best_epoch = epoch;
      out.params = params;
    }
    if (on_epoch) on_epoch(e);
    if (cfg.patience > 0 && epoch - out.log.best_epoch >= cfg.patience) break;
  }
  return out;
}

Sample tile_sample(const Subject& s, const Placement& p) {
  Sample out{crop(s.image, p), crop(s.target, p)};
  return out;
}

void zscore_volume(Volume& v, const NormStats& stats) { apply_zscore(v.data, stats); }

NormStats pooled_stats(const std::vector<Subject>& subjects) {
  std::vector<std::span<const float>> spans;
  for (const auto& s : subjects) spans.emplace_back(s.image.data);
  return compute_norm_stats(spans);
}

}  // namespace

CenterlineModel train_centerline_model(const DatasetIndex& index, const TrainConfig& cfg,
                                       const EpochCallback& on_epoch) {
  if (cfg.stage != Stage::centerline) throw ConfigError("centerline training needs stage centerline");
  cfg.validate();
  const auto train_r = records_for(index, Split::train, cfg);
  const auto val_r = records_for(index, Split::val, cfg);
  check_splits(index, cfg, train_r, val_r);

  auto load = [&](const std::vector<SubjectRecord>& recs) {
    std::vector<Subject> out;
    for (const auto& r : recs) {
      Subject s;
      Mask cord;
      load_pair(index, r, cfg.stage, s.image, cord, s.target);
      s.id = r.id;
      out.push_back(std::move(s));
    }
    return out;
  };
  auto train = load(train_r);
  auto val = load(val_r);

  // The tiles cover every voxel, so the pooled statistics are taken over the
  // working volumes themselves.
  CenterlineModel model;
  model.config = cfg;
  model.stats = pooled_stats(train);
  for (auto& s : train) zscore_volume(s.image, model.stats);
  for (auto& s : val) zscore_volume(s.image, model.stats);

  const std::size_t size = cfg.patch.stage1_size;
  struct Tile {
    std::size_t subject;
    Placement at;
  };
  std::vector<Tile> tiles;
  for (std::size_t i = 0; i < train.size(); ++i)
    for (const auto& p : axial_placements(train[i].image.geom, size)) tiles.push_back({i, p});
  std::vector<Sample> val_samples;
  {
    std::vector<Tile> vt;
    for (std::size_t i = 0; i < val.size(); ++i)
      for (const auto& p : axial_placements(val[i].image.geom, size)) vt.push_back({i, p});
    for (const auto& t : cap_evenly(vt, cfg.val_samples)) val_samples.push_back(tile_sample(val[t.subject], t.at));
  }

  const Dims dims{size, size, 1};
  auto draw = [&](std::size_t epoch) {
    const auto epoch_seed = derive_seed(cfg.seed, epoch);
    std::vector<std::size_t> order(tiles.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(epoch_seed);
    rng.shuffle(order.begin(), order.end());
    const std::size_t n = cfg.samples_per_epoch ? std::min(cfg.samples_per_epoch, order.size()) : order.size();
    std::vector<Sample> out;
    out.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
      const auto& t = tiles[order[k]];
      const auto raw = tile_sample(train[t.subject], t.at);
      auto a = augment_pair(raw.image, raw.label, dims, cfg.augment, derive_seed(epoch_seed, k));
      out.push_back({std::move(a.image), std::move(a.label)});
    }
    return out;
  };

  model.spec = network_for(Stage::centerline, cfg);
  auto trained = train_network(model.spec, cfg, {size, size}, draw, val_samples, on_epoch);
  model.params = std::move(trained.params);
  model.log = std::move(trained.log);
  return model;
}

namespace {

std::vector<double> volume_knots(const Volume& v, const std::vector<Placement>& placements,
                                 const IntensityLandmarks& lm) {
  const auto stack = gather_stack(v, placements);
  auto k = percentile_values(stack, lm.percentiles);
  if (!(k.back() > k.front())) throw ConfigError("degenerate intensity stack: all landmark percentiles are equal");
  return k;
}

}  // namespace

SegModel train_seg_model(const DatasetIndex& index, const TrainConfig& cfg, const EpochCallback& on_epoch) {
  if (cfg.stage == Stage::centerline) throw ConfigError("segmentation training needs stage cord or lesion");
  cfg.validate();
  const auto train_r = records_for(index, Split::train, cfg);
  const auto val_r = records_for(index, Split::val, cfg);
  check_splits(index, cfg, train_r, val_r);

  const std::size_t D = cfg.patch.stage2_size[0];
  auto load = [&](const std::vector<SubjectRecord>& recs) {
    std::vector<Subject> out;
    for (const auto& r : recs) {
      Subject s;
      Mask cord;
      load_pair(index, r, cfg.stage, s.image, cord, s.target);
      s.id = r.id;
      s.centerline = centerline_from_mask(cord);
      s.image = pad_slices(s.image, D);
      s.target = pad_slices(s.target, D);
      out.push_back(std::move(s));
    }
    return out;
  };
  auto train = load(train_r);
  auto val = load(val_r);
  if (cfg.stage == Stage::lesion) {
    bool any = false;
    for (const auto& s : train) any = any || count_nonzero(s.target) > 0;
    if (!any) std::cerr << "warning: every training lesion mask is empty; the model only sees negatives\n";
  }

  SegModel model;
  model.target = cfg.stage;
  model.config = cfg;

  // Landmarks come from the voxels the inference patches cover; each volume
  // is then mapped onto the standard scale through its own percentiles.
  auto placements_of = [&](const Subject& s) {
    return centerline_placements(s.image.geom, s.centerline, cfg.patch, PatchMode::infer);
  };
  {
    std::vector<std::vector<float>> stacks;
    for (const auto& s : train) stacks.push_back(gather_stack(s.image, placements_of(s)));
    model.landmarks = learn_landmarks(stacks);
  }
  auto standardize_subject = [&](Subject& s) {
    const auto knots = volume_knots(s.image, placements_of(s), model.landmarks);
    standardize_with(s.image.data, knots, model.landmarks);
  };
  for (auto& s : train) standardize_subject(s);
  for (auto& s : val) standardize_subject(s);
  {
    std::vector<std::vector<float>> stacks;
    std::vector<std::span<const float>> spans;
    for (const auto& s : train) stacks.push_back(gather_stack(s.image, placements_of(s)));
    for (const auto& st : stacks) spans.emplace_back(st);
    model.stats = compute_norm_stats(spans);
  }
  for (auto& s : train) zscore_volume(s.image, model.stats);
  for (auto& s : val) zscore_volume(s.image, model.stats);

  std::vector<Sample> val_samples;
  {
    struct VP {
      std::size_t subject;
      Placement at;
    };
    std::vector<VP> vp;
    for (std::size_t i = 0; i < val.size(); ++i)
      for (const auto& p : placements_of(val[i])) vp.push_back({i, p});
    for (const auto& v : cap_evenly(vp, cfg.val_samples)) val_samples.push_back(tile_sample(val[v.subject], v.at));
  }
  std::size_t per_epoch = cfg.samples_per_epoch;
  if (per_epoch == 0)
    for (const auto& s : train) per_epoch += placements_of(s).size();

  const auto [pd, ph, pw] = cfg.patch.stage2_size;
  const Dims dims{pw, ph, pd};
  auto draw = [&](std::size_t epoch) {
    const auto epoch_seed = derive_seed(cfg.seed, epoch);
    std::vector<Sample> out;
    out.reserve(per_epoch);
    for (std::size_t k = 0; k < per_epoch; ++k) {
      const auto sample_seed = derive_seed(epoch_seed, k);
      Rng rng(sample_seed);
      const auto& s = train[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(train.size()) - 1))];
      const auto p =
          centerline_placements(s.image.geom, s.centerline, cfg.patch, PatchMode::train, rng.next(), 1).front();
      const auto raw = tile_sample(s, p);
      auto a = augment_pair(raw.image, raw.label, dims, cfg.augment, sample_seed);
      out.push_back({std::move(a.image), std::move(a.label)});
    }
    return out;
  };

  model.spec = network_for(cfg.stage, cfg);
  auto trained = train_network(model.spec, cfg, {pd, ph, pw}, draw, val_samples, on_epoch);
  model.params = std::move(trained.params);
  model.log = std::move(trained.log);
  return model;
}

// ---- inference -----------------------------------------------------------

namespace {

constexpr std::size_t kInferBatch = 8;

std::vector<Patch> predict_patches(const nn::NetworkSpec& spec, const nn::ModelParams<float>& params,
                                   const Volume& vol, const std::vector<Placement>& placements,
                                   const nn::Shape& spatial) {
  std::vector<Patch> out;
  out.reserve(placements.size());
  const std::size_t n = nn::shape_size(spatial);
  for (std::size_t i = 0; i < placements.size(); i += kInferBatch) {
    const std::size_t b = std::min(kInferBatch, placements.size() - i);
    nn::Shape shape{b, 1};
    shape.insert(shape.end(), spatial.begin(), spatial.end());
    nn::Tensor<float> x(shape);
    for (std::size_t k = 0; k < b; ++k) {
      const auto c = crop(vol, placements[i + k]);
      std::copy(c.begin(), c.end(), x.data() + k * n);
    }
    const auto y = nn::predict(spec, params, x);
    for (std::size_t k = 0; k < b; ++k)
      out.push_back({placements[i + k], std::vector<float>(y.data() + k * n, y.data() + (k + 1) * n)});
  }
  return out;
}

void check_contrast(const Bundle& bundle, Contrast contrast) {
  if (bundle.contrast != contrast)
    throw ConfigError("bundle was trained for " + to_string(bundle.contrast) + " images, not " + to_string(contrast));
}

}  // namespace

Detection detect_centerline_working(const Volume& working, const CenterlineModel& model) {
  validate(working);
  Volume z = working;
  zscore_volume(z, model.stats);
  const std::size_t size = model.config.patch.stage1_size;
  const auto preds = predict_patches(model.spec, model.params, z, axial_placements(z.geom, size), {size, size});
  Detection d;
  d.probability = reconstruct_volume(preds, working.geom);
  const Mask cord = threshold(d.probability, 0.5);
  if (count_nonzero(cord) == 0) throw NoCordFound();
  d.centerline = optimize_centerline(distance_heatmap(cord), model.config.curve);
  return d;
}

Detection detect_centerline(const Volume& native, const Bundle& bundle, Contrast contrast) {
  check_contrast(bundle, contrast);
  if (!bundle.centerline) throw ConfigError("bundle has no centerline model");
  return detect_centerline_working(to_working(native), *bundle.centerline);
}

Segmentation segment(const Volume& native, const Bundle& bundle, Stage target, Contrast contrast) {
  check_contrast(bundle, contrast);
  if (target == Stage::centerline) throw ConfigError("segment needs target cord or lesion");
  const SegModel& model = bundle.seg(target);
  if (!bundle.centerline) throw ConfigError("bundle has no centerline model");
  const Volume working = to_working(native);
  Segmentation out;
  out.centerline = detect_centerline_working(working, *bundle.centerline).centerline;

  const auto& patch = model.config.patch;
  const std::size_t depth = working.dims()[2];
  Volume padded = pad_slices(working, patch.stage2_size[0]);
  // Patches run along the whole volume; slices beyond the detected range
  // reuse the nearest end point.
  const auto line = extend_centerline(out.centerline, padded.dims()[2]);
  const auto placements = centerline_placements(padded.geom, line, patch, PatchMode::infer);
  standardize_with(padded.data, volume_knots(padded, placements, model.landmarks), model.landmarks);
  zscore_volume(padded, model.stats);
  const auto [pd, ph, pw] = patch.stage2_size;
  const auto preds = predict_patches(model.spec, model.params, padded, placements, {pd, ph, pw});
  out.working_probability = crop_slices(reconstruct_volume(preds, padded.geom), depth);
  out.working_probability.geom = working.geom;
  out.mask = map_to_native(out.working_probability, native.geom);
  out.probability = map_probability_to_native(out.working_probability, native.geom);
  return out;
}

namespace {

template <class T>
Image<T> back_to_native(const Image<T>& working, const Geometry& native) {
  validate(native);
  const Geometry rpi = reorient(Mask(native), kRpi).geom;
  Image<T> r;
  if constexpr (std::is_same_v<T, float>)
    r = resample_to_grid(working, rpi.dims, rpi.spacing, Interp::nearest);
  else
    r = resample_to_grid(working, rpi.dims, rpi.spacing);
  r.geom = rpi;
  Image<T> out = reorient(r, native.orientation);
  out.geom = native;
  return out;
}

}  // namespace

Mask map_to_native(const Volume& working_probability, const Geometry& native) {
  return back_to_native(threshold(working_probability, 0.5), native);
}

Volume map_probability_to_native(const Volume& working_probability, const Geometry& native) {
  return back_to_native(working_probability, native);
}

}  // namespace cordseg
