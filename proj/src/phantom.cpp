#include "cordseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "cordseg/error.hpp"
#include "cordseg/rng.hpp"

namespace cordseg {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

struct Preset {
  double background, bone, disc, csf, cord, grey, distractor;
};

Preset preset(Contrast c) {
  switch (c) {
    case Contrast::t1: return {0.55, 0.35, 0.40, 0.15, 0.75, 0.75, 0.95};  // dark CSF, light cord
    case Contrast::t2: return {0.35, 0.15, 0.70, 1.00, 0.45, 0.45, 0.90};  // light CSF, dark cord
    default: return {0.30, 0.10, 0.50, 0.90, 0.35, 0.60, 0.80};            // grey matter visible
  }
}

void check_range(const Range& r, const char* name, double min_lo) {
  if (!(r.lo >= min_lo) || !(r.hi >= r.lo))
    throw ConfigError(std::string("phantom ") + name + " range must satisfy " + std::to_string(min_lo) +
                      " <= lo <= hi");
}

double draw(Rng& rng, const Range& r) { return r.lo == r.hi ? r.lo : rng.uniform(r.lo, r.hi); }
long draw_count(Rng& rng, const Range& r) {
  return rng.uniform_int(static_cast<long>(std::llround(r.lo)), static_cast<long>(std::llround(r.hi)));
}

struct Lesion {
  double zc, ox, oy, r, rz, intensity;
};

struct Blob {
  double x, y, z, rx, ry, rz;
};

}  // namespace

namespace {

nlohmann::ordered_json range_json(const Range& r) { return {r.lo, r.hi}; }

void read_range(const nlohmann::json& j, const char* key, Range& r) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (v.is_number()) {
    r.lo = r.hi = v.get<double>();
  } else if (v.is_array() && v.size() == 2 && v[0].is_number() && v[1].is_number()) {
    r.lo = v[0].get<double>();
    r.hi = v[1].get<double>();
  } else {
    throw ConfigError(std::string("phantom '") + key + "' must be a number or a [lo, hi] pair");
  }
}

template <class T>
void read_value(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad value for phantom '") + key + "': " + e.what());
  }
}

}  // namespace

nlohmann::ordered_json to_json(const PhantomConfig& c) {
  return {{"dims", c.dims},
          {"spacing", c.spacing},
          {"orientation", c.orientation},
          {"contrast", to_string(c.contrast)},
          {"cord_radius", range_json(c.cord_radius)},
          {"ellipticity", range_json(c.ellipticity)},
          {"radius_variation", c.radius_variation},
          {"csf_thickness", range_json(c.csf_thickness)},
          {"amplitude", range_json(c.amplitude)},
          {"period", range_json(c.period)},
          {"lesion_count", range_json(c.lesion_count)},
          {"lesion_radius", range_json(c.lesion_radius)},
          {"lesion_elongation", range_json(c.lesion_elongation)},
          {"lesion_contrast", range_json(c.lesion_contrast)},
          {"distractors", range_json(c.distractors)},
          {"noise", c.noise},
          {"bias", c.bias},
          {"atrophy", c.atrophy}};
}

PhantomConfig phantom_config_from_json(const nlohmann::json& j, PhantomConfig c) {
  if (!j.is_object()) throw ConfigError("phantom config must be a JSON object");
  const auto known = to_json(PhantomConfig{});
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.contains(it.key())) throw ConfigError("unknown key '" + it.key() + "' in phantom config");
  read_value(j, "dims", c.dims);
  read_value(j, "spacing", c.spacing);
  read_value(j, "orientation", c.orientation);
  if (j.contains("contrast")) {
    std::string s;
    read_value(j, "contrast", s);
    c.contrast = parse_contrast(s);
  }
  read_range(j, "cord_radius", c.cord_radius);
  read_range(j, "ellipticity", c.ellipticity);
  read_value(j, "radius_variation", c.radius_variation);
  read_range(j, "csf_thickness", c.csf_thickness);
  read_range(j, "amplitude", c.amplitude);
  read_range(j, "period", c.period);
  read_range(j, "lesion_count", c.lesion_count);
  read_range(j, "lesion_radius", c.lesion_radius);
  read_range(j, "lesion_elongation", c.lesion_elongation);
  read_range(j, "lesion_contrast", c.lesion_contrast);
  read_range(j, "distractors", c.distractors);
  read_value(j, "noise", c.noise);
  read_value(j, "bias", c.bias);
  read_value(j, "atrophy", c.atrophy);
  return c;
}

void PhantomConfig::validate() const {
  for (auto d : dims)
    if (d == 0) throw ConfigError("phantom dims must be positive");
  for (auto s : spacing)
    if (!(s > 0.0)) throw ConfigError("phantom spacing must be positive");
  if (!Orientation::is_valid(orientation)) throw ConfigError("invalid phantom orientation '" + orientation + "'");
  check_range(cord_radius, "cord_radius", 1e-9);
  check_range(ellipticity, "ellipticity", 1e-9);
  check_range(csf_thickness, "csf_thickness", 0.0);
  check_range(amplitude, "amplitude", 0.0);
  check_range(period, "period", 1e-9);
  check_range(lesion_count, "lesion_count", 0.0);
  check_range(lesion_radius, "lesion_radius", 1e-9);
  check_range(lesion_elongation, "lesion_elongation", 1e-9);
  check_range(lesion_contrast, "lesion_contrast", 0.0);
  check_range(distractors, "distractors", 0.0);
  if (!(radius_variation >= 0.0 && radius_variation < 1.0)) throw ConfigError("radius_variation must lie in [0, 1)");
  if (!(noise >= 0.0) || !(bias >= 0.0 && bias < 1.0)) throw ConfigError("noise must be >= 0 and bias in [0, 1)");
  if (!(atrophy > 0.0)) throw ConfigError("atrophy factor must be positive");
  const double extent = std::min(dims[0] * spacing[0], dims[1] * spacing[1]);
  const double r_max = cord_radius.hi * atrophy * (1.0 + radius_variation);
  if (!(r_max < extent / 4.0)) throw ConfigError("cord radius must stay below a quarter of the in-plane extent");
  const double minor = cord_radius.lo * atrophy * (1.0 - radius_variation) * std::min(1.0, ellipticity.lo);
  if (lesion_count.hi > 0 && !(lesion_radius.hi < minor))
    throw ConfigError("lesion radius too large for cord: lesion radius must stay below the cord's minor semi-axis");
}

Phantom generate_phantom(const PhantomConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const Preset tone = preset(cfg.contrast);
  const auto [W, H, D] = cfg.dims;
  const auto& sp = cfg.spacing;
  const double Lz = static_cast<double>(D) * sp[2];

  const double r0 = draw(rng, cfg.cord_radius) * cfg.atrophy;
  const double ecc = draw(rng, cfg.ellipticity);
  const double csf = draw(rng, cfg.csf_thickness);
  const double amp = draw(rng, cfg.amplitude);
  const double amp_x = amp * rng.uniform(0.3, 1.0), amp_y = amp;
  const double period = draw(rng, cfg.period);
  const double phase_x = rng.uniform(0.0, kTwoPi), phase_y = rng.uniform(0.0, kTwoPi);
  const double radius_period = rng.uniform(30.0, 60.0), radius_phase = rng.uniform(0.0, kTwoPi);
  const double bias_phase = rng.uniform(0.0, kTwoPi);
  const double tex_lx = rng.uniform(15.0, 30.0), tex_ly = rng.uniform(15.0, 30.0);
  const double tex_px = rng.uniform(0.0, kTwoPi), tex_py = rng.uniform(0.0, kTwoPi);
  const double disc_period = rng.uniform(14.0, 18.0), disc_phase = rng.uniform(0.0, disc_period);

  const double cx0 = (static_cast<double>(W) - 1.0) * sp[0] / 2.0;
  const double cy0 = (static_cast<double>(H) - 1.0) * sp[1] / 2.0;
  auto centre = [&](double z) {
    return std::array<double, 2>{cx0 + amp_x * std::sin(kTwoPi * z / period + phase_x),
                                 cy0 + amp_y * std::sin(kTwoPi * z / period + phase_y)};
  };
  auto radius = [&](double z) {
    return r0 * (1.0 + cfg.radius_variation * std::sin(kTwoPi * z / radius_period + radius_phase));
  };
  const double lateral = r0 * (1.0 - cfg.radius_variation);
  const double minor = lateral * ecc;

  std::vector<Lesion> lesions;
  const long n_lesions = draw_count(rng, cfg.lesion_count);
  for (long i = 0; i < n_lesions; ++i) {
    Lesion l;
    l.r = draw(rng, cfg.lesion_radius);
    l.rz = l.r * draw(rng, cfg.lesion_elongation);
    l.zc = rng.uniform(std::min(l.rz, Lz / 2), std::max(Lz - l.rz, Lz / 2));
    // Keep the lesion disc inside the cord cross-section: the offset box is
    // scaled by 0.7 < 1/sqrt(2) so its corners stay within the inner ellipse.
    l.ox = 0.7 * rng.uniform(-1.0, 1.0) * std::max(0.0, lateral - l.r);
    l.oy = 0.7 * rng.uniform(-1.0, 1.0) * std::max(0.0, minor - l.r);
    l.intensity = tone.cord + draw(rng, cfg.lesion_contrast) * (tone.csf - tone.cord);
    lesions.push_back(l);
  }

  std::vector<Blob> blobs;
  const long n_blobs = draw_count(rng, cfg.distractors);
  for (long i = 0; i < n_blobs; ++i) {
    Blob b{};
    b.rx = rng.uniform(2.5, 5.0);
    b.ry = rng.uniform(2.5, 5.0);
    b.rz = rng.uniform(4.0, 12.0);
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      b.x = rng.uniform(0.0, static_cast<double>(W) * sp[0]);
      b.y = rng.uniform(0.0, static_cast<double>(H) * sp[1]);
      b.z = rng.uniform(0.0, Lz);
      const auto c = centre(b.z);
      const double clearance = r0 * (1.0 + cfg.radius_variation) + csf + 5.0 + std::max(b.rx, b.ry);
      placed = std::hypot(b.x - c[0], b.y - c[1]) > clearance;
    }
    if (placed) blobs.push_back(b);
  }

  Geometry g;
  g.dims = cfg.dims;
  g.spacing = cfg.spacing;
  g.orientation = Orientation(cfg.orientation);
  g.affine = default_affine(g.dims, g.spacing, g.orientation);

  Phantom ph;
  ph.image = Volume(g, 0.0f);
  ph.cord = Mask(g, 0);
  ph.lesion = Mask(g, 0);
  ph.centerline.spacing = sp;

  // Tissue class at an in-plane position (mm) of slice z (mm).
  enum Tissue { background, bone, disc, fluid, cord, grey };
  auto classify = [&](double x, double y, double z, const std::array<double, 2>& c, double a) {
    const double b = ecc * a;
    const double dx = x - c[0], dy = y - c[1];
    const double u = (dx / a) * (dx / a) + (dy / b) * (dy / b);
    if (u <= 1.0) {
      if (cfg.contrast == Contrast::t2s) {
        const double ax = std::abs(dx) / a, ay = std::abs(dy) / b;
        const bool horns = ax >= 0.15 && ax <= 0.45 && ay <= 0.7;
        const bool bar = ax <= 0.45 && ay <= 0.15;
        if (horns || bar) return grey;
      }
      return cord;
    }
    const double ta = a + csf, tb = b + csf;
    if ((dx / ta) * (dx / ta) + (dy / tb) * (dy / tb) <= 1.0) return fluid;
    const double wa = ta + 3.0, wb = tb + 3.0;
    if ((dx / wa) * (dx / wa) + (dy / wb) * (dy / wb) <= 1.0) return bone;
    const double vy = c[1] + wb + 8.0;
    if ((dx / 10.0) * (dx / 10.0) + ((y - vy) / 7.0) * ((y - vy) / 7.0) <= 1.0)
      return std::fmod(z + disc_phase, disc_period) < 4.0 ? disc : bone;
    return background;
  };
  auto in_lesion = [&](const Lesion& l, double dx, double dy, double z) {
    const double ex = (dx - l.ox) / l.r, ey = (dy - l.oy) / l.r, ez = (z - l.zc) / l.rz;
    return ex * ex + ey * ey + ez * ez <= 1.0;
  };

  std::vector<std::size_t> lesion_voxels(lesions.size(), 0);
  const double sub[2] = {-0.25, 0.25};
  for (std::size_t k = 0; k < D; ++k) {
    const double z = static_cast<double>(k) * sp[2];
    const auto c = centre(z);
    const double a = radius(z);
    ph.centerline.points.push_back({static_cast<long>(k), c[0] / sp[0], c[1] / sp[1]});
    const double gain = 1.0 + cfg.bias * std::sin(kTwoPi * z / (2.0 * Lz) + bias_phase);
    for (std::size_t j = 0; j < H; ++j)
      for (std::size_t i = 0; i < W; ++i) {
        const double x = static_cast<double>(i) * sp[0], y = static_cast<double>(j) * sp[1];
        // Masks from the voxel centre.
        const Tissue t = classify(x, y, z, c, a);
        const bool is_cord = t == cord || t == grey;
        ph.cord.at(i, j, k) = is_cord;
        if (is_cord)
          for (std::size_t li = 0; li < lesions.size(); ++li)
            if (in_lesion(lesions[li], x - c[0], y - c[1], z)) {
              ph.lesion.at(i, j, k) = 1;
              ++lesion_voxels[li];
              break;
            }
        // Intensity from 2x2 in-plane sub-samples (partial volume).
        double acc = 0.0;
        for (double ox : sub)
          for (double oy : sub) {
            const double xs = x + ox * sp[0], ys = y + oy * sp[1];
            const Tissue ts = classify(xs, ys, z, c, a);
            double v;
            switch (ts) {
              case cord: v = tone.cord; break;
              case grey: v = tone.grey; break;
              case fluid: v = tone.csf; break;
              case bone: v = tone.bone; break;
              case disc: v = tone.disc; break;
              default: {
                v = tone.background *
                    (1.0 + 0.08 * std::sin(kTwoPi * xs / tex_lx + tex_px) * std::sin(kTwoPi * ys / tex_ly + tex_py));
                for (const auto& b : blobs) {
                  const double ex = (xs - b.x) / b.rx, ey = (ys - b.y) / b.ry, ez = (z - b.z) / b.rz;
                  if (ex * ex + ey * ey + ez * ez <= 1.0) {
                    v = tone.distractor;
                    break;
                  }
                }
              }
            }
            if (ts == cord || ts == grey)
              for (const auto& l : lesions)
                if (in_lesion(l, xs - c[0], ys - c[1], z)) {
                  v = l.intensity;
                  break;
                }
            acc += v;
          }
        ph.image.at(i, j, k) = static_cast<float>(acc / 4.0 * gain);
      }
  }
  const double noise_std = cfg.noise * std::abs(tone.csf - tone.cord);
  if (noise_std > 0.0)
    for (auto& v : ph.image.data) v = static_cast<float>(v + noise_std * rng.normal());

  auto& log = ph.log;
  log["seed"] = seed;
  log["contrast"] = to_string(cfg.contrast);
  log["cord_radius_mm"] = r0;
  log["ellipticity"] = ecc;
  log["csf_thickness_mm"] = csf;
  log["amplitude_mm"] = {amp_x, amp_y};
  log["period_mm"] = period;
  log["noise_std"] = noise_std;
  log["bias"] = cfg.bias;
  log["cord_voxels"] = count_nonzero(ph.cord);
  log["lesions"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < lesions.size(); ++i)
    log["lesions"].push_back({{"z_mm", lesions[i].zc},
                              {"offset_mm", {lesions[i].ox, lesions[i].oy}},
                              {"radius_mm", lesions[i].r},
                              {"length_mm", 2.0 * lesions[i].rz},
                              {"intensity", lesions[i].intensity},
                              {"voxels", lesion_voxels[i]}});
  log["distractors"] = blobs.size();
  return ph;
}

DatasetIndex generate_dataset(std::size_t n, const PhantomConfig& cfg, const std::filesystem::path& out_dir,
                              std::uint64_t seed, const DatasetOptions& opt) {
  cfg.validate();
  if (n < 3) throw ConfigError("a dataset needs at least 3 subjects for train/val/test splits");
  if (!(opt.lesion_free_fraction >= 0.0 && opt.lesion_free_fraction <= 1.0))
    throw ConfigError("lesion_free_fraction must lie in [0, 1]");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create '" + out_dir.string() + "': " + ec.message());

  const auto lesion_free = static_cast<std::size_t>(std::llround(opt.lesion_free_fraction * static_cast<double>(n)));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng pick(derive_seed(seed, 0x1e5));
  pick.shuffle(order.begin(), order.end());
  std::vector<bool> clean(n, false);
  for (std::size_t i = 0; i < lesion_free; ++i) clean[order[i]] = true;

  const std::string ext = opt.gzip ? ".nii.gz" : ".nii";
  std::vector<SubjectRecord> records;
  nlohmann::ordered_json logs = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < n; ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "sub-%03zu", i + 1);
    PhantomConfig c = cfg;
    if (clean[i]) c.lesion_count = {0, 0};
    const auto ph = generate_phantom(c, derive_seed(seed, i + 1));
    SubjectRecord r;
    r.id = id;
    r.contrast = cfg.contrast;
    r.image = std::string(id) + "_" + to_string(cfg.contrast) + ext;
    r.cord_mask = std::string(id) + "_cord" + ext;
    r.lesion_mask = std::string(id) + "_lesion" + ext;
    write_volume(ph.image, out_dir / r.image);
    write_volume(ph.cord, out_dir / r.cord_mask);
    write_volume(ph.lesion, out_dir / *r.lesion_mask);
    write_centerline_csv(ph.centerline, out_dir / (std::string(id) + "_centerline.csv"));
    auto entry = ph.log;
    entry["id"] = id;
    entry["lesion_free"] = static_cast<bool>(clean[i]);
    logs.push_back(entry);
    records.push_back(std::move(r));
  }
  auto index = split_dataset(std::move(records), opt.split, seed);
  index.base_dir = out_dir;
  index.write(out_dir / "index.json");
  std::ofstream lf(out_dir / "phantoms.json");
  if (!lf) throw IoError("cannot write '" + (out_dir / "phantoms.json").string() + "'");
  lf << logs.dump(2) << "\n";
  return index;
}

}  // namespace cordseg
