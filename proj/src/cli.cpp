#include "cordseg/cli.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <cstring>
#include <functional>

#include "CLI11.hpp"
#include "cordseg/error.hpp"
#include "cordseg/metrics.hpp"
#include "cordseg/phantom.hpp"
#include "cordseg/pipeline.hpp"
#include "json.hpp"

namespace cordseg {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

json read_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config " + path);
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw ConfigError("malformed config " + path + ": " + e.what());
  }
}

// ---- phantom -------------------------------------------------------------

struct PhantomArgs {
  std::size_t n = 0;
  std::string out, config;
  std::uint64_t seed = 1;
  double lesion_free = 0.2;
  bool gzip = false;
};

int cmd_phantom(const PhantomArgs& a, const CLI::App& sub) {
  PhantomConfig cfg;
  DatasetOptions opt;
  opt.lesion_free_fraction = a.lesion_free;
  opt.gzip = a.gzip;
  if (!a.config.empty()) {
    json j = read_config(a.config);
    if (!j.is_object()) throw ConfigError("phantom config must be a JSON object");
    // Dataset options share the file with the phantom parameters.
    if (j.contains("lesion_free_fraction") && !sub.get_option("--lesion-free-fraction")->count())
      opt.lesion_free_fraction = j["lesion_free_fraction"].get<double>();
    if (j.contains("gzip") && !sub.get_option("--gzip")->count()) opt.gzip = j["gzip"].get<bool>();
    if (j.contains("split")) opt.split = j["split"].get<std::array<double, 3>>();
    j.erase("lesion_free_fraction");
    j.erase("gzip");
    j.erase("split");
    cfg = phantom_config_from_json(j, cfg);
  }
  const auto index = generate_dataset(a.n, cfg, a.out, a.seed, opt);
  std::printf("wrote %zu subjects to %s\n", index.subjects.size(), a.out.c_str());
  return kExitOk;
}

// ---- train ---------------------------------------------------------------

struct TrainArgs {
  std::string stage, index, contrast = "t2", out, config;
  double lr = 0, dropout = 0;
  std::size_t batch = 0, epochs = 0, samples = 0, val_samples = 0, patience = 0;
  std::uint64_t seed = 0;
  int base_channels = 0;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a, const CLI::App& sub) {
  const Stage stage = parse_stage(a.stage);
  TrainConfig cfg = TrainConfig::defaults(stage);
  if (!a.config.empty()) cfg = train_config_from_json(read_config(a.config), cfg);
  cfg.stage = stage;
  cfg.contrast = parse_contrast(a.contrast);
  auto given = [&](const char* name) { return sub.get_option(name)->count() > 0; };
  if (given("--lr")) cfg.lr = a.lr;
  if (given("--batch-size")) cfg.batch_size = a.batch;
  if (given("--epochs")) cfg.epochs = a.epochs;
  if (given("--dropout")) cfg.dropout = a.dropout;
  if (given("--seed")) cfg.seed = a.seed;
  if (given("--samples-per-epoch")) cfg.samples_per_epoch = a.samples;
  if (given("--val-samples")) cfg.val_samples = a.val_samples;
  if (given("--patience")) cfg.patience = a.patience;
  if (given("--base-channels")) cfg.base_channels = a.base_channels;
  cfg.validate();

  const auto index = DatasetIndex::read(a.index);
  EpochCallback log;
  if (!a.quiet)
    log = [](const EpochLog& e) {
      std::printf("epoch %zu  train %.5f  val %.5f\n", e.epoch, e.train_loss, e.val_loss);
      std::fflush(stdout);
    };
  if (stage == Stage::centerline) {
    const auto m = train_centerline_model(index, cfg, log);
    save_component(a.out, cfg.contrast, m);
    std::printf("best epoch %zu (val %.5f)\n", m.log.best_epoch, m.log.best_val_loss);
  } else {
    const auto m = train_seg_model(index, cfg, log);
    save_component(a.out, cfg.contrast, m);
    std::printf("best epoch %zu (val %.5f)\n", m.log.best_epoch, m.log.best_val_loss);
  }
  return kExitOk;
}

// ---- segment -------------------------------------------------------------

struct SegmentArgs {
  std::string in, bundle, target = "cord", contrast = "t2", out, prob, centerline;
};

int cmd_segment(const SegmentArgs& a) {
  const Stage target = parse_stage(a.target);
  if (target == Stage::centerline) throw ConfigError("--target must be cord or lesion");
  const Contrast contrast = parse_contrast(a.contrast);
  const Bundle bundle = load_bundle(a.bundle);
  if (bundle.contrast != contrast)
    throw ConfigError("bundle was trained for " + to_string(bundle.contrast) + " images, not " + a.contrast);
  bundle.seg(target);
  const Volume img = read_volume(a.in);
  const auto s = segment(img, bundle, target, contrast);
  write_volume(s.mask, a.out);
  if (!a.prob.empty()) write_volume(s.probability, a.prob);
  if (!a.centerline.empty()) write_centerline_csv(s.centerline, a.centerline);
  return kExitOk;
}

// ---- eval ----------------------------------------------------------------

struct EvalArgs {
  std::vector<std::string> pred, ref;
  std::string mode = "cord", out, config;
  double overlap = 0.25;
  int connectivity = 26;
};

std::string stem(const std::string& path) {
  std::string name = fs::path(path).filename().string();
  for (const char* ext : {".nii.gz", ".nii", ".csv"})
    if (name.size() > std::strlen(ext) && name.ends_with(ext)) return name.substr(0, name.size() - std::strlen(ext));
  return name;
}

int cmd_eval(const EvalArgs& a, const CLI::App& sub) {
  if (a.pred.size() != a.ref.size()) throw ConfigError("--pred and --ref need the same number of files");
  LesionMatchConfig match;
  if (!a.config.empty()) {
    const json j = read_config(a.config);
    if (!j.is_object()) throw ConfigError("eval config must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it)
      if (it.key() != "overlap" && it.key() != "connectivity")
        throw ConfigError("unknown key '" + it.key() + "' in eval config");
    match.overlap = j.value("overlap", match.overlap);
    match.connectivity = j.value("connectivity", match.connectivity);
  }
  if (sub.get_option("--overlap")->count()) match.overlap = a.overlap;
  if (sub.get_option("--connectivity")->count()) match.connectivity = a.connectivity;
  match.validate();

  MetricsReport report;
  std::vector<Mask> lesion_free;
  for (std::size_t i = 0; i < a.pred.size(); ++i) {
    const std::string id = stem(a.pred[i]);
    const Mask ref = read_mask(a.ref[i]);
    if (a.mode == "centerline") {
      // Centerline files are in working-space voxels, as written by `segment --centerline`.
      const Mask ref_w = to_working(ref);
      const auto pred = read_centerline_csv(a.pred[i], ref_w.geom.spacing);
      report.rows.push_back({id, "centerline_mse", centerline_mse(pred, centerline_from_mask(ref_w)), "mm", ""});
      report.rows.push_back({id, "localization_rate", localization_rate(pred, ref_w), "%", ""});
      continue;
    }
    const Mask pred = read_mask(a.pred[i]);
    if (!pred.geom.same_grid(ref.geom)) throw ShapeError("geometry mismatch between " + a.pred[i] + " and " + a.ref[i]);
    const auto d = dice(pred, ref);
    const bool ref_empty = count_nonzero(ref) == 0;
    report.rows.push_back({id, "dice", d.value, "%", d.both_empty ? "both empty" : ""});
    report.rows.push_back({id, "rvd", ref_empty ? std::nullopt : std::optional(relative_volume_difference(pred, ref)),
                           "%", ref_empty ? "empty reference" : ""});
    if (a.mode == "cord") continue;
    if (a.mode != "lesion") throw ConfigError("--mode must be centerline, cord or lesion");
    const auto v = voxelwise_pr(pred, ref);
    report.rows.push_back({id, "voxel_sensitivity", v.sensitivity, "%", ""});
    report.rows.push_back({id, "voxel_precision", v.precision, "%", ""});
    const auto l = lesionwise_pr(pred, ref, match);
    report.rows.push_back({id, "lesion_sensitivity", l.rates.sensitivity, "%", ""});
    report.rows.push_back({id, "lesion_precision", l.rates.precision, "%", ""});
    if (ref_empty) lesion_free.push_back(pred);
  }
  if (!lesion_free.empty())
    report.rows.push_back({"all", "volume_specificity", volumewise_specificity(lesion_free), "%",
                           std::to_string(lesion_free.size()) + " lesion-free volumes"});
  report.finalize();
  report.write_json(a.out + ".json");
  report.write_csv(a.out + ".csv");
  for (const auto& g : report.aggregates)
    std::printf("%-20s n=%-4zu median %.3f (IQR %.3f)\n", g.metric.c_str(), g.count, g.median, g.iqr);
  return kExitOk;
}

// ---- consensus -----------------------------------------------------------

int cmd_consensus(const std::vector<std::string>& masks, const std::string& out) {
  std::vector<Mask> raters;
  for (const auto& m : masks) raters.push_back(read_mask(m));
  write_volume(majority_vote(raters), out);
  return kExitOk;
}

int guarded(const std::function<int()>& f) {
  try {
    return f();
  } catch (const NoCordFound& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNoCord;
  } catch (const MissingDataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitMissingData;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const json::exception& e) {
    std::cerr << "error: bad configuration value: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Spinal cord and MS lesion segmentation.\n"
               "Exit codes: 0 ok, 2 invalid configuration, 3 I/O error, 4 missing data, 5 no cord found."};
  app.require_subcommand(1);

  PhantomArgs pa;
  auto* ph = app.add_subcommand("phantom", "Generate a synthetic dataset with ground truth");
  ph->add_option("--n", pa.n, "Number of subjects (at least 3)")->required();
  ph->add_option("--out", pa.out, "Output directory")->required();
  ph->add_option("--seed", pa.seed, "Random seed")->capture_default_str();
  ph->add_option("--config", pa.config, "JSON phantom parameters (plus lesion_free_fraction, gzip, split)");
  ph->add_option("--lesion-free-fraction", pa.lesion_free, "Fraction of subjects without lesions")
      ->capture_default_str();
  ph->add_flag("--gzip", pa.gzip, "Write .nii.gz files");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train one bundle component");
  tr->add_option("--stage", ta.stage, "centerline, cord or lesion")->required();
  tr->add_option("--index", ta.index, "Dataset index JSON")->required();
  tr->add_option("--contrast", ta.contrast, "t1, t2 or t2s")->capture_default_str();
  tr->add_option("--out", ta.out, "Bundle directory")->required();
  tr->add_option("--config", ta.config, "JSON training config; flags override it");
  tr->add_option("--lr", ta.lr, "Learning rate (default 1e-4 centerline, 5e-5 cord/lesion)");
  tr->add_option("--batch-size", ta.batch, "Batch size (default 32 centerline, 4 cord/lesion)");
  tr->add_option("--epochs", ta.epochs, "Epochs (default 100 centerline, 300 cord/lesion)");
  tr->add_option("--dropout", ta.dropout, "Dropout rate (default 0.2 centerline, 0.4 cord/lesion)");
  tr->add_option("--seed", ta.seed, "Random seed (default 1)");
  tr->add_option("--samples-per-epoch", ta.samples, "Training samples per epoch (default 0 = all)");
  tr->add_option("--val-samples", ta.val_samples, "Validation samples (default 0 = all)");
  tr->add_option("--patience", ta.patience, "Early-stop patience in epochs (default 20, 0 disables)");
  tr->add_option("--base-channels", ta.base_channels, "Channels of the first U-net level (default 32)");
  tr->add_flag("--quiet", ta.quiet, "Do not print per-epoch losses");

  SegmentArgs sa;
  auto* sg = app.add_subcommand("segment", "Segment the cord or lesions of one image");
  sg->add_option("--in", sa.in, "Input NIfTI image")->required();
  sg->add_option("--bundle", sa.bundle, "Bundle directory")->required();
  sg->add_option("--target", sa.target, "cord or lesion")->capture_default_str();
  sg->add_option("--contrast", sa.contrast, "t1, t2 or t2s")->capture_default_str();
  sg->add_option("--out", sa.out, "Output mask")->required();
  sg->add_option("--prob", sa.prob, "Also write the probability volume (native grid)");
  sg->add_option("--centerline", sa.centerline, "Also write the detected centerline CSV (working-space voxels)");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Compare predictions with manual references");
  ev->add_option("--pred", ea.pred, "Predicted masks (centerline CSVs in centerline mode)")->required();
  ev->add_option("--ref", ea.ref, "Reference masks, one per prediction")->required();
  ev->add_option("--mode", ea.mode, "centerline, cord or lesion")->capture_default_str();
  ev->add_option("--out", ea.out, "Report path prefix (writes .json and .csv)")->required();
  ev->add_option("--config", ea.config, "JSON lesion matching config (overlap, connectivity)");
  ev->add_option("--overlap", ea.overlap, "Lesion detected when overlap exceeds this fraction")->capture_default_str();
  ev->add_option("--connectivity", ea.connectivity, "Lesion connectivity (6, 18 or 26)")->capture_default_str();

  std::vector<std::string> masks;
  std::string cons_out;
  auto* cs = app.add_subcommand("consensus", "Majority vote of rater masks");
  cs->add_option("--masks", masks, "Rater masks")->required();
  cs->add_option("--out", cons_out, "Output mask")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  if (ph->parsed()) return guarded([&] { return cmd_phantom(pa, *ph); });
  if (tr->parsed()) return guarded([&] { return cmd_train(ta, *tr); });
  if (sg->parsed()) return guarded([&] { return cmd_segment(sa); });
  if (ev->parsed()) return guarded([&] { return cmd_eval(ea, *ev); });
  return guarded([&] { return cmd_consensus(masks, cons_out); });
}

}  // namespace cordseg
