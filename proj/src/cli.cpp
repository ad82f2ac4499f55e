#include "cylseg/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "cylseg/config.hpp"
#include "cylseg/metrics.hpp"
#include "cylseg/partition.hpp"
#include "cylseg/selftest.hpp"
#include "cylseg/train.hpp"

namespace cylseg {

namespace fs = std::filesystem;

namespace {

// Offset between the synthetic train and validation scene seeds.
constexpr uint64_t kSyntheticValSeedOffset = 1000000;

struct NamedCloud {
  std::string name;
  PointCloud cloud;
};

std::vector<NamedCloud> synthetic_named(int count, int points, uint64_t seed) {
  std::vector<NamedCloud> out;
  auto clouds = synthetic_split(count, points, seed);
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    std::ostringstream name;
    name << "synthetic_" << std::setw(6) << std::setfill('0') << (seed + i);
    out.push_back({name.str(), std::move(clouds[i])});
  }
  return out;
}

std::vector<NamedCloud> load_dir(const fs::path& scans, const fs::path& labels,
                                 const LabelMap& map) {
  std::vector<NamedCloud> out;
  for (const ScanFile& f : list_scans(scans, labels)) {
    out.push_back({f.scan.stem().string(), load_scan(f, map)});
  }
  if (out.empty()) throw Error("no .bin scans found in " + scans.string());
  return out;
}

// Explicit directories win; otherwise the config's split, synthetic when the
// config names no directory.
std::vector<NamedCloud> resolve_split(const RunConfig& cfg, bool train_split,
                                      const std::string& scans, const std::string& labels) {
  if (!scans.empty()) return load_dir(scans, labels, cfg.label_map);
  const DataConfig& d = cfg.data;
  const fs::path& dir = train_split ? d.train_scans : d.val_scans;
  if (!dir.empty()) {
    return load_dir(dir, train_split ? d.train_labels : d.val_labels, cfg.label_map);
  }
  if (train_split) return synthetic_named(d.synthetic_train, d.synthetic_points, d.synthetic_seed);
  return synthetic_named(d.synthetic_val, d.synthetic_points,
                         d.synthetic_seed + kSyntheticValSeedOffset);
}

std::vector<PointCloud> clouds_of(const std::vector<NamedCloud>& v) {
  std::vector<PointCloud> out;
  out.reserve(v.size());
  for (const auto& n : v) out.push_back(n.cloud);
  return out;
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open for writing " + path.string());
  return out;
}

std::string format_double(double v) {
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

void require_labels(const std::vector<NamedCloud>& v) {
  for (const auto& n : v) {
    if (!n.cloud.has_labels()) throw ConfigError("labels are required for " + n.name);
  }
}

struct Options {
  std::string config;
  int threads = 0;
  std::string scans;
  std::string labels;
  std::string out;
  std::string checkpoint;
  std::string metrics;
  std::string predictions;
  int synthetic = -1;
  uint64_t seed = 0;
  int count = 5;
  int points = 6000;
};

RunConfig load_config(const Options& o) {
  RunConfig cfg = o.config.empty() ? RunConfig::parse("") : RunConfig::load(o.config);
  if (o.threads > 0) cfg.threads = o.threads;
  set_num_threads(cfg.threads);
  return cfg;
}

int cmd_stats(const Options& o, std::ostream& out) {
  RunConfig cfg = load_config(o);
  std::vector<NamedCloud> clouds;
  if (o.synthetic >= 0) {
    clouds = synthetic_named(o.synthetic, cfg.data.synthetic_points, cfg.data.synthetic_seed);
  } else {
    clouds = resolve_split(cfg, true, o.scans, "");
  }
  const auto rows = occupancy_by_distance(clouds_of(clouds), cfg.network.grid, cfg.stats.cubic,
                                          cfg.stats.distance_edges);
  if (o.out.empty()) {
    write_occupancy_csv(out, rows);
  } else {
    std::ofstream f = open_out(o.out);
    write_occupancy_csv(f, rows);
    out << "wrote " << o.out << " (" << clouds.size() << " clouds)\n";
  }
  return kExitOk;
}

int cmd_bound(const Options& o, std::ostream& out) {
  RunConfig cfg = load_config(o);
  std::vector<NamedCloud> clouds;
  if (o.synthetic >= 0) {
    clouds = synthetic_named(o.synthetic, cfg.data.synthetic_points, cfg.data.synthetic_seed);
  } else {
    clouds = resolve_split(cfg, true, o.scans, o.labels);
  }
  require_labels(clouds);
  const int k = cfg.label_map.num_classes;
  const int32_t ignore = cfg.label_map.ignore_id;
  std::ostringstream csv;
  csv << "cloud,encoding,miou\n";
  for (LabelEncoding mode : {LabelEncoding::majority, LabelEncoding::minority}) {
    const std::string mode_name = mode == LabelEncoding::majority ? "majority" : "minority";
    ConfusionMatrix all(k, ignore);
    for (const auto& n : clouds) {
      const VoxelMapping m = assign_cells(n.cloud, cfg.network.grid);
      const auto cell = encode_cell_labels(m, *n.cloud.labels, mode, k, ignore);
      std::vector<int32_t> pred(n.cloud.size());
      for (std::size_t i = 0; i < pred.size(); ++i) pred[i] = cell[m.point_cell[i]];
      ConfusionMatrix cm(k, ignore);
      // Points of an all-ignored cell are themselves ignored, so `pred` is
      // only read where it is a valid class.
      cm.update(*n.cloud.labels, pred);
      all.merge(cm);
      const auto r = compute_miou(cm);
      csv << n.name << ',' << mode_name << ',' << (r.miou ? format_double(*r.miou) : "") << '\n';
    }
    const auto r = compute_miou(all);
    csv << "all," << mode_name << ',' << (r.miou ? format_double(*r.miou) : "") << '\n';
  }
  if (o.out.empty()) {
    out << csv.str();
  } else {
    std::ofstream f = open_out(o.out);
    f << csv.str();
    out << "wrote " << o.out << " (" << clouds.size() << " clouds)\n";
  }
  return kExitOk;
}

int cmd_train(const Options& o, std::ostream& out) {
  RunConfig cfg = load_config(o);
  if (o.checkpoint.empty()) throw ConfigError("train needs --checkpoint");
  const auto train = resolve_split(cfg, true, o.scans, o.labels);
  require_labels(train);
  const auto val = resolve_split(cfg, false, "", "");
  require_labels(val);

  std::ofstream metrics;
  if (!o.metrics.empty()) {
    metrics = open_out(o.metrics);
    write_metrics_header(metrics);
  }
  const TrainResult r = train_loop(cfg.network, clouds_of(train), clouds_of(val), cfg.train,
                                   [&](const EpochMetrics& m) {
                                     if (metrics.is_open()) {
                                       write_metrics_row(metrics, m);
                                       metrics.flush();
                                     }
                                     out << "epoch " << m.epoch << " loss "
                                         << format_double(m.mean_loss.total) << " val_miou "
                                         << (m.val_miou ? format_double(*m.val_miou) : "n/a")
                                         << '\n';
                                   });
  const fs::path p(o.checkpoint);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  save_checkpoint(p, {cfg.network, r.params});
  out << "wrote " << o.checkpoint << " after " << r.iteration_losses.size() << " iterations\n";
  return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
  RunConfig cfg = load_config(o);
  const auto clouds = resolve_split(cfg, false, o.scans, o.labels);
  require_labels(clouds);
  const int32_t ignore = cfg.label_map.ignore_id;
  std::optional<ConfusionMatrix> cm;

  if (!o.predictions.empty()) {
    cm.emplace(cfg.label_map.num_classes, ignore);
    for (const auto& n : clouds) {
      const auto pred = read_kitti_labels(fs::path(o.predictions) / (n.name + ".label"),
                                          cfg.label_map);
      if (pred.size() != n.cloud.size()) {
        throw FormatError("prediction count differs from point count for " + n.name);
      }
      cm->update(*n.cloud.labels, pred);
    }
  } else {
    if (o.checkpoint.empty()) throw ConfigError("eval needs --checkpoint or --predictions");
    const Checkpoint ck = load_checkpoint(o.checkpoint);
    if (ck.config.num_classes != cfg.label_map.num_classes) {
      throw ConfigError("checkpoint class count differs from the label map");
    }
    const Network net(ck.config);
    cm = evaluate(net, ck.params, clouds_of(clouds), ignore);
  }
  out << "evaluated " << clouds.size() << " clouds; IoU in percent, classes absent from both "
      << "truth and prediction are excluded from the mean\n";
  print_iou_table(out, compute_miou(*cm), cfg.class_names);
  return kExitOk;
}

int cmd_infer(const Options& o, std::ostream& out) {
  RunConfig cfg = load_config(o);
  if (o.checkpoint.empty()) throw ConfigError("infer needs --checkpoint");
  if (o.out.empty()) throw ConfigError("infer needs --out");
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  if (ck.config.num_classes != cfg.label_map.num_classes) {
    throw ConfigError("checkpoint class count differs from the label map");
  }
  const Network net(ck.config);
  const auto clouds = resolve_split(cfg, false, o.scans, "");
  fs::create_directories(o.out);
  for (const auto& n : clouds) {
    write_kitti_labels(fs::path(o.out) / (n.name + ".label"),
                       predict_points(net, ck.params, n.cloud),
                       cfg.label_map);
  }
  out << "wrote " << clouds.size() << " label files to " << o.out << '\n';
  return kExitOk;
}

int cmd_synth(const Options& o, std::ostream& out) {
  if (o.out.empty()) throw ConfigError("synth needs --out");
  if (o.count < 1 || o.points < 1) throw ConfigError("synth needs positive --count and --points");
  const fs::path root(o.out);
  fs::create_directories(root / "velodyne");
  fs::create_directories(root / "labels");
  const LabelMap identity = LabelMap::identity(kSyntheticClasses);
  for (const auto& n : synthetic_named(o.count, o.points, o.seed)) {
    write_kitti_bin(root / "velodyne" / (n.name + ".bin"), n.cloud);
    write_kitti_labels(root / "labels" / (n.name + ".label"), *n.cloud.labels, identity);
  }
  out << "wrote " << o.count << " scenes to " << o.out << '\n';
  return kExitOk;
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Cylindrical-partition LiDAR segmentation toolkit"};
  app.require_subcommand(1);
  Options o;
  app.add_option("--threads", o.threads, "worker threads (overrides the config)")
      ->check(CLI::PositiveNumber);

  const auto add_config = [&](CLI::App* c) {
    c->add_option("-c,--config", o.config, "run configuration file")->check(CLI::ExistingFile);
  };

  CLI::App* stats = app.add_subcommand("stats", "non-empty cell proportion by distance (CSV)");
  add_config(stats);
  stats->add_option("--scans", o.scans, "directory of .bin scans")->check(CLI::ExistingDirectory);
  stats->add_option("--synthetic", o.synthetic, "use N synthetic scenes instead of scans");
  stats->add_option("-o,--out", o.out, "CSV output path (default stdout)");

  CLI::App* bound = app.add_subcommand("bound", "label-encoding upper-bound mIoU (CSV)");
  add_config(bound);
  bound->add_option("--scans", o.scans, "directory of .bin scans")->check(CLI::ExistingDirectory);
  bound->add_option("--labels", o.labels, "directory of .label files")
      ->check(CLI::ExistingDirectory);
  bound->add_option("--synthetic", o.synthetic, "use N synthetic scenes instead of scans");
  bound->add_option("-o,--out", o.out, "CSV output path (default stdout)");

  CLI::App* train = app.add_subcommand("train", "train a network; writes checkpoint and metrics");
  add_config(train);
  train->add_option("--scans", o.scans, "training scans (overrides the config)")
      ->check(CLI::ExistingDirectory);
  train->add_option("--labels", o.labels, "training labels")->check(CLI::ExistingDirectory);
  train->add_option("--checkpoint", o.checkpoint, "checkpoint output path")->required();
  train->add_option("--metrics", o.metrics, "per-epoch metrics CSV output path");

  CLI::App* eval = app.add_subcommand("eval", "per-class IoU and mIoU table");
  add_config(eval);
  eval->add_option("--scans", o.scans, "evaluation scans (default: validation split)")
      ->check(CLI::ExistingDirectory);
  eval->add_option("--labels", o.labels, "ground-truth labels")->check(CLI::ExistingDirectory);
  auto* ck = eval->add_option("--checkpoint", o.checkpoint, "checkpoint to evaluate");
  eval->add_option("--predictions", o.predictions, "directory of predicted .label files")
      ->check(CLI::ExistingDirectory)
      ->excludes(ck);

  CLI::App* infer = app.add_subcommand("infer", "write per-point predictions as .label files");
  add_config(infer);
  infer->add_option("--scans", o.scans, "scans to label (default: validation split)")
      ->check(CLI::ExistingDirectory);
  infer->add_option("--checkpoint", o.checkpoint, "checkpoint")->required();
  infer->add_option("-o,--out", o.out, "output directory")->required();

  CLI::App* selftest = app.add_subcommand("selftest", "oracle and finite-difference suites");
  selftest->add_option("--seed", o.seed, "random seed");

  CLI::App* synth = app.add_subcommand("synth", "write synthetic labeled scans");
  synth->add_option("-o,--out", o.out, "output root (velodyne/ and labels/)")->required();
  synth->add_option("--count", o.count, "number of scenes");
  synth->add_option("--points", o.points, "points per scene");
  synth->add_option("--seed", o.seed, "seed of the first scene");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (o.threads > 0) set_num_threads(o.threads);
    if (stats->parsed()) return cmd_stats(o, out);
    if (bound->parsed()) return cmd_bound(o, out);
    if (train->parsed()) return cmd_train(o, out);
    if (eval->parsed()) return cmd_eval(o, out);
    if (infer->parsed()) return cmd_infer(o, out);
    if (synth->parsed()) return cmd_synth(o, out);
    if (selftest->parsed()) return run_selftest(out, o.seed) ? kExitOk : kExitFailure;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}

int cli_main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return cli_main(args, std::cout, std::cerr);
}

}  // namespace cylseg
