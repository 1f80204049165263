// ctgrader: experiment harness for CT severity grading.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>

#include "ctgrader/gridrunner.hpp"
#include "ctgrader/sha256.hpp"
#include "ctgrader/synthkit.hpp"

namespace ctg {
namespace {

constexpr const char* kVersion = "ctgrader 0.1.0";

fs::path default_results_root() {
  if (const char* env = std::getenv("CTGRADER_RESULTS_ROOT")) return env;
  return "runs";
}

void append_run_manifest(const fs::path& results_root, const std::string& run_id,
                         const std::string& fingerprint, const std::string& dataset_hash,
                         const std::string& started, const std::string& finished) {
  nlohmann::json record = {{"run_id", run_id},         {"fingerprint", fingerprint},
                           {"dataset_hash", dataset_hash}, {"code_version", kVersion},
                           {"started_at", started},    {"finished_at", finished}};
  fs::create_directories(results_root);
  std::ofstream out(results_root / "runs_manifest.jsonl", std::ios::app);
  out << record.dump() << '\n';
}

struct SynthArgs {
  std::string out;
  bool tiny = false;
  int scans_per_class = 8;
  int min_slices = 10;
  int max_slices = 14;
  int side = 128;
  double noise = 0.0;
  uint64_t seed = 7;
  int quality = 90;
};

int cmd_synth(const SynthArgs& args) {
  SynthSpec spec = tiny_synth_spec();
  if (!args.tiny) {
    spec.n_scans_per_class = args.scans_per_class;
    spec.min_slices = args.min_slices;
    spec.max_slices = args.max_slices;
    spec.image_side = args.side;
  }
  spec.noise_level = args.noise;
  spec.seed = args.seed;
  spec.jpeg_quality = args.quality;
  const SynthSummary summary = generate_dataset(spec, args.out);
  std::cout << "generated " << summary.train_scans << " train / " << summary.val_scans
            << " unseen_val / " << summary.test_scans << " test scans under " << args.out
            << "\n";
  return 0;
}

struct ManifestArgs {
  std::string root;
  std::string out;
  std::string verify;
};

int cmd_manifest(const ManifestArgs& args) {
  const fs::path root = args.root;
  if (!args.verify.empty()) {
    const Manifest manifest = read_manifest_csv(args.verify);
    const auto discrepancies = verify_manifest(manifest, root);
    std::cout << discrepancies.size() << " discrepancies\n";
    for (const auto& d : discrepancies)
      std::cout << d.scan_id << ": expected " << d.expected << ", actual " << d.actual << "\n";
    return 0;  // discrepancies are data, not failures
  }
  std::vector<ScanVolume> all;
  for (const Split split : {Split::train, Split::unseen_val, Split::test}) {
    const fs::path dir = root / to_string(split);
    if (!fs::is_directory(dir)) continue;
    auto scans = discover_scans(dir, split);
    all.insert(all.end(), scans.begin(), scans.end());
  }
  if (all.empty()) throw ConfigError("no scan folders under " + root.string());
  const fs::path out = args.out.empty() ? root / "manifest.csv" : fs::path(args.out);
  write_manifest_csv(out, build_manifest(all));
  std::cout << "wrote manifest for " << all.size() << " scans to " << out.string() << "\n";
  return 0;
}

struct PreviewArgs {
  std::string data;
  std::string scan;
  std::string split = "train";
  std::string arch = "SqueezeNet";
  int side = 0;
  bool no_mask = false;
  bool no_crop = false;
  double crop_fraction = 0.9;
  double slice_fraction = 0.25;
  std::string out = "previews";
};

int cmd_preview(const PreviewArgs& args) {
  const Split split = parse_split(args.split);
  const auto scans = discover_scans(fs::path(args.data) / to_string(split), split);
  const ScanVolume* scan = nullptr;
  for (const auto& s : scans)
    if (s.scan_id == args.scan) scan = &s;
  if (!scan) throw ConfigError("scan '" + args.scan + "' not found in split " + args.split);

  ModelSpec spec = default_model_spec(parse_arch(args.arch));
  if (args.side > 0) spec.input_side = args.side;
  PreprocessOptions opts;
  opts.selector.f = args.slice_fraction;
  opts.apply_mask = !args.no_mask;
  opts.apply_crop = !args.no_crop;
  opts.crop_fraction = args.crop_fraction;

  const PreprocessedInput input = assemble_input(*scan, spec, opts);
  const fs::path out = fs::path(args.out) / (scan->scan_id + "_triptych.png");
  write_triptych_png(input, spec, out);
  std::cout << "scan " << scan->scan_id << ": n=" << scan->n << " z=" << input.z
            << " masked=" << input.masked << " cropped=" << input.cropped << " -> "
            << out.string() << "\n";
  return 0;
}

struct TrainArgs {
  std::string data;
  std::string arch = "SqueezeNet";
  std::string extent = "all";
  int bs = 16;
  std::string opt = "adam";
  double lr = 0.001;
  uint64_t seed = 0;
  int max_epochs = 500;
  int patience = 10;
  double min_delta = 1e-4;
  std::string init = "scratch";
  double val_fraction = 0.2;
  int side = 0;
  bool no_mask = false;
  bool no_crop = false;
  double crop_fraction = 0.9;
  double slice_fraction = 0.25;
  std::string out;
};

GridCell cell_from_train_args(const TrainArgs& args) {
  GridCell cell;
  cell.model = default_model_spec(parse_arch(args.arch), parse_weight_init(args.init));
  if (args.side > 0) cell.model.input_side = args.side;
  cell.train.batch_size = args.bs;
  cell.train.optimizer = parse_optim(args.opt);
  cell.train.lr = args.lr;
  cell.train.seed = args.seed;
  cell.train.max_epochs = args.max_epochs;
  cell.train.plateau_patience = args.patience;
  cell.train.plateau_min_delta = args.min_delta;
  cell.train.extent = parse_extent(args.extent);
  cell.train.internal_val_fraction = args.val_fraction;
  cell.prep.selector.f = args.slice_fraction;
  cell.prep.apply_mask = !args.no_mask;
  cell.prep.apply_crop = !args.no_crop;
  cell.prep.crop_fraction = args.crop_fraction;
  return cell;
}

int cmd_train(const TrainArgs& args) {
  const fs::path results = args.out.empty() ? default_results_root() : fs::path(args.out);
  const std::string started = iso8601_now();
  const GridDataset data = load_grid_dataset(args.data);
  const GridCell cell = cell_from_train_args(args);
  const std::string fp = cell_fingerprint(cell);
  const fs::path run_dir = results / "runs" / fp;

  const auto [train_scans, val_scans] =
      split_internal(data.train, cell.train.internal_val_fraction, cell.train.seed);
  const Batchset train_set = prepare_batchset(train_scans, cell.model, cell.prep);
  const Batchset val_set = prepare_batchset(val_scans, cell.model, cell.prep);
  for (const auto& [scan, reason] : train_set.errors)
    std::cerr << "warning: skipping scan '" << scan << "': " << reason << "\n";

  auto model = build_model(cell.model, cell.train.seed);
  apply_freeze_policy(*model, cell.train.extent);
  const TrainResult result = train(*model, cell.train, train_set, val_set, run_dir);

  // Echo the preprocessing flags next to the trainer config.
  nlohmann::json effective = cell_config_json(cell);
  effective["settings"] = settings_string(cell.train);
  effective["fingerprint"] = fp;
  write_text_file(run_dir / "effective_config.json", effective.dump(2) + "\n");

  LoadedCheckpoint best = reload_checkpoint(result.checkpoint_path);
  const Evaluation val_eval = evaluate_batchset(*best.model, val_set);
  const EvalReport val_report = make_eval_report(fp, val_set.y, val_eval.preds, val_eval.probs);

  ReportRow row;
  row.model = to_string(cell.model.arch);
  row.settings = settings_string(cell.train);
  row.val = val_report;
  row.unseen = val_report;
  if (!data.unseen_val.empty()) {
    const Batchset unseen_set = prepare_batchset(data.unseen_val, cell.model, cell.prep);
    const Evaluation ev = evaluate_batchset(*best.model, unseen_set);
    row.unseen = make_eval_report(fp, unseen_set.y, ev.preds, ev.probs);
  }
  const TableLayout layout = cell.train.extent == FineTuneExtent::all_layers
                                 ? TableLayout::table2
                                 : TableLayout::table1;
  const std::string table = emit_report({row}, layout);
  write_text_file(run_dir / "eval" / "report.txt", table);
  write_csv(run_dir / "eval" / "report.csv", report_to_csv({row}, layout));
  std::cout << table;
  std::cout << "best_epoch=" << result.best_epoch << " best_val_accuracy="
            << result.best_val_accuracy << " stopped_early=" << result.stopped_early
            << "\nrun directory: " << run_dir.string() << "\n";
  append_run_manifest(results, fp, fp, data.manifest_hash, started, iso8601_now());
  return 0;
}

struct GridArgs {
  std::string data;
  std::string grid;
  std::string out;
  bool resume = false;
  int workers = 1;
};

int cmd_grid(const GridArgs& args) {
  const fs::path results = args.out.empty() ? default_results_root() : fs::path(args.out);
  const std::string started = iso8601_now();
  GridSpec spec = default_grid_spec();
  if (!args.grid.empty())
    spec = grid_spec_from_json(nlohmann::json::parse(read_text_file(args.grid)));
  const auto cells = expand_grid(spec);
  const GridDataset data = load_grid_dataset(args.data);

  GridOptions options;
  options.resume = args.resume;
  options.workers = args.workers;
  const GridResult result = run_grid(cells, data, results, options);

  std::cout << "grid complete: " << result.executed << " executed, " << result.skipped
            << " skipped, " << result.failed << " failed\n"
            << "summary: " << (results / "summary.csv").string() << "\n";
  if (const CellOutcome* best = pick_best_cell(result)) {
    std::cout << "best cell by unseen F1-macro: " << best->fingerprint << " ("
              << best->unseen_report.f1_macro << ")\n";
  }
  append_run_manifest(results, "grid-" + started, "-", data.manifest_hash, started,
                      iso8601_now());
  return 0;
}

GridResult load_grid_result(const fs::path& results) {
  GridResult result;
  const fs::path runs = results / "runs";
  if (!fs::is_directory(runs))
    throw ConfigError("no grid runs under " + results.string() + "; run `grid` first");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(runs)) {
    const fs::path f = entry.path() / "cell.json";
    if (fs::exists(f)) files.push_back(f);
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    // Re-hydrating the summary only needs the recorded metrics.
    const auto j = nlohmann::json::parse(read_text_file(f));
    CellOutcome o;
    o.fingerprint = j.at("fingerprint").get<std::string>();
    o.failed = j.at("failed").get<bool>();
    const auto& cfg = j.at("config");
    o.cell.model = model_spec_from_json(cfg.at("model_spec"));
    o.cell.train = train_config_from_json(cfg.at("train_config"));
    o.cell.prep = preprocess_options_from_json(cfg.at("prep"));
    if (!o.failed) {
      o.unseen_report.f1_macro = j.at("unseen_report").at("f1_macro").get<double>();
      o.unseen_report.auroc_macro = j.at("unseen_report").at("auroc_macro").get<double>();
    } else {
      o.failure_reason = j.value("failure_reason", "");
    }
    result.cells.push_back(std::move(o));
  }
  if (result.cells.empty()) throw ConfigError("no completed cells under " + runs.string());
  return result;
}

struct RetrainArgs {
  std::string data;
  std::string results;
  std::string fingerprint;
};

int cmd_retrain_final(const RetrainArgs& args) {
  const fs::path results = args.results.empty() ? default_results_root()
                                                : fs::path(args.results);
  const std::string started = iso8601_now();
  const GridResult grid = load_grid_result(results);

  const CellOutcome* chosen = nullptr;
  if (!args.fingerprint.empty()) {
    for (const auto& o : grid.cells)
      if (o.fingerprint == args.fingerprint) chosen = &o;
    if (!chosen) throw ConfigError("fingerprint not found: " + args.fingerprint);
  } else {
    chosen = pick_best_cell(grid);
    if (!chosen) throw ConfigError("every grid cell failed; nothing to retrain");
  }

  const GridDataset data = load_grid_dataset(args.data);
  std::cout << "retraining " << chosen->fingerprint << " on train + unseen_val ("
            << data.train.size() + data.unseen_val.size() << " scans)\n";
  const RetrainOutcome out = retrain_final(chosen->cell, data, results);
  std::cout << "predictions: " << out.predictions_path.string() << " ("
            << out.n_predictions << " rows)\npredicted class distribution: ";
  for (int c = 0; c < kNumClasses; ++c)
    std::cout << out.test_distribution[c] << (c + 1 < kNumClasses ? ", " : "\n");
  append_run_manifest(results, "retrain-" + out.fingerprint, out.fingerprint,
                      data.manifest_hash, started, iso8601_now());
  return 0;
}

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::string split = "unseen_val";
  std::string out;
  bool no_mask = false;
  bool no_crop = false;
  double crop_fraction = 0.9;
  double slice_fraction = 0.25;
};

int cmd_eval(const EvalArgs& args) {
  const Split split = parse_split(args.split);
  LoadedCheckpoint ckpt = reload_checkpoint(args.ckpt);
  PreprocessOptions opts;
  opts.selector.f = args.slice_fraction;
  opts.apply_mask = !args.no_mask;
  opts.apply_crop = !args.no_crop;
  opts.crop_fraction = args.crop_fraction;
  const fs::path out_dir = args.out.empty()
                               ? fs::path(args.ckpt).parent_path() / "eval"
                               : fs::path(args.out);

  const fs::path split_dir = fs::path(args.data) / to_string(split);
  const auto volumes = discover_scans(split_dir, split);
  if (volumes.empty()) throw ConfigError("no scans under " + split_dir.string());

  if (split == Split::test) {
    const Batchset set = prepare_batchset(volumes, ckpt.spec, opts);
    const Evaluation ev = evaluate_batchset(*ckpt.model, set);
    std::vector<std::pair<std::string, int>> preds;
    for (size_t i = 0; i < set.scan_ids.size(); ++i)
      preds.emplace_back(set.scan_ids[i], ev.preds[i]);
    emit_predictions(preds, out_dir / "predictions.csv");
    const auto dist = predict_distribution(ev.preds);
    std::cout << "predicted class distribution: ";
    for (int c = 0; c < kNumClasses; ++c)
      std::cout << dist[c] << (c + 1 < kNumClasses ? ", " : "\n");
    std::cout << "predictions: " << (out_dir / "predictions.csv").string() << "\n";
    return 0;
  }

  const LabelLoadResult labels = load_labels(fs::path(args.data) / "labels.csv", volumes);
  if (!labels.unmatched_scans.empty())
    throw DataError("label file misses scans in split " + args.split);
  const Batchset set = prepare_batchset(labels.labeled, ckpt.spec, opts);
  const Evaluation ev = evaluate_batchset(*ckpt.model, set);
  const EvalReport report = make_eval_report(args.ckpt, set.y, ev.preds, ev.probs);

  ReportRow row;
  row.model = to_string(ckpt.spec.arch);
  row.settings = settings_string(ckpt.config);
  row.val = report;
  row.unseen = report;
  const std::string table = emit_report({row}, TableLayout::table3);
  write_text_file(out_dir / "report.txt", table);
  write_csv(out_dir / "report.csv", report_to_csv({row}, TableLayout::table3));
  std::cout << table;
  std::cout << "f1_macro=" << report.f1_macro << " auroc_macro=" << report.auroc_macro
            << " n=" << report.n_evaluated << "\n";
  return 0;
}

int dispatch(int argc, char** argv) {
  CLI::App app{"CT severity grading experiment harness"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic desk-scale dataset");
  synth_cmd->add_option("--out", synth.out, "Output dataset directory")->required();
  synth_cmd->add_flag("--tiny", synth.tiny, "8 scans/class, 12 slices, 128 px preset");
  synth_cmd->add_option("--scans-per-class", synth.scans_per_class, "Training scans per class");
  synth_cmd->add_option("--min-slices", synth.min_slices, "Minimum slices per scan");
  synth_cmd->add_option("--max-slices", synth.max_slices, "Maximum slices per scan");
  synth_cmd->add_option("--side", synth.side, "Slice side in pixels (>= 64)");
  synth_cmd->add_option("--noise", synth.noise, "Gaussian noise level in [0,1]");
  synth_cmd->add_option("--seed", synth.seed, "Generation seed");
  synth_cmd->add_option("--quality", synth.quality, "JPEG quality");

  ManifestArgs manifest;
  auto* manifest_cmd =
      app.add_subcommand("manifest", "Build or verify the per-scan file-count manifest");
  manifest_cmd->add_option("--root", manifest.root, "Dataset root directory")->required();
  manifest_cmd->add_option("--out", manifest.out, "Manifest CSV to write");
  manifest_cmd->add_option("--verify", manifest.verify, "Manifest CSV to verify against disk");

  PreviewArgs preview;
  auto* preview_cmd =
      app.add_subcommand("preview", "Write the 3-channel network input as a PNG triptych");
  preview_cmd->add_option("--data", preview.data, "Dataset root directory")->required();
  preview_cmd->add_option("--scan", preview.scan, "Scan id")->required();
  preview_cmd->add_option("--split", preview.split, "Dataset split of the scan");
  preview_cmd->add_option("--arch", preview.arch, "Architecture whose input size to use");
  preview_cmd->add_option("--side", preview.side, "Override the input side");
  preview_cmd->add_flag("--no-mask", preview.no_mask, "Skip lung masking");
  preview_cmd->add_flag("--no-crop", preview.no_crop, "Skip center cropping");
  preview_cmd->add_option("--crop-fraction", preview.crop_fraction, "Center-crop fraction");
  preview_cmd->add_option("--slice-fraction", preview.slice_fraction, "Center-slice fraction f");
  preview_cmd->add_option("--out", preview.out, "Output directory");

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Fine-tune one model configuration");
  train_cmd->add_option("--data", train_args.data, "Dataset root directory")->required();
  train_cmd->add_option("--arch", train_args.arch, "Architecture name");
  train_cmd->add_option("--extent", train_args.extent, "Fine-tune extent: last|all");
  train_cmd->add_option("--bs", train_args.bs, "Batch size");
  train_cmd->add_option("--opt", train_args.opt, "Optimizer: adam|sgd");
  train_cmd->add_option("--lr", train_args.lr, "Learning rate");
  train_cmd->add_option("--seed", train_args.seed, "Run seed");
  train_cmd->add_option("--epochs", train_args.max_epochs, "Epoch cap");
  train_cmd->add_option("--patience", train_args.patience, "Plateau patience");
  train_cmd->add_option("--min-delta", train_args.min_delta, "Plateau minimum improvement");
  train_cmd->add_option("--init", train_args.init, "Weight init: scratch|pretrained");
  train_cmd->add_option("--val-fraction", train_args.val_fraction,
                        "Internal validation fraction");
  train_cmd->add_option("--side", train_args.side, "Override the input side");
  train_cmd->add_flag("--no-mask", train_args.no_mask, "Skip lung masking");
  train_cmd->add_flag("--no-crop", train_args.no_crop, "Skip center cropping");
  train_cmd->add_option("--crop-fraction", train_args.crop_fraction, "Center-crop fraction");
  train_cmd->add_option("--slice-fraction", train_args.slice_fraction,
                        "Center-slice fraction f");
  train_cmd->add_option("--out", train_args.out,
                        "Results root (default $CTGRADER_RESULTS_ROOT or ./runs)");

  GridArgs grid_args;
  auto* grid_cmd = app.add_subcommand("grid", "Run the experiment grid");
  grid_cmd->add_option("--data", grid_args.data, "Dataset root directory")->required();
  grid_cmd->add_option("--grid", grid_args.grid, "Grid spec JSON (default: paper grid)");
  grid_cmd->add_option("--out", grid_args.out, "Results root");
  grid_cmd->add_flag("--resume", grid_args.resume, "Skip cells already completed on disk");
  grid_cmd->add_option("--workers", grid_args.workers, "Concurrent cells");

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  eval_cmd->add_option("--ckpt", eval_args.ckpt, "Checkpoint path")->required();
  eval_cmd->add_option("--data", eval_args.data, "Dataset root directory")->required();
  eval_cmd->add_option("--split", eval_args.split, "Split: train|unseen_val|test");
  eval_cmd->add_flag("--no-mask", eval_args.no_mask, "Skip lung masking");
  eval_cmd->add_flag("--no-crop", eval_args.no_crop, "Skip center cropping");
  eval_cmd->add_option("--crop-fraction", eval_args.crop_fraction, "Center-crop fraction");
  eval_cmd->add_option("--slice-fraction", eval_args.slice_fraction, "Center-slice fraction f");
  eval_cmd->add_option("--out", eval_args.out, "Output directory");

  RetrainArgs retrain_args;
  auto* retrain_cmd = app.add_subcommand(
      "retrain-final", "Retrain the best grid cell on train + unseen_val, predict the test set");
  retrain_cmd->add_option("--data", retrain_args.data, "Dataset root directory")->required();
  retrain_cmd->add_option("--results", retrain_args.results, "Grid results root");
  retrain_cmd->add_option("--fingerprint", retrain_args.fingerprint,
                          "Retrain this cell instead of the best one");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e);
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e);
    return 0;
  } catch (const CLI::CallForVersion& e) {
    app.exit(e);
    return 0;
  } catch (const CLI::ParseError& e) {
    app.exit(e);  // prints the one-line error and usage hint
    return 2;
  }

  if (synth_cmd->parsed()) return cmd_synth(synth);
  if (manifest_cmd->parsed()) return cmd_manifest(manifest);
  if (preview_cmd->parsed()) return cmd_preview(preview);
  if (train_cmd->parsed()) return cmd_train(train_args);
  if (grid_cmd->parsed()) return cmd_grid(grid_args);
  if (eval_cmd->parsed()) return cmd_eval(eval_args);
  if (retrain_cmd->parsed()) return cmd_retrain_final(retrain_args);
  return 2;
}

}  // namespace
}  // namespace ctg

int main(int argc, char** argv) {
  try {
    return ctg::dispatch(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
