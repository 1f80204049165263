#include "ctgrader/gridrunner.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "ctgrader/sha256.hpp"

namespace ctg {

GridSpec default_grid_spec() {
  GridSpec spec;
  spec.archs = arch_registry();
  spec.extents = {FineTuneExtent::last_layer_only, FineTuneExtent::all_layers};
  spec.batch_sizes = {16, 32, 64, 512};
  spec.optim_lr = {{OptimKind::ADAM, 0.001}, {OptimKind::SGD, 0.001}};
  spec.seeds = {0};
  return spec;
}

GridSpec grid_spec_from_json(const nlohmann::json& j) {
  GridSpec spec = default_grid_spec();
  if (j.contains("archs")) {
    if (j["archs"].is_string() && j["archs"] == "all") {
      spec.archs = arch_registry();
    } else {
      spec.archs.clear();
      for (const auto& name : j["archs"]) spec.archs.push_back(parse_arch(name));
    }
  }
  if (j.contains("extents")) {
    spec.extents.clear();
    for (const auto& name : j["extents"]) spec.extents.push_back(parse_extent(name));
  }
  if (j.contains("batch_sizes"))
    spec.batch_sizes = j["batch_sizes"].get<std::vector<int>>();
  if (j.contains("optim_lr")) {
    spec.optim_lr.clear();
    for (const auto& pair : j["optim_lr"])
      spec.optim_lr.emplace_back(parse_optim(pair.at(0).get<std::string>()),
                                 pair.at(1).get<double>());
  }
  if (j.contains("seeds")) spec.seeds = j["seeds"].get<std::vector<uint64_t>>();
  spec.max_epochs = j.value("max_epochs", spec.max_epochs);
  spec.plateau_patience = j.value("plateau_patience", spec.plateau_patience);
  spec.plateau_min_delta = j.value("plateau_min_delta", spec.plateau_min_delta);
  spec.internal_val_fraction = j.value("internal_val_fraction", spec.internal_val_fraction);
  if (j.contains("init")) spec.init = parse_weight_init(j["init"].get<std::string>());
  if (j.contains("input_side")) spec.input_side = j["input_side"].get<int>();
  spec.prep.selector.f = j.value("slice_fraction", spec.prep.selector.f);
  spec.prep.apply_mask = j.value("mask", spec.prep.apply_mask);
  spec.prep.apply_crop = j.value("crop", spec.prep.apply_crop);
  spec.prep.crop_fraction = j.value("crop_fraction", spec.prep.crop_fraction);
  spec.prep.mask_threshold = j.value("mask_threshold", spec.prep.mask_threshold);
  return spec;
}

nlohmann::json cell_config_json(const GridCell& cell) {
  return {{"model_spec", to_json(cell.model)},
          {"train_config", to_json(cell.train)},
          {"prep", to_json(cell.prep)}};
}

std::vector<GridCell> expand_grid(const GridSpec& spec) {
  if (spec.archs.empty() || spec.extents.empty() || spec.batch_sizes.empty() ||
      spec.optim_lr.empty() || spec.seeds.empty())
    throw ArgumentError("grid expansion over an empty dimension");

  using Key = std::tuple<int, int, int, int, double, uint64_t>;
  std::set<Key> seen;
  std::vector<GridCell> cells;
  for (const Arch arch : spec.archs) {
    for (const FineTuneExtent extent : spec.extents) {
      for (const int bs : spec.batch_sizes) {
        for (const auto& [opt, lr] : spec.optim_lr) {
          for (const uint64_t seed : spec.seeds) {
            const Key key{static_cast<int>(arch), static_cast<int>(extent), bs,
                          static_cast<int>(opt), lr, seed};
            if (!seen.insert(key).second) continue;
            GridCell cell;
            cell.model = default_model_spec(arch, spec.init);
            if (spec.input_side) cell.model.input_side = *spec.input_side;
            cell.train.batch_size = bs;
            cell.train.optimizer = opt;
            cell.train.lr = lr;
            cell.train.max_epochs = spec.max_epochs;
            cell.train.plateau_patience = spec.plateau_patience;
            cell.train.plateau_min_delta = spec.plateau_min_delta;
            cell.train.internal_val_fraction = spec.internal_val_fraction;
            cell.train.extent = extent;
            cell.train.seed = seed;
            cell.prep = spec.prep;
            cells.push_back(std::move(cell));
          }
        }
      }
    }
  }
  std::sort(cells.begin(), cells.end(), [](const GridCell& a, const GridCell& b) {
    return std::tuple(static_cast<int>(a.model.arch), static_cast<int>(a.train.extent),
                      a.train.batch_size, static_cast<int>(a.train.optimizer), a.train.lr,
                      a.train.seed) <
           std::tuple(static_cast<int>(b.model.arch), static_cast<int>(b.train.extent),
                      b.train.batch_size, static_cast<int>(b.train.optimizer), b.train.lr,
                      b.train.seed);
  });
  return cells;
}

std::string cell_fingerprint(const GridCell& cell) {
  char lr[32];
  std::snprintf(lr, sizeof(lr), "%g", cell.train.lr);
  std::string readable = to_string(cell.model.arch) + "-" + to_string(cell.train.extent) +
                         "-bs" + std::to_string(cell.train.batch_size) + "-" +
                         to_string(cell.train.optimizer) + "-lr" + lr + "-seed" +
                         std::to_string(cell.train.seed);
  // nlohmann::json orders object keys, so dump() is canonical.
  const std::string digest = sha256_hex(cell_config_json(cell).dump());
  return readable + "-" + digest.substr(0, 16);
}

GridDataset load_grid_dataset(const fs::path& root) {
  GridDataset ds;
  Dataset base = load_dataset(root);
  ds.train = std::move(base.train);
  ds.unseen_val = std::move(base.unseen_val);
  ds.test = std::move(base.test);

  std::vector<ScanVolume> all;
  for (const auto& s : ds.train) all.push_back(s.volume);
  for (const auto& s : ds.unseen_val) all.push_back(s.volume);
  for (const auto& s : ds.test) all.push_back(s);
  const Manifest manifest = build_manifest(all);
  std::ostringstream csv;
  for (const auto& row : manifest.rows)
    csv << row.scan_id << ',' << row.file_count << ',' << to_string(row.split) << '\n';
  ds.manifest_hash = sha256_hex(csv.str());
  return ds;
}

namespace {

nlohmann::json eval_report_to_json(const EvalReport& r) {
  nlohmann::json per_class = nlohmann::json::array();
  for (const auto& m : r.per_class)
    per_class.push_back({{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}});
  nlohmann::json confusion = nlohmann::json::array();
  for (const auto& row : r.confusion.counts) confusion.push_back(row);
  return {{"per_class", per_class},
          {"f1_macro", r.f1_macro},
          {"auroc_macro", r.auroc_macro},
          {"pred_class_distribution", r.pred_class_distribution},
          {"n_evaluated", r.n_evaluated},
          {"run_id", r.run_id},
          {"confusion", confusion}};
}

EvalReport eval_report_from_json(const nlohmann::json& j) {
  EvalReport r;
  for (int c = 0; c < kNumClasses; ++c) {
    const auto& m = j.at("per_class").at(c);
    r.per_class[c] = {m.at("precision").get<double>(), m.at("recall").get<double>(),
                      m.at("f1").get<double>()};
    r.confusion.counts[c] = j.at("confusion").at(c).get<std::array<int64_t, kNumClasses>>();
  }
  r.f1_macro = j.at("f1_macro").get<double>();
  r.auroc_macro = j.at("auroc_macro").get<double>();
  r.pred_class_distribution =
      j.at("pred_class_distribution").get<std::array<int64_t, kNumClasses>>();
  r.n_evaluated = j.at("n_evaluated").get<int64_t>();
  r.run_id = j.at("run_id").get<std::string>();
  return r;
}

nlohmann::json outcome_to_json(const CellOutcome& o, const std::string& dataset_hash) {
  nlohmann::json j = {{"fingerprint", o.fingerprint},
                      {"dataset_hash", dataset_hash},
                      {"config", cell_config_json(o.cell)},
                      {"failed", o.failed}};
  if (o.failed) {
    j["failure_reason"] = o.failure_reason;
    return j;
  }
  j["train"] = {{"best_epoch", o.train_result.best_epoch},
                {"best_val_accuracy", o.train_result.best_val_accuracy},
                {"stopped_early", o.train_result.stopped_early},
                {"epochs_run", o.train_result.epoch_log.size()},
                {"checkpoint", o.train_result.checkpoint_path.string()}};
  j["val_report"] = eval_report_to_json(o.val_report);
  j["unseen_report"] = eval_report_to_json(o.unseen_report);
  j["has_test"] = o.has_test;
  if (o.has_test) j["test_distribution"] = o.test_distribution;
  return j;
}

CellOutcome outcome_from_json(const nlohmann::json& j) {
  CellOutcome o;
  o.fingerprint = j.at("fingerprint").get<std::string>();
  const auto& cfg = j.at("config");
  o.cell.model = model_spec_from_json(cfg.at("model_spec"));
  o.cell.train = train_config_from_json(cfg.at("train_config"));
  o.cell.prep = preprocess_options_from_json(cfg.at("prep"));
  o.failed = j.at("failed").get<bool>();
  if (o.failed) {
    o.failure_reason = j.value("failure_reason", "");
    return o;
  }
  o.train_result.best_epoch = j.at("train").at("best_epoch").get<int>();
  o.train_result.best_val_accuracy = j.at("train").at("best_val_accuracy").get<double>();
  o.train_result.stopped_early = j.at("train").at("stopped_early").get<bool>();
  o.train_result.checkpoint_path = j.at("train").at("checkpoint").get<std::string>();
  o.val_report = eval_report_from_json(j.at("val_report"));
  o.unseen_report = eval_report_from_json(j.at("unseen_report"));
  o.has_test = j.at("has_test").get<bool>();
  if (o.has_test)
    o.test_distribution = j.at("test_distribution").get<std::array<int64_t, kNumClasses>>();
  return o;
}

// Prepared batchsets are shared between cells that agree on the input
// pipeline (input side + preprocessing flags).
class BatchsetCache {
 public:
  struct Entry {
    Batchset train, internal_val, unseen, test;
  };

  const Entry& get(const GridCell& cell, const GridDataset& data) {
    std::ostringstream key;
    key << cell.model.input_side << '|' << to_json(cell.prep).dump() << '|'
        << cell.train.internal_val_fraction << '|' << cell.train.seed;
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = entries_.find(key.str());
    if (it != entries_.end()) return it->second;

    const auto [train_scans, val_scans] =
        split_internal(data.train, cell.train.internal_val_fraction, cell.train.seed);
    Entry entry;
    entry.train = prepare_batchset(train_scans, cell.model, cell.prep);
    entry.internal_val = prepare_batchset(val_scans, cell.model, cell.prep);
    entry.unseen = prepare_batchset(data.unseen_val, cell.model, cell.prep);
    if (!data.test.empty()) entry.test = prepare_batchset(data.test, cell.model, cell.prep);
    for (const auto& [scan, reason] : entry.train.errors)
      std::cerr << "warning: skipping scan '" << scan << "': " << reason << '\n';
    return entries_.emplace(key.str(), std::move(entry)).first->second;
  }

 private:
  std::mutex mutex_;
  std::map<std::string, Entry> entries_;
};

CellOutcome execute_cell(const GridCell& cell, const GridDataset& data,
                         const fs::path& results_dir, BatchsetCache& cache) {
  CellOutcome outcome;
  outcome.fingerprint = cell_fingerprint(cell);
  outcome.cell = cell;
  const fs::path run_dir = results_dir / "runs" / outcome.fingerprint;
  try {
    const auto& sets = cache.get(cell, data);
    auto model = build_model(cell.model, cell.train.seed);
    apply_freeze_policy(*model, cell.train.extent);
    outcome.train_result = train(*model, cell.train, sets.train, sets.internal_val, run_dir);

    // Evaluations use the best-validation-accuracy state, reloaded from disk.
    LoadedCheckpoint best = reload_checkpoint(outcome.train_result.checkpoint_path);
    const Evaluation val_eval = evaluate_batchset(*best.model, sets.internal_val);
    outcome.val_report = make_eval_report(outcome.fingerprint, sets.internal_val.y,
                                          val_eval.preds, val_eval.probs);
    const Evaluation unseen_eval = evaluate_batchset(*best.model, sets.unseen);
    outcome.unseen_report = make_eval_report(outcome.fingerprint, sets.unseen.y,
                                             unseen_eval.preds, unseen_eval.probs);
    if (sets.test.size() > 0) {
      const Evaluation test_eval = evaluate_batchset(*best.model, sets.test);
      outcome.test_distribution = predict_distribution(test_eval.preds);
      outcome.has_test = true;
    }
  } catch (const std::exception& e) {
    outcome.failed = true;
    outcome.failure_reason = e.what();
  }
  write_text_file(run_dir / "cell.json",
                  outcome_to_json(outcome, data.manifest_hash).dump(2) + "\n");
  return outcome;
}

std::string status_line(const CellOutcome& o) {
  if (o.failed) return o.fingerprint + "  FAILED: " + o.failure_reason;
  char buf[128];
  std::snprintf(buf, sizeof(buf), "  f1_unseen=%.1f auroc_unseen=%.1f best_epoch=%d",
                o.unseen_report.f1_macro, o.unseen_report.auroc_macro,
                o.train_result.best_epoch);
  return o.fingerprint + buf;
}

}  // namespace

GridResult run_grid(const std::vector<GridCell>& cells, const GridDataset& data,
                    const fs::path& results_dir, const GridOptions& options) {
  if (cells.empty()) throw ArgumentError("grid has no cells");
  fs::create_directories(results_dir);
  GridResult result;
  result.cells.resize(cells.size());

  BatchsetCache cache;
  std::mutex result_mutex;
  std::atomic<size_t> next{0};

  auto worker = [&]() {
    while (true) {
      const size_t i = next.fetch_add(1);
      if (i >= cells.size()) break;
      const GridCell& cell = cells[i];
      const std::string fp = cell_fingerprint(cell);
      const fs::path cell_file = results_dir / "runs" / fp / "cell.json";

      CellOutcome outcome;
      bool resumed = false;
      if (options.resume && fs::exists(cell_file)) {
        try {
          const auto j = nlohmann::json::parse(read_text_file(cell_file));
          if (j.value("dataset_hash", "") == data.manifest_hash) {
            outcome = outcome_from_json(j);
            outcome.skipped = true;
            resumed = true;
          }
        } catch (const std::exception&) {
          resumed = false;  // unreadable outcome: re-execute
        }
      }
      if (!resumed) outcome = execute_cell(cell, data, results_dir, cache);

      std::lock_guard<std::mutex> lock(result_mutex);
      if (options.verbose)
        std::cerr << (outcome.skipped ? "[skip] " : "[cell] ") << status_line(outcome) << '\n';
      if (outcome.skipped)
        ++result.skipped;
      else
        ++result.executed;
      if (outcome.failed) ++result.failed;
      result.cells[i] = std::move(outcome);
    }
  };

  const int workers = std::max(1, options.workers);
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < workers; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  write_grid_outputs(result, results_dir);
  return result;
}

void write_grid_outputs(const GridResult& result, const fs::path& results_dir) {
  CsvTable summary;
  summary.header = {"fingerprint", "model",          "extent",        "settings",
                    "seed",        "status",         "failure_reason", "best_epoch",
                    "best_val_accuracy", "stopped_early", "auroc_val",  "auroc_unseen",
                    "f1_val",      "f1_unseen",      "pred_mild",     "pred_moderate",
                    "pred_severe", "pred_critical",  "checkpoint"};
  char buf[64];
  for (const auto& o : result.cells) {
    std::vector<std::string> row{o.fingerprint, to_string(o.cell.model.arch),
                                 to_string(o.cell.train.extent), settings_string(o.cell.train),
                                 std::to_string(o.cell.train.seed)};
    if (o.failed) {
      row.insert(row.end(), {"failed", o.failure_reason, "", "", "", "", "", "", "",
                             "", "", "", "", ""});
    } else {
      row.emplace_back("ok");
      row.emplace_back("");
      row.push_back(std::to_string(o.train_result.best_epoch));
      std::snprintf(buf, sizeof(buf), "%.9g", o.train_result.best_val_accuracy);
      row.emplace_back(buf);
      row.push_back(o.train_result.stopped_early ? "true" : "false");
      for (const double v : {o.val_report.auroc_macro, o.unseen_report.auroc_macro,
                             o.val_report.f1_macro, o.unseen_report.f1_macro}) {
        std::snprintf(buf, sizeof(buf), "%.4f", v);
        row.emplace_back(buf);
      }
      for (int c = 0; c < kNumClasses; ++c)
        row.push_back(o.has_test ? std::to_string(o.test_distribution[c]) : "");
      row.push_back(o.train_result.checkpoint_path.string());
    }
    summary.rows.push_back(std::move(row));
  }
  write_csv(results_dir / "summary.csv", summary);

  // One table per fine-tuning extent, mirroring the two-table study design.
  for (const FineTuneExtent extent :
       {FineTuneExtent::last_layer_only, FineTuneExtent::all_layers}) {
    std::vector<ReportRow> rows;
    for (const auto& o : result.cells) {
      if (o.failed || o.cell.train.extent != extent) continue;
      ReportRow row;
      row.model = to_string(o.cell.model.arch);
      row.settings = settings_string(o.cell.train);
      row.val = o.val_report;
      row.unseen = o.unseen_report;
      row.test_distribution = o.test_distribution;
      row.has_test_distribution = o.has_test;
      rows.push_back(std::move(row));
    }
    const std::string name = extent == FineTuneExtent::all_layers ? "all_layers" : "last_layer";
    if (rows.empty()) continue;
    const TableLayout layout = extent == FineTuneExtent::all_layers ? TableLayout::table2
                                                                    : TableLayout::table1;
    write_text_file(results_dir / ("table_" + name + ".txt"), emit_report(rows, layout));
    write_csv(results_dir / ("table_" + name + ".csv"), report_to_csv(rows, layout));
  }
}

const CellOutcome* pick_best_cell(const GridResult& result) {
  const CellOutcome* best = nullptr;
  for (const auto& o : result.cells) {
    if (o.failed) continue;
    if (!best || o.unseen_report.f1_macro > best->unseen_report.f1_macro) best = &o;
  }
  return best;
}

RetrainOutcome retrain_final(const GridCell& cell, const GridDataset& data,
                             const fs::path& results_dir) {
  if (data.test.empty()) throw ConfigError("retrain-final needs a test split on disk");

  // Union of training and unseen-validation scans, re-split internally.
  std::vector<LabeledScan> pool = data.train;
  for (auto s : data.unseen_val) {
    s.volume.split = Split::train;
    pool.push_back(std::move(s));
  }
  const auto [train_scans, val_scans] =
      split_internal(pool, cell.train.internal_val_fraction, cell.train.seed);

  RetrainOutcome out;
  out.fingerprint = cell_fingerprint(cell);
  const fs::path run_dir = results_dir / "retrain_final" / out.fingerprint;

  const Batchset train_set = prepare_batchset(train_scans, cell.model, cell.prep);
  const Batchset val_set = prepare_batchset(val_scans, cell.model, cell.prep);
  Batchset test_set = prepare_batchset(data.test, cell.model, cell.prep);
  if (!test_set.errors.empty()) {
    std::string msg = "test scans failed preprocessing:";
    for (const auto& [scan, reason] : test_set.errors) msg += " " + scan + " (" + reason + ")";
    throw DataError(msg);  // the prediction file must cover every test scan
  }

  auto model = build_model(cell.model, cell.train.seed);
  apply_freeze_policy(*model, cell.train.extent);
  out.train_result = train(*model, cell.train, train_set, val_set, run_dir);

  LoadedCheckpoint best = reload_checkpoint(out.train_result.checkpoint_path);
  const Evaluation test_eval = evaluate_batchset(*best.model, test_set);
  std::vector<std::pair<std::string, int>> preds;
  for (size_t i = 0; i < test_set.scan_ids.size(); ++i)
    preds.emplace_back(test_set.scan_ids[i], test_eval.preds[i]);
  out.predictions_path = run_dir / "predictions.csv";
  emit_predictions(preds, out.predictions_path);
  out.n_predictions = static_cast<int64_t>(preds.size());
  out.test_distribution = predict_distribution(test_eval.preds);
  return out;
}

}  // namespace ctg
