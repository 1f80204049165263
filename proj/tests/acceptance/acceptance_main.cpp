// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. argv[1] is the path of the ctgrader CLI binary (used by the
// end-to-end criterion).

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "ctgrader/gridrunner.hpp"
#include "ctgrader/nn/optim.hpp"
#include "ctgrader/synthkit.hpp"

using namespace ctg;

namespace {

struct CheckFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void check(bool cond, const std::string& what) {
  if (!cond) throw CheckFailure(what);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Shared state between criteria (the training-sanity run feeds the
// checkpoint-round-trip criterion).
struct Context {
  fs::path scratch;
  std::string ctgrader_bin;
  fs::path sanity_checkpoint;
  Batchset sanity_val;
  double sanity_best_val_accuracy = 0.0;
};

// ---------------------------------------------------------------------------
// Criterion 1: metric oracles on random instances.

double f1_macro_bruteforce(const std::vector<int>& truth, const std::vector<int>& preds) {
  double sum = 0.0;
  for (int c = 0; c < kNumClasses; ++c) {
    int64_t tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < truth.size(); ++i) {
      if (truth[i] == c && preds[i] == c) ++tp;
      if (truth[i] != c && preds[i] == c) ++fp;
      if (truth[i] == c && preds[i] != c) ++fn;
    }
    const double pr = tp + fp > 0 ? double(tp) / (tp + fp) : 0.0;
    const double rc = tp + fn > 0 ? double(tp) / (tp + fn) : 0.0;
    sum += pr + rc > 0 ? 2.0 * pr * rc / (pr + rc) : 0.0;
  }
  return 100.0 * sum / kNumClasses;
}

double auc_pairwise(const std::vector<double>& scores, const std::vector<char>& pos) {
  double concordant = 0.0;
  int64_t pairs = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (!pos[i]) continue;
    for (size_t j = 0; j < scores.size(); ++j) {
      if (pos[j]) continue;
      ++pairs;
      if (scores[i] > scores[j]) concordant += 1.0;
      else if (scores[i] == scores[j]) concordant += 0.5;
    }
  }
  return concordant / pairs;
}

void criterion_metric_oracles(Context&) {
  const auto t0 = std::chrono::steady_clock::now();
  nn::Rng rng(404);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + int(rng.uniform_int(120));
    std::vector<int> truth(n), preds(n);
    for (int i = 0; i < n; ++i) {
      truth[i] = int(rng.uniform_int(kNumClasses));
      preds[i] = int(rng.uniform_int(kNumClasses));
    }
    const double mine = f1_macro(ConfusionMatrix::from_predictions(truth, preds));
    check(std::abs(mine - f1_macro_bruteforce(truth, preds)) < 1e-9,
          "f1_macro deviates from the brute-force oracle");
  }
  int done = 0;
  while (done < 1000) {
    const int n = 2 + int(rng.uniform_int(29));
    nn::Tensor probs({n, kNumClasses});
    for (int i = 0; i < n; ++i) {
      float sum = 0.0f;
      for (int c = 0; c < kNumClasses; ++c) {
        float v = static_cast<float>(std::exp(rng.normal()));
        if (rng.uniform() < 0.15) v = 1.0f;
        probs.data[i * kNumClasses + c] = v;
        sum += v;
      }
      for (int c = 0; c < kNumClasses; ++c) probs.data[i * kNumClasses + c] /= sum;
    }
    std::vector<int> labels(n);
    for (int i = 0; i < n; ++i) labels[i] = int(rng.uniform_int(kNumClasses));
    bool valid = false;
    for (int c = 0; c < kNumClasses && !valid; ++c) {
      int64_t k = 0;
      for (int l : labels) k += l == c;
      valid = k > 0 && k < n;
    }
    if (!valid) continue;
    double oracle = 0.0;
    int considered = 0;
    for (int c = 0; c < kNumClasses; ++c) {
      std::vector<double> scores(n);
      std::vector<char> pos(n);
      int64_t n_pos = 0;
      for (int i = 0; i < n; ++i) {
        scores[i] = probs.data[i * kNumClasses + c];
        pos[i] = labels[i] == c;
        n_pos += pos[i];
      }
      if (n_pos == 0 || n_pos == n) continue;
      oracle += auc_pairwise(scores, pos);
      ++considered;
    }
    check(std::abs(auroc_macro(probs, labels) - 100.0 * oracle / considered) < 1e-9,
          "auroc_macro deviates from the pairwise oracle");
    ++done;
  }
  check(seconds_since(t0) < 30.0, "metric oracle sweep exceeded 30 s");
}

// ---------------------------------------------------------------------------
// Criterion 2: fixed points of Eq. 1 and the rank-statistic AUROC.

void criterion_fixed_points(Context&) {
  ConfusionMatrix perfect;
  for (int c = 0; c < kNumClasses; ++c) perfect.counts[c][c] = 10;
  check(std::abs(f1_macro(perfect) - 100.0) < 1e-12, "perfect predictions must score 100.0");

  std::vector<int> truth, preds;
  for (int c = 0; c < kNumClasses; ++c)
    for (int i = 0; i < 25; ++i) {
      truth.push_back(c);
      preds.push_back(2);
    }
  check(std::abs(f1_macro(ConfusionMatrix::from_predictions(truth, preds)) - 10.0) < 1e-12,
        "all-one-class predictor on balanced truth must score 10.0");

  nn::Tensor constant({12, kNumClasses});
  for (auto& v : constant.data) v = 0.25f;
  std::vector<int> labels(12);
  for (int i = 0; i < 12; ++i) labels[i] = i % kNumClasses;
  check(std::abs(auroc_macro(constant, labels) - 50.0) < 1e-12,
        "degenerate constant scores must give AUROC 50.0");
}

// ---------------------------------------------------------------------------
// Criterion 3: slice selection against the decimal-arithmetic oracle.

void criterion_slice_selection(Context&) {
  const auto t0 = std::chrono::steady_clock::now();
  for (int64_t n = 1; n <= 1000; ++n) {
    const int64_t q = n / 4;
    int64_t expected;
    switch (n % 4) {
      case 0: expected = q; break;
      case 1: expected = q; break;
      case 2: expected = q % 2 == 0 ? q : q + 1; break;  // exact tie, half to even
      default: expected = q + 1; break;
    }
    expected = std::clamp<int64_t>(expected, 0, n - 1);
    check(select_center_index(n, 0.25) == expected,
          "select_center_index deviates at n=" + std::to_string(n));
  }
  check(seconds_since(t0) < 1.0, "slice-selection sweep exceeded 1 s");
}

// ---------------------------------------------------------------------------
// Criterion 4: mask properties on synthetic slices.

void criterion_mask_properties(Context& ctx) {
  const auto t0 = std::chrono::steady_clock::now();
  nn::Rng rng(77);
  const fs::path dir = ctx.scratch / "mask_slices";
  fs::create_directories(dir);
  double worst_recovery = 1.0;
  for (int i = 0; i < 50; ++i) {
    const double q = (i % 10) * 0.1;
    const SynthSlice slice = make_synth_slice(96, q, 0.0, rng);
    const fs::path p = dir / ("s" + std::to_string(i) + ".jpg");
    write_jpeg_gray(p, slice.image, 90);
    const LungMask lm = build_lung_mask(decode_image_gray(p));

    const int h = lm.mask.h, w = lm.mask.w;
    for (int x = 0; x < w; ++x)
      check(lm.mask.at(0, x) == 0 && lm.mask.at(h - 1, x) == 0,
            "mask touches a horizontal border");
    for (int y = 0; y < h; ++y)
      check(lm.mask.at(y, 0) == 0 && lm.mask.at(y, w - 1) == 0,
            "mask touches a vertical border");

    check(morphology_chain(lm.mask).px == lm.mask.px, "mask is not idempotent");

    int64_t hit = 0, total = 0;
    for (size_t k = 0; k < lm.mask.px.size(); ++k) {
      if (slice.lung_interior.px[k]) {
        ++total;
        hit += lm.mask.px[k];
      }
    }
    worst_recovery = std::min(worst_recovery, double(hit) / double(total));
  }
  check(worst_recovery >= 0.90, "planted-lung recovery below 90% (worst " +
                                    std::to_string(worst_recovery) + ")");
  check(seconds_since(t0) < 30.0, "mask property sweep exceeded 30 s");
}

// ---------------------------------------------------------------------------
// Criterion 5: freeze-policy invariant for every registry architecture.

void criterion_freeze_policy(Context&) {
  for (const Arch arch : arch_registry()) {
    const ModelSpec spec = default_model_spec(arch);
    auto model = build_model(spec, 42);
    apply_freeze_policy(*model, FineTuneExtent::last_layer_only);
    const uint64_t backbone_before = param_checksum(*model, false);
    const uint64_t full_before = param_checksum(*model, true);

    nn::Rng rng(7);
    nn::Tensor x({1, 3, spec.input_side, spec.input_side});
    for (auto& v : x.data) v = rng.normal() * 0.5f;
    nn::ForwardCtx fwd{true, &rng};
    const auto out = model->forward(nn::make_var(std::move(x)), fwd);
    nn::Var loss = nn::cross_entropy(out.logits, {1});
    if (out.aux_logits)
      loss = nn::add(loss, nn::mul_scalar(nn::cross_entropy(out.aux_logits, {1}), 0.4f));

    nn::Adam opt(model->trainable_params(), 1e-3f);
    opt.zero_grad();
    nn::backward(loss);
    opt.step();

    check(param_checksum(*model, false) == backbone_before,
          to_string(arch) + ": backbone changed under last-layer freeze");
    check(param_checksum(*model, true) != full_before,
          to_string(arch) + ": head did not change after an optimizer step");
  }
}

// ---------------------------------------------------------------------------
// Criterion 6: training sanity on the tiny-plus preset.

Batchset to_batchset(const std::vector<LabeledScan>& scans, const ModelSpec& spec,
                     const PreprocessOptions& opts) {
  Batchset set = prepare_batchset(scans, spec, opts);
  check(set.errors.empty(), "synthetic scans failed preprocessing");
  return set;
}

void criterion_training_sanity(Context& ctx) {
  const auto t0 = std::chrono::steady_clock::now();
  SynthSpec synth = tiny_synth_spec();
  synth.n_scans_per_class = 16;  // tiny-plus
  synth.seed = 21;
  const fs::path root = ctx.scratch / "sanity_data";
  generate_dataset(synth, root);
  const Dataset ds = load_dataset(root);
  check(ds.train.size() == 64, "tiny-plus preset must have 64 training scans");

  ModelSpec spec = default_model_spec(Arch::SqueezeNet);
  spec.input_side = 128;
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.optimizer = OptimKind::ADAM;
  cfg.lr = 0.001;
  cfg.max_epochs = 50;
  cfg.plateau_patience = 50;  // the epoch cap is the only stop here
  cfg.seed = 123;
  cfg.extent = FineTuneExtent::all_layers;

  // Training-sanity measures accuracy on the training data itself, so the
  // whole tiny-plus train split trains and the same batchset drives the
  // checkpoint bookkeeping.
  const Batchset train_set = to_batchset(ds.train, spec, PreprocessOptions{});
  const Batchset& val_set = train_set;

  std::vector<EpochLogRow> logs[2];
  for (int run = 0; run < 2; ++run) {
    auto model = build_model(spec, cfg.seed);
    apply_freeze_policy(*model, cfg.extent);
    const fs::path run_dir = ctx.scratch / ("sanity_run" + std::to_string(run));
    const TrainResult result = train(*model, cfg, train_set, val_set, run_dir);
    logs[run] = result.epoch_log;
    if (run == 0) {
      const Evaluation train_eval = evaluate_batchset(*model, train_set);
      check(train_eval.accuracy >= 0.95,
            "train accuracy after 50 epochs is " + std::to_string(train_eval.accuracy));
      ctx.sanity_checkpoint = result.checkpoint_path;
      ctx.sanity_val = val_set;
      ctx.sanity_best_val_accuracy = result.best_val_accuracy;
    }
  }
  check(logs[0].size() == logs[1].size(), "epoch log lengths differ between identical runs");
  for (size_t i = 0; i < logs[0].size(); ++i) {
    check(logs[0][i].train_loss == logs[1][i].train_loss &&
              logs[0][i].val_loss == logs[1][i].val_loss &&
              logs[0][i].val_accuracy == logs[1][i].val_accuracy,
          "epoch logs differ at epoch " + std::to_string(i + 1));
  }
  check(seconds_since(t0) < 600.0, "training sanity exceeded 10 minutes");
}

// ---------------------------------------------------------------------------
// Criterion 7: checkpoint round trip and the plateau fixed point.

void criterion_checkpoint_roundtrip(Context& ctx) {
  check(!ctx.sanity_checkpoint.empty(), "training-sanity checkpoint unavailable");
  LoadedCheckpoint loaded = reload_checkpoint(ctx.sanity_checkpoint);
  const Evaluation ev = evaluate_batchset(*loaded.model, ctx.sanity_val);
  check(ev.accuracy == ctx.sanity_best_val_accuracy,
        "reloaded accuracy differs from the recorded best");

  const std::vector<double> losses{1.0, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9};
  for (size_t end = 1; end < losses.size(); ++end)
    check(!plateau_should_stop({losses.begin(), losses.begin() + end}, 5, 0.0),
          "plateau fired before epoch 7");
  check(plateau_should_stop(losses, 5, 0.0), "plateau did not fire at epoch 7");
}

// ---------------------------------------------------------------------------
// Criterion 8: grid mechanics with a divergent cell and resume.

void criterion_grid_mechanics(Context& ctx) {
  SynthSpec synth = tiny_synth_spec();
  synth.n_scans_per_class = 3;
  synth.min_slices = 4;
  synth.max_slices = 5;
  synth.image_side = 64;
  synth.seed = 9;
  const fs::path root = ctx.scratch / "grid_data";
  generate_dataset(synth, root);
  const GridDataset data = load_grid_dataset(root);

  GridSpec spec;
  spec.archs = {Arch::SqueezeNet};
  spec.extents = {FineTuneExtent::last_layer_only, FineTuneExtent::all_layers};
  spec.batch_sizes = {16};
  spec.optim_lr = {{OptimKind::ADAM, 0.001}, {OptimKind::SGD, 0.001}};
  spec.seeds = {0};
  spec.max_epochs = 2;
  spec.plateau_patience = 2;
  spec.input_side = 64;
  auto cells = expand_grid(spec);  // the 2x2 grid
  check(cells.size() == 4, "2x2 grid must have 4 cells");
  // One deliberately divergent cell: SGD momentum at lr 1e6 grows without
  // bound (ADAM's normalized steps recover from the explosion).
  for (auto& cell : cells)
    if (cell.train.optimizer == OptimKind::SGD &&
        cell.train.extent == FineTuneExtent::all_layers) {
      cell.train.lr = 1e6;
      cell.train.max_epochs = 20;  // a few steps must pass before floats overflow
      cell.train.plateau_patience = 20;
    }

  const fs::path results = ctx.scratch / "grid_results";
  GridOptions opts;
  opts.verbose = false;
  const GridResult result = run_grid(cells, data, results, opts);
  check(result.executed == 4, "grid did not execute all cells");
  check(result.failed == 1, "expected exactly one failure row");
  int ok_cells = 0;
  for (const auto& o : result.cells) {
    if (o.failed) {
      check(o.cell.train.lr == 1e6, "the wrong cell failed");
      continue;
    }
    ++ok_cells;
    int64_t total = 0;
    for (const int64_t v : o.test_distribution) total += v;
    check(o.has_test && total == static_cast<int64_t>(data.test.size()),
          "test distribution does not sum to the test-set size");
  }
  check(ok_cells == 3, "healthy cells did not complete");

  const std::string table = read_text_file(results / "table_last_layer.txt");
  check(table.find("Pred. class distr.") != std::string::npos,
        "table misses the predicted-class-distribution column");
  check(table.find("BS16 SGD LR0.001") != std::string::npos,
        "table misses the settings string format");
  check(table.find("BS16 ADAM LR0.001") != std::string::npos,
        "table misses the ADAM settings row");

  GridOptions resume_opts;
  resume_opts.resume = true;
  resume_opts.verbose = false;
  const GridResult again = run_grid(cells, data, results, resume_opts);
  check(again.executed == 0, "resume re-executed completed cells");
  check(again.skipped == 4, "resume did not account for all cells");
}

// ---------------------------------------------------------------------------
// Criterion 9: end-to-end through the CLI binary.

int run_cli(const std::string& bin, const std::string& args, const fs::path& log) {
  const std::string cmd = bin + " " + args + " >" + log.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  if (rc == -1) return -1;
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

void criterion_end_to_end(Context& ctx) {
  const auto t0 = std::chrono::steady_clock::now();
  check(fs::exists(ctx.ctgrader_bin), "ctgrader binary not found at " + ctx.ctgrader_bin);
  const fs::path work = ctx.scratch / "e2e";
  fs::create_directories(work);
  const std::string data = (work / "data").string();
  const std::string results = (work / "results").string();

  check(run_cli(ctx.ctgrader_bin, "synth --tiny --seed 33 --out " + data,
                work / "synth.log") == 0,
        "synth subcommand failed");
  check(run_cli(ctx.ctgrader_bin, "manifest --root " + data, work / "manifest.log") == 0,
        "manifest subcommand failed");
  check(run_cli(ctx.ctgrader_bin,
                "manifest --root " + data + " --verify " + data + "/manifest.csv",
                work / "verify.log") == 0,
        "manifest --verify failed");
  check(read_text_file(work / "verify.log").find("0 discrepancies") != std::string::npos,
        "manifest verify did not report 0 discrepancies");

  const std::string grid_json = (work / "grid.json").string();
  write_text_file(grid_json, R"({
    "archs": ["SqueezeNet"],
    "extents": ["last", "all"],
    "batch_sizes": [16],
    "optim_lr": [["ADAM", 0.001]],
    "seeds": [0],
    "max_epochs": 3,
    "plateau_patience": 3,
    "input_side": 96
  })");
  check(run_cli(ctx.ctgrader_bin,
                "grid --data " + data + " --grid " + grid_json + " --out " + results,
                work / "grid.log") == 0,
        "grid subcommand failed");
  check(fs::exists(work / "results" / "summary.csv"), "grid produced no summary.csv");

  check(run_cli(ctx.ctgrader_bin, "retrain-final --data " + data + " --results " + results,
                work / "retrain.log") == 0,
        "retrain-final subcommand failed");

  // The prediction file covers every test scan with valid labels.
  fs::path predictions;
  for (const auto& entry : fs::recursive_directory_iterator(work / "results"))
    if (entry.path().filename() == "predictions.csv") predictions = entry.path();
  check(!predictions.empty(), "no predictions.csv written");
  const CsvTable preds = read_csv(predictions);
  const auto test_scans = discover_scans(fs::path(data) / "test", Split::test);
  check(preds.rows.size() == test_scans.size(),
        "prediction row count differs from the test-set size");
  check(preds.header == std::vector<std::string>{"scan_id", "severity"},
        "prediction file header mismatch");
  std::set<std::string> ids;
  for (const auto& row : preds.rows) {
    check(row.size() == 2, "malformed prediction row");
    parse_severity(row[1]);  // throws on invalid labels
    check(ids.insert(row[0]).second, "duplicate scan id in predictions");
  }

  // CLI contracts: unknown flags are usage errors, help exits cleanly.
  check(run_cli(ctx.ctgrader_bin, "--definitely-not-a-flag", work / "badflag.log") == 2,
        "unknown flag must exit with code 2");
  check(run_cli(ctx.ctgrader_bin, "train --help", work / "help.log") == 0,
        "train --help must exit 0");
  check(run_cli(ctx.ctgrader_bin, "eval --ckpt missing.ckpt --data " + data,
                work / "eval_missing.log") == 1,
        "runtime failure must exit with code 1");
  check(seconds_since(t0) < 1200.0, "end-to-end run exceeded 20 minutes");
}

}  // namespace

int main(int argc, char** argv) {
  Context ctx;
  ctx.ctgrader_bin = argc > 1 ? argv[1] : "build/tools/ctgrader";
  ctx.scratch = fs::temp_directory_path() / ("ctgrader_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(ctx.scratch);

  struct Criterion {
    int id;
    const char* name;
    std::function<void(Context&)> fn;
  };
  const std::vector<Criterion> criteria = {
      {1, "metric oracles match brute force within 1e-9", criterion_metric_oracles},
      {2, "Eq. 1 and AUROC fixed points", criterion_fixed_points},
      {3, "slice selection matches the decimal oracle on [1,1000]",
       criterion_slice_selection},
      {4, "mask border/idempotence/recovery properties", criterion_mask_properties},
      {5, "last-layer freeze leaves every backbone bit-exact", criterion_freeze_policy},
      {6, "scratch SqueezeNet reaches 95% train accuracy, deterministically",
       criterion_training_sanity},
      {7, "checkpoint round trip and plateau fixed point", criterion_checkpoint_roundtrip},
      {8, "grid survives a divergent cell and resumes cleanly", criterion_grid_mechanics},
      {9, "end-to-end synth -> manifest -> grid -> retrain -> predictions",
       criterion_end_to_end},
  };

  int failures = 0;
  for (const auto& criterion : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    std::string error;
    try {
      criterion.fn(ctx);
    } catch (const std::exception& e) {
      error = e.what();
    }
    const double dt = seconds_since(t0);
    if (error.empty()) {
      std::printf("[PASS] criterion %d: %s (%.1fs)\n", criterion.id, criterion.name, dt);
    } else {
      ++failures;
      std::printf("[FAIL] criterion %d: %s (%.1fs): %s\n", criterion.id, criterion.name, dt,
                  error.c_str());
    }
    std::fflush(stdout);
  }

  std::error_code ec;
  fs::remove_all(ctx.scratch, ec);
  if (failures) std::printf("%d of %zu criteria failed\n", failures, criteria.size());
  else std::printf("all %zu criteria passed\n", criteria.size());
  return failures;
}
