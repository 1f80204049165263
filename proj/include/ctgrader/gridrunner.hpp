#pragma once

#include <nlohmann/json.hpp>

#include "ctgrader/evaluator.hpp"
#include "ctgrader/trainer.hpp"

namespace ctg {

// The experiment grid: architectures x fine-tuning extents x batch sizes x
// (optimizer, learning rate) pairs x seeds, plus the trainer/preprocess knobs
// shared by every cell.
struct GridSpec {
  std::vector<Arch> archs;
  std::vector<FineTuneExtent> extents;
  std::vector<int> batch_sizes;
  std::vector<std::pair<OptimKind, double>> optim_lr;
  std::vector<uint64_t> seeds;

  int max_epochs = 500;
  int plateau_patience = 10;
  double plateau_min_delta = 1e-4;
  double internal_val_fraction = 0.2;
  WeightInit init = WeightInit::scratch;
  PreprocessOptions prep;
  std::optional<int> input_side;  // overrides each arch's canonical v
};

// Nine architectures x two extents x BS {16,32,64,512} x {ADAM, SGD} at
// LR 0.001, one seed: 144 cells.
GridSpec default_grid_spec();
GridSpec grid_spec_from_json(const nlohmann::json& j);

struct GridCell {
  ModelSpec model;
  TrainConfig train;
  PreprocessOptions prep;
};

nlohmann::json cell_config_json(const GridCell& cell);

// Cartesian product, deduplicated, sorted by (arch, extent, bs, opt, lr, seed).
std::vector<GridCell> expand_grid(const GridSpec& spec);

// Readable prefix plus a 16-hex-digit SHA-256 of the canonical cell config.
std::string cell_fingerprint(const GridCell& cell);

struct CellOutcome {
  std::string fingerprint;
  GridCell cell;
  bool failed = false;
  std::string failure_reason;
  bool skipped = false;  // satisfied from disk on resume
  TrainResult train_result;
  EvalReport val_report;     // internal validation split
  EvalReport unseen_report;  // unseen validation split
  std::array<int64_t, kNumClasses> test_distribution{};
  bool has_test = false;
};

struct GridResult {
  std::vector<CellOutcome> cells;
  int executed = 0;
  int skipped = 0;
  int failed = 0;
};

struct GridDataset {
  std::vector<LabeledScan> train;
  std::vector<LabeledScan> unseen_val;
  std::vector<ScanVolume> test;
  std::string manifest_hash;
};

GridDataset load_grid_dataset(const fs::path& root);

struct GridOptions {
  bool resume = false;
  int workers = 1;
  bool verbose = true;
};

// Executes every cell, isolating failures as failure rows; never aborts the
// grid. On resume, cells whose run directory already holds an outcome for the
// same dataset hash are not re-executed. Writes summary.csv and the per-extent
// tables under results_dir.
GridResult run_grid(const std::vector<GridCell>& cells, const GridDataset& data,
                    const fs::path& results_dir, const GridOptions& options = {});

void write_grid_outputs(const GridResult& result, const fs::path& results_dir);

// Highest unseen-val F1-macro among non-failed cells; nullptr if none.
const CellOutcome* pick_best_cell(const GridResult& result);

struct RetrainOutcome {
  std::string fingerprint;
  TrainResult train_result;
  fs::path predictions_path;
  int64_t n_predictions = 0;
  std::array<int64_t, kNumClasses> test_distribution{};
};

// Retrains the given configuration on train + unseen_val (internal validation
// re-split from the union) and writes the test prediction file.
RetrainOutcome retrain_final(const GridCell& cell, const GridDataset& data,
                             const fs::path& results_dir);

}  // namespace ctg
