#pragma once

#include <nlohmann/json.hpp>

#include "ctgrader/ingest.hpp"
#include "ctgrader/model_zoo.hpp"
#include "ctgrader/preprocess.hpp"

namespace ctg {

enum class OptimKind { ADAM, SGD };
std::string to_string(OptimKind o);
OptimKind parse_optim(const std::string& name);

struct TrainConfig {
  int batch_size = 16;
  OptimKind optimizer = OptimKind::ADAM;
  double lr = 0.001;
  double momentum = 0.9;  // SGD only
  int max_epochs = 500;
  int plateau_patience = 10;
  double plateau_min_delta = 1e-4;
  FineTuneExtent extent = FineTuneExtent::all_layers;
  uint64_t seed = 0;
  double internal_val_fraction = 0.2;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

// "BS16 ADAM LR0.001", the settings column of the result tables.
std::string settings_string(const TrainConfig& cfg);

struct EpochLogRow {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

struct TrainResult {
  int best_epoch = 0;
  double best_val_accuracy = 0.0;
  std::vector<EpochLogRow> epoch_log;
  fs::path checkpoint_path;
  bool stopped_early = false;
};

// Stratified by class, deterministic in seed; classes with fewer than two
// scans contribute everything to the train side (with a warning).
std::pair<std::vector<LabeledScan>, std::vector<LabeledScan>> split_internal(
    const std::vector<LabeledScan>& train_scans, double fraction, uint64_t seed);

// True iff none of the last `patience` epochs improved the running-best loss
// by more than min_delta.
bool plateau_should_stop(const std::vector<double>& val_losses, int patience, double min_delta);

// Checkpoint policy: strict improvement only, so the earliest epoch wins ties.
struct BestTracker {
  int best_epoch = 0;
  double best_accuracy = -1.0;

  bool observe(int epoch, double accuracy) {
    if (accuracy > best_accuracy) {
      best_accuracy = accuracy;
      best_epoch = epoch;
      return true;
    }
    return false;
  }
};

// Preprocessed scans ready for batching.
struct Batchset {
  std::vector<nn::Tensor> x;  // each [3, v, v]
  std::vector<int> y;         // empty for unlabeled (test) data
  std::vector<std::string> scan_ids;
  // Scans dropped because a slice failed to decode: (scan_id, reason).
  std::vector<std::pair<std::string, std::string>> errors;

  size_t size() const { return x.size(); }
};

Batchset prepare_batchset(const std::vector<LabeledScan>& scans, const ModelSpec& spec,
                          const PreprocessOptions& opts);
Batchset prepare_batchset(const std::vector<ScanVolume>& scans, const ModelSpec& spec,
                          const PreprocessOptions& opts);

struct Evaluation {
  nn::Tensor probs;  // [N, K] softmax rows
  std::vector<int> preds;
  double loss = 0.0;      // mean cross-entropy (labeled data only)
  double accuracy = 0.0;  // labeled data only
};

// Eval-mode forward in fixed-size chunks, so results are bit-identical no
// matter what batch size training used.
Evaluation evaluate_batchset(Model& model, const Batchset& data);

// Fine-tunes the (already frozen-per-extent) model. Writes config.json,
// log.csv and best.ckpt into run_dir. Throws TrainingDiverged on non-finite
// loss.
TrainResult train(Model& model, const TrainConfig& cfg, const Batchset& train_data,
                  const Batchset& val_data, const fs::path& run_dir);

struct LoadedCheckpoint {
  std::unique_ptr<Model> model;
  ModelSpec spec;
  TrainConfig config;
  int best_epoch = 0;
  double best_val_accuracy = 0.0;
};

// Self-contained reload; needs no pretrained-weight access. When
// expected_spec is given, any mismatch with the stored spec is an error.
LoadedCheckpoint reload_checkpoint(const fs::path& path,
                                   const std::optional<ModelSpec>& expected_spec = std::nullopt);

}  // namespace ctg
