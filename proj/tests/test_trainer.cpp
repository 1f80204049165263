#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ctgrader/trainer.hpp"
#include "test_support.hpp"

using namespace ctg;
using ctg::test::TempDir;

namespace {

LabeledScan fake_scan(const std::string& id, Severity label) {
  LabeledScan s;
  s.volume.scan_id = id;
  s.volume.n = 1;
  s.label = label;
  return s;
}

std::vector<LabeledScan> balanced_scans(int per_class) {
  std::vector<LabeledScan> scans;
  int next = 0;
  for (int c = 0; c < kNumClasses; ++c)
    for (int i = 0; i < per_class; ++i)
      scans.push_back(fake_scan("scan_" + std::to_string(next++), static_cast<Severity>(c)));
  return scans;
}

// Separable toy data for real train() runs: class mean shifts the whole image.
Batchset planted_batchset(int per_class, int side, uint64_t seed) {
  Batchset set;
  nn::Rng rng(seed);
  for (int c = 0; c < kNumClasses; ++c) {
    for (int i = 0; i < per_class; ++i) {
      nn::Tensor x({3, side, side});
      const float base = -1.0f + 0.66f * c;
      for (auto& v : x.data) v = base + 0.1f * rng.normal();
      set.x.push_back(std::move(x));
      set.y.push_back(c);
      set.scan_ids.push_back("p" + std::to_string(c) + "_" + std::to_string(i));
    }
  }
  return set;
}

TrainConfig quick_config(int epochs) {
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.max_epochs = epochs;
  cfg.plateau_patience = epochs;  // no early stop in the short fixtures
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST_CASE("settings string formats like the result tables") {
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.optimizer = OptimKind::ADAM;
  cfg.lr = 0.001;
  CHECK(settings_string(cfg) == "BS16 ADAM LR0.001");
  cfg.batch_size = 512;
  cfg.optimizer = OptimKind::SGD;
  cfg.lr = 0.01;
  CHECK(settings_string(cfg) == "BS512 SGD LR0.01");
}

TEST_CASE("train config json round trip") {
  TrainConfig cfg;
  cfg.batch_size = 64;
  cfg.optimizer = OptimKind::SGD;
  cfg.lr = 0.01;
  cfg.extent = FineTuneExtent::last_layer_only;
  cfg.seed = 17;
  const TrainConfig back = train_config_from_json(to_json(cfg));
  CHECK(back.batch_size == 64);
  CHECK(back.optimizer == OptimKind::SGD);
  CHECK(back.lr == 0.01);
  CHECK(back.extent == FineTuneExtent::last_layer_only);
  CHECK(back.seed == 17);
}

TEST_CASE("stratified internal split") {
  const auto scans = balanced_scans(10);  // 40 scans

  SUBCASE("fraction 0.2 gives 32 train + 8 val, 2 per class") {
    const auto [train_side, val_side] = split_internal(scans, 0.2, 7);
    CHECK(train_side.size() == 32);
    CHECK(val_side.size() == 8);
    std::array<int, kNumClasses> val_counts{};
    for (const auto& s : val_side) ++val_counts[static_cast<int>(s.label)];
    for (int c = 0; c < kNumClasses; ++c) CHECK(val_counts[c] == 2);
    for (const auto& s : val_side) CHECK(s.volume.split == Split::internal_val);
    // Disjoint and exhaustive.
    std::set<std::string> ids;
    for (const auto& s : train_side) ids.insert(s.volume.scan_id);
    for (const auto& s : val_side) CHECK(ids.insert(s.volume.scan_id).second);
    CHECK(ids.size() == 40);
  }
  SUBCASE("same seed reproduces the partition") {
    const auto a = split_internal(scans, 0.2, 11);
    const auto b = split_internal(scans, 0.2, 11);
    REQUIRE(a.second.size() == b.second.size());
    for (size_t i = 0; i < a.second.size(); ++i)
      CHECK(a.second[i].volume.scan_id == b.second[i].volume.scan_id);
  }
  SUBCASE("different seeds differ") {
    bool any_diff = false;
    const auto a = split_internal(scans, 0.2, 1);
    for (uint64_t seed = 2; seed < 8 && !any_diff; ++seed) {
      const auto b = split_internal(scans, 0.2, seed);
      for (size_t i = 0; i < a.second.size(); ++i)
        any_diff = any_diff || a.second[i].volume.scan_id != b.second[i].volume.scan_id;
    }
    CHECK(any_diff);
  }
  SUBCASE("a class with one scan contributes it to train") {
    std::vector<LabeledScan> skewed = balanced_scans(5);
    skewed.push_back(fake_scan("lonely", Severity::critical));
    std::vector<LabeledScan> trimmed;
    for (const auto& s : skewed)
      if (s.label != Severity::critical || s.volume.scan_id == "lonely")
        trimmed.push_back(s);
    const auto [train_side, val_side] = split_internal(trimmed, 0.2, 5);
    bool lonely_in_train = false;
    for (const auto& s : train_side) lonely_in_train |= s.volume.scan_id == "lonely";
    CHECK(lonely_in_train);
  }
  SUBCASE("invalid fraction is rejected") {
    CHECK_THROWS_AS(split_internal(scans, 0.0, 1), ArgumentError);
    CHECK_THROWS_AS(split_internal(scans, 1.0, 1), ArgumentError);
  }
}

TEST_CASE("plateau detector") {
  SUBCASE("steady improvement never fires") {
    std::vector<double> losses;
    for (int i = 0; i < 40; ++i) {
      losses.push_back(4.0 - 0.1 * i);
      CHECK_FALSE(plateau_should_stop(losses, 5, 0.01));
    }
  }
  SUBCASE("flat tail fires exactly at the documented epoch") {
    const std::vector<double> losses{1.0, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9};
    for (size_t end = 1; end < losses.size(); ++end) {
      const std::vector<double> prefix(losses.begin(), losses.begin() + end);
      CHECK_FALSE(plateau_should_stop(prefix, 5, 0.0));
    }
    CHECK(plateau_should_stop(losses, 5, 0.0));  // fires at epoch 7
  }
  SUBCASE("a single epoch never fires") {
    CHECK_FALSE(plateau_should_stop({1.0}, 1, 0.0));
  }
  SUBCASE("improvements below min_delta do not reset the window") {
    // Each epoch improves by 0.001 < min_delta 0.01: a plateau.
    std::vector<double> losses{1.0};
    for (int i = 1; i < 5; ++i) losses.push_back(1.0 - 0.001 * i);
    CHECK(plateau_should_stop(losses, 4, 0.01));
  }
  SUBCASE("invalid arguments are rejected") {
    CHECK_THROWS_AS(plateau_should_stop({1.0}, 0, 0.0), ArgumentError);
    CHECK_THROWS_AS(plateau_should_stop({1.0}, 2, -0.1), ArgumentError);
  }
}

TEST_CASE("best tracker keeps the earliest epoch on ties") {
  BestTracker tracker;
  const std::vector<double> accs{0.3, 0.6, 0.6, 0.5};
  std::vector<bool> wrote;
  for (size_t i = 0; i < accs.size(); ++i)
    wrote.push_back(tracker.observe(static_cast<int>(i) + 1, accs[i]));
  CHECK(tracker.best_epoch == 2);
  CHECK(tracker.best_accuracy == 0.6);
  CHECK(wrote == std::vector<bool>{true, true, false, false});
}

TEST_CASE("training on a separable fixture improves and checkpoints") {
  TempDir tmp("train");
  ModelSpec spec = default_model_spec(Arch::SqueezeNet);
  spec.input_side = 64;
  auto model = build_model(spec, 11);
  apply_freeze_policy(*model, FineTuneExtent::all_layers);

  const Batchset train_set = planted_batchset(4, 64, 1);
  const Batchset val_set = planted_batchset(2, 64, 2);
  const TrainConfig cfg = quick_config(8);
  const TrainResult result = train(*model, cfg, train_set, val_set, tmp / "run");

  CHECK(result.epoch_log.size() <= 8);
  CHECK(result.best_epoch >= 1);
  CHECK(fs::exists(result.checkpoint_path));
  CHECK(fs::exists(tmp / "run" / "config.json"));
  CHECK(fs::exists(tmp / "run" / "log.csv"));

  // The config file echoes the settings string.
  const std::string config = read_text_file(tmp / "run" / "config.json");
  CHECK(config.find("BS8 ADAM LR0.001") != std::string::npos);

  // best_val_accuracy is the max of the log, at its earliest epoch.
  double max_acc = -1.0;
  int earliest = 0;
  for (const auto& row : result.epoch_log)
    if (row.val_accuracy > max_acc) {
      max_acc = row.val_accuracy;
      earliest = row.epoch;
    }
  CHECK(result.best_val_accuracy == max_acc);
  CHECK(result.best_epoch == earliest);
}

TEST_CASE("checkpoint reload reproduces the recorded accuracy bit-exactly") {
  TempDir tmp("ckpt");
  ModelSpec spec = default_model_spec(Arch::SqueezeNet);
  spec.input_side = 64;
  auto model = build_model(spec, 21);
  apply_freeze_policy(*model, FineTuneExtent::all_layers);

  const Batchset train_set = planted_batchset(3, 64, 5);
  const Batchset val_set = planted_batchset(2, 64, 6);
  const TrainResult result = train(*model, quick_config(4), train_set, val_set, tmp / "run");

  LoadedCheckpoint loaded = reload_checkpoint(result.checkpoint_path);
  CHECK(loaded.best_epoch == result.best_epoch);
  const Evaluation ev = evaluate_batchset(*loaded.model, val_set);
  CHECK(ev.accuracy == result.best_val_accuracy);  // exact, not approximate

  SUBCASE("mismatched expected spec names the field") {
    ModelSpec other = spec;
    other.input_side = 96;
    try {
      reload_checkpoint(result.checkpoint_path, other);
      FAIL("expected LoadError");
    } catch (const LoadError& e) {
      CHECK(std::string(e.what()).find("input_side") != std::string::npos);
    }
  }
  SUBCASE("corrupt checkpoint is a load error") {
    write_text_file(tmp / "bad.ckpt", "garbage");
    CHECK_THROWS_AS(reload_checkpoint(tmp / "bad.ckpt"), LoadError);
  }
  SUBCASE("matching expected spec passes") {
    CHECK_NOTHROW(reload_checkpoint(result.checkpoint_path, spec));
  }
}

TEST_CASE("training is deterministic for a fixed seed") {
  ModelSpec spec = default_model_spec(Arch::SqueezeNet);
  spec.input_side = 64;
  const Batchset train_set = planted_batchset(3, 64, 7);
  const Batchset val_set = planted_batchset(2, 64, 8);

  std::vector<EpochLogRow> logs[2];
  for (int run = 0; run < 2; ++run) {
    TempDir tmp("det");
    auto model = build_model(spec, 33);
    apply_freeze_policy(*model, FineTuneExtent::all_layers);
    logs[run] = train(*model, quick_config(4), train_set, val_set, tmp / "run").epoch_log;
  }
  REQUIRE(logs[0].size() == logs[1].size());
  for (size_t i = 0; i < logs[0].size(); ++i) {
    CHECK(logs[0][i].train_loss == logs[1][i].train_loss);
    CHECK(logs[0][i].val_loss == logs[1][i].val_loss);
    CHECK(logs[0][i].val_accuracy == logs[1][i].val_accuracy);
  }
}

TEST_CASE("frozen backbone stays bit-exact through a training run") {
  TempDir tmp("freeze");
  ModelSpec spec = default_model_spec(Arch::SqueezeNet);
  spec.input_side = 64;
  auto model = build_model(spec, 3);
  apply_freeze_policy(*model, FineTuneExtent::last_layer_only);
  const uint64_t before = param_checksum(*model, false);
  TrainConfig cfg = quick_config(3);
  cfg.extent = FineTuneExtent::last_layer_only;
  train(*model, cfg, planted_batchset(3, 64, 9), planted_batchset(1, 64, 10), tmp / "run");
  CHECK(param_checksum(*model, false) == before);
}

TEST_CASE("divergent learning rate aborts the run") {
  TempDir tmp("diverge");
  ModelSpec spec = default_model_spec(Arch::SqueezeNet);
  spec.input_side = 64;
  auto model = build_model(spec, 4);
  apply_freeze_policy(*model, FineTuneExtent::all_layers);
  TrainConfig cfg = quick_config(5);
  cfg.optimizer = OptimKind::SGD;
  cfg.lr = 1e6;
  CHECK_THROWS_AS(
      train(*model, cfg, planted_batchset(3, 64, 11), planted_batchset(1, 64, 12), tmp / "run"),
      TrainingDiverged);
}

TEST_CASE("empty inputs are rejected") {
  TempDir tmp("emptyset");
  ModelSpec spec = default_model_spec(Arch::SqueezeNet);
  spec.input_side = 64;
  auto model = build_model(spec, 4);
  const Batchset empty;
  CHECK_THROWS_AS(train(*model, quick_config(1), empty, planted_batchset(1, 64, 1), tmp / "r"),
                  ArgumentError);
  CHECK_THROWS_AS(train(*model, quick_config(1), planted_batchset(1, 64, 1), empty, tmp / "r"),
                  ArgumentError);
}
