#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "ctgrader/gridrunner.hpp"
#include "ctgrader/synthkit.hpp"
#include "test_support.hpp"

using namespace ctg;
using ctg::test::TempDir;

namespace {

GridSpec micro_grid() {
  GridSpec spec;
  spec.archs = {Arch::SqueezeNet};
  spec.extents = {FineTuneExtent::last_layer_only, FineTuneExtent::all_layers};
  spec.batch_sizes = {8};
  spec.optim_lr = {{OptimKind::ADAM, 0.001}};
  spec.seeds = {0};
  spec.max_epochs = 2;
  spec.plateau_patience = 2;
  spec.input_side = 64;
  return spec;
}

fs::path make_micro_dataset(const TempDir& tmp) {
  SynthSpec synth = tiny_synth_spec();
  synth.n_scans_per_class = 3;
  synth.min_slices = 4;
  synth.max_slices = 5;
  synth.image_side = 64;
  synth.seed = 5;
  const fs::path root = tmp / "data";
  generate_dataset(synth, root);
  return root;
}

}  // namespace

TEST_CASE("grid expansion arithmetic") {
  SUBCASE("2 archs x 1 extent x 2 bs x 2 opt-lr x 1 seed = 8 cells") {
    GridSpec spec;
    spec.archs = {Arch::AlexNet, Arch::VGG};
    spec.extents = {FineTuneExtent::all_layers};
    spec.batch_sizes = {16, 128};
    spec.optim_lr = {{OptimKind::ADAM, 0.001}, {OptimKind::SGD, 0.01}};
    spec.seeds = {0};
    CHECK(expand_grid(spec).size() == 8);
  }
  SUBCASE("duplicate batch sizes collapse") {
    GridSpec spec = micro_grid();
    spec.batch_sizes = {16, 16};
    spec.extents = {FineTuneExtent::all_layers};
    CHECK(expand_grid(spec).size() == 1);
  }
  SUBCASE("the default grid has 144 cells") {
    CHECK(expand_grid(default_grid_spec()).size() == 144);
  }
  SUBCASE("empty dimensions are an error") {
    GridSpec spec = micro_grid();
    spec.batch_sizes.clear();
    CHECK_THROWS_AS(expand_grid(spec), ArgumentError);
  }
}

TEST_CASE("grid expansion order is canonical and stable") {
  const auto a = expand_grid(default_grid_spec());
  const auto b = expand_grid(default_grid_spec());
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i)
    CHECK(cell_fingerprint(a[i]) == cell_fingerprint(b[i]));
  // Sorted by (arch, extent, bs, opt, lr, seed).
  for (size_t i = 1; i < a.size(); ++i) {
    const auto key = [](const GridCell& c) {
      return std::tuple(static_cast<int>(c.model.arch), static_cast<int>(c.train.extent),
                        c.train.batch_size, static_cast<int>(c.train.optimizer), c.train.lr,
                        c.train.seed);
    };
    CHECK(key(a[i - 1]) < key(a[i]));
  }
}

TEST_CASE("fingerprints are unique and config-sensitive") {
  const auto cells = expand_grid(default_grid_spec());
  std::set<std::string> fps;
  for (const auto& cell : cells) CHECK(fps.insert(cell_fingerprint(cell)).second);

  GridCell cell = cells[0];
  const std::string base = cell_fingerprint(cell);
  cell.prep.apply_mask = !cell.prep.apply_mask;
  CHECK(cell_fingerprint(cell) != base);  // preprocessing flags are part of the identity
}

TEST_CASE("grid spec json parsing") {
  const auto j = nlohmann::json::parse(R"({
    "archs": ["SqueezeNet", "AlexNet"],
    "extents": ["last"],
    "batch_sizes": [16, 32],
    "optim_lr": [["SGD", 0.01]],
    "seeds": [1, 2],
    "max_epochs": 7,
    "mask": false,
    "input_side": 96
  })");
  const GridSpec spec = grid_spec_from_json(j);
  CHECK(spec.archs == std::vector<Arch>{Arch::SqueezeNet, Arch::AlexNet});
  CHECK(spec.extents == std::vector<FineTuneExtent>{FineTuneExtent::last_layer_only});
  CHECK(spec.batch_sizes == std::vector<int>{16, 32});
  CHECK(spec.optim_lr.size() == 1);
  CHECK(spec.optim_lr[0].first == OptimKind::SGD);
  CHECK(spec.max_epochs == 7);
  CHECK_FALSE(spec.prep.apply_mask);
  REQUIRE(spec.input_side);
  CHECK(*spec.input_side == 96);
  const auto cells = expand_grid(spec);
  CHECK(cells.size() == 8);
  CHECK(cells[0].model.input_side == 96);
}

TEST_CASE("grid runs, records failures, and resumes") {
  TempDir tmp("grid");
  const fs::path data_root = make_micro_dataset(tmp);
  const GridDataset data = load_grid_dataset(data_root);
  CHECK(!data.manifest_hash.empty());

  auto cells = expand_grid(micro_grid());
  REQUIRE(cells.size() == 2);
  // Plant one deliberately divergent cell. SGD momentum at lr 1e6 grows the
  // weights without bound (ADAM's normalized steps can walk back from the
  // explosion); a few epochs push the activations past float range.
  GridCell divergent = cells[1];
  divergent.train.optimizer = OptimKind::SGD;
  divergent.train.lr = 1e6;
  divergent.train.max_epochs = 20;
  divergent.train.plateau_patience = 20;
  cells.push_back(divergent);

  const fs::path results = tmp / "results";
  GridOptions opts;
  opts.verbose = false;
  const GridResult result = run_grid(cells, data, results, opts);

  CHECK(result.executed == 3);
  CHECK(result.failed == 1);
  REQUIRE(result.cells.size() == 3);
  CHECK_FALSE(result.cells[0].failed);
  CHECK_FALSE(result.cells[1].failed);
  CHECK(result.cells[2].failed);
  CHECK(result.cells[2].failure_reason.find("training diverged") != std::string::npos);

  // Healthy cells carry both reports and a test distribution summing to the
  // test-set size.
  for (int i = 0; i < 2; ++i) {
    const auto& o = result.cells[i];
    CHECK(o.val_report.n_evaluated > 0);
    CHECK(o.unseen_report.n_evaluated == static_cast<int64_t>(data.unseen_val.size()));
    REQUIRE(o.has_test);
    int64_t total = 0;
    for (const int64_t v : o.test_distribution) total += v;
    CHECK(total == static_cast<int64_t>(data.test.size()));
  }

  CHECK(fs::exists(results / "summary.csv"));
  const std::string summary = read_text_file(results / "summary.csv");
  CHECK(summary.find("failed") != std::string::npos);
  CHECK(summary.find("BS8 ADAM LR0.001") != std::string::npos);

  SUBCASE("resume executes nothing") {
    GridOptions resume_opts;
    resume_opts.resume = true;
    resume_opts.verbose = false;
    const GridResult again = run_grid(cells, data, results, resume_opts);
    CHECK(again.executed == 0);
    CHECK(again.skipped == 3);
    CHECK(again.failed == 1);  // the failure row is preserved
  }
  SUBCASE("a dataset change invalidates the resume key") {
    ctg::test::write_tiny_jpeg(data_root / "train" / "ct_scan_0" / "slice_99.jpg", 64, 120, 1);
    const GridDataset changed = load_grid_dataset(data_root);
    CHECK(changed.manifest_hash != data.manifest_hash);
    GridOptions resume_opts;
    resume_opts.resume = true;
    resume_opts.verbose = false;
    const GridResult again = run_grid(cells, changed, results, resume_opts);
    CHECK(again.executed == 3);
    CHECK(again.skipped == 0);
  }
}

TEST_CASE("best-cell selection and final retrain") {
  TempDir tmp("retrain");
  const fs::path data_root = make_micro_dataset(tmp);
  const GridDataset data = load_grid_dataset(data_root);

  GridSpec spec = micro_grid();
  spec.extents = {FineTuneExtent::all_layers};
  const auto cells = expand_grid(spec);
  GridOptions opts;
  opts.verbose = false;
  const GridResult result = run_grid(cells, data, tmp / "results", opts);

  const CellOutcome* best = pick_best_cell(result);
  REQUIRE(best != nullptr);

  const RetrainOutcome out = retrain_final(best->cell, data, tmp / "results");
  CHECK(out.n_predictions == static_cast<int64_t>(data.test.size()));
  CHECK(fs::exists(out.predictions_path));
  const CsvTable preds = read_csv(out.predictions_path);
  CHECK(preds.rows.size() == data.test.size());
  for (const auto& row : preds.rows) {
    REQUIRE(row.size() == 2);
    CHECK_NOTHROW(parse_severity(row[1]));
  }
  int64_t total = 0;
  for (const int64_t v : out.test_distribution) total += v;
  CHECK(total == out.n_predictions);
}

TEST_CASE("pick_best_cell ignores failures and handles all-failed grids") {
  GridResult result;
  CellOutcome failed;
  failed.failed = true;
  result.cells.push_back(failed);
  CHECK(pick_best_cell(result) == nullptr);

  CellOutcome ok;
  ok.unseen_report.f1_macro = 41.0;
  result.cells.push_back(ok);
  CellOutcome better;
  better.unseen_report.f1_macro = 57.3;
  result.cells.push_back(better);
  const CellOutcome* best = pick_best_cell(result);
  REQUIRE(best != nullptr);
  CHECK(best->unseen_report.f1_macro == 57.3);
}
