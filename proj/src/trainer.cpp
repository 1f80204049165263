#include "ctgrader/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <numeric>

#include "ctgrader/nn/optim.hpp"

namespace ctg {

namespace {
constexpr int kEvalChunk = 8;
constexpr float kAuxLossWeight = 0.4f;
// Divergence guard. A K=4 cross-entropy sits near ln(4); runaway runs reach
// 1e10+ but can stay finite when saturated softmax rows zero the gradients,
// so non-finiteness alone does not catch them.
constexpr double kLossOverflowCap = 1e8;

bool loss_diverged(double loss) { return !std::isfinite(loss) || std::abs(loss) > kLossOverflowCap; }
}  // namespace

std::string to_string(OptimKind o) { return o == OptimKind::ADAM ? "ADAM" : "SGD"; }

OptimKind parse_optim(const std::string& name) {
  const std::string t = lower(trim(name));
  if (t == "adam") return OptimKind::ADAM;
  if (t == "sgd") return OptimKind::SGD;
  throw ArgumentError("unknown optimizer: '" + name + "'");
}

nlohmann::json to_json(const TrainConfig& cfg) {
  return {
      {"batch_size", cfg.batch_size},
      {"optimizer", to_string(cfg.optimizer)},
      {"lr", cfg.lr},
      {"momentum", cfg.momentum},
      {"max_epochs", cfg.max_epochs},
      {"plateau_patience", cfg.plateau_patience},
      {"plateau_min_delta", cfg.plateau_min_delta},
      {"extent", to_string(cfg.extent)},
      {"seed", cfg.seed},
      {"internal_val_fraction", cfg.internal_val_fraction},
  };
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  cfg.batch_size = j.at("batch_size").get<int>();
  cfg.optimizer = parse_optim(j.at("optimizer").get<std::string>());
  cfg.lr = j.at("lr").get<double>();
  cfg.momentum = j.at("momentum").get<double>();
  cfg.max_epochs = j.at("max_epochs").get<int>();
  cfg.plateau_patience = j.at("plateau_patience").get<int>();
  cfg.plateau_min_delta = j.at("plateau_min_delta").get<double>();
  cfg.extent = parse_extent(j.at("extent").get<std::string>());
  cfg.seed = j.at("seed").get<uint64_t>();
  cfg.internal_val_fraction = j.at("internal_val_fraction").get<double>();
  return cfg;
}

std::string settings_string(const TrainConfig& cfg) {
  char lr[32];
  std::snprintf(lr, sizeof(lr), "%g", cfg.lr);
  return "BS" + std::to_string(cfg.batch_size) + " " + to_string(cfg.optimizer) + " LR" + lr;
}

std::pair<std::vector<LabeledScan>, std::vector<LabeledScan>> split_internal(
    const std::vector<LabeledScan>& train_scans, double fraction, uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0))
    throw ArgumentError("internal validation fraction must lie in (0,1)");
  std::array<std::vector<size_t>, kNumClasses> by_class;
  for (size_t i = 0; i < train_scans.size(); ++i)
    by_class[static_cast<int>(train_scans[i].label)].push_back(i);

  nn::Rng rng(seed);
  std::pair<std::vector<LabeledScan>, std::vector<LabeledScan>> out;
  for (int c = 0; c < kNumClasses; ++c) {
    auto& idx = by_class[c];
    if (idx.empty()) continue;
    if (idx.size() < 2) {
      std::cerr << "warning: class " << to_string(static_cast<Severity>(c))
                << " has fewer than 2 scans; all go to the train side\n";
      for (size_t i : idx) out.first.push_back(train_scans[i]);
      continue;
    }
    rng.shuffle(idx);
    int64_t n_val = std::llround(static_cast<double>(idx.size()) * fraction);
    n_val = std::clamp<int64_t>(n_val, 0, static_cast<int64_t>(idx.size()) - 1);
    for (size_t i = 0; i < idx.size(); ++i) {
      auto& side = i < static_cast<size_t>(n_val) ? out.second : out.first;
      side.push_back(train_scans[idx[i]]);
    }
  }
  auto by_id = [](const LabeledScan& a, const LabeledScan& b) {
    return a.volume.scan_id < b.volume.scan_id;
  };
  std::sort(out.first.begin(), out.first.end(), by_id);
  std::sort(out.second.begin(), out.second.end(), by_id);
  for (auto& s : out.second) s.volume.split = Split::internal_val;
  return out;
}

bool plateau_should_stop(const std::vector<double>& val_losses, int patience, double min_delta) {
  if (patience < 1) throw ArgumentError("plateau patience must be at least 1");
  if (min_delta < 0.0) throw ArgumentError("plateau min_delta must be non-negative");
  double best = std::numeric_limits<double>::infinity();
  int since_improvement = 0;
  for (const double loss : val_losses) {
    if (loss < best - min_delta) {
      best = loss;
      since_improvement = 0;
    } else {
      ++since_improvement;
    }
  }
  return since_improvement >= patience;
}

namespace {

Batchset prepare_impl(const std::vector<const ScanVolume*>& volumes, const std::vector<int>& labels,
                      const ModelSpec& spec, const PreprocessOptions& opts) {
  Batchset out;
  for (size_t i = 0; i < volumes.size(); ++i) {
    try {
      PreprocessedInput input = assemble_input(*volumes[i], spec, opts);
      out.x.push_back(std::move(input.pixels));
      out.scan_ids.push_back(volumes[i]->scan_id);
      if (!labels.empty()) out.y.push_back(labels[i]);
    } catch (const LoadError& e) {
      out.errors.emplace_back(volumes[i]->scan_id, e.what());
    }
  }
  return out;
}

}  // namespace

Batchset prepare_batchset(const std::vector<LabeledScan>& scans, const ModelSpec& spec,
                          const PreprocessOptions& opts) {
  std::vector<const ScanVolume*> volumes;
  std::vector<int> labels;
  for (const auto& s : scans) {
    volumes.push_back(&s.volume);
    labels.push_back(static_cast<int>(s.label));
  }
  return prepare_impl(volumes, labels, spec, opts);
}

Batchset prepare_batchset(const std::vector<ScanVolume>& scans, const ModelSpec& spec,
                          const PreprocessOptions& opts) {
  std::vector<const ScanVolume*> volumes;
  for (const auto& s : scans) volumes.push_back(&s);
  return prepare_impl(volumes, {}, spec, opts);
}

Evaluation evaluate_batchset(Model& model, const Batchset& data) {
  const int v = model.spec().input_side;
  const int k = model.spec().num_classes;
  const int64_t n = static_cast<int64_t>(data.size());
  Evaluation ev;
  ev.probs = nn::Tensor({n, k});
  ev.preds.reserve(n);

  double loss_acc = 0.0;
  int64_t correct = 0;
  nn::ForwardCtx ctx{false, nullptr};
  for (int64_t b = 0; b < n; b += kEvalChunk) {
    const int64_t m = std::min<int64_t>(kEvalChunk, n - b);
    nn::Tensor batch({m, 3, v, v});
    for (int64_t i = 0; i < m; ++i)
      std::copy(data.x[b + i].data.begin(), data.x[b + i].data.end(),
                batch.data.begin() + i * 3 * v * v);
    const auto out = model.forward(nn::make_var(std::move(batch)), ctx);
    const nn::Tensor probs = nn::softmax_rows(out.logits->value);
    const auto preds = nn::argmax_rows(out.logits->value);
    std::copy(probs.data.begin(), probs.data.end(), ev.probs.data.begin() + b * k);
    for (int64_t i = 0; i < m; ++i) {
      ev.preds.push_back(preds[i]);
      if (!data.y.empty()) {
        const int truth = data.y[b + i];
        if (preds[i] == truth) ++correct;
        // Mean cross-entropy from the logits, max-shifted for stability.
        const float* row = out.logits->value.data.data() + i * k;
        const float mx = *std::max_element(row, row + k);
        double lse = 0.0;
        for (int j = 0; j < k; ++j) lse += std::exp(double(row[j]) - mx);
        loss_acc += mx + std::log(lse) - row[truth];
      }
    }
  }
  if (!data.y.empty() && n > 0) {
    ev.loss = loss_acc / static_cast<double>(n);
    ev.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  }
  return ev;
}

namespace {

void write_epoch_log(const fs::path& path, const std::vector<EpochLogRow>& log) {
  CsvTable table;
  table.header = {"epoch", "train_loss", "val_loss", "val_accuracy"};
  char buf[64];
  for (const auto& row : log) {
    std::vector<std::string> fields{std::to_string(row.epoch)};
    for (const double v : {row.train_loss, row.val_loss, row.val_accuracy}) {
      std::snprintf(buf, sizeof(buf), "%.9g", v);
      fields.emplace_back(buf);
    }
    table.rows.push_back(std::move(fields));
  }
  write_csv(path, table);
}

void write_checkpoint(const fs::path& path, const Model& model, const TrainConfig& cfg,
                      int best_epoch, double best_val_accuracy) {
  nn::TensorFile tf = snapshot_weights(model);
  tf.meta["kind"] = "checkpoint";
  tf.meta["train_config"] = to_json(cfg);
  tf.meta["best_epoch"] = best_epoch;
  tf.meta["best_val_accuracy"] = best_val_accuracy;
  write_tensor_file(path, tf);
}

}  // namespace

TrainResult train(Model& model, const TrainConfig& cfg, const Batchset& train_data,
                  const Batchset& val_data, const fs::path& run_dir) {
  if (train_data.size() == 0) throw ArgumentError("training set is empty");
  if (val_data.size() == 0) throw ArgumentError("internal validation set is empty");
  if (cfg.batch_size < 1) throw ArgumentError("batch size must be at least 1");
  if (cfg.max_epochs < 1) throw ArgumentError("epoch cap must be at least 1");

  fs::create_directories(run_dir);
  {
    nlohmann::json config = {{"model_spec", to_json(model.spec())},
                             {"train_config", to_json(cfg)},
                             {"settings", settings_string(cfg)}};
    write_text_file(run_dir / "config.json", config.dump(2) + "\n");
  }

  std::unique_ptr<nn::Optimizer> opt;
  if (cfg.optimizer == OptimKind::ADAM) {
    opt = std::make_unique<nn::Adam>(model.trainable_params(), static_cast<float>(cfg.lr));
  } else {
    opt = std::make_unique<nn::Sgd>(model.trainable_params(), static_cast<float>(cfg.lr),
                                    static_cast<float>(cfg.momentum));
  }

  const int v = model.spec().input_side;
  const int64_t n = static_cast<int64_t>(train_data.size());
  nn::Rng rng(cfg.seed);

  TrainResult result;
  result.checkpoint_path = run_dir / "best.ckpt";
  BestTracker best;
  std::vector<double> val_losses;

  std::vector<int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    rng.shuffle(order);
    double train_loss_acc = 0.0;
    for (int64_t b = 0; b < n; b += cfg.batch_size) {
      const int64_t m = std::min<int64_t>(cfg.batch_size, n - b);
      nn::Tensor batch({m, 3, v, v});
      std::vector<int> labels(m);
      for (int64_t i = 0; i < m; ++i) {
        const int64_t src = order[b + i];
        std::copy(train_data.x[src].data.begin(), train_data.x[src].data.end(),
                  batch.data.begin() + i * 3 * v * v);
        labels[i] = train_data.y[src];
      }
      nn::ForwardCtx ctx{true, &rng};
      const auto out = model.forward(nn::make_var(std::move(batch)), ctx);
      nn::Var loss = nn::cross_entropy(out.logits, labels);
      if (out.aux_logits)
        loss = nn::add(loss, nn::mul_scalar(nn::cross_entropy(out.aux_logits, labels),
                                            kAuxLossWeight));
      const float batch_loss = loss->value.data[0];
      if (loss_diverged(batch_loss))
        throw TrainingDiverged("training diverged: loss " + std::to_string(batch_loss) +
                               " at epoch " + std::to_string(epoch));
      opt->zero_grad();
      nn::backward(loss);
      opt->step();
      train_loss_acc += static_cast<double>(batch_loss) * static_cast<double>(m);
    }

    const Evaluation val = evaluate_batchset(model, val_data);
    if (loss_diverged(val.loss))
      throw TrainingDiverged("training diverged: validation loss " + std::to_string(val.loss) +
                             " at epoch " + std::to_string(epoch));

    EpochLogRow row;
    row.epoch = epoch;
    row.train_loss = train_loss_acc / static_cast<double>(n);
    row.val_loss = val.loss;
    row.val_accuracy = val.accuracy;
    result.epoch_log.push_back(row);
    val_losses.push_back(val.loss);

    if (best.observe(epoch, val.accuracy))
      write_checkpoint(result.checkpoint_path, model, cfg, epoch, val.accuracy);

    if (plateau_should_stop(val_losses, cfg.plateau_patience, cfg.plateau_min_delta)) {
      result.stopped_early = true;
      break;
    }
  }
  result.best_epoch = best.best_epoch;
  result.best_val_accuracy = best.best_accuracy;

  write_epoch_log(run_dir / "log.csv", result.epoch_log);
  return result;
}

LoadedCheckpoint reload_checkpoint(const fs::path& path,
                                   const std::optional<ModelSpec>& expected_spec) {
  const nn::TensorFile tf = nn::read_tensor_file(path);
  if (tf.meta.value("kind", "") != "checkpoint")
    throw LoadError("not a training checkpoint: " + path.string());

  LoadedCheckpoint out;
  out.spec = model_spec_from_json(tf.meta.at("model_spec"));
  out.config = train_config_from_json(tf.meta.at("train_config"));
  out.best_epoch = tf.meta.at("best_epoch").get<int>();
  out.best_val_accuracy = tf.meta.at("best_val_accuracy").get<double>();

  if (expected_spec) {
    auto mismatch = [&](const std::string& field, const std::string& stored,
                        const std::string& expected) {
      throw LoadError("checkpoint ModelSpec mismatch on " + field + ": checkpoint has " +
                      stored + ", caller expects " + expected);
    };
    if (expected_spec->arch != out.spec.arch)
      mismatch("arch", to_string(out.spec.arch), to_string(expected_spec->arch));
    if (expected_spec->input_side != out.spec.input_side)
      mismatch("input_side", std::to_string(out.spec.input_side),
               std::to_string(expected_spec->input_side));
    if (expected_spec->num_classes != out.spec.num_classes)
      mismatch("num_classes", std::to_string(out.spec.num_classes),
               std::to_string(expected_spec->num_classes));
  }

  // The checkpoint holds every tensor, so the rebuild never needs the
  // published pretrained weights; out.spec keeps the original init mode.
  ModelSpec build_spec = out.spec;
  build_spec.init = WeightInit::scratch;
  out.model = build_model(build_spec, /*seed=*/0);
  restore_weights(*out.model, tf);
  return out;
}

}  // namespace ctg
