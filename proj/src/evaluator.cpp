#include "ctgrader/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace ctg {

int64_t ConfusionMatrix::total() const {
  int64_t t = 0;
  for (const auto& row : counts)
    for (const int64_t v : row) t += v;
  return t;
}

ConfusionMatrix ConfusionMatrix::from_predictions(const std::vector<int>& truth,
                                                  const std::vector<int>& preds) {
  if (truth.size() != preds.size())
    throw ArgumentError("confusion matrix: truth/prediction size mismatch");
  ConfusionMatrix cm;
  for (size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= kNumClasses || preds[i] < 0 || preds[i] >= kNumClasses)
      throw ArgumentError("confusion matrix: class id out of range");
    ++cm.counts[truth[i]][preds[i]];
  }
  return cm;
}

std::array<ClassMetrics, kNumClasses> per_class_metrics(const ConfusionMatrix& cm) {
  std::array<ClassMetrics, kNumClasses> out{};
  for (int c = 0; c < kNumClasses; ++c) {
    const int64_t tp = cm.counts[c][c];
    int64_t fp = 0, fn = 0;
    for (int o = 0; o < kNumClasses; ++o) {
      if (o == c) continue;
      fp += cm.counts[o][c];
      fn += cm.counts[c][o];
    }
    // Every 0/0 is defined as 0; it matters on absent classes.
    const double pr = tp + fp > 0 ? double(tp) / double(tp + fp) : 0.0;
    const double rc = tp + fn > 0 ? double(tp) / double(tp + fn) : 0.0;
    const double f1 = pr + rc > 0.0 ? 2.0 * pr * rc / (pr + rc) : 0.0;
    out[c] = {pr, rc, f1};
  }
  return out;
}

double f1_macro(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw ArgumentError("f1_macro needs a non-empty confusion matrix");
  const auto metrics = per_class_metrics(cm);
  double sum = 0.0;
  for (const auto& m : metrics) sum += m.f1;
  return 100.0 * sum / kNumClasses;
}

double binary_auc(const std::vector<double>& scores, const std::vector<char>& is_positive) {
  if (scores.size() != is_positive.size())
    throw ArgumentError("binary_auc: scores/labels size mismatch");
  const size_t n = scores.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&scores](size_t a, size_t b) { return scores[a] < scores[b]; });

  // Average ranks within tie groups; ties then count half in the statistic.
  std::vector<double> rank(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg = 0.5 * (double(i + 1) + double(j + 1));
    for (size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }

  int64_t n_pos = 0;
  double rank_sum = 0.0;
  for (size_t k = 0; k < n; ++k) {
    if (is_positive[k]) {
      ++n_pos;
      rank_sum += rank[k];
    }
  }
  const int64_t n_neg = static_cast<int64_t>(n) - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw ArgumentError("binary_auc needs both positives and negatives");
  return (rank_sum - 0.5 * double(n_pos) * double(n_pos + 1)) / (double(n_pos) * double(n_neg));
}

double auroc_macro(const nn::Tensor& probs, const std::vector<int>& labels) {
  if (probs.ndim() != 2 || probs.shape[1] != kNumClasses)
    throw ArgumentError("auroc_macro expects [N,4] probability rows");
  const int64_t n = probs.shape[0];
  if (n != static_cast<int64_t>(labels.size()))
    throw ArgumentError("auroc_macro: rows/labels size mismatch");
  for (int64_t r = 0; r < n; ++r) {
    double sum = 0.0;
    for (int c = 0; c < kNumClasses; ++c) sum += probs.data[r * kNumClasses + c];
    if (std::abs(sum - 1.0) > 1e-6)
      throw ArgumentError("auroc_macro: probability row " + std::to_string(r) +
                          " does not sum to 1");
  }

  double total = 0.0;
  int considered = 0;
  for (int c = 0; c < kNumClasses; ++c) {
    std::vector<double> scores(n);
    std::vector<char> pos(n);
    int64_t n_pos = 0;
    for (int64_t r = 0; r < n; ++r) {
      scores[r] = probs.data[r * kNumClasses + c];
      pos[r] = labels[r] == c ? 1 : 0;
      n_pos += pos[r];
    }
    if (n_pos == 0 || n_pos == n) continue;  // one-vs-rest undefined for this class
    total += binary_auc(scores, pos);
    ++considered;
  }
  if (considered == 0)
    throw ArgumentError("auroc_macro: no class has both positives and negatives");
  return 100.0 * total / considered;
}

std::array<int64_t, kNumClasses> predict_distribution(const std::vector<int>& preds) {
  if (preds.empty()) throw ArgumentError("predict_distribution needs at least one prediction");
  std::array<int64_t, kNumClasses> counts{};
  for (const int p : preds) {
    if (p < 0 || p >= kNumClasses) throw ArgumentError("prediction class id out of range");
    ++counts[p];
  }
  return counts;
}

EvalReport make_eval_report(const std::string& run_id, const std::vector<int>& truth,
                            const std::vector<int>& preds, const nn::Tensor& probs) {
  EvalReport report;
  report.run_id = run_id;
  report.confusion = ConfusionMatrix::from_predictions(truth, preds);
  report.per_class = per_class_metrics(report.confusion);
  report.f1_macro = f1_macro(report.confusion);
  report.auroc_macro = auroc_macro(probs, truth);
  report.pred_class_distribution = predict_distribution(preds);
  report.n_evaluated = static_cast<int64_t>(preds.size());
  return report;
}

namespace {

std::string one_decimal(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f", v);
  return buf;
}

std::string distribution_string(const std::array<int64_t, kNumClasses>& d) {
  std::string out;
  for (int c = 0; c < kNumClasses; ++c) {
    if (c) out += ", ";
    out += std::to_string(d[c]);
  }
  return out;
}

std::string render_table(const std::vector<std::vector<std::string>>& cells) {
  std::vector<size_t> width;
  for (const auto& row : cells) {
    if (width.size() < row.size()) width.resize(row.size(), 0);
    for (size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  }
  std::ostringstream out;
  for (const auto& row : cells) {
    for (size_t i = 0; i < row.size(); ++i) {
      out << row[i];
      if (i + 1 < row.size())
        out << std::string(width[i] - row[i].size(), ' ') << " | ";
    }
    out << '\n';
  }
  return out.str();
}

const char* layout_title(TableLayout layout) {
  switch (layout) {
    case TableLayout::table1: return "Fine-tuning extent: last layer only";
    case TableLayout::table2: return "Fine-tuning extent: all layers";
    case TableLayout::table3: return "Class-wise F1-macro";
  }
  return "";
}

}  // namespace

std::string emit_report(const std::vector<ReportRow>& rows, TableLayout layout) {
  if (rows.empty()) throw ArgumentError("emit_report needs at least one row");
  std::vector<std::vector<std::string>> cells;
  if (layout == TableLayout::table3) {
    cells.push_back({"Model", "Settings", "Average F1-macro", "Mild", "Moderate", "Severe",
                     "Critical"});
    for (const auto& row : rows) {
      std::vector<std::string> line{row.model, row.settings, one_decimal(row.unseen.f1_macro)};
      for (int c = 0; c < kNumClasses; ++c)
        line.push_back(one_decimal(100.0 * row.unseen.per_class[c].f1));
      cells.push_back(std::move(line));
    }
  } else {
    cells.push_back({"Model", "Settings", "AUROC Val", "AUROC Unseen", "F1-macro Val",
                     "F1-macro Unseen", "Pred. class distr."});
    for (const auto& row : rows) {
      cells.push_back({row.model, row.settings, one_decimal(row.val.auroc_macro),
                       one_decimal(row.unseen.auroc_macro), one_decimal(row.val.f1_macro),
                       one_decimal(row.unseen.f1_macro),
                       row.has_test_distribution ? distribution_string(row.test_distribution)
                                                 : "-"});
    }
  }
  return std::string(layout_title(layout)) + "\n" + render_table(cells);
}

CsvTable report_to_csv(const std::vector<ReportRow>& rows, TableLayout layout) {
  CsvTable table;
  if (layout == TableLayout::table3) {
    table.header = {"model", "settings", "avg_f1_macro", "f1_mild", "f1_moderate", "f1_severe",
                    "f1_critical"};
    for (const auto& row : rows) {
      std::vector<std::string> line{row.model, row.settings, one_decimal(row.unseen.f1_macro)};
      for (int c = 0; c < kNumClasses; ++c)
        line.push_back(one_decimal(100.0 * row.unseen.per_class[c].f1));
      table.rows.push_back(std::move(line));
    }
  } else {
    table.header = {"model",           "settings",        "auroc_val",  "auroc_unseen",
                    "f1_macro_val",    "f1_macro_unseen", "pred_mild",  "pred_moderate",
                    "pred_severe",     "pred_critical"};
    for (const auto& row : rows) {
      std::vector<std::string> line{row.model,
                                    row.settings,
                                    one_decimal(row.val.auroc_macro),
                                    one_decimal(row.unseen.auroc_macro),
                                    one_decimal(row.val.f1_macro),
                                    one_decimal(row.unseen.f1_macro)};
      for (int c = 0; c < kNumClasses; ++c)
        line.push_back(row.has_test_distribution ? std::to_string(row.test_distribution[c])
                                                 : "");
      table.rows.push_back(std::move(line));
    }
  }
  return table;
}

void emit_predictions(const std::vector<std::pair<std::string, int>>& preds,
                      const fs::path& path) {
  std::vector<std::pair<std::string, int>> sorted = preds;
  std::sort(sorted.begin(), sorted.end());
  for (size_t i = 1; i < sorted.size(); ++i)
    if (sorted[i].first == sorted[i - 1].first)
      throw DataError("duplicate scan_id in predictions: '" + sorted[i].first + "'");

  CsvTable table;
  table.header = {"scan_id", "severity"};
  for (const auto& [id, cls] : sorted) {
    if (cls < 0 || cls >= kNumClasses)
      throw ArgumentError("prediction class id out of range for '" + id + "'");
    table.rows.push_back({id, to_string(static_cast<Severity>(cls))});
  }
  write_csv(path, table);
}

}  // namespace ctg
