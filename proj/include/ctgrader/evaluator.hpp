#pragma once

#include <array>
#include <string>
#include <vector>

#include "ctgrader/common.hpp"
#include "ctgrader/nn/tensor.hpp"

namespace ctg {

struct ConfusionMatrix {
  // counts[true][pred]
  std::array<std::array<int64_t, kNumClasses>, kNumClasses> counts{};

  int64_t total() const;
  static ConfusionMatrix from_predictions(const std::vector<int>& truth,
                                          const std::vector<int>& preds);
};

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Per-class precision/recall/F1 with 0/0 terms defined as 0.
std::array<ClassMetrics, kNumClasses> per_class_metrics(const ConfusionMatrix& cm);

// 100 * mean of the per-class F1 scores.
double f1_macro(const ConfusionMatrix& cm);

// One-vs-rest AUROC of a single score column via the average-rank statistic
// (ties count half). Returns a fraction in [0,1].
double binary_auc(const std::vector<double>& scores, const std::vector<char>& is_positive);

// Macro AUROC (percentage) over the classes with both positives and
// negatives. probs holds N rows of K class probabilities summing to 1.
double auroc_macro(const nn::Tensor& probs, const std::vector<int>& labels);

std::array<int64_t, kNumClasses> predict_distribution(const std::vector<int>& preds);

struct EvalReport {
  std::array<ClassMetrics, kNumClasses> per_class{};
  double f1_macro = 0.0;     // percentage
  double auroc_macro = 0.0;  // percentage
  std::array<int64_t, kNumClasses> pred_class_distribution{};
  int64_t n_evaluated = 0;
  std::string run_id;
  ConfusionMatrix confusion;
};

EvalReport make_eval_report(const std::string& run_id, const std::vector<int>& truth,
                            const std::vector<int>& preds, const nn::Tensor& probs);

enum class TableLayout { table1, table2, table3 };

// One result-table row: the internal-val and unseen-val reports of a run plus
// the predicted class distribution on the test set.
struct ReportRow {
  std::string model;
  std::string settings;
  EvalReport val;
  EvalReport unseen;
  std::array<int64_t, kNumClasses> test_distribution{};
  bool has_test_distribution = false;
};

// Aligned text table. table1/table2 carry AUROC and F1-macro for val/unseen
// plus the predicted class distribution; table3 adds class-wise F1 columns.
std::string emit_report(const std::vector<ReportRow>& rows, TableLayout layout);
CsvTable report_to_csv(const std::vector<ReportRow>& rows, TableLayout layout);

// CSV `scan_id,severity` with word labels, sorted by scan_id.
void emit_predictions(const std::vector<std::pair<std::string, int>>& preds,
                      const fs::path& path);

}  // namespace ctg
