#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "ctgrader/evaluator.hpp"
#include "ctgrader/nn/tensor.hpp"
#include "test_support.hpp"

using namespace ctg;

namespace {

// Brute-force F1-macro from raw label pairs: counts TP/FP/FN by scanning the
// pair list, never touching the confusion-matrix code path.
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

// Pairwise concordance oracle: every (positive, negative) pair scores 1 when
// the positive ranks higher, 0.5 on ties.
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

double auroc_macro_bruteforce(const nn::Tensor& probs, const std::vector<int>& labels) {
  double total = 0.0;
  int considered = 0;
  const int64_t n = probs.shape[0];
  for (int c = 0; c < kNumClasses; ++c) {
    std::vector<double> scores(n);
    std::vector<char> pos(n);
    int64_t n_pos = 0;
    for (int64_t i = 0; i < n; ++i) {
      scores[i] = probs.data[i * kNumClasses + c];
      pos[i] = labels[i] == c;
      n_pos += pos[i];
    }
    if (n_pos == 0 || n_pos == n) continue;
    total += auc_pairwise(scores, pos);
    ++considered;
  }
  return 100.0 * total / considered;
}

nn::Tensor random_prob_rows(int64_t n, nn::Rng& rng) {
  nn::Tensor probs({n, kNumClasses});
  for (int64_t i = 0; i < n; ++i) {
    double sum = 0.0;
    std::array<double, kNumClasses> raw;
    for (int c = 0; c < kNumClasses; ++c) {
      raw[c] = std::exp(rng.normal());
      // Random ties exercise the half-count rule.
      if (rng.uniform() < 0.15) raw[c] = 1.0;
      sum += raw[c];
    }
    for (int c = 0; c < kNumClasses; ++c)
      probs.data[i * kNumClasses + c] = static_cast<float>(raw[c] / sum);
    // Renormalize in float so the row sums survive the cast.
    float fsum = 0.0f;
    for (int c = 0; c < kNumClasses; ++c) fsum += probs.data[i * kNumClasses + c];
    for (int c = 0; c < kNumClasses; ++c) probs.data[i * kNumClasses + c] /= fsum;
  }
  return probs;
}

}  // namespace

TEST_CASE("f1 macro fixed points") {
  SUBCASE("perfect diagonal is 100") {
    ConfusionMatrix cm;
    for (int c = 0; c < kNumClasses; ++c) cm.counts[c][c] = 5 + c;
    CHECK(f1_macro(cm) == doctest::Approx(100.0).epsilon(1e-12));
  }
  SUBCASE("two-of-four-classes toy gives 25") {
    const std::vector<int> truth{0, 0, 1, 1}, preds{0, 1, 0, 1};
    CHECK(f1_macro(ConfusionMatrix::from_predictions(truth, preds)) ==
          doctest::Approx(25.0).epsilon(1e-12));
  }
  SUBCASE("all predictions one class on balanced truth gives 10") {
    std::vector<int> truth, preds;
    for (int c = 0; c < kNumClasses; ++c)
      for (int i = 0; i < 25; ++i) {
        truth.push_back(c);
        preds.push_back(2);
      }
    // F1 for class 2 = 2*0.25*1/1.25 = 0.4, other classes 0 -> macro 10.0
    CHECK(f1_macro(ConfusionMatrix::from_predictions(truth, preds)) ==
          doctest::Approx(10.0).epsilon(1e-12));
  }
  SUBCASE("empty matrix is an error") {
    CHECK_THROWS_AS(f1_macro(ConfusionMatrix{}), ArgumentError);
  }
}

TEST_CASE("f1 macro matches the brute-force oracle on random instances") {
  nn::Rng rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + int(rng.uniform_int(120));
    std::vector<int> truth(n), preds(n);
    for (int i = 0; i < n; ++i) {
      truth[i] = int(rng.uniform_int(kNumClasses));
      preds[i] = int(rng.uniform_int(kNumClasses));
    }
    const double mine = f1_macro(ConfusionMatrix::from_predictions(truth, preds));
    const double oracle = f1_macro_bruteforce(truth, preds);
    CHECK(std::abs(mine - oracle) < 1e-9);
  }
}

TEST_CASE("f1 macro is invariant under simultaneous label permutation") {
  nn::Rng rng(5);
  const std::vector<std::array<int, 4>> perms{{1, 2, 3, 0}, {3, 2, 1, 0}, {2, 0, 3, 1}};
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 4 + int(rng.uniform_int(60));
    std::vector<int> truth(n), preds(n);
    for (int i = 0; i < n; ++i) {
      truth[i] = int(rng.uniform_int(4));
      preds[i] = int(rng.uniform_int(4));
    }
    const double base = f1_macro(ConfusionMatrix::from_predictions(truth, preds));
    for (const auto& perm : perms) {
      std::vector<int> t2(n), p2(n);
      for (int i = 0; i < n; ++i) {
        t2[i] = perm[truth[i]];
        p2[i] = perm[preds[i]];
      }
      CHECK(std::abs(f1_macro(ConfusionMatrix::from_predictions(t2, p2)) - base) < 1e-9);
    }
  }
}

TEST_CASE("auroc fixed points") {
  SUBCASE("one-hot scores at the true class rank perfectly") {
    nn::Tensor probs({8, 4});
    std::vector<int> labels(8);
    for (int i = 0; i < 8; ++i) {
      labels[i] = i % 4;
      probs.data[i * 4 + labels[i]] = 1.0f;
    }
    CHECK(auroc_macro(probs, labels) == doctest::Approx(100.0).epsilon(1e-12));
  }
  SUBCASE("identical rows collapse to 50") {
    nn::Tensor probs({10, 4});
    for (int64_t i = 0; i < 10; ++i)
      for (int c = 0; c < 4; ++c) probs.data[i * 4 + c] = 0.25f;
    std::vector<int> labels{0, 1, 2, 3, 0, 1, 2, 3, 0, 1};
    CHECK(auroc_macro(probs, labels) == doctest::Approx(50.0).epsilon(1e-12));
  }
  SUBCASE("six-sample fixture matches the pairwise oracle") {
    nn::Tensor probs({6, 4});
    const float rows[6][4] = {{0.7f, 0.1f, 0.1f, 0.1f}, {0.4f, 0.4f, 0.1f, 0.1f},
                              {0.2f, 0.6f, 0.1f, 0.1f}, {0.1f, 0.3f, 0.3f, 0.3f},
                              {0.25f, 0.25f, 0.25f, 0.25f}, {0.1f, 0.2f, 0.3f, 0.4f}};
    for (int i = 0; i < 6; ++i)
      for (int c = 0; c < 4; ++c) probs.data[i * 4 + c] = rows[i][c];
    const std::vector<int> labels{0, 1, 1, 0, 2, 2};
    CHECK(auroc_macro(probs, labels) ==
          doctest::Approx(auroc_macro_bruteforce(probs, labels)).epsilon(1e-12));
  }
  SUBCASE("a single class present everywhere is an error") {
    nn::Tensor probs({4, 4});
    for (int64_t i = 0; i < 4; ++i) probs.data[i * 4] = 1.0f;
    CHECK_THROWS_AS(auroc_macro(probs, {0, 0, 0, 0}), ArgumentError);
  }
  SUBCASE("rows must sum to one") {
    nn::Tensor probs({2, 4});
    probs.data = {0.5f, 0.5f, 0.5f, 0.5f, 1.0f, 0.0f, 0.0f, 0.0f};
    CHECK_THROWS_AS(auroc_macro(probs, {0, 1}), ArgumentError);
  }
}

TEST_CASE("auroc matches the pairwise oracle on random instances") {
  nn::Rng rng(77);
  int done = 0;
  while (done < 1000) {
    const int n = 2 + int(rng.uniform_int(29));
    nn::Tensor probs = random_prob_rows(n, rng);
    std::vector<int> labels(n);
    for (int i = 0; i < n; ++i) labels[i] = int(rng.uniform_int(kNumClasses));
    bool valid = false;
    for (int c = 0; c < kNumClasses && !valid; ++c) {
      const int64_t k = std::count(labels.begin(), labels.end(), c);
      valid = k > 0 && k < n;
    }
    if (!valid) continue;
    const double mine = auroc_macro(probs, labels);
    const double oracle = auroc_macro_bruteforce(probs, labels);
    CHECK(std::abs(mine - oracle) < 1e-9);
    ++done;
  }
}

TEST_CASE("per-class auc is invariant under strictly monotone score transforms") {
  nn::Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 3 + int(rng.uniform_int(40));
    std::vector<double> scores(n);
    std::vector<char> pos(n);
    int64_t n_pos = 0;
    for (int i = 0; i < n; ++i) {
      scores[i] = rng.uniform();
      if (rng.uniform() < 0.2) scores[i] = 0.5;  // plant ties
      pos[i] = rng.uniform() < 0.5;
      n_pos += pos[i];
    }
    if (n_pos == 0 || n_pos == int64_t(n)) continue;
    const double base = binary_auc(scores, pos);
    for (const auto& transform : {+[](double s) { return s * s * s + 2.0 * s; },
                                  +[](double s) { return std::atan(s) * 10.0 - 3.0; },
                                  +[](double s) { return std::exp(s); }}) {
      std::vector<double> mapped(n);
      for (int i = 0; i < n; ++i) mapped[i] = transform(scores[i]);
      CHECK(binary_auc(mapped, pos) == doctest::Approx(base).epsilon(1e-12));
    }
  }
}

TEST_CASE("predict_distribution") {
  SUBCASE("231 scans all class 2") {
    const std::vector<int> preds(231, 2);
    CHECK(predict_distribution(preds) == std::array<int64_t, 4>{0, 0, 231, 0});
  }
  SUBCASE("one each") {
    CHECK(predict_distribution({0, 1, 2, 3}) == std::array<int64_t, 4>{1, 1, 1, 1});
  }
  SUBCASE("two of one class") {
    CHECK(predict_distribution({2, 2}) == std::array<int64_t, 4>{0, 0, 2, 0});
  }
  SUBCASE("sums to the input length") {
    nn::Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
      const int n = 1 + int(rng.uniform_int(300));
      std::vector<int> preds(n);
      for (int i = 0; i < n; ++i) preds[i] = int(rng.uniform_int(4));
      const auto d = predict_distribution(preds);
      CHECK(d[0] + d[1] + d[2] + d[3] == n);
    }
  }
  SUBCASE("empty input is an error") {
    CHECK_THROWS_AS(predict_distribution({}), ArgumentError);
  }
}

namespace {
EvalReport fake_report(double f1, double auroc) {
  EvalReport r;
  r.f1_macro = f1;
  r.auroc_macro = auroc;
  r.per_class = {ClassMetrics{1, 1, 1.0}, ClassMetrics{0.7, 0.8, 0.744},
                 ClassMetrics{0.6, 0.7, 0.676}, ClassMetrics{0.6, 0.65, 0.628}};
  r.pred_class_distribution = {89, 31, 92, 19};
  r.n_evaluated = 231;
  return r;
}
}  // namespace

TEST_CASE("report rendering") {
  ReportRow row;
  row.model = "AlexNet";
  row.settings = "BS16 SGD LR0.001";
  row.val = fake_report(49.62, 66.8);
  row.unseen = fake_report(39.5, 59.0);
  row.test_distribution = {89, 31, 92, 19};
  row.has_test_distribution = true;

  SUBCASE("table1 carries the settings string and one-decimal rounding") {
    const std::string table = emit_report({row}, TableLayout::table1);
    CHECK(table.find("BS16 SGD LR0.001") != std::string::npos);
    CHECK(table.find("49.6") != std::string::npos);  // 49.62 rendered at one decimal
    CHECK(table.find("Pred. class distr.") != std::string::npos);
    CHECK(table.find("89, 31, 92, 19") != std::string::npos);
  }
  SUBCASE("table3 layout carries class-wise F1 columns") {
    const std::string table = emit_report({row}, TableLayout::table3);
    CHECK(table.find("Class-wise F1-macro") != std::string::npos);
    CHECK(table.find("Mild") != std::string::npos);
    CHECK(table.find("Critical") != std::string::npos);
    CHECK(table.find("74.4") != std::string::npos);  // 100 * 0.744
  }
  SUBCASE("empty report list is an error") {
    CHECK_THROWS_AS(emit_report({}, TableLayout::table1), ArgumentError);
  }
}

TEST_CASE("prediction file format") {
  ctg::test::TempDir tmp("preds");

  SUBCASE("single row with a word label") {
    emit_predictions({{"s1", 0}}, tmp / "p.csv");
    CHECK(read_text_file(tmp / "p.csv") == "scan_id,severity\ns1,mild\n");
  }
  SUBCASE("231 predictions produce 231 data rows plus a header") {
    std::vector<std::pair<std::string, int>> preds;
    for (int i = 0; i < 231; ++i) preds.emplace_back("scan_" + std::to_string(i), i % 4);
    emit_predictions(preds, tmp / "p.csv");
    const std::string text = read_text_file(tmp / "p.csv");
    CHECK(std::count(text.begin(), text.end(), '\n') == 232);
  }
  SUBCASE("rows are sorted by scan id") {
    emit_predictions({{"zeta", 1}, {"alpha", 2}}, tmp / "p.csv");
    const std::string text = read_text_file(tmp / "p.csv");
    CHECK(text.find("alpha") < text.find("zeta"));
  }
  SUBCASE("duplicate scan ids are fatal") {
    CHECK_THROWS_AS(emit_predictions({{"a", 1}, {"a", 2}}, tmp / "p.csv"), DataError);
  }
}
