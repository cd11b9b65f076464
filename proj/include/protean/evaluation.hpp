#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace protean {

enum class Averaging { Macro, Weighted };

/// Every scalar here is recomputable from `confusion` (rows = true class,
/// columns = predicted class). Class-averaged metrics only cover classes with
/// test samples; a class with no predicted positives contributes precision 0
/// and is listed in zero_division_classes.
struct MetricsReport {
  std::string scope = "global";
  int num_classes = 0;
  std::vector<std::vector<std::size_t>> confusion;
  std::size_t samples = 0;
  double accuracy = 0.0;
  double macro_accuracy = 0.0;
  double macro_precision = 0.0;
  double macro_f1 = 0.0;
  std::vector<double> per_class_accuracy;  // recall; 0 for classes without test samples
  std::vector<int> evaluated_classes;
  std::vector<int> zero_division_classes;
  Averaging averaging = Averaging::Macro;
};

MetricsReport evaluate(std::span<const int> predictions, std::span<const int> labels, int num_classes,
                       std::string scope = "global", Averaging averaging = Averaging::Macro);

/// The two classes with the fewest local samples (zero counts included),
/// ties by class id.
std::array<int, 2> select_rare_classes(std::span<const std::size_t> counts);

struct MannWhitneyResult {
  double u = 0.0;        // U of sample a, midranks for ties
  double p_value = 1.0;  // one-sided, alternative "a > b"
  bool exact = false;
};

/// Exact enumeration for n_a + n_b <= 12, normal approximation with tie and
/// continuity correction otherwise.
MannWhitneyResult mann_whitney_u(std::span<const double> a, std::span<const double> b);

struct RareClassRow {
  int participant = 0;
  std::array<int, 2> classes{};
  std::array<std::size_t, 2> train_counts{};
  std::map<std::string, double> accuracy;  // method -> mean accuracy over the two classes
};

struct RareClassReport {
  std::vector<RareClassRow> rows;
  std::map<std::string, double> mean_accuracy;
};

/// `reports[method][i]` is participant i's evaluation under that method.
RareClassReport rare_class_report(const std::vector<std::vector<std::size_t>>& counts,
                                  const std::map<std::string, std::vector<MetricsReport>>& reports);

struct ZeroShotRow {
  int participant = 0;
  int cls = 0;
  double local_only_accuracy = 0.0;
  double federated_accuracy = 0.0;
};

struct ZeroShotReport {
  std::vector<ZeroShotRow> rows;  // one per (participant, class) with no local samples
  double mean_local_only = 0.0;
  double mean_federated = 0.0;
};

ZeroShotReport zero_shot_report(const std::vector<std::vector<std::size_t>>& counts,
                                std::span<const MetricsReport> local_only,
                                std::span<const MetricsReport> federated);

}  // namespace protean
