#include "protean/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace protean {
namespace {

std::vector<double> midranks(std::span<const double> pooled, double* tie_term) {
  std::vector<std::size_t> order(pooled.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return pooled[x] < pooled[y]; });
  std::vector<double> ranks(pooled.size());
  double ties = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && pooled[order[j + 1]] == pooled[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
    const auto t = static_cast<double>(j - i + 1);
    ties += t * t * t - t;
    i = j + 1;
  }
  if (tie_term != nullptr) *tie_term = ties;
  return ranks;
}

// Counts subsets of size k of `ranks` whose rank sum reaches `threshold`.
void enumerate_rank_sums(const std::vector<double>& ranks, std::size_t start, std::size_t k, double sum,
                         double threshold, long& hits, long& total) {
  if (k == 0) {
    ++total;
    if (sum >= threshold) ++hits;
    return;
  }
  for (std::size_t i = start; i + k <= ranks.size(); ++i)
    enumerate_rank_sums(ranks, i + 1, k - 1, sum + ranks[i], threshold, hits, total);
}

constexpr std::size_t kExactLimit = 12;

}  // namespace

MetricsReport evaluate(std::span<const int> predictions, std::span<const int> labels, int num_classes,
                       std::string scope, Averaging averaging) {
  if (predictions.size() != labels.size()) throw std::invalid_argument("evaluate: predictions/labels mismatch");
  if (labels.empty()) throw std::invalid_argument("evaluate: empty test set");
  if (num_classes < 1) throw std::invalid_argument("evaluate: num_classes must be positive");
  const auto K = static_cast<std::size_t>(num_classes);
  MetricsReport r;
  r.scope = std::move(scope);
  r.num_classes = num_classes;
  r.averaging = averaging;
  r.samples = labels.size();
  r.confusion.assign(K, std::vector<std::size_t>(K, 0));
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const int y = labels[n];
    const int p = predictions[n];
    if (y < 0 || y >= num_classes || p < 0 || p >= num_classes) throw std::out_of_range("evaluate: class id");
    ++r.confusion[static_cast<std::size_t>(y)][static_cast<std::size_t>(p)];
  }

  std::size_t correct = 0;
  r.per_class_accuracy.assign(K, 0.0);
  double weight_total = 0.0;
  for (std::size_t j = 0; j < K; ++j) {
    const std::size_t row = std::accumulate(r.confusion[j].begin(), r.confusion[j].end(), std::size_t{0});
    std::size_t col = 0;
    for (std::size_t i = 0; i < K; ++i) col += r.confusion[i][j];
    const std::size_t tp = r.confusion[j][j];
    correct += tp;
    if (row == 0) continue;
    r.evaluated_classes.push_back(static_cast<int>(j));
    const double recall = static_cast<double>(tp) / static_cast<double>(row);
    r.per_class_accuracy[j] = recall;
    double precision = 0.0;
    if (col == 0)
      r.zero_division_classes.push_back(static_cast<int>(j));
    else
      precision = static_cast<double>(tp) / static_cast<double>(col);
    const double f1 = precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
    const double w = averaging == Averaging::Macro ? 1.0 : static_cast<double>(row);
    r.macro_accuracy += recall;
    r.macro_precision += w * precision;
    r.macro_f1 += w * f1;
    weight_total += w;
  }
  const auto evaluated = static_cast<double>(r.evaluated_classes.size());
  r.accuracy = static_cast<double>(correct) / static_cast<double>(r.samples);
  r.macro_accuracy /= evaluated;
  r.macro_precision /= weight_total;
  r.macro_f1 /= weight_total;
  return r;
}

std::array<int, 2> select_rare_classes(std::span<const std::size_t> counts) {
  if (counts.size() < 2) throw std::invalid_argument("select_rare_classes: need at least two classes");
  std::vector<int> ids(counts.size());
  std::iota(ids.begin(), ids.end(), 0);
  std::stable_sort(ids.begin(), ids.end(), [&](int x, int y) {
    return counts[static_cast<std::size_t>(x)] < counts[static_cast<std::size_t>(y)];
  });
  return {ids[0], ids[1]};
}

MannWhitneyResult mann_whitney_u(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("mann_whitney_u: samples must be nonempty");
  std::vector<double> pooled(a.begin(), a.end());
  pooled.insert(pooled.end(), b.begin(), b.end());
  double tie_term = 0.0;
  const auto ranks = midranks(pooled, &tie_term);
  const auto na = static_cast<double>(a.size());
  const auto nb = static_cast<double>(b.size());
  const double rank_sum_a = std::accumulate(ranks.begin(), ranks.begin() + static_cast<long>(a.size()), 0.0);

  MannWhitneyResult out;
  out.u = rank_sum_a - na * (na + 1.0) / 2.0;
  if (pooled.size() <= kExactLimit) {
    long hits = 0;
    long total = 0;
    enumerate_rank_sums(ranks, 0, a.size(), 0.0, rank_sum_a - 1e-9, hits, total);
    out.p_value = static_cast<double>(hits) / static_cast<double>(total);
    out.exact = true;
    return out;
  }
  const double n = na + nb;
  const double var = na * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
  if (var <= 0.0) {
    out.p_value = 1.0;
    return out;
  }
  const double z = (out.u - na * nb / 2.0 - 0.5) / std::sqrt(var);
  out.p_value = 0.5 * std::erfc(z / std::sqrt(2.0));
  return out;
}

RareClassReport rare_class_report(const std::vector<std::vector<std::size_t>>& counts,
                                  const std::map<std::string, std::vector<MetricsReport>>& reports) {
  RareClassReport out;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    RareClassRow row;
    row.participant = static_cast<int>(i);
    row.classes = select_rare_classes(counts[i]);
    for (int k = 0; k < 2; ++k) row.train_counts[static_cast<std::size_t>(k)] = counts[i][static_cast<std::size_t>(row.classes[static_cast<std::size_t>(k)])];
    for (const auto& [method, per_participant] : reports) {
      if (per_participant.size() != counts.size())
        throw std::invalid_argument("rare_class_report: participant count mismatch for " + method);
      const auto& acc = per_participant[i].per_class_accuracy;
      row.accuracy[method] = 0.5 * (acc[static_cast<std::size_t>(row.classes[0])] + acc[static_cast<std::size_t>(row.classes[1])]);
    }
    out.rows.push_back(std::move(row));
  }
  for (const auto& [method, _] : reports) {
    double sum = 0.0;
    for (const auto& row : out.rows) sum += row.accuracy.at(method);
    out.mean_accuracy[method] = out.rows.empty() ? 0.0 : sum / static_cast<double>(out.rows.size());
  }
  return out;
}

ZeroShotReport zero_shot_report(const std::vector<std::vector<std::size_t>>& counts,
                                std::span<const MetricsReport> local_only, std::span<const MetricsReport> federated) {
  if (local_only.size() != counts.size() || federated.size() != counts.size())
    throw std::invalid_argument("zero_shot_report: participant count mismatch");
  ZeroShotReport out;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    for (std::size_t j = 0; j < counts[i].size(); ++j) {
      if (counts[i][j] != 0) continue;
      out.rows.push_back({static_cast<int>(i), static_cast<int>(j), local_only[i].per_class_accuracy[j],
                          federated[i].per_class_accuracy[j]});
    }
  }
  for (const auto& r : out.rows) {
    out.mean_local_only += r.local_only_accuracy;
    out.mean_federated += r.federated_accuracy;
  }
  if (!out.rows.empty()) {
    out.mean_local_only /= static_cast<double>(out.rows.size());
    out.mean_federated /= static_cast<double>(out.rows.size());
  }
  return out;
}

}  // namespace protean
