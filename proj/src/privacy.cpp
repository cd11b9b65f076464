#include "protean/privacy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>

namespace protean {

FeatureBounds stored_bounds(const Dataset& data) {
  if (data.size() == 0) throw std::invalid_argument("stored_bounds: empty dataset");
  FeatureBounds b;
  for (Eigen::Index c = 0; c < data.features.cols(); ++c) {
    b.lower.push_back(data.features.col(c).minCoeff());
    b.upper.push_back(data.features.col(c).maxCoeff());
  }
  return b;
}

FeatureBounds raw_bounds(const Dataset& data) {
  const FeatureBounds s = stored_bounds(data);
  FeatureBounds b;
  const auto lo = data.to_raw_units(s.lower);
  const auto hi = data.to_raw_units(s.upper);
  for (std::size_t k = 0; k < lo.size(); ++k) {
    b.lower.push_back(std::min(lo[k], hi[k]));
    b.upper.push_back(std::max(lo[k], hi[k]));
  }
  return b;
}

Reconstruction reconstruct_profile(const nn::ModelParams& model, std::span<const double> target,
                                   const FeatureBounds& bounds, const AttackConfig& config, Rng& rng,
                                   std::span<const double> start) {
  const auto F = static_cast<std::size_t>(model.input_dim);
  if (bounds.size() != F || bounds.upper.size() != F) throw std::invalid_argument("reconstruct_profile: bounds width");
  if (target.size() != static_cast<std::size_t>(model.embedding_dim))
    throw std::invalid_argument("reconstruct_profile: target width");
  if (!start.empty() && start.size() != F) throw std::invalid_argument("reconstruct_profile: start width");
  if (config.steps < 0 || config.restarts < 1 || !(config.step_size > 0.0))
    throw std::invalid_argument("reconstruct_profile: bad attack configuration");

  Reconstruction out;
  out.objective = std::numeric_limits<double>::infinity();
  std::vector<double> x(F);
  for (int restart = 0; restart < config.restarts; ++restart) {
    if (restart == 0 && !start.empty()) {
      x.assign(start.begin(), start.end());
    } else {
      for (std::size_t k = 0; k < F; ++k) x[k] = std::uniform_real_distribution<double>(bounds.lower[k], bounds.upper[k])(rng);
    }
    for (int step = 0;; ++step) {
      double objective = 0.0;
      const auto grad = nn::input_gradient(model, x, target, 1.0, &objective);
      if (!std::isfinite(objective))
        throw std::runtime_error("reconstruct_profile: objective became non-finite at step " + std::to_string(step));
      if (objective < out.objective) {
        out.objective = objective;
        out.profile = x;
      }
      if (step == config.steps) break;
      for (std::size_t k = 0; k < F; ++k)
        x[k] = std::clamp(x[k] - config.step_size * grad[k], bounds.lower[k], bounds.upper[k]);
      ++out.iterations;
      out.best_objective.push_back(out.objective);
    }
  }
  return out;
}

std::vector<double> class_mean_profile(const Dataset& shard, int cls) {
  std::vector<double> sum(static_cast<std::size_t>(shard.num_features()), 0.0);
  std::size_t n = 0;
  for (std::size_t r = 0; r < shard.size(); ++r) {
    if (shard.labels[r] != cls) continue;
    for (std::size_t k = 0; k < sum.size(); ++k) sum[k] += shard.features(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k));
    ++n;
  }
  if (n == 0) throw std::invalid_argument("class_mean_profile: class " + std::to_string(cls) + " absent from shard");
  for (auto& v : sum) v /= static_cast<double>(n);
  return sum;
}

std::vector<double> per_feature_squared_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("squared error: length mismatch");
  std::vector<double> out(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) out[k] = (a[k] - b[k]) * (a[k] - b[k]);
  return out;
}

double mean_squared_error(std::span<const double> a, std::span<const double> b) {
  const auto se = per_feature_squared_error(a, b);
  double s = 0.0;
  for (double v : se) s += v;
  return se.empty() ? 0.0 : s / static_cast<double>(se.size());
}

double random_baseline_mse(const FeatureBounds& bounds, std::span<const double> class_mean, int trials, Rng& rng) {
  if (trials < 1) throw std::invalid_argument("random_baseline_mse: trials must be >= 1");
  if (bounds.size() != class_mean.size()) throw std::invalid_argument("random_baseline_mse: width mismatch");
  std::vector<double> draw(class_mean.size());
  double total = 0.0;
  for (int t = 0; t < trials; ++t) {
    for (std::size_t k = 0; k < draw.size(); ++k)
      draw[k] = bounds.lower[k] == bounds.upper[k]
                    ? bounds.lower[k]
                    : std::uniform_real_distribution<double>(bounds.lower[k], bounds.upper[k])(rng);
    total += mean_squared_error(draw, class_mean);
  }
  return total / trials;
}

PsnrResult psnr(std::span<const double> per_feature_mse, std::span<const double> ranges) {
  if (per_feature_mse.size() != ranges.size()) throw std::invalid_argument("psnr: width mismatch");
  PsnrResult out;
  out.per_feature.assign(ranges.size(), std::numeric_limits<double>::quiet_NaN());
  double sum = 0.0;
  int included = 0;
  for (std::size_t k = 0; k < ranges.size(); ++k) {
    if (!(ranges[k] > 0.0)) {
      out.excluded.push_back(static_cast<int>(k));
      continue;
    }
    if (per_feature_mse[k] < 0.0) throw std::invalid_argument("psnr: negative mse");
    out.per_feature[k] = per_feature_mse[k] == 0.0 ? std::numeric_limits<double>::infinity()
                                                   : 10.0 * std::log10(ranges[k] * ranges[k] / per_feature_mse[k]);
    sum += out.per_feature[k];
    ++included;
  }
  if (included == 0) throw std::invalid_argument("psnr: every feature has zero range");
  out.mean = sum / included;
  return out;
}

double AuditReport::mean_reconstructed_mse() const {
  double s = 0.0;
  for (const auto& e : entries) s += e.reconstructed_mse;
  return entries.empty() ? 0.0 : s / static_cast<double>(entries.size());
}

double AuditReport::mean_random_mse() const {
  double s = 0.0;
  for (const auto& e : entries) s += e.random_mse;
  return entries.empty() ? 0.0 : s / static_cast<double>(entries.size());
}

double AuditReport::fraction_reconstruction_better() const {
  if (entries.empty()) return 0.0;
  std::size_t better = 0;
  for (const auto& e : entries) better += e.reconstructed_mse < e.random_mse;
  return static_cast<double>(better) / static_cast<double>(entries.size());
}

AuditReport audit_participants(std::span<const nn::ModelParams> models, std::span<const PrototypeSet> uploaded,
                               std::span<const Dataset> shards, const Dataset& train, const AuditConfig& config,
                               double sigma) {
  if (models.size() != uploaded.size() || models.size() != shards.size())
    throw std::invalid_argument("audit_participants: participant count mismatch");
  const FeatureBounds box = stored_bounds(train);
  const FeatureBounds raw = raw_bounds(train);
  std::vector<double> ranges(raw.size());
  for (std::size_t k = 0; k < ranges.size(); ++k) ranges[k] = raw.upper[k] - raw.lower[k];

  AuditReport report;
  report.sigma = sigma;
  for (std::size_t i = 0; i < models.size(); ++i) {
    const int K = uploaded[i].num_classes;
    for (int j = 0; j < K; ++j) {
      if (!uploaded[i].present(j)) continue;
      const std::uint64_t stream = i * static_cast<std::uint64_t>(K) + static_cast<std::uint64_t>(j);
      Rng attack_rng = make_rng(config.seed, "attack", stream);
      Rng baseline_rng = make_rng(config.seed, "baseline", stream);
      const Reconstruction rec = reconstruct_profile(models[i], uploaded[i].vector(j), box, config.attack, attack_rng);

      const std::vector<double> mean_raw = shards[i].to_raw_units(class_mean_profile(shards[i], j));
      AuditEntry e;
      e.participant = static_cast<int>(i);
      e.cls = j;
      e.sigma = sigma;
      e.profile = shards[i].to_raw_units(rec.profile);
      e.iterations = rec.iterations;
      e.objective = rec.objective;
      const auto se = per_feature_squared_error(e.profile, mean_raw);
      e.reconstructed_mse = mean_squared_error(e.profile, mean_raw);
      e.reconstructed_psnr = psnr(se, ranges);
      e.random_mse = random_baseline_mse(raw, mean_raw, config.baseline_trials, baseline_rng);

      // Per-feature expected error of the uniform guess, for its PSNR.
      std::vector<double> random_se(ranges.size());
      for (std::size_t k = 0; k < ranges.size(); ++k) {
        const double a = raw.lower[k] - mean_raw[k];
        const double b = raw.upper[k] - mean_raw[k];
        random_se[k] = ranges[k] > 0.0 ? (b * b * b - a * a * a) / (3.0 * ranges[k]) : 0.0;
      }
      e.random_psnr_mean = psnr(random_se, ranges).mean;
      report.entries.push_back(std::move(e));
    }
  }
  return report;
}

std::vector<PrivacyBar> privacy_bars(const AuditReport& report) {
  std::map<int, std::pair<PrivacyBar, int>> acc;
  for (const auto& e : report.entries) {
    auto& [bar, n] = acc[e.participant];
    bar.participant = e.participant;
    bar.random_mse += e.random_mse;
    bar.reconstructed_mse += e.reconstructed_mse;
    ++n;
  }
  std::vector<PrivacyBar> out;
  for (auto& [_, item] : acc) {
    auto& [bar, n] = item;
    bar.random_mse /= n;
    bar.reconstructed_mse /= n;
    out.push_back(bar);
  }
  return out;
}

}  // namespace protean
