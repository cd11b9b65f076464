#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "protean/data.hpp"
#include "protean/nn.hpp"
#include "protean/prototype.hpp"
#include "protean/rng.hpp"

namespace protean {

/// Per-feature box, in whatever units the caller works in.
struct FeatureBounds {
  std::vector<double> lower;
  std::vector<double> upper;

  std::size_t size() const { return lower.size(); }
};

/// Bounds of the stored (normalized) features, the space the model reads.
FeatureBounds stored_bounds(const Dataset& data);
/// Bounds of the same data mapped back to raw units.
FeatureBounds raw_bounds(const Dataset& data);

struct AttackConfig {
  int steps = 2000;
  double step_size = 0.01;
  int restarts = 3;
};

struct Reconstruction {
  std::vector<double> profile;        // stored units
  double objective = 0.0;             // |phi(x) - target|^2 at `profile`
  int iterations = 0;                 // gradient steps taken over all restarts
  std::vector<double> best_objective; // best-so-far after every step
};

/// Projected gradient descent on |phi(x) - target|^2 from a uniform start in
/// `bounds` (or `start` when given), iterates clamped to the box. Returns the
/// best iterate seen.
Reconstruction reconstruct_profile(const nn::ModelParams& model, std::span<const double> target,
                                   const FeatureBounds& bounds, const AttackConfig& config, Rng& rng,
                                   std::span<const double> start = {});

/// Mean feature vector of class `cls` in `shard`, stored units.
std::vector<double> class_mean_profile(const Dataset& shard, int cls);

/// Mean over `trials` of the MSE between a uniform draw in `bounds` and
/// `class_mean`.
double random_baseline_mse(const FeatureBounds& bounds, std::span<const double> class_mean, int trials, Rng& rng);

std::vector<double> per_feature_squared_error(std::span<const double> a, std::span<const double> b);
double mean_squared_error(std::span<const double> a, std::span<const double> b);

struct PsnrResult {
  std::vector<double> per_feature;  // NaN for excluded features
  double mean = 0.0;                // over included features; +inf if some MSE is 0
  std::vector<int> excluded;        // zero-range features
};

/// 10 log10(range^2 / mse) per feature.
PsnrResult psnr(std::span<const double> per_feature_mse, std::span<const double> ranges);

struct AuditEntry {
  int participant = 0;
  int cls = 0;
  std::vector<double> profile;  // raw units
  double reconstructed_mse = 0.0;
  double random_mse = 0.0;
  PsnrResult reconstructed_psnr;
  double random_psnr_mean = 0.0;
  double sigma = 0.0;
  int iterations = 0;
  double objective = 0.0;
};

struct AuditReport {
  double sigma = 0.0;
  std::vector<AuditEntry> entries;

  double mean_reconstructed_mse() const;
  double mean_random_mse() const;
  /// Share of entries whose reconstruction beats the random baseline.
  double fraction_reconstruction_better() const;
};

struct AuditConfig {
  AttackConfig attack;
  int baseline_trials = 1000;
  std::uint64_t seed = 0;
};

/// Semi-honest server: attacks every (participant, class) prototype present
/// in `uploaded[i]` using `models[i]`. `train` supplies the attack box and the
/// raw ranges; errors are measured in raw units against each shard's class
/// mean.
AuditReport audit_participants(std::span<const nn::ModelParams> models, std::span<const PrototypeSet> uploaded,
                               std::span<const Dataset> shards, const Dataset& train, const AuditConfig& config,
                               double sigma = 0.0);

struct PrivacyBar {
  int participant = 0;
  double random_mse = 0.0;
  double reconstructed_mse = 0.0;
};

/// Per-participant means of the two errors (bar-chart data).
std::vector<PrivacyBar> privacy_bars(const AuditReport& report);

}  // namespace protean
