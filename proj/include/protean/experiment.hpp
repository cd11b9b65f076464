#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "protean/data.hpp"
#include "protean/evaluation.hpp"
#include "protean/federated.hpp"
#include "protean/privacy.hpp"
#include "protean/records.hpp"

namespace protean {

struct DataSpec {
  std::string source = "synthetic";  // synthetic | csv
  int classes = 6;
  int features = 16;
  std::size_t per_class = 600;
  double separation = 6.0;
  std::filesystem::path csv;
  std::filesystem::path schema;
  Normalization normalization = Normalization::MinMax;
  double train_fraction = 0.8;
  std::size_t min_shard_size = 1;
};

struct ExperimentConfig {
  DataSpec data;
  nn::Architecture model;
  int participants = 10;
  std::vector<double> alphas{0.75, 0.5, 0.25};
  std::vector<StrategyKind> strategies{StrategyKind::Protean, StrategyKind::FedProx, StrategyKind::FedAvg,
                                       StrategyKind::FedProto, StrategyKind::LocalOnly};
  double lambda = kDefaultLambda;
  double mu = 0.1;
  TrainingConfig training;
  int rounds = 10;
  InferenceMode inference = InferenceMode::Auto;
  Averaging averaging = Averaging::Macro;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  bool per_round_metrics = true;
  bool checkpoints = true;
  bool audit = false;
  AuditConfig audit_config;
  std::vector<double> dp_sigmas;  // non-empty runs a DP sweep per (alpha, seed)
  std::filesystem::path output_dir = "runs/protean";
};

/// Invalid configuration; `field` is the path of the offending entry, e.g.
/// "strategies[1]" or "training.lr".
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& what)
      : std::runtime_error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

/// Missing keys take their defaults; unknown keys are errors.
ExperimentConfig config_from_json(const Json& tree);
Json to_json(const ExperimentConfig& config);
Json load_config_tree(const std::filesystem::path& path);
/// "training.lr=0.02", "alphas=[0.25]", "strategies=[\"protean\"]". The value
/// is parsed as JSON and falls back to a plain string.
void apply_override(Json& tree, std::string_view assignment);

Strategy make_strategy(const ExperimentConfig& config, StrategyKind kind);

struct PreparedData {
  Dataset train;
  Dataset test;
  PartitionPlan plan;
  std::vector<Dataset> shards;
};

/// Split, scaler fit on the training split, Dirichlet partition. Everything
/// is derived from `seed` through named streams, so every strategy run with
/// the same (alpha, seed) sees the same shards.
PreparedData prepare_data(const ExperimentConfig& config, double alpha, std::uint64_t seed);

/// Final per-participant evaluation: the model each participant holds after
/// the last round's downlink, on the shared test split, via nearest prototype (global prototypes when they
/// are exchanged, the participant's own otherwise) or the head.
std::vector<MetricsReport> evaluate_participants(const RoundState& state, const Strategy& strategy,
                                                 InferenceMode inference, const Dataset& test,
                                                 Averaging averaging = Averaging::Macro);

struct RunResult {
  StrategyKind kind = StrategyKind::Protean;
  Strategy strategy;
  double alpha = 0.0;
  std::uint64_t seed = 0;
  double dp_sigma = 0.0;
  double initial_objective = 0.0;  // mean local objective (CE + prox + alignment) at the initial model
  std::vector<RoundReport> rounds;
  std::vector<MetricsReport> participants;
  RoundState state;

  double mean_macro_accuracy() const;
  double mean_macro_f1() const;
  /// initial_objective followed by every round's mean objective.
  std::vector<double> objective_trajectory() const;
};

RunResult run_strategy(const ExperimentConfig& config, const PreparedData& data, StrategyKind kind, double alpha,
                       std::uint64_t seed);

struct CellSummary {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation over seeds
  std::size_t n = 0;
};

CellSummary summarize(std::span<const double> values);

struct ComparisonRow {
  std::string strategy;
  std::map<double, CellSummary> macro_accuracy;  // by alpha
  std::map<double, CellSummary> macro_f1;
  std::map<double, CellSummary> macro_precision;
  std::map<double, CellSummary> accuracy;
};

struct ComparisonTable {
  std::vector<double> alphas;  // descending
  std::vector<ComparisonRow> rows;
};

/// One row per strategy; each cell averages the per-participant metric within
/// a run, then reports mean (sd) over seeds.
ComparisonTable summarize_runs(std::span<const RunResult> runs);
/// Runs every config over shared prepared data and summarizes. Configs must
/// agree on data, participants, alphas and seeds.
ComparisonTable compare_strategies(std::span<const ExperimentConfig> configs);
/// Same table re-derived from stored "final" records.
ComparisonTable table_from_records(std::span<const Json> records);
/// Strategy x alpha grid of "mean (sd)" in percent, tab separated.
std::string format_table(const ComparisonTable& table, std::string_view metric = "macro_accuracy");

struct DpSweepEntry {
  double sigma = 0.0;
  AuditReport audit;
  double macro_f1 = 0.0;        // mean over participants
  double macro_accuracy = 0.0;  // mean over participants
};

/// Retrains Protean (or the first prototype strategy of `config`) with
/// noised prototype uploads for each sigma, then audits the uploads.
std::vector<DpSweepEntry> dp_sweep(const ExperimentConfig& config, const PreparedData& data, double alpha,
                                   std::uint64_t seed, std::span<const double> sigmas);

AuditReport audit_run(const ExperimentConfig& config, const PreparedData& data, const RoundState& state,
                      std::uint64_t seed, double sigma);

struct ExperimentOutput {
  std::filesystem::path directory;
  ComparisonTable table;
  std::vector<RunResult> runs;  // without round states, to bound memory
};

/// Writes records, tables, checkpoints and a manifest into
/// config.output_dir. Work happens in "<output_dir>.partial", renamed on
/// success and removed on failure. An existing output directory is replaced
/// only when `overwrite` is set.
ExperimentOutput run_experiment(const ExperimentConfig& config, bool overwrite = false, std::ostream* log = nullptr);

}  // namespace protean
