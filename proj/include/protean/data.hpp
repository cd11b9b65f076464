#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <span>
#include <string>
#include <vector>

#include "protean/matrix.hpp"

namespace protean {

struct FeatureRange {
  double min = 0.0;
  double max = 0.0;
  double width() const { return max - min; }
  friend bool operator==(const FeatureRange&, const FeatureRange&) = default;
};

/// Per-feature affine map back to raw units: raw = offset + scale * stored.
struct FeatureScaler {
  std::vector<double> offset;
  std::vector<double> scale;
  std::vector<FeatureRange> raw_ranges;  // of the data the scaler was fit on

  static FeatureScaler identity(std::size_t features);
  friend bool operator==(const FeatureScaler&, const FeatureScaler&) = default;
};

struct Dataset {
  Matrix features;  // N x F
  std::vector<int> labels;
  std::vector<std::string> class_names;
  std::vector<std::string> feature_names;
  /// Raw (pre-normalization) per-feature bounds of the training data.
  std::vector<FeatureRange> feature_ranges;
  /// Maps stored features back to raw units.
  FeatureScaler to_raw = {};
  std::size_t dropped_rows = 0;

  std::size_t size() const { return labels.size(); }
  int num_classes() const { return static_cast<int>(class_names.size()); }
  int num_features() const { return static_cast<int>(features.cols()); }
  std::vector<std::size_t> class_counts() const;
  Dataset subset(std::span<const std::size_t> rows) const;
  std::vector<double> raw_row(Eigen::Index row) const;
  std::vector<double> to_raw_units(std::span<const double> stored) const;
};

/// Column roles for CSV ingestion. Text form, one `key = value` per line:
///   label = Class
///   drop = Date, Timestamp
///   categorical = Protocol, Service
///   min_class_count = 20
struct CsvSchema {
  std::string label_column;
  std::vector<std::string> dropped_columns;
  std::vector<std::string> categorical_columns;
  std::size_t min_class_count = 1;
};

CsvSchema parse_schema(std::istream& in);
CsvSchema load_schema(const std::filesystem::path& path);

/// Rows with missing, non-numeric or non-finite feature values are dropped
/// and counted in Dataset::dropped_rows (as are rows of classes below
/// min_class_count). Categorical columns are label encoded in sorted order.
Dataset load_csv(const std::filesystem::path& path, const CsvSchema& schema);
Dataset read_csv(std::istream& in, const CsvSchema& schema);

enum class Normalization { MinMax, ZScore };

/// Fits on `data`; constant features map to 0.
FeatureScaler fit_scaler(const Dataset& data, Normalization method);
Dataset apply_scaler(const Dataset& data, const FeatureScaler& scaler);
Dataset preprocess(const Dataset& data, Normalization method);

struct TrainTestSplit {
  Dataset train;
  Dataset test;
  std::vector<std::size_t> train_rows;
  std::vector<std::size_t> test_rows;
};

/// Stratified per class. A class with a single sample goes to training.
TrainTestSplit split_train_test(const Dataset& data, double train_fraction, std::uint64_t seed);

struct PartitionPlan {
  int participants = 0;
  double alpha = 0.0;
  std::vector<std::vector<std::size_t>> shards;  // row indices into the training set
  std::vector<std::vector<std::size_t>> counts;  // participants x classes

  friend bool operator==(const PartitionPlan&, const PartitionPlan&) = default;
};

/// Per class j: p ~ Dir(alpha * 1_M), then every sample of j goes to
/// participant i with probability p_i. Plans where some shard is smaller than
/// `min_shard_size` are redrawn from the same stream.
PartitionPlan dirichlet_partition(const Dataset& train, int participants, double alpha,
                                  std::uint64_t seed, std::size_t min_shard_size = 1);

/// Isotropic unit-variance Gaussian classes whose means are pairwise
/// `separation` apart (orthonormal directions when K <= F), followed by a
/// random per-feature affine map into raw units.
Dataset synthesize_gaussian(int num_classes, int num_features, std::size_t per_class,
                            double separation, std::uint64_t seed);

}  // namespace protean
