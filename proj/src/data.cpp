#include "protean/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "protean/rng.hpp"

namespace protean {
namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const auto end = comma == std::string_view::npos ? s.size() : comma;
    auto item = trim(s.substr(start, end - start));
    if (!item.empty()) out.push_back(std::move(item));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cell.push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cell.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      cells.push_back(trim(cell));
      cell.clear();
    } else {
      cell.push_back(c);
    }
  }
  cells.push_back(trim(cell));
  return cells;
}

bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  const char* begin = s.data();
  const char* end = s.data() + s.size();
  if (*begin == '+') ++begin;
  auto [ptr, ec] = std::from_chars(begin, end, out);
  return ec == std::errc() && ptr == end && std::isfinite(out);
}

std::vector<FeatureRange> compute_ranges(const Matrix& raw) {
  std::vector<FeatureRange> ranges(static_cast<std::size_t>(raw.cols()));
  if (raw.rows() == 0) return ranges;
  for (Eigen::Index f = 0; f < raw.cols(); ++f)
    ranges[static_cast<std::size_t>(f)] = {raw.col(f).minCoeff(), raw.col(f).maxCoeff()};
  return ranges;
}

Matrix raw_matrix(const Dataset& d) {
  Matrix raw = d.features;
  for (Eigen::Index f = 0; f < raw.cols(); ++f) {
    const auto i = static_cast<std::size_t>(f);
    raw.col(f) = (raw.col(f).array() * d.to_raw.scale[i] + d.to_raw.offset[i]).matrix();
  }
  return raw;
}

}  // namespace

FeatureScaler FeatureScaler::identity(std::size_t features) {
  FeatureScaler s;
  s.offset.assign(features, 0.0);
  s.scale.assign(features, 1.0);
  return s;
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(class_names.size(), 0);
  for (int y : labels) ++counts[static_cast<std::size_t>(y)];
  return counts;
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  Dataset out;
  out.features.resize(static_cast<Eigen::Index>(rows.size()), features.cols());
  out.labels.reserve(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out.features.row(static_cast<Eigen::Index>(r)) = features.row(static_cast<Eigen::Index>(rows[r]));
    out.labels.push_back(labels[rows[r]]);
  }
  out.class_names = class_names;
  out.feature_names = feature_names;
  out.feature_ranges = feature_ranges;
  out.to_raw = to_raw;
  return out;
}

std::vector<double> Dataset::raw_row(Eigen::Index row) const {
  return to_raw_units(std::span<const double>(features.row(row).data(), static_cast<std::size_t>(features.cols())));
}

std::vector<double> Dataset::to_raw_units(std::span<const double> stored) const {
  std::vector<double> out(stored.size());
  for (std::size_t f = 0; f < stored.size(); ++f) out[f] = to_raw.offset[f] + to_raw.scale[f] * stored[f];
  return out;
}

CsvSchema parse_schema(std::istream& in) {
  CsvSchema schema;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("schema line " + std::to_string(lineno) + ": expected key = value");
    const auto key = trim(std::string_view(line).substr(0, eq));
    const auto value = trim(std::string_view(line).substr(eq + 1));
    if (key == "label") {
      schema.label_column = value;
    } else if (key == "drop") {
      schema.dropped_columns = split_list(value);
    } else if (key == "categorical") {
      schema.categorical_columns = split_list(value);
    } else if (key == "min_class_count") {
      schema.min_class_count = static_cast<std::size_t>(std::stoull(value));
    } else {
      throw std::invalid_argument("schema line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
  }
  if (schema.label_column.empty()) throw std::invalid_argument("schema: no label column");
  return schema;
}

CsvSchema load_schema(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open schema file " + path.string());
  return parse_schema(in);
}

Dataset load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open csv file " + path.string());
  return read_csv(in, schema);
}

Dataset read_csv(std::istream& in, const CsvSchema& schema) {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("csv: empty input");
  const auto header = split_csv_line(line);

  int label_col = -1;
  std::vector<int> feature_cols;
  std::vector<bool> categorical(header.size(), false);
  const std::set<std::string> dropped(schema.dropped_columns.begin(), schema.dropped_columns.end());
  const std::set<std::string> cats(schema.categorical_columns.begin(), schema.categorical_columns.end());
  Dataset out;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (header[c] == schema.label_column) {
      if (label_col >= 0) throw std::invalid_argument("csv: duplicate label column");
      label_col = static_cast<int>(c);
    } else if (!dropped.contains(header[c])) {
      feature_cols.push_back(static_cast<int>(c));
      categorical[c] = cats.contains(header[c]);
      out.feature_names.push_back(header[c]);
    }
  }
  if (label_col < 0) throw std::invalid_argument("csv: label column '" + schema.label_column + "' not found");
  if (feature_cols.empty()) throw std::invalid_argument("csv: no feature columns");

  std::vector<std::vector<std::string>> rows;
  std::size_t dropped_rows = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != header.size() || cells[static_cast<std::size_t>(label_col)].empty()) {
      ++dropped_rows;
      continue;
    }
    rows.push_back(std::move(cells));
  }

  // Label-encode categorical columns over the whole file, sorted.
  std::map<int, std::map<std::string, double>> codes;
  for (int c : feature_cols) {
    if (!categorical[static_cast<std::size_t>(c)]) continue;
    auto& table = codes[c];
    for (const auto& r : rows) table.emplace(r[static_cast<std::size_t>(c)], 0.0);
    double next = 0.0;
    for (auto& [_, code] : table) code = next++;
  }

  std::vector<std::vector<double>> values;
  std::vector<std::string> label_text;
  for (const auto& r : rows) {
    std::vector<double> v;
    v.reserve(feature_cols.size());
    bool ok = true;
    for (int c : feature_cols) {
      const auto& cell = r[static_cast<std::size_t>(c)];
      double x = 0.0;
      if (categorical[static_cast<std::size_t>(c)]) {
        x = codes[c][cell];
      } else if (!parse_double(cell, x)) {
        ok = false;
        break;
      }
      v.push_back(x);
    }
    if (!ok) {
      ++dropped_rows;
      continue;
    }
    values.push_back(std::move(v));
    label_text.push_back(r[static_cast<std::size_t>(label_col)]);
  }

  std::map<std::string, std::size_t> label_counts;
  for (const auto& l : label_text) ++label_counts[l];
  std::map<std::string, int> label_ids;
  for (const auto& [name, count] : label_counts) {
    if (count < schema.min_class_count) continue;
    label_ids.emplace(name, static_cast<int>(out.class_names.size()));
    out.class_names.push_back(name);
  }

  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (label_ids.contains(label_text[i]))
      keep.push_back(i);
    else
      ++dropped_rows;
  }
  if (keep.empty()) throw std::runtime_error("csv: dataset is empty after filtering");
  if (out.class_names.size() < 2) throw std::runtime_error("csv: dataset has a single class");

  out.features.resize(static_cast<Eigen::Index>(keep.size()), static_cast<Eigen::Index>(feature_cols.size()));
  for (std::size_t r = 0; r < keep.size(); ++r) {
    for (std::size_t f = 0; f < feature_cols.size(); ++f)
      out.features(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(f)) = values[keep[r]][f];
    out.labels.push_back(label_ids.at(label_text[keep[r]]));
  }
  out.dropped_rows = dropped_rows;
  out.to_raw = FeatureScaler::identity(feature_cols.size());
  out.feature_ranges = compute_ranges(out.features);
  return out;
}

FeatureScaler fit_scaler(const Dataset& data, Normalization method) {
  if (data.size() == 0) throw std::invalid_argument("fit_scaler: empty dataset");
  const auto F = static_cast<std::size_t>(data.num_features());
  FeatureScaler s;
  s.offset.resize(F);
  s.scale.resize(F);
  for (std::size_t f = 0; f < F; ++f) {
    const auto col = data.features.col(static_cast<Eigen::Index>(f));
    if (method == Normalization::MinMax) {
      s.offset[f] = col.minCoeff();
      s.scale[f] = col.maxCoeff() - s.offset[f];
    } else {
      const double mean = col.mean();
      s.offset[f] = mean;
      s.scale[f] = std::sqrt((col.array() - mean).square().mean());
    }
  }
  s.raw_ranges = compute_ranges(raw_matrix(data));
  return s;
}

Dataset apply_scaler(const Dataset& data, const FeatureScaler& scaler) {
  if (scaler.offset.size() != static_cast<std::size_t>(data.num_features()))
    throw std::invalid_argument("apply_scaler: feature count mismatch");
  Dataset out = data;
  for (Eigen::Index f = 0; f < out.features.cols(); ++f) {
    const auto i = static_cast<std::size_t>(f);
    const double o = scaler.offset[i];
    const double s = scaler.scale[i];
    if (s > 0.0)
      out.features.col(f) = ((out.features.col(f).array() - o) / s).matrix();
    else
      out.features.col(f).setZero();
    // Compose with the existing map back to raw units.
    const double prev_o = data.to_raw.offset[i];
    const double prev_s = data.to_raw.scale[i];
    out.to_raw.offset[i] = prev_o + prev_s * o;
    out.to_raw.scale[i] = prev_s * s;
  }
  out.feature_ranges = scaler.raw_ranges;
  return out;
}

Dataset preprocess(const Dataset& data, Normalization method) {
  return apply_scaler(data, fit_scaler(data, method));
}

TrainTestSplit split_train_test(const Dataset& data, double train_fraction, std::uint64_t seed) {
  if (data.size() < 10) throw std::invalid_argument("split_train_test: need at least 10 samples");
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw std::invalid_argument("split_train_test: fraction must lie in (0, 1)");
  Rng rng = make_rng(seed, "split");
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(data.num_classes()));
  for (std::size_t i = 0; i < data.size(); ++i) by_class[static_cast<std::size_t>(data.labels[i])].push_back(i);

  TrainTestSplit out;
  for (auto& rows : by_class) {
    std::shuffle(rows.begin(), rows.end(), rng);
    const std::size_t n = rows.size();
    std::size_t n_train = n;
    if (n >= 2) {
      const auto want = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
      n_train = std::clamp<std::size_t>(want, 1, n - 1);
    }
    out.train_rows.insert(out.train_rows.end(), rows.begin(), rows.begin() + static_cast<long>(n_train));
    out.test_rows.insert(out.test_rows.end(), rows.begin() + static_cast<long>(n_train), rows.end());
  }
  std::sort(out.train_rows.begin(), out.train_rows.end());
  std::sort(out.test_rows.begin(), out.test_rows.end());
  out.train = data.subset(out.train_rows);
  out.test = data.subset(out.test_rows);
  return out;
}

PartitionPlan dirichlet_partition(const Dataset& train, int participants, double alpha, std::uint64_t seed,
                                  std::size_t min_shard_size) {
  if (participants < 2) throw std::invalid_argument("dirichlet_partition: need at least 2 participants");
  if (!(alpha > 0.0)) throw std::invalid_argument("dirichlet_partition: alpha must be positive");
  if (min_shard_size * static_cast<std::size_t>(participants) > train.size())
    throw std::invalid_argument("dirichlet_partition: not enough samples for the minimum shard size");

  const auto M = static_cast<std::size_t>(participants);
  const auto K = static_cast<std::size_t>(train.num_classes());
  std::vector<std::vector<std::size_t>> by_class(K);
  for (std::size_t i = 0; i < train.size(); ++i) by_class[static_cast<std::size_t>(train.labels[i])].push_back(i);

  Rng rng = make_rng(seed, "partition");
  std::gamma_distribution<double> gamma(alpha, 1.0);
  constexpr int kMaxAttempts = 10000;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    PartitionPlan plan;
    plan.participants = participants;
    plan.alpha = alpha;
    plan.shards.assign(M, {});
    plan.counts.assign(M, std::vector<std::size_t>(K, 0));
    for (std::size_t j = 0; j < K; ++j) {
      std::vector<double> p(M);
      double total = 0.0;
      for (auto& v : p) total += (v = gamma(rng));
      if (total == 0.0) {
        // Every draw underflowed: all mass on one participant.
        p[std::uniform_int_distribution<std::size_t>(0, M - 1)(rng)] = 1.0;
      }
      std::discrete_distribution<std::size_t> pick(p.begin(), p.end());
      for (std::size_t row : by_class[j]) {
        const std::size_t i = pick(rng);
        plan.shards[i].push_back(row);
        ++plan.counts[i][j];
      }
    }
    const bool ok = std::all_of(plan.shards.begin(), plan.shards.end(),
                                [&](const auto& s) { return s.size() >= min_shard_size; });
    if (!ok) continue;
    for (auto& s : plan.shards) std::sort(s.begin(), s.end());
    return plan;
  }
  throw std::runtime_error("dirichlet_partition: could not satisfy the minimum shard size");
}

Dataset synthesize_gaussian(int num_classes, int num_features, std::size_t per_class, double separation,
                            std::uint64_t seed) {
  if (num_classes < 2) throw std::invalid_argument("synthesize_gaussian: need at least 2 classes");
  if (num_features < 4) throw std::invalid_argument("synthesize_gaussian: need at least 4 features");
  Rng rng = make_rng(seed, "synthetic");
  std::normal_distribution<double> normal(0.0, 1.0);

  const auto K = static_cast<std::size_t>(num_classes);
  const auto F = static_cast<Eigen::Index>(num_features);
  std::vector<Vector> dirs;
  while (dirs.size() < K) {
    Vector v(F);
    for (Eigen::Index f = 0; f < F; ++f) v(f) = normal(rng);
    if (dirs.size() < static_cast<std::size_t>(F))
      for (const auto& d : dirs) v -= v.dot(d) * d;
    const double n = v.norm();
    if (n < 1e-8) continue;
    dirs.push_back(v / n);
  }

  Dataset out;
  out.features.resize(static_cast<Eigen::Index>(K * per_class), F);
  const double radius = separation / std::sqrt(2.0);
  for (std::size_t j = 0; j < K; ++j) {
    out.class_names.push_back("class_" + std::to_string(j));
    for (std::size_t s = 0; s < per_class; ++s) {
      const auto row = static_cast<Eigen::Index>(j * per_class + s);
      for (Eigen::Index f = 0; f < F; ++f) out.features(row, f) = radius * dirs[j](f) + normal(rng);
      out.labels.push_back(static_cast<int>(j));
    }
  }
  // Flow-like raw units: per-feature scale in [0.5, 50] and offset in [0, 100].
  std::uniform_real_distribution<double> scale(0.5, 50.0);
  std::uniform_real_distribution<double> offset(0.0, 100.0);
  for (Eigen::Index f = 0; f < F; ++f) {
    const double s = scale(rng);
    const double o = offset(rng);
    out.features.col(f) = (out.features.col(f).array() * s + o).matrix();
    out.feature_names.push_back("f" + std::to_string(f));
  }
  out.to_raw = FeatureScaler::identity(static_cast<std::size_t>(F));
  out.feature_ranges = compute_ranges(out.features);
  return out;
}

}  // namespace protean
