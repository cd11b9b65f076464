#include "protean/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>

namespace protean {
namespace {

// Reads typed fields out of one JSON object, tracking the path for errors
// and rejecting keys nobody asked for.
class Fields {
 public:
  Fields(const Json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  template <typename T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    if (!obj_.contains(key)) return;
    try {
      out = obj_.at(key).get<T>();
    } catch (const std::exception&) {
      throw ConfigError(at(key), "wrong type (" + obj_.at(key).dump() + ")");
    }
  }

  const Json* child(const std::string& key) {
    seen_.insert(key);
    return obj_.contains(key) ? &obj_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [k, _] : obj_.items())
      if (!seen_.count(k)) throw ConfigError(at(k), "unknown field");
  }

 private:
  const Json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

void require(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw ConfigError(field, what);
}

std::string normalization_name(Normalization n) { return n == Normalization::MinMax ? "minmax" : "zscore"; }

std::string format_alpha(double a) {
  std::ostringstream s;
  s << a;
  return s.str();
}

std::string run_tag(double alpha, std::uint64_t seed, StrategyKind kind) {
  return "a" + format_alpha(alpha) + "_s" + std::to_string(seed) + "_" + to_string(kind);
}

double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

bool uses_prototypes(StrategyKind k) {
  return k == StrategyKind::Protean || k == StrategyKind::ProteanEmbedding || k == StrategyKind::FedProto;
}

}  // namespace

ExperimentConfig config_from_json(const Json& tree) {
  ExperimentConfig c;
  Fields root(tree, "");

  if (const Json* d = root.child("data")) {
    Fields f(*d, "data");
    f.read("source", c.data.source);
    require(c.data.source == "synthetic" || c.data.source == "csv", f.at("source"),
            "expected synthetic or csv, got '" + c.data.source + "'");
    f.read("classes", c.data.classes);
    f.read("features", c.data.features);
    f.read("per_class", c.data.per_class);
    f.read("separation", c.data.separation);
    std::string csv, schema, norm = normalization_name(c.data.normalization);
    f.read("csv", csv);
    f.read("schema", schema);
    f.read("normalization", norm);
    f.read("train_fraction", c.data.train_fraction);
    f.read("min_shard_size", c.data.min_shard_size);
    f.finish();
    c.data.csv = csv;
    c.data.schema = schema;
    require(norm == "minmax" || norm == "zscore", "data.normalization", "expected minmax or zscore, got '" + norm + "'");
    c.data.normalization = norm == "minmax" ? Normalization::MinMax : Normalization::ZScore;
    require(c.data.train_fraction > 0.0 && c.data.train_fraction < 1.0, "data.train_fraction", "must lie in (0, 1)");
    if (c.data.source == "csv") require(!c.data.csv.empty(), "data.csv", "required when source is csv");
    if (c.data.source == "synthetic") {
      require(c.data.classes >= 2, "data.classes", "must be >= 2");
      require(c.data.features >= 4, "data.features", "must be >= 4");
      require(c.data.per_class >= 1, "data.per_class", "must be >= 1");
    }
  }

  if (const Json* m = root.child("model")) {
    try {
      c.model = architecture_from_json(*m);
    } catch (const std::exception& e) {
      throw ConfigError("model", e.what());
    }
    Fields f(*m, "model");
    for (const char* k : {"kind", "conv1_filters", "conv2_filters", "embedding_dim", "dropout1", "dropout2", "mlp_hidden"})
      f.child(k);
    f.finish();
  }

  root.read("participants", c.participants);
  require(c.participants >= 2, "participants", "must be >= 2");
  root.read("alphas", c.alphas);
  require(!c.alphas.empty(), "alphas", "must not be empty");
  for (std::size_t k = 0; k < c.alphas.size(); ++k)
    require(c.alphas[k] > 0.0, "alphas[" + std::to_string(k) + "]", "must be positive");

  if (const Json* s = root.child("strategies")) {
    require(s->is_array() && !s->empty(), "strategies", "expected a non-empty list");
    c.strategies.clear();
    for (std::size_t k = 0; k < s->size(); ++k) {
      const std::string field = "strategies[" + std::to_string(k) + "]";
      require((*s)[k].is_string(), field, "expected a strategy name");
      try {
        c.strategies.push_back(parse_strategy((*s)[k].get<std::string>()));
      } catch (const std::exception& e) {
        throw ConfigError(field, e.what());
      }
    }
  }

  root.read("lambda", c.lambda);
  require(c.lambda >= 0.0, "lambda", "must be >= 0");
  root.read("mu", c.mu);
  require(c.mu >= 0.0, "mu", "must be >= 0");

  if (const Json* t = root.child("training")) {
    Fields f(*t, "training");
    f.read("epochs", c.training.epochs);
    f.read("batch_size", c.training.batch_size);
    f.read("lr", c.training.lr);
    f.read("dp_sigma", c.training.dp_sigma);
    f.read("workers", c.training.workers);
    std::string divisor = "contributors", source = to_string(c.training.prototype_source);
    f.read("divisor", divisor);
    f.read("prototype_source", source);
    f.finish();
    require(c.training.epochs >= 1, "training.epochs", "must be >= 1");
    require(c.training.batch_size >= 1, "training.batch_size", "must be >= 1");
    require(c.training.lr > 0.0, "training.lr", "must be positive");
    require(c.training.dp_sigma >= 0.0, "training.dp_sigma", "must be >= 0");
    require(c.training.workers >= 1, "training.workers", "must be >= 1");
    require(divisor == "contributors" || divisor == "participants", "training.divisor",
            "expected contributors or participants, got '" + divisor + "'");
    c.training.divisor = divisor == "contributors" ? PrototypeDivisor::Contributors : PrototypeDivisor::Participants;
    try {
      c.training.prototype_source = parse_prototype_source(source);
    } catch (const std::exception& e) {
      throw ConfigError("training.prototype_source", e.what());
    }
  }

  root.read("rounds", c.rounds);
  require(c.rounds >= 1, "rounds", "must be >= 1");
  std::string inference = to_string(c.inference), averaging = "macro";
  root.read("inference", inference);
  try {
    c.inference = parse_inference(inference);
  } catch (const std::exception& e) {
    throw ConfigError("inference", e.what());
  }
  root.read("averaging", averaging);
  require(averaging == "macro" || averaging == "weighted", "averaging", "expected macro or weighted");
  c.averaging = averaging == "macro" ? Averaging::Macro : Averaging::Weighted;
  root.read("seeds", c.seeds);
  require(!c.seeds.empty(), "seeds", "must not be empty");
  root.read("per_round_metrics", c.per_round_metrics);
  root.read("checkpoints", c.checkpoints);

  if (const Json* a = root.child("audit")) {
    Fields f(*a, "audit");
    f.read("enabled", c.audit);
    f.read("steps", c.audit_config.attack.steps);
    f.read("step_size", c.audit_config.attack.step_size);
    f.read("restarts", c.audit_config.attack.restarts);
    f.read("baseline_trials", c.audit_config.baseline_trials);
    f.finish();
    require(c.audit_config.attack.steps >= 0, "audit.steps", "must be >= 0");
    require(c.audit_config.attack.step_size > 0.0, "audit.step_size", "must be positive");
    require(c.audit_config.attack.restarts >= 1, "audit.restarts", "must be >= 1");
    require(c.audit_config.baseline_trials >= 1, "audit.baseline_trials", "must be >= 1");
  }
  root.read("dp_sigmas", c.dp_sigmas);
  for (std::size_t k = 0; k < c.dp_sigmas.size(); ++k)
    require(c.dp_sigmas[k] >= 0.0, "dp_sigmas[" + std::to_string(k) + "]", "must be >= 0");
  std::string out = c.output_dir.string();
  root.read("output_dir", out);
  require(!out.empty(), "output_dir", "must not be empty");
  c.output_dir = out;
  root.finish();
  return c;
}

Json to_json(const ExperimentConfig& c) {
  Json j;
  j["data"] = {{"source", c.data.source},
               {"classes", c.data.classes},
               {"features", c.data.features},
               {"per_class", c.data.per_class},
               {"separation", c.data.separation},
               {"csv", c.data.csv.string()},
               {"schema", c.data.schema.string()},
               {"normalization", normalization_name(c.data.normalization)},
               {"train_fraction", c.data.train_fraction},
               {"min_shard_size", c.data.min_shard_size}};
  j["model"] = to_json(c.model);
  j["participants"] = c.participants;
  j["alphas"] = c.alphas;
  Json strategies = Json::array();
  for (auto k : c.strategies) strategies.push_back(to_string(k));
  j["strategies"] = strategies;
  j["lambda"] = c.lambda;
  j["mu"] = c.mu;
  j["training"] = {{"epochs", c.training.epochs},
                   {"batch_size", c.training.batch_size},
                   {"lr", c.training.lr},
                   {"dp_sigma", c.training.dp_sigma},
                   {"workers", c.training.workers},
                   {"divisor", c.training.divisor == PrototypeDivisor::Contributors ? "contributors" : "participants"},
                   {"prototype_source", to_string(c.training.prototype_source)}};
  j["rounds"] = c.rounds;
  j["inference"] = to_string(c.inference);
  j["averaging"] = c.averaging == Averaging::Macro ? "macro" : "weighted";
  j["seeds"] = c.seeds;
  j["per_round_metrics"] = c.per_round_metrics;
  j["checkpoints"] = c.checkpoints;
  j["audit"] = {{"enabled", c.audit},
                {"steps", c.audit_config.attack.steps},
                {"step_size", c.audit_config.attack.step_size},
                {"restarts", c.audit_config.attack.restarts},
                {"baseline_trials", c.audit_config.baseline_trials}};
  j["dp_sigmas"] = c.dp_sigmas;
  j["output_dir"] = c.output_dir.string();
  return j;
}

Json load_config_tree(const std::filesystem::path& path) {
  try {
    return Json::parse(read_text_file(path), nullptr, true, true);
  } catch (const Json::parse_error& e) {
    throw ConfigError(path.string(), e.what());
  }
}

void apply_override(Json& tree, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0)
    throw ConfigError(std::string(assignment), "override must look like key.path=value");
  const std::string key(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));
  Json value;
  try {
    value = Json::parse(text);
  } catch (const Json::parse_error&) {
    value = text;
  }
  Json* node = &tree;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError(key, "empty path component");
    if (!node->is_object()) throw ConfigError(key, "cannot descend into a non-object");
    if (dot == std::string::npos) {
      (*node)[part] = std::move(value);
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = Json::object();
    start = dot + 1;
  }
}

Strategy make_strategy(const ExperimentConfig& config, StrategyKind kind) {
  return Strategy::make(kind, config.lambda, config.mu);
}

PreparedData prepare_data(const ExperimentConfig& config, double alpha, std::uint64_t seed) {
  Dataset raw;
  if (config.data.source == "csv") {
    const CsvSchema schema = config.data.schema.empty() ? CsvSchema{} : load_schema(config.data.schema);
    raw = load_csv(config.data.csv, schema);
  } else {
    raw = synthesize_gaussian(config.data.classes, config.data.features, config.data.per_class,
                              config.data.separation, derive_seed(seed, "data"));
  }
  const TrainTestSplit split = split_train_test(raw, config.data.train_fraction, derive_seed(seed, "split"));
  const FeatureScaler scaler = fit_scaler(split.train, config.data.normalization);
  PreparedData out;
  out.train = apply_scaler(split.train, scaler);
  out.test = apply_scaler(split.test, scaler);
  out.plan = dirichlet_partition(out.train, config.participants, alpha, derive_seed(seed, "partition"),
                                 config.data.min_shard_size);
  for (const auto& rows : out.plan.shards) out.shards.push_back(out.train.subset(rows));
  return out;
}

std::vector<MetricsReport> evaluate_participants(const RoundState& state, const Strategy& strategy,
                                                 InferenceMode inference, const Dataset& test, Averaging averaging) {
  const InferenceMode mode = strategy.resolve(inference);
  const int K = state.global_model.num_classes;
  std::vector<MetricsReport> out;
  for (std::size_t i = 0; i < state.start_models.size(); ++i) {
    // the model held after the last downlink: aggregated parts replaced, local parts kept
    const auto& model = state.start_models[i];
    std::vector<int> pred;
    if (mode == InferenceMode::Head) {
      pred = nn::predict_head(model, test.features);
    } else {
      const PrototypeSet& protos = strategy.exchange_prototypes ? state.global_prototypes : state.local_prototypes[i];
      pred = nearest_prototype_classify(nn::embed(model, test.features), protos);
    }
    out.push_back(evaluate(pred, test.labels, K, "participant-" + std::to_string(i), averaging));
  }
  return out;
}

double RunResult::mean_macro_accuracy() const {
  double s = 0.0;
  for (const auto& m : participants) s += m.macro_accuracy;
  return participants.empty() ? 0.0 : s / static_cast<double>(participants.size());
}

double RunResult::mean_macro_f1() const {
  double s = 0.0;
  for (const auto& m : participants) s += m.macro_f1;
  return participants.empty() ? 0.0 : s / static_cast<double>(participants.size());
}

std::vector<double> RunResult::objective_trajectory() const {
  std::vector<double> out{initial_objective};
  for (const auto& r : rounds) out.push_back(r.mean_objective);
  return out;
}

RunResult run_strategy(const ExperimentConfig& config, const PreparedData& data, StrategyKind kind, double alpha,
                       std::uint64_t seed) {
  RunResult run;
  run.kind = kind;
  run.strategy = make_strategy(config, kind);
  run.alpha = alpha;
  run.seed = seed;
  run.dp_sigma = config.training.dp_sigma;
  const int K = static_cast<int>(data.train.class_names.size());
  const nn::ModelParams initial =
      nn::build_model(data.train.num_features(), K, derive_seed(seed, "model"), config.model);
  run.state = init_state(initial, static_cast<int>(data.shards.size()), seed);

  const PrototypeSet none(K, initial.embedding_dim);
  for (const auto& shard : data.shards)
    run.initial_objective += shard_objective(shard, initial, initial, none, run.strategy).total;
  run.initial_objective /= static_cast<double>(data.shards.size());

  for (int r = 0; r < config.rounds; ++r) {
    RoundReport report = run_round(run.state, data.shards, run.strategy, config.training);
    if (config.per_round_metrics || r + 1 == config.rounds) {
      const auto metrics = evaluate_participants(run.state, run.strategy, config.inference, data.test, config.averaging);
      for (const auto& m : metrics) report.participant_macro_accuracy.push_back(m.macro_accuracy);
      if (r + 1 == config.rounds) run.participants = metrics;
    }
    run.rounds.push_back(std::move(report));
  }
  return run;
}

CellSummary summarize(std::span<const double> values) {
  CellSummary c;
  c.n = values.size();
  if (values.empty()) return c;
  c.mean = mean_of(values);
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - c.mean) * (v - c.mean);
    c.sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return c;
}

namespace {

struct RunMetrics {
  std::string strategy;
  double alpha;
  double macro_accuracy, macro_f1, macro_precision, accuracy;
};

ComparisonTable build_table(const std::vector<RunMetrics>& runs) {
  ComparisonTable t;
  std::vector<std::string> order;
  std::map<std::string, std::map<double, std::array<std::vector<double>, 4>>> cells;
  std::set<double> alphas;
  for (const auto& r : runs) {
    if (std::find(order.begin(), order.end(), r.strategy) == order.end()) order.push_back(r.strategy);
    auto& c = cells[r.strategy][r.alpha];
    c[0].push_back(r.macro_accuracy);
    c[1].push_back(r.macro_f1);
    c[2].push_back(r.macro_precision);
    c[3].push_back(r.accuracy);
    alphas.insert(r.alpha);
  }
  t.alphas.assign(alphas.rbegin(), alphas.rend());
  for (const auto& name : order) {
    ComparisonRow row;
    row.strategy = name;
    for (const auto& [alpha, c] : cells[name]) {
      row.macro_accuracy[alpha] = summarize(c[0]);
      row.macro_f1[alpha] = summarize(c[1]);
      row.macro_precision[alpha] = summarize(c[2]);
      row.accuracy[alpha] = summarize(c[3]);
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

RunMetrics metrics_of(const std::string& strategy, double alpha, std::span<const MetricsReport> participants) {
  RunMetrics m{strategy, alpha, 0, 0, 0, 0};
  for (const auto& p : participants) {
    m.macro_accuracy += p.macro_accuracy;
    m.macro_f1 += p.macro_f1;
    m.macro_precision += p.macro_precision;
    m.accuracy += p.accuracy;
  }
  const auto n = static_cast<double>(std::max<std::size_t>(participants.size(), 1));
  m.macro_accuracy /= n;
  m.macro_f1 /= n;
  m.macro_precision /= n;
  m.accuracy /= n;
  return m;
}

}  // namespace

ComparisonTable summarize_runs(std::span<const RunResult> runs) {
  std::vector<RunMetrics> m;
  for (const auto& r : runs) m.push_back(metrics_of(to_string(r.kind), r.alpha, r.participants));
  return build_table(m);
}

ComparisonTable compare_strategies(std::span<const ExperimentConfig> configs) {
  if (configs.empty()) throw std::invalid_argument("compare_strategies: no configs");
  const Json data0 = to_json(configs.front())["data"];
  for (const auto& c : configs) {
    if (to_json(c)["data"] != data0 || c.participants != configs.front().participants ||
        c.alphas != configs.front().alphas || c.seeds != configs.front().seeds)
      throw std::invalid_argument("compare_strategies: configs disagree on data, participants, alphas or seeds");
  }
  std::vector<RunResult> runs;
  for (double alpha : configs.front().alphas) {
    for (auto seed : configs.front().seeds) {
      const PreparedData data = prepare_data(configs.front(), alpha, seed);
      for (const auto& c : configs)
        for (auto kind : c.strategies) {
          runs.push_back(run_strategy(c, data, kind, alpha, seed));
          runs.back().state = RoundState{};
        }
    }
  }
  return summarize_runs(runs);
}

ComparisonTable table_from_records(std::span<const Json> records) {
  std::vector<RunMetrics> m;
  for (const auto& r : records) {
    if (r.value("type", "") != "final") continue;
    std::vector<MetricsReport> participants;
    for (const auto& p : r.at("participants")) participants.push_back(metrics_from_json(p));
    m.push_back(metrics_of(r.at("strategy").get<std::string>(), r.at("alpha").get<double>(), participants));
  }
  return build_table(m);
}

std::string format_table(const ComparisonTable& table, std::string_view metric) {
  std::ostringstream out;
  out << "strategy";
  for (double a : table.alphas) out << "\talpha=" << format_alpha(a);
  out << '\n';
  for (const auto& row : table.rows) {
    const std::map<double, CellSummary>* cells = nullptr;
    if (metric == "macro_accuracy") cells = &row.macro_accuracy;
    else if (metric == "macro_f1") cells = &row.macro_f1;
    else if (metric == "macro_precision") cells = &row.macro_precision;
    else if (metric == "accuracy") cells = &row.accuracy;
    else throw std::invalid_argument("format_table: unknown metric '" + std::string(metric) + "'");
    out << row.strategy;
    for (double a : table.alphas) {
      const auto it = cells->find(a);
      out << '\t';
      if (it == cells->end()) {
        out << '-';
        continue;
      }
      out << std::fixed << std::setprecision(2) << 100.0 * it->second.mean << " (" << 100.0 * it->second.sd << ')';
    }
    out << '\n';
  }
  return out.str();
}

AuditReport audit_run(const ExperimentConfig& config, const PreparedData& data, const RoundState& state,
                      std::uint64_t seed, double sigma) {
  AuditConfig ac = config.audit_config;
  ac.seed = derive_seed(seed, "audit");
  return audit_participants(state.local_models, state.local_prototypes, data.shards, data.train, ac, sigma);
}

std::vector<DpSweepEntry> dp_sweep(const ExperimentConfig& config, const PreparedData& data, double alpha,
                                   std::uint64_t seed, std::span<const double> sigmas) {
  StrategyKind kind = StrategyKind::Protean;
  for (auto k : config.strategies)
    if (uses_prototypes(k)) {
      kind = k;
      break;
    }
  std::vector<DpSweepEntry> out;
  for (double sigma : sigmas) {
    ExperimentConfig c = config;
    c.training.dp_sigma = sigma;
    c.per_round_metrics = false;
    const RunResult run = run_strategy(c, data, kind, alpha, seed);
    DpSweepEntry e;
    e.sigma = sigma;
    e.audit = audit_run(c, data, run.state, seed, sigma);
    e.macro_f1 = run.mean_macro_f1();
    e.macro_accuracy = run.mean_macro_accuracy();
    out.push_back(std::move(e));
  }
  return out;
}

ExperimentOutput run_experiment(const ExperimentConfig& config, bool overwrite, std::ostream* log) {
  namespace fs = std::filesystem;
  const fs::path final_dir = config.output_dir;
  fs::path partial = final_dir;
  partial += ".partial";
  if (fs::exists(final_dir) && !overwrite)
    throw std::runtime_error("output directory " + final_dir.string() + " already exists; use --force to replace it");
  fs::remove_all(partial);
  fs::create_directories(partial);

  ExperimentOutput result;
  try {
    const Json config_json = to_json(config);
    write_text_file(partial / "config.json", config_json.dump(2) + "\n");
    if (config.checkpoints) fs::create_directories(partial / "checkpoints");
    RecordWriter records(partial / "records.ndjson");
    RecordWriter timing(partial / "timing.ndjson");
    std::ostringstream bars;
    bars << "alpha\tseed\tstrategy\tparticipant\trandom_mse\treconstructed_mse\n";
    const bool has_local_only =
        std::find(config.strategies.begin(), config.strategies.end(), StrategyKind::LocalOnly) != config.strategies.end();

    for (double alpha : config.alphas) {
      for (auto seed : config.seeds) {
        const PreparedData data = prepare_data(config, alpha, seed);
        records.write("partition", Json{{"alpha", alpha},
                                        {"seed", seed},
                                        {"counts", data.plan.counts},
                                        {"train_samples", data.train.size()},
                                        {"test_samples", data.test.size()}});
        std::vector<RunResult> cell;
        for (auto kind : config.strategies) {
          if (log) *log << "run alpha=" << format_alpha(alpha) << " seed=" << seed << " strategy=" << to_string(kind) << std::endl;
          RunResult run = run_strategy(config, data, kind, alpha, seed);
          const Json id{{"alpha", alpha}, {"seed", seed}, {"strategy", to_string(kind)}};
          for (const auto& r : run.rounds) {
            Json body = id;
            body.update(to_json(r));
            records.write("round", body);
            timing.write("round_time", Json{{"alpha", alpha}, {"seed", seed}, {"strategy", to_string(kind)},
                                            {"round", r.round}, {"wall_seconds", r.wall_seconds}});
          }
          Json fin = id;
          fin["lambda"] = run.strategy.lambda;
          fin["mu"] = run.strategy.mu;
          fin["inference"] = to_string(run.strategy.resolve(config.inference));
          fin["initial_objective"] = run.initial_objective;
          fin["mean_macro_accuracy"] = run.mean_macro_accuracy();
          fin["mean_macro_f1"] = run.mean_macro_f1();
          Json parts = Json::array();
          for (const auto& m : run.participants) parts.push_back(to_json(m));
          fin["participants"] = parts;
          records.write("final", fin);
          if (run.strategy.exchange_prototypes) {
            Json protos = id;
            protos["global_prototypes"] = to_json(run.state.global_prototypes);
            records.write("prototypes", protos);
          }
          if (config.checkpoints)
            save_checkpoint(partial / "checkpoints" / (run_tag(alpha, seed, kind) + ".ckpt"),
                            make_checkpoint(run.state, config.model, id));
          if (config.audit && run.strategy.exchange_prototypes) {
            const AuditReport audit = audit_run(config, data, run.state, seed, config.training.dp_sigma);
            for (const auto& e : audit.entries) {
              Json body = id;
              body.update(to_json(e));
              records.write("audit", body);
            }
            for (const auto& b : privacy_bars(audit))
              bars << format_alpha(alpha) << '\t' << seed << '\t' << to_string(kind) << '\t' << b.participant << '\t'
                   << b.random_mse << '\t' << b.reconstructed_mse << '\n';
          }
          run.state = RoundState{};
          cell.push_back(std::move(run));
        }

        std::map<std::string, std::vector<MetricsReport>> by_method;
        for (const auto& r : cell) by_method[to_string(r.kind)] = r.participants;
        Json rare{{"alpha", alpha}, {"seed", seed}};
        rare.update(to_json(rare_class_report(data.plan.counts, by_method)));
        records.write("rare_class", rare);
        if (has_local_only) {
          const auto& local = by_method.at(to_string(StrategyKind::LocalOnly));
          for (const auto& r : cell) {
            if (r.kind == StrategyKind::LocalOnly) continue;
            Json zs{{"alpha", alpha}, {"seed", seed}, {"strategy", to_string(r.kind)}};
            zs.update(to_json(zero_shot_report(data.plan.counts, local, r.participants)));
            records.write("zero_shot", zs);
          }
        }
        if (!config.dp_sigmas.empty()) {
          for (const auto& e : dp_sweep(config, data, alpha, seed, config.dp_sigmas)) {
            records.write("dp_sweep", Json{{"alpha", alpha},
                                           {"seed", seed},
                                           {"sigma", e.sigma},
                                           {"macro_f1", e.macro_f1},
                                           {"macro_accuracy", e.macro_accuracy},
                                           {"mean_reconstructed_mse", e.audit.mean_reconstructed_mse()},
                                           {"mean_random_mse", e.audit.mean_random_mse()},
                                           {"fraction_reconstruction_better", e.audit.fraction_reconstruction_better()}});
          }
        }
        for (auto& r : cell) result.runs.push_back(std::move(r));
      }
    }
    records.flush();
    timing.flush();

    result.table = summarize_runs(result.runs);
    write_text_file(partial / "table.tsv", format_table(result.table, "macro_accuracy"));
    write_text_file(partial / "table_f1.tsv", format_table(result.table, "macro_f1"));
    if (config.audit) write_text_file(partial / "privacy_bars.tsv", bars.str());
    write_manifest(partial, config_json);
  } catch (...) {
    std::error_code ec;
    fs::remove_all(partial, ec);
    throw;
  }
  if (fs::exists(final_dir)) fs::remove_all(final_dir);
  fs::rename(partial, final_dir);
  result.directory = final_dir;
  return result;
}

}  // namespace protean
