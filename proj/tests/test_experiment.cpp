#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <algorithm>
#include <set>

#include "protean/experiment.hpp"

using namespace protean;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("protean_test_" + name);
  fs::remove_all(p);
  return p;
}

// Small enough to run a full grid in a couple of seconds.
Json tiny_tree(const fs::path& out) {
  Json tree = Json::parse(R"({
    "data": {"classes": 3, "features": 8, "per_class": 40},
    "model": {"kind": "mlp", "mlp_hidden": 8, "embedding_dim": 4},
    "participants": 3,
    "alphas": [0.75, 0.5, 0.25],
    "seeds": [1, 2, 3],
    "strategies": ["protean", "fedavg", "local-only"],
    "rounds": 2,
    "training": {"epochs": 1, "batch_size": 16},
    "audit": {"enabled": true, "steps": 20, "restarts": 1, "baseline_trials": 20}
  })");
  tree["output_dir"] = out.string();
  return tree;
}

std::pair<int, std::string> run_cli(const std::string& args) {
  const char* cli = std::getenv("PROTEAN_CLI");
  REQUIRE_MESSAGE(cli != nullptr, "PROTEAN_CLI must point at the cli binary");
  const std::string cmd = std::string(cli) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::string output;
  char buf[4096];
  while (std::fgets(buf, sizeof buf, pipe) != nullptr) output += buf;
  const int status = pclose(pipe);
  return {WEXITSTATUS(status), output};
}

}  // namespace

TEST_CASE("config defaults") {
  const ExperimentConfig c = config_from_json(Json::object());
  CHECK(c.participants == 10);
  CHECK(c.rounds == 10);
  CHECK(c.training.epochs == 3);
  CHECK(c.mu == 0.1);
  CHECK(c.alphas == std::vector<double>{0.75, 0.5, 0.25});
  CHECK(c.seeds.size() == 3);
  // round trip through the tree form
  CHECK(to_json(config_from_json(to_json(c))) == to_json(c));
}

TEST_CASE("config errors name the field") {
  auto field_of = [](const Json& tree) {
    try {
      config_from_json(tree);
    } catch (const ConfigError& e) {
      return e.field();
    }
    return std::string("<no error>");
  };
  CHECK(field_of(Json::parse(R"({"strategies": ["protean", "fedsgd"]})")) == "strategies[1]");
  CHECK(field_of(Json::parse(R"({"training": {"lr": -1}})")) == "training.lr");
  CHECK(field_of(Json::parse(R"({"training": {"learning_rate": 0.1}})")) == "training.learning_rate");
  CHECK(field_of(Json::parse(R"({"alphas": [0.5, 0]})")) == "alphas[1]");
  CHECK(field_of(Json::parse(R"({"rounds": "ten"})")) == "rounds");
  CHECK(field_of(Json::parse(R"({"data": {"source": "csv"}})")) == "data.csv");
  CHECK(field_of(Json::parse(R"({"model": {"kind": "rnn"}})")) == "model");
  CHECK(field_of(Json::parse(R"({"inference": "vote"})")) == "inference");
}

TEST_CASE("overrides") {
  Json tree = Json::object();
  apply_override(tree, "training.lr=0.02");
  apply_override(tree, "alphas=[0.25]");
  apply_override(tree, "strategies=[\"fedprox\"]");
  apply_override(tree, "inference=head");
  const auto c = config_from_json(tree);
  CHECK(c.training.lr == 0.02);
  CHECK(c.alphas == std::vector<double>{0.25});
  CHECK(c.strategies == std::vector<StrategyKind>{StrategyKind::FedProx});
  CHECK(c.inference == InferenceMode::Head);
  CHECK_THROWS_AS(apply_override(tree, "novalue"), ConfigError);
}

TEST_CASE("strategies share partitions") {
  const auto cfg = config_from_json(tiny_tree(scratch("unused")));
  const PreparedData a = prepare_data(cfg, 0.5, 4);
  const PreparedData b = prepare_data(cfg, 0.5, 4);
  CHECK(a.plan == b.plan);
  CHECK(a.test.labels == b.test.labels);
  const auto r1 = run_strategy(cfg, a, StrategyKind::Protean, 0.5, 4);
  const auto r2 = run_strategy(cfg, b, StrategyKind::Protean, 0.5, 4);
  CHECK(r1.state.global_model == r2.state.global_model);
  CHECK(r1.objective_trajectory() == r2.objective_trajectory());
  CHECK(r1.objective_trajectory().size() == 3);
}

TEST_CASE("local-only arm scores zero on locally unseen classes") {
  auto tree = tiny_tree(scratch("unused"));
  tree["participants"] = 4;
  const auto cfg = config_from_json(tree);
  const PreparedData data = prepare_data(cfg, 0.1, 7);
  const auto run = run_strategy(cfg, data, StrategyKind::LocalOnly, 0.1, 7);
  int unseen = 0;
  for (std::size_t i = 0; i < data.plan.counts.size(); ++i)
    for (std::size_t j = 0; j < data.plan.counts[i].size(); ++j)
      if (data.plan.counts[i][j] == 0) {
        ++unseen;
        CHECK(run.participants[i].per_class_accuracy[j] == 0.0);
      }
  CHECK(unseen > 0);
}

TEST_CASE("summaries and tables") {
  const std::vector<double> v{0.5, 0.7, 0.9};
  const auto s = summarize(v);
  CHECK(s.mean == doctest::Approx(0.7));
  CHECK(s.sd == doctest::Approx(0.2));
  CHECK(summarize(std::vector<double>{0.4}).sd == 0.0);

  ComparisonTable t;
  t.alphas = {0.75, 0.25};
  ComparisonRow row;
  row.strategy = "protean";
  row.macro_accuracy[0.75] = {0.9267, 0.0032, 3};
  row.macro_accuracy[0.25] = {0.5, 0.0, 3};
  t.rows.push_back(row);
  CHECK(format_table(t) == "strategy\talpha=0.75\talpha=0.25\nprotean\t92.67 (0.32)\t50.00 (0.00)\n");
  CHECK_THROWS_AS(format_table(t, "auc"), std::invalid_argument);
}

TEST_CASE("compare_strategies") {
  auto tree = tiny_tree(scratch("unused"));
  tree["alphas"] = {0.5};
  tree["seeds"] = {1, 2};
  tree["strategies"] = {"fedavg"};
  const auto a = config_from_json(tree);
  tree["strategies"] = {"protean"};
  const auto b = config_from_json(tree);
  const std::vector<ExperimentConfig> same{a, a};
  const auto t = compare_strategies(same);
  REQUIRE(t.rows.size() == 1);
  CHECK(t.rows[0].macro_accuracy.at(0.5).n == 4);
  // identical configs produce identical runs, so duplicating one leaves the mean unchanged
  const std::vector<ExperimentConfig> single{a};
  CHECK(compare_strategies(single).rows[0].macro_accuracy.at(0.5).mean == t.rows[0].macro_accuracy.at(0.5).mean);
  const std::vector<ExperimentConfig> pair{a, b};
  CHECK(compare_strategies(pair).rows.size() == 2);

  tree["data"]["per_class"] = 50;
  const std::vector<ExperimentConfig> mismatch{a, config_from_json(tree)};
  CHECK_THROWS_AS(compare_strategies(mismatch), std::invalid_argument);
}

TEST_CASE("run_experiment writes deterministic, hashed artifacts") {
  const fs::path out1 = scratch("run1");
  const fs::path out2 = scratch("run2");
  const auto out = run_experiment(config_from_json(tiny_tree(out1)));
  run_experiment(config_from_json(tiny_tree(out2)));

  CHECK(fs::exists(out1 / "records.ndjson"));
  CHECK_FALSE(fs::exists(fs::path(out1.string() + ".partial")));
  for (const char* f : {"records.ndjson", "table.tsv", "table_f1.tsv", "privacy_bars.tsv"})
    CHECK_MESSAGE(read_text_file(out1 / f) == read_text_file(out2 / f), f);

  // Table-1 layout: one row per strategy, one column per alpha.
  const std::string table = read_text_file(out1 / "table.tsv");
  CHECK(table.rfind("strategy\talpha=0.75\talpha=0.5\talpha=0.25\n", 0) == 0);
  CHECK(table.find("\nprotean\t") != std::string::npos);
  CHECK(std::count(table.begin(), table.end(), '\n') == 4);

  // Manifest lists every file with a correct hash.
  const Json manifest = Json::parse(read_text_file(out1 / "manifest.json"));
  std::size_t files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(out1))
    if (entry.is_regular_file() && entry.path().filename() != "manifest.json") ++files;
  CHECK(manifest.at("files").size() == files);
  for (const auto& f : manifest.at("files"))
    CHECK(sha256_file(out1 / f.at("path").get<std::string>()) == f.at("sha256").get<std::string>());
  CHECK(manifest.at("config_sha256") == sha256_hex(to_json(config_from_json(tiny_tree(out1))).dump()));

  // Records re-derive the same table.
  const auto records = read_records(out1 / "records.ndjson");
  CHECK(format_table(table_from_records(records)) == table);
  std::set<std::string> types;
  for (const auto& r : records) types.insert(r.at("type").get<std::string>());
  for (const char* t : {"partition", "round", "final", "rare_class", "zero_shot", "prototypes", "audit"})
    CHECK_MESSAGE(types.count(t) == 1, t);
  CHECK(out.runs.size() == 27);

  // Checkpoints reload bitwise.
  const Checkpoint ckpt = load_checkpoint(out1 / "checkpoints" / "a0.25_s2_protean.ckpt");
  CHECK(ckpt.meta.at("seed") == 2);
  CHECK(ckpt.meta.at("round") == 2);
  CHECK(ckpt.local_models.size() == 3);
  const auto cfg = config_from_json(tiny_tree(out1));
  const auto replay = run_strategy(cfg, prepare_data(cfg, 0.25, 2), StrategyKind::Protean, 0.25, 2);
  CHECK(ckpt.global_model.values == replay.state.global_model.values);
  CHECK(ckpt.local_prototypes == replay.state.local_prototypes);

  // Refuses to clobber without overwrite.
  CHECK_THROWS_AS(run_experiment(cfg), std::runtime_error);
  fs::remove_all(out1);
  fs::remove_all(out2);
}

TEST_CASE("failed runs leave nothing behind") {
  const fs::path out = scratch("fail");
  auto tree = tiny_tree(out);
  tree["data"] = {{"source", "csv"}, {"csv", "/nonexistent/data.csv"}};
  CHECK_THROWS(run_experiment(config_from_json(tree)));
  CHECK_FALSE(fs::exists(out));
  CHECK_FALSE(fs::exists(fs::path(out.string() + ".partial")));
}

TEST_CASE("dp sweep at sigma zero equals the plain audit") {
  auto tree = tiny_tree(scratch("unused"));
  const auto cfg = config_from_json(tree);
  const PreparedData data = prepare_data(cfg, 0.5, 3);
  const std::vector<double> sigmas{0.0, 0.5};
  const auto sweep = dp_sweep(cfg, data, 0.5, 3, sigmas);
  REQUIRE(sweep.size() == 2);
  const auto run = run_strategy(cfg, data, StrategyKind::Protean, 0.5, 3);
  const auto audit = audit_run(cfg, data, run.state, 3, 0.0);
  REQUIRE(audit.entries.size() == sweep[0].audit.entries.size());
  for (std::size_t k = 0; k < audit.entries.size(); ++k)
    CHECK(audit.entries[k].profile == sweep[0].audit.entries[k].profile);
  CHECK(sweep[0].macro_f1 == run.mean_macro_f1());
  CHECK(sweep[1].sigma == 0.5);
}

TEST_CASE("command line") {
  const fs::path dir = scratch("cli");
  fs::create_directories(dir);
  const fs::path cfg_path = dir / "config.json";
  auto tree = tiny_tree(dir / "out");
  tree["alphas"] = {0.5};
  tree["seeds"] = {1};
  write_text_file(cfg_path, tree.dump(2));

  auto [code, text] = run_cli("run -q --config " + cfg_path.string() + " --set rounds=1");
  CHECK_MESSAGE(code == 0, text);
  CHECK(text.find("protean") != std::string::npos);
  const Json stored = Json::parse(read_text_file(dir / "out" / "config.json"));
  CHECK(stored.at("rounds") == 1);

  auto [rcode, rtext] = run_cli("report " + (dir / "out").string());
  CHECK(rcode == 0);
  CHECK(rtext == read_text_file(dir / "out" / "table.tsv"));

  const fs::path ckpt = dir / "out" / "checkpoints" / "a0.5_s1_protean.ckpt";
  auto [acode, atext] = run_cli("audit --config " + cfg_path.string() + " --set rounds=1 --checkpoint " +
                                ckpt.string() + " --out " + (dir / "audit.ndjson").string());
  CHECK_MESSAGE(acode == 0, atext);
  CHECK(read_records(dir / "audit.ndjson").size() > 0);

  // without --config the run's own config.json is used
  auto [dcode, dtext] = run_cli("audit --checkpoint " + ckpt.string() + " --out " + (dir / "audit2.ndjson").string());
  CHECK_MESSAGE(dcode == 0, dtext);
  CHECK(read_text_file(dir / "audit2.ndjson") == read_text_file(dir / "audit.ndjson"));

  auto [bcode, btext] = run_cli("run --config " + cfg_path.string() + " --set strategies=[\\\"nope\\\"]");
  CHECK(bcode == 2);
  CHECK(btext.find("strategies[0]") != std::string::npos);

  auto [xcode, xtext] = run_cli("run -q --config " + cfg_path.string());
  CHECK(xcode == 1);  // output exists, no --force
  fs::remove_all(dir);
}
