// Command-line front end: run, sweep, audit, report.
#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <sstream>

#include "protean/experiment.hpp"

using namespace protean;

namespace {

struct ConfigOptions {
  std::string config_path;
  std::vector<std::string> overrides;
};

void add_config_options(CLI::App* cmd, ConfigOptions& opts) {
  cmd->add_option("-c,--config", opts.config_path, "JSON experiment config");
  cmd->add_option("--set", opts.overrides, "override a config field, e.g. --set training.lr=0.02")->take_all();
}

Json config_tree(const ConfigOptions& opts) {
  Json tree = opts.config_path.empty() ? Json::object() : load_config_tree(opts.config_path);
  for (const auto& o : opts.overrides) apply_override(tree, o);
  return tree;
}

void print_summary(const ExperimentOutput& out) {
  std::cout << format_table(out.table, "macro_accuracy");
  std::cout << "wrote " << out.directory.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated prototype learning experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", PROTEAN_VERSION);

  ConfigOptions run_opts;
  bool run_force = false;
  bool quiet = false;
  auto* run = app.add_subcommand("run", "train every configured strategy over the alpha x seed grid");
  add_config_options(run, run_opts);
  run->add_flag("-f,--force", run_force, "replace an existing output directory");
  run->add_flag("-q,--quiet", quiet, "no progress lines");

  ConfigOptions sweep_opts;
  bool sweep_force = false;
  std::vector<double> sweep_alphas;
  std::vector<std::uint64_t> sweep_seeds;
  auto* sweep = app.add_subcommand("sweep", "run with an explicit alpha x seed grid and print the table");
  add_config_options(sweep, sweep_opts);
  sweep->add_option("--alphas", sweep_alphas, "Dirichlet concentrations")->delimiter(',');
  sweep->add_option("--seeds", sweep_seeds, "seeds")->delimiter(',');
  sweep->add_flag("-f,--force", sweep_force, "replace an existing output directory");

  ConfigOptions audit_opts;
  std::string checkpoint_path;
  std::string audit_out;
  auto* audit = app.add_subcommand("audit", "reconstruction attack on a stored checkpoint");
  add_config_options(audit, audit_opts);
  audit->add_option("--checkpoint", checkpoint_path, "checkpoint written by run")->required()->check(CLI::ExistingFile);
  audit->add_option("-o,--out", audit_out, "write audit records here instead of stdout");

  std::string report_dir;
  std::string report_metric = "macro_accuracy";
  auto* report = app.add_subcommand("report", "re-derive tables from stored records");
  report->add_option("run_dir", report_dir, "output directory of a run")->required()->check(CLI::ExistingDirectory);
  report->add_option("--metric", report_metric, "macro_accuracy | macro_f1 | macro_precision | accuracy");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      const ExperimentConfig cfg = config_from_json(config_tree(run_opts));
      print_summary(run_experiment(cfg, run_force, quiet ? nullptr : &std::cerr));
    } else if (*sweep) {
      Json tree = config_tree(sweep_opts);
      if (!sweep_alphas.empty()) tree["alphas"] = sweep_alphas;
      if (!sweep_seeds.empty()) tree["seeds"] = sweep_seeds;
      const ExperimentConfig cfg = config_from_json(tree);
      print_summary(run_experiment(cfg, sweep_force, &std::cerr));
    } else if (*audit) {
      // default to the config of the run that wrote the checkpoint
      const auto run_config = std::filesystem::path(checkpoint_path).parent_path().parent_path() / "config.json";
      if (audit_opts.config_path.empty() && std::filesystem::exists(run_config))
        audit_opts.config_path = run_config.string();
      const ExperimentConfig cfg = config_from_json(config_tree(audit_opts));
      const Checkpoint ckpt = load_checkpoint(checkpoint_path);
      const double alpha = ckpt.meta.at("alpha").get<double>();
      const auto seed = ckpt.meta.at("seed").get<std::uint64_t>();
      const PreparedData data = prepare_data(cfg, alpha, seed);
      if (data.shards.size() != ckpt.local_models.size())
        throw std::runtime_error("checkpoint has " + std::to_string(ckpt.local_models.size()) +
                                 " participants but the config prepares " + std::to_string(data.shards.size()));
      RoundState state;
      state.global_model = ckpt.global_model;
      state.global_prototypes = ckpt.global_prototypes;
      state.local_models = ckpt.local_models;
      state.local_prototypes = ckpt.local_prototypes;
      const AuditReport rep = audit_run(cfg, data, state, seed, cfg.training.dp_sigma);
      std::ostringstream lines;
      for (const auto& e : rep.entries) {
        Json body = ckpt.meta;
        body.update(to_json(e));
        Json line{{"schema", kRecordSchemaVersion}, {"type", "audit"}};
        line.update(body);
        lines << line.dump() << '\n';
      }
      if (audit_out.empty())
        std::cout << lines.str();
      else
        write_text_file(audit_out, lines.str());
      std::cerr << "pairs " << rep.entries.size() << ", reconstruction better than random for "
                << 100.0 * rep.fraction_reconstruction_better() << "%, mean mse " << rep.mean_reconstructed_mse()
                << " vs random " << rep.mean_random_mse() << "\n";
    } else if (*report) {
      const auto records = read_records(std::filesystem::path(report_dir) / "records.ndjson");
      std::cout << format_table(table_from_records(records), report_metric);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
