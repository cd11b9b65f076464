#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "protean/data.hpp"
#include "protean/evaluation.hpp"
#include "protean/federated.hpp"
#include "protean/nn.hpp"
#include "protean/privacy.hpp"

namespace protean {

using Json = nlohmann::ordered_json;

inline constexpr int kRecordSchemaVersion = 1;

Json to_json(const MetricsReport& m);
MetricsReport metrics_from_json(const Json& j);
Json to_json(const nn::LossBreakdown& l);
/// Wall time is left out so records stay byte-identical across runs.
Json to_json(const RoundReport& r);
Json to_json(const RareClassReport& r);
Json to_json(const ZeroShotReport& r);
Json to_json(const AuditEntry& e);
Json to_json(const PrototypeSet& p);
Json to_json(const nn::Architecture& a);
nn::Architecture architecture_from_json(const Json& j);

/// Newline-delimited records; every line carries "schema" and "type".
class RecordWriter {
 public:
  explicit RecordWriter(const std::filesystem::path& path);
  void write(const std::string& type, Json body);
  void flush();

 private:
  std::ofstream out_;
};

std::vector<Json> read_records(const std::filesystem::path& path);

/// Everything needed to replay an audit on a finished run.
struct Checkpoint {
  Json meta;  // strategy, alpha, seed, round, ...
  nn::Architecture arch;
  nn::ModelParams global_model;
  PrototypeSet global_prototypes;
  std::vector<nn::ModelParams> local_models;
  std::vector<PrototypeSet> local_prototypes;
};

Checkpoint make_checkpoint(const RoundState& state, const nn::Architecture& arch, Json meta);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

/// Lists every regular file under `dir` (except the manifest itself) with
/// its SHA-256, plus the config hash and code version.
void write_manifest(const std::filesystem::path& dir, const Json& config);

void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace protean
