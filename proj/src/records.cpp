#include "protean/records.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <memory>
#include <sstream>
#include <stdexcept>

#ifndef PROTEAN_VERSION
#define PROTEAN_VERSION "unknown"
#endif

namespace protean {
namespace {

// JSON has no infinity or NaN; encode them as strings.
Json number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

Json numbers(const std::vector<double>& v) {
  Json a = Json::array();
  for (double x : v) a.push_back(number(x));
  return a;
}

double read_number(const Json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "nan") return std::nan("");
    if (s == "inf") return INFINITY;
    if (s == "-inf") return -INFINITY;
    throw std::invalid_argument("not a number: " + s);
  }
  return j.get<double>();
}

constexpr char kMagic[8] = {'P', 'R', 'T', 'N', 'C', 'K', 'P', '1'};

void write_doubles(std::ostream& out, const std::vector<double>& v) {
  const std::uint64_t n = v.size();
  out.write(reinterpret_cast<const char*>(&n), sizeof n);
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
}

std::vector<double> read_doubles(std::istream& in) {
  std::uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof n);
  if (!in || n > (std::uint64_t{1} << 32)) throw std::runtime_error("checkpoint: corrupt block length");
  std::vector<double> v(n);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw std::runtime_error("checkpoint: truncated");
  return v;
}

void write_prototypes(std::ostream& out, const PrototypeSet& p) {
  write_doubles(out, p.vectors);
  std::vector<double> support(p.support.begin(), p.support.end());
  write_doubles(out, support);
}

PrototypeSet read_prototypes(std::istream& in, int K, int d) {
  PrototypeSet p(K, d);
  p.vectors = read_doubles(in);
  const auto support = read_doubles(in);
  if (p.vectors.size() != static_cast<std::size_t>(K) * static_cast<std::size_t>(d) ||
      support.size() != static_cast<std::size_t>(K))
    throw std::runtime_error("checkpoint: prototype block shape");
  for (std::size_t j = 0; j < support.size(); ++j) p.support[j] = static_cast<std::size_t>(support[j]);
  return p;
}

}  // namespace

Json to_json(const MetricsReport& m) {
  Json j;
  j["scope"] = m.scope;
  j["num_classes"] = m.num_classes;
  j["samples"] = m.samples;
  j["accuracy"] = number(m.accuracy);
  j["macro_accuracy"] = number(m.macro_accuracy);
  j["macro_precision"] = number(m.macro_precision);
  j["macro_f1"] = number(m.macro_f1);
  j["averaging"] = m.averaging == Averaging::Macro ? "macro" : "weighted";
  j["per_class_accuracy"] = numbers(m.per_class_accuracy);
  j["evaluated_classes"] = m.evaluated_classes;
  j["zero_division_classes"] = m.zero_division_classes;
  j["confusion"] = m.confusion;
  return j;
}

MetricsReport metrics_from_json(const Json& j) {
  MetricsReport m;
  m.scope = j.at("scope").get<std::string>();
  m.num_classes = j.at("num_classes").get<int>();
  m.samples = j.at("samples").get<std::size_t>();
  m.accuracy = read_number(j.at("accuracy"));
  m.macro_accuracy = read_number(j.at("macro_accuracy"));
  m.macro_precision = read_number(j.at("macro_precision"));
  m.macro_f1 = read_number(j.at("macro_f1"));
  m.averaging = j.at("averaging") == "macro" ? Averaging::Macro : Averaging::Weighted;
  for (const auto& v : j.at("per_class_accuracy")) m.per_class_accuracy.push_back(read_number(v));
  m.evaluated_classes = j.at("evaluated_classes").get<std::vector<int>>();
  m.zero_division_classes = j.at("zero_division_classes").get<std::vector<int>>();
  m.confusion = j.at("confusion").get<std::vector<std::vector<std::size_t>>>();
  return m;
}

Json to_json(const nn::LossBreakdown& l) {
  return Json{{"cross_entropy", number(l.cross_entropy)},
              {"alignment", number(l.alignment)},
              {"proximal", number(l.proximal)},
              {"total", number(l.total)}};
}

Json to_json(const RoundReport& r) {
  Json j;
  j["round"] = r.round;
  j["scalars_up"] = r.scalars_up;
  j["scalars_down"] = r.scalars_down;
  j["bytes_up"] = r.bytes_up;
  j["bytes_down"] = r.bytes_down;
  j["absent_global_classes"] = r.absent_global_classes;
  j["mean_objective"] = number(r.mean_objective);
  j["participant_macro_accuracy"] = numbers(r.participant_macro_accuracy);
  Json parts = Json::array();
  for (const auto& p : r.participants)
    parts.push_back({{"participant", p.participant},
                     {"samples", p.samples},
                     {"final_epoch", to_json(p.final_epoch)},
                     {"objective", to_json(p.objective)}});
  j["participants"] = std::move(parts);
  return j;
}

Json to_json(const RareClassReport& r) {
  Json rows = Json::array();
  for (const auto& row : r.rows) {
    Json acc;
    for (const auto& [k, v] : row.accuracy) acc[k] = number(v);
    rows.push_back({{"participant", row.participant},
                    {"classes", row.classes},
                    {"train_counts", row.train_counts},
                    {"accuracy", acc}});
  }
  Json mean;
  for (const auto& [k, v] : r.mean_accuracy) mean[k] = number(v);
  return Json{{"rows", rows}, {"mean_accuracy", mean}};
}

Json to_json(const ZeroShotReport& r) {
  Json rows = Json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"participant", row.participant},
                    {"class", row.cls},
                    {"local_only_accuracy", number(row.local_only_accuracy)},
                    {"federated_accuracy", number(row.federated_accuracy)}});
  return Json{{"rows", rows},
              {"mean_local_only", number(r.mean_local_only)},
              {"mean_federated", number(r.mean_federated)}};
}

Json to_json(const AuditEntry& e) {
  return Json{{"participant", e.participant},
              {"class", e.cls},
              {"sigma", number(e.sigma)},
              {"reconstructed_mse", number(e.reconstructed_mse)},
              {"random_mse", number(e.random_mse)},
              {"reconstructed_psnr", numbers(e.reconstructed_psnr.per_feature)},
              {"reconstructed_psnr_mean", number(e.reconstructed_psnr.mean)},
              {"psnr_excluded_features", e.reconstructed_psnr.excluded},
              {"random_psnr_mean", number(e.random_psnr_mean)},
              {"iterations", e.iterations},
              {"objective", number(e.objective)},
              {"profile", numbers(e.profile)}};
}

Json to_json(const PrototypeSet& p) {
  Json vecs = Json::array();
  for (int j = 0; j < p.num_classes; ++j) {
    const auto v = p.vector(j);
    vecs.push_back(p.present(j) ? numbers(std::vector<double>(v.begin(), v.end())) : Json(nullptr));
  }
  return Json{{"num_classes", p.num_classes}, {"dim", p.dim}, {"support", p.support}, {"vectors", vecs}};
}

Json to_json(const nn::Architecture& a) {
  return Json{{"kind", a.kind == nn::ModelKind::Cnn ? "cnn" : "mlp"},
              {"conv1_filters", a.conv1_filters},
              {"conv2_filters", a.conv2_filters},
              {"embedding_dim", a.embedding_dim},
              {"dropout1", a.dropout1},
              {"dropout2", a.dropout2},
              {"mlp_hidden", a.mlp_hidden}};
}

nn::Architecture architecture_from_json(const Json& j) {
  nn::Architecture a;
  const auto kind = j.value("kind", std::string("cnn"));
  if (kind != "cnn" && kind != "mlp") throw std::invalid_argument("kind: expected cnn or mlp, got '" + kind + "'");
  a.kind = kind == "cnn" ? nn::ModelKind::Cnn : nn::ModelKind::Mlp;
  a.conv1_filters = j.value("conv1_filters", a.conv1_filters);
  a.conv2_filters = j.value("conv2_filters", a.conv2_filters);
  a.embedding_dim = j.value("embedding_dim", a.embedding_dim);
  a.dropout1 = j.value("dropout1", a.dropout1);
  a.dropout2 = j.value("dropout2", a.dropout2);
  a.mlp_hidden = j.value("mlp_hidden", a.mlp_hidden);
  return a;
}

RecordWriter::RecordWriter(const std::filesystem::path& path) : out_(path, std::ios::binary | std::ios::app) {
  if (!out_) throw std::runtime_error("cannot open record file " + path.string());
}

void RecordWriter::write(const std::string& type, Json body) {
  Json line;
  line["schema"] = kRecordSchemaVersion;
  line["type"] = type;
  for (auto& [k, v] : body.items()) line[k] = std::move(v);
  out_ << line.dump() << '\n';
  if (!out_) throw std::runtime_error("record write failed");
}

void RecordWriter::flush() { out_.flush(); }

std::vector<Json> read_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open record file " + path.string());
  std::vector<Json> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(Json::parse(line));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
    if (out.back().value("schema", 0) != kRecordSchemaVersion)
      throw std::runtime_error(path.string() + ":" + std::to_string(n) + ": unsupported record schema");
  }
  return out;
}

Checkpoint make_checkpoint(const RoundState& state, const nn::Architecture& arch, Json meta) {
  Checkpoint c;
  c.meta = std::move(meta);
  c.meta["round"] = state.round;
  c.arch = arch;
  c.global_model = state.global_model;
  c.global_prototypes = state.global_prototypes;
  c.local_models = state.local_models;
  c.local_prototypes = state.local_prototypes;
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  Json header = ckpt.meta;
  header["architecture"] = to_json(ckpt.arch);
  header["input_dim"] = ckpt.global_model.input_dim;
  header["num_classes"] = ckpt.global_model.num_classes;
  header["participants"] = ckpt.local_models.size();
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof kMagic);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(len));
  write_doubles(out, ckpt.global_model.values);
  write_prototypes(out, ckpt.global_prototypes);
  for (std::size_t i = 0; i < ckpt.local_models.size(); ++i) {
    write_doubles(out, ckpt.local_models[i].values);
    write_prototypes(out, ckpt.local_prototypes[i]);
  }
  if (!out) throw std::runtime_error("checkpoint write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[sizeof kMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw std::runtime_error("not a checkpoint: " + path.string());
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || len > (1u << 24)) throw std::runtime_error("checkpoint: corrupt header");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  Json header = Json::parse(text);

  Checkpoint c;
  c.arch = architecture_from_json(header.at("architecture"));
  const int F = header.at("input_dim").get<int>();
  const int K = header.at("num_classes").get<int>();
  const auto M = header.at("participants").get<std::size_t>();
  const nn::ModelParams shape = nn::build_model(F, K, 0, c.arch);
  auto read_model = [&] {
    nn::ModelParams m = shape;
    m.values = read_doubles(in);
    if (m.values.size() != shape.size()) throw std::runtime_error("checkpoint: parameter count mismatch");
    return m;
  };
  c.global_model = read_model();
  c.global_prototypes = read_prototypes(in, K, shape.embedding_dim);
  for (std::size_t i = 0; i < M; ++i) {
    c.local_models.push_back(read_model());
    c.local_prototypes.push_back(read_prototypes(in, K, shape.embedding_dim));
  }
  for (const char* key : {"architecture", "input_dim", "num_classes", "participants"}) header.erase(key);
  c.meta = std::move(header);
  return c;
}

std::string sha256_hex(const std::string& bytes) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 || EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1)
    throw std::runtime_error("sha256 failed");
  std::ostringstream hex;
  for (unsigned int k = 0; k < len; ++k) hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[k]);
  return hex.str();
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_text_file(path)); }

void write_manifest(const std::filesystem::path& dir, const Json& config) {
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().filename() != "manifest.json") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  Json manifest;
  manifest["schema"] = kRecordSchemaVersion;
  manifest["code_version"] = PROTEAN_VERSION;
  manifest["config_sha256"] = sha256_hex(config.dump());
  Json list = Json::array();
  for (const auto& f : files)
    list.push_back({{"path", std::filesystem::relative(f, dir).generic_string()},
                    {"bytes", std::filesystem::file_size(f)},
                    {"sha256", sha256_file(f)}});
  manifest["files"] = std::move(list);
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

}  // namespace protean
