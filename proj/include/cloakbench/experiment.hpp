#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cloakbench/checkpoint.hpp"
#include "cloakbench/eval.hpp"
#include "cloakbench/record_io.hpp"
#include "cloakbench/report.hpp"

#ifndef CLOAKBENCH_VERSION
#define CLOAKBENCH_VERSION "0.1.0"
#endif

namespace cloakbench {

inline constexpr const char* kToolVersion = CLOAKBENCH_VERSION;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class StageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetConfig {
  std::optional<std::string> path;  // ingest this tree instead of synthesizing
  std::size_t num_classes = 10;
  std::size_t per_class = 80;
  std::size_t image_size = 32;
  std::optional<std::uint64_t> seed;  // synth seed; derived from the global seed when absent
  double train_fraction = 0.8;
};

struct ModelConfig {
  std::string id;
  std::string arch;
  std::optional<std::uint64_t> init_seed;
  std::optional<std::uint64_t> train_seed;
  double lr = 0.01;
  double momentum = 0.9;
  std::size_t epochs = 15;
  std::size_t batch = 16;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  std::vector<ModelConfig> models;
  std::vector<Method> methods{Method::kBim, Method::kIllc};
  std::vector<double> epsilons{4, 8, 16, 32, 64, 128};
  double alpha = 1.0;
  std::optional<int> jpeg_quality = 90;
  std::vector<int> jpeg_sweep{95, 75, 50};
  std::vector<std::size_t> k_set{1, 5, 10, 25, 50};
  std::size_t eval_samples = 100;
  std::string output_dir = "cloakbench-out";
  std::uint64_t seed = 1;
  std::size_t workers = 1;
  std::size_t grid_samples = 4;
  bool save_images = false;

  std::uint64_t data_seed() const { return dataset.seed ? *dataset.seed : mix_seed(seed, 0xDA7A); }
  std::uint64_t split_seed() const { return mix_seed(seed, 0x5B17); }
  std::uint64_t init_seed(std::size_t i) const {
    return models.at(i).init_seed ? *models[i].init_seed : mix_seed(seed, 100 + i);
  }
  std::uint64_t train_seed(std::size_t i) const {
    return models.at(i).train_seed ? *models[i].train_seed : mix_seed(seed, 200 + i);
  }
};

inline std::vector<ModelConfig> default_models() {
  std::vector<ModelConfig> out;
  for (const auto& name : stock_descriptor_names()) out.push_back(ModelConfig{name, name});
  return out;
}

inline std::string config_help() {
  return R"(Configuration keys (JSON, all optional):
  dataset.path            ingest <path>/<identity>/*.png instead of synthesizing
  dataset.classes         synthetic identities                        [10]
  dataset.per_class       synthetic images per identity               [80]
  dataset.image_size      synthetic image side in pixels              [32]
  dataset.seed            synthetic dataset seed        [derived from seed]
  dataset.train_fraction  stratified train share                      [0.8]
  models                  list of {id, arch, init_seed, train_seed, lr, momentum,
                          epochs, batch} or architecture names
                          [cnn-a, cnn-b, cnn-c; lr 0.01, momentum 0.9, 15 epochs, batch 16]
  methods                 subset of FGSM, BIM, ILLC                   [BIM, ILLC]
  epsilons                budgets in pixel units     [4, 8, 16, 32, 64, 128]
  alpha                   step size in pixels per iteration           [1]
  jpeg_quality            storage quality 1..100, null disables JPEG  [90]
  jpeg_sweep              extra storage qualities for the sweep report [95, 75, 50]
  k_set                   Top-k ranks (values above N are dropped)    [1, 5, 10, 25, 50]
  eval_samples            images attacked per (source, method, eps)   [100]
  output_dir              run directory                               [cloakbench-out]
  seed                    global seed (CLOAKBENCH_SEED overrides)     [1]
  workers                 worker threads                              [1]
  grid_samples            rows per contact sheet                      [4]
  save_images             also export every crafted example as PNG    [false]
)";
}

namespace detail {

class ConfigReader {
 public:
  ConfigReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + "must be an object");
  }

  void allow(std::initializer_list<const char*> keys) {
    std::set<std::string> allowed(keys.begin(), keys.end());
    for (const auto& [k, v] : j_.items()) {
      if (!allowed.count(k)) throw ConfigError("unknown config key '" + join(k) + "'");
    }
  }

  bool has(const char* key) const { return j_.contains(key); }
  const nlohmann::json& raw(const char* key) const { return j_.at(key); }
  std::string child(const char* key) const { return join(key); }

  template <class T>
  void get(const char* key, T& out) const {
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config key '" + join(key) + "' has the wrong type");
    }
  }

  template <class T>
  void get(const char* key, std::optional<T>& out) const {
    if (!j_.contains(key)) return;
    if (j_.at(key).is_null()) {
      out.reset();
      return;
    }
    T v{};
    get(key, v);
    out = v;
  }

 private:
  std::string join(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }
  std::string where() const { return path_.empty() ? "config " : "config key '" + path_ + "' "; }

  const nlohmann::json& j_;
  std::string path_;
};

}  // namespace detail

inline void validate(const ExperimentConfig& c) {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (c.models.empty()) fail("models: at least one model is required");
  std::set<std::string> ids;
  for (const auto& m : c.models) {
    if (m.id.empty()) fail("models: empty model id");
    if (!ids.insert(m.id).second) fail("models: duplicate id '" + m.id + "'");
    const auto names = stock_descriptor_names();
    if (std::find(names.begin(), names.end(), m.arch) == names.end())
      fail("models: unknown architecture '" + m.arch + "'");
    if (m.batch == 0) fail("models: batch must be positive");
    if (!(m.lr >= 0.0)) fail("models: lr must be non-negative");
  }
  if (c.methods.empty()) fail("methods: list is empty");
  if (c.epsilons.empty()) fail("epsilons: list is empty");
  for (double e : c.epsilons)
    if (!(e > 0.0) || !std::isfinite(e)) fail("epsilons: every budget must be positive, got " + fmt_eps(e));
  if (!(c.alpha >= 0.0) || !std::isfinite(c.alpha)) fail("alpha: must be non-negative");
  if (c.jpeg_quality && (*c.jpeg_quality < 1 || *c.jpeg_quality > 100)) fail("jpeg_quality: must be in [1,100]");
  for (int q : c.jpeg_sweep)
    if (q < 1 || q > 100) fail("jpeg_sweep: quality must be in [1,100]");
  if (c.k_set.empty()) fail("k_set: list is empty");
  for (auto k : c.k_set)
    if (k == 0) fail("k_set: k must be at least 1");
  if (c.eval_samples == 0) fail("eval_samples: must be positive");
  if (c.workers == 0) fail("workers: must be positive");
  if (c.output_dir.empty()) fail("output_dir: empty path");
  if (!c.dataset.path) {
    if (c.dataset.num_classes < 2) fail("dataset.classes: need at least 2");
    if (c.dataset.per_class < 2) fail("dataset.per_class: need at least 2 per class to split");
    if (c.dataset.image_size < 4) fail("dataset.image_size: must be at least 4");
  }
  if (!(c.dataset.train_fraction > 0.0 && c.dataset.train_fraction < 1.0))
    fail("dataset.train_fraction: must be in (0,1)");
}

/// Strict parse: unknown keys are rejected with their full path. The
/// CLOAKBENCH_SEED environment variable, when set, replaces `seed`.
inline ExperimentConfig parse_config(const nlohmann::json& doc, bool use_env = true) {
  ExperimentConfig c;
  detail::ConfigReader r(doc, "");
  r.allow({"dataset", "models", "methods", "epsilons", "alpha", "jpeg_quality", "jpeg_sweep", "k_set",
           "eval_samples", "output_dir", "seed", "workers", "grid_samples", "save_images"});
  if (r.has("dataset")) {
    detail::ConfigReader d(r.raw("dataset"), "dataset");
    d.allow({"path", "classes", "per_class", "image_size", "seed", "train_fraction"});
    d.get("path", c.dataset.path);
    d.get("classes", c.dataset.num_classes);
    d.get("per_class", c.dataset.per_class);
    d.get("image_size", c.dataset.image_size);
    d.get("seed", c.dataset.seed);
    d.get("train_fraction", c.dataset.train_fraction);
  }
  if (r.has("models")) {
    const auto& arr = r.raw("models");
    if (!arr.is_array()) throw ConfigError("config key 'models' must be a list");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      ModelConfig m;
      if (arr[i].is_string()) {
        m.id = m.arch = arr[i].get<std::string>();
      } else {
        detail::ConfigReader mr(arr[i], "models[" + std::to_string(i) + "]");
        mr.allow({"id", "arch", "init_seed", "train_seed", "lr", "momentum", "epochs", "batch"});
        mr.get("arch", m.arch);
        m.id = m.arch;
        mr.get("id", m.id);
        mr.get("init_seed", m.init_seed);
        mr.get("train_seed", m.train_seed);
        mr.get("lr", m.lr);
        mr.get("momentum", m.momentum);
        mr.get("epochs", m.epochs);
        mr.get("batch", m.batch);
      }
      c.models.push_back(std::move(m));
    }
  } else {
    c.models = default_models();
  }
  if (r.has("methods")) {
    std::vector<std::string> names;
    r.get("methods", names);
    c.methods.clear();
    for (const auto& n : names) {
      try {
        c.methods.push_back(parse_method(n));
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("methods: ") + e.what());
      }
    }
  }
  r.get("epsilons", c.epsilons);
  r.get("alpha", c.alpha);
  r.get("jpeg_quality", c.jpeg_quality);
  r.get("jpeg_sweep", c.jpeg_sweep);
  r.get("k_set", c.k_set);
  r.get("eval_samples", c.eval_samples);
  r.get("output_dir", c.output_dir);
  r.get("seed", c.seed);
  r.get("workers", c.workers);
  r.get("grid_samples", c.grid_samples);
  r.get("save_images", c.save_images);
  if (use_env) {
    if (const char* env = std::getenv("CLOAKBENCH_SEED"); env && *env) {
      try {
        std::size_t used = 0;
        c.seed = std::stoull(env, &used);
        if (env[used] != '\0') throw std::invalid_argument("trailing characters");
      } catch (const std::exception&) {
        throw ConfigError(std::string("CLOAKBENCH_SEED is not an unsigned integer: '") + env + "'");
      }
    }
  }
  validate(c);
  return c;
}

inline ExperimentConfig parse_config_file(const std::filesystem::path& path, bool use_env = true) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return parse_config(doc, use_env);
}

/// Fully resolved configuration, seeds included.
inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json models = nlohmann::json::array();
  for (std::size_t i = 0; i < c.models.size(); ++i) {
    const auto& m = c.models[i];
    models.push_back({{"id", m.id}, {"arch", m.arch}, {"init_seed", c.init_seed(i)},
                      {"train_seed", c.train_seed(i)}, {"lr", m.lr}, {"momentum", m.momentum},
                      {"epochs", m.epochs}, {"batch", m.batch}});
  }
  std::vector<std::string> methods;
  for (Method m : c.methods) methods.push_back(to_string(m));
  nlohmann::json dataset = {{"classes", c.dataset.num_classes}, {"per_class", c.dataset.per_class},
                            {"image_size", c.dataset.image_size}, {"seed", c.data_seed()},
                            {"train_fraction", c.dataset.train_fraction}};
  dataset["path"] = c.dataset.path ? nlohmann::json(*c.dataset.path) : nlohmann::json(nullptr);
  nlohmann::json j = {{"dataset", dataset}, {"models", models}, {"methods", methods},
                      {"epsilons", c.epsilons}, {"alpha", c.alpha}, {"jpeg_sweep", c.jpeg_sweep},
                      {"k_set", c.k_set}, {"eval_samples", c.eval_samples}, {"output_dir", c.output_dir},
                      {"seed", c.seed}, {"workers", c.workers}, {"grid_samples", c.grid_samples},
                      {"save_images", c.save_images}};
  j["jpeg_quality"] = c.jpeg_quality ? nlohmann::json(*c.jpeg_quality) : nlohmann::json(nullptr);
  return j;
}

inline std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%08x", v);
  return buf;
}

inline std::string hash_json(const nlohmann::json& j) {
  const std::string s = j.dump();
  return hex32(crc32_of(s.data(), s.size()));
}

/// Hash of everything that influences results; output location and worker
/// count are excluded.
inline std::string config_hash(const ExperimentConfig& c) {
  auto j = to_json(c);
  for (const char* k : {"output_dir", "workers", "grid_samples", "save_images"}) j.erase(k);
  j["tool_version"] = kToolVersion;
  return hash_json(j);
}

/// Hash of the inputs that determine one trained checkpoint.
inline std::string model_hash(const ExperimentConfig& c, std::size_t i) {
  auto j = to_json(c);
  return hash_json({{"dataset", j["dataset"]}, {"split_seed", c.split_seed()}, {"model", j["models"][i]},
                    {"tool_version", kToolVersion}});
}

// ---------------------------------------------------------------------------
// Run layout and manifest

struct RunPaths {
  std::filesystem::path root;

  std::filesystem::path checkpoint(const std::string& id) const { return root / "checkpoints" / (id + ".clkb"); }
  std::filesystem::path training_log(const std::string& id) const { return root / "training" / (id + ".csv"); }
  std::filesystem::path records(const std::string& source, Method m, double eps) const {
    return root / "records" / (source + "_" + to_string(m) + "_eps" + fmt_eps(eps) + ".clkr");
  }
  std::filesystem::path reports() const { return root / "reports"; }
  std::filesystem::path matrix_json() const { return root / "reports" / "matrix.json"; }
  std::filesystem::path sweep_json() const { return root / "reports" / "storage_sweep.json"; }
  std::filesystem::path manifest() const { return root / "manifest.json"; }
};

struct Artifact {
  std::string path;  // relative to the run root
  std::uint64_t bytes = 0;
  std::string crc32;
};

struct StageRecord {
  std::string name;
  double seconds = 0.0;
  std::string error;
};

struct ModelRecord {
  std::string id;
  std::string checkpoint;
  bool reused = false;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
};

struct RunManifest {
  std::string tool_version = kToolVersion;
  std::string config_hash;
  nlohmann::json config;
  std::vector<Artifact> artifacts;
  std::vector<StageRecord> stages;
  std::vector<ModelRecord> models;
  std::vector<std::string> warnings;
  std::size_t budget_violations = 0;
  std::size_t attack_errors = 0;
  std::size_t error_cells = 0;

  bool ok() const {
    return std::all_of(stages.begin(), stages.end(), [](const StageRecord& s) { return s.error.empty(); });
  }
};

inline nlohmann::json to_json(const RunManifest& m) {
  nlohmann::json artifacts = nlohmann::json::array();
  for (const auto& a : m.artifacts) artifacts.push_back({{"path", a.path}, {"bytes", a.bytes}, {"crc32", a.crc32}});
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : m.stages) stages.push_back({{"name", s.name}, {"seconds", s.seconds}, {"error", s.error}});
  nlohmann::json models = nlohmann::json::array();
  for (const auto& r : m.models)
    models.push_back({{"id", r.id}, {"checkpoint", r.checkpoint}, {"reused", r.reused},
                      {"train_accuracy", r.train_accuracy}, {"val_accuracy", r.val_accuracy}});
  return {{"tool_version", m.tool_version}, {"config_hash", m.config_hash}, {"config", m.config},
          {"artifacts", artifacts}, {"stages", stages}, {"models", models}, {"warnings", m.warnings},
          {"budget_violations", m.budget_violations}, {"attack_errors", m.attack_errors},
          {"error_cells", m.error_cells}, {"ok", m.ok()}};
}

/// Checks that every artifact listed in a manifest exists with its recorded
/// size and CRC32. Returns the list of problems (empty when all verify).
inline std::vector<std::string> verify_manifest(const std::filesystem::path& manifest_path) {
  std::vector<std::string> problems;
  const auto root = manifest_path.parent_path();
  nlohmann::json j;
  try {
    const auto bytes = read_file(manifest_path);
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const std::exception& e) {
    return {std::string("manifest unreadable: ") + e.what()};
  }
  for (const auto& a : j.at("artifacts")) {
    const std::string rel = a.at("path");
    std::vector<std::uint8_t> bytes;
    try {
      bytes = read_file(root / rel);
    } catch (const std::exception&) {
      problems.push_back(rel + ": missing");
      continue;
    }
    if (bytes.size() != a.at("bytes").get<std::uint64_t>()) problems.push_back(rel + ": size differs");
    if (hex32(crc32_of(bytes.data(), bytes.size())) != a.at("crc32").get<std::string>())
      problems.push_back(rel + ": checksum differs");
  }
  return problems;
}

// ---------------------------------------------------------------------------
// Stages

struct RunContext {
  ExperimentConfig config;
  RunPaths paths;
  RunManifest manifest;
  std::ostream* log = nullptr;

  explicit RunContext(ExperimentConfig c, std::ostream* log_stream = nullptr)
      : config(std::move(c)), paths{config.output_dir}, log(log_stream) {
    manifest.config = to_json(config);
    manifest.config_hash = config_hash(config);
  }

  void say(const std::string& line) const {
    if (log) *log << line << std::endl;
  }

  void write(const std::filesystem::path& path, const std::string& text) {
    write_file(path, text.data(), text.size());
    track(path);
  }

  void write(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    write_file(path, bytes.data(), bytes.size());
    track(path);
  }

  void track(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    const std::string rel = std::filesystem::relative(path, paths.root).generic_string();
    Artifact a{rel, bytes.size(), hex32(crc32_of(bytes.data(), bytes.size()))};
    for (auto& existing : manifest.artifacts) {
      if (existing.path == rel) {
        existing = a;
        return;
      }
    }
    manifest.artifacts.push_back(a);
  }
};

inline Dataset prepare_dataset(const ExperimentConfig& c) {
  Dataset ds = c.dataset.path ? ingest_directory(*c.dataset.path)
                              : synth_dataset(c.dataset.num_classes, c.dataset.per_class, c.dataset.image_size,
                                              c.data_seed());
  return split(std::move(ds), c.dataset.train_fraction, c.split_seed());
}

/// Eval split, interleaved across identities so any prefix is balanced,
/// truncated to `n`.
inline std::vector<Sample> eval_slice(const Dataset& ds, std::size_t n) {
  std::vector<std::vector<const Sample*>> by_class(ds.num_classes());
  for (const auto* s : ds.select(Split::kEval)) by_class[s->label].push_back(s);
  std::vector<Sample> out;
  for (std::size_t round = 0; out.size() < n; ++round) {
    bool any = false;
    for (const auto& cls : by_class) {
      if (round < cls.size() && out.size() < n) {
        out.push_back(*cls[round]);
        any = true;
      }
    }
    if (!any) break;
  }
  return out;
}

inline std::string training_csv(const std::vector<EpochMetrics>& metrics) {
  std::string out = "epoch,train_loss,train_accuracy,val_accuracy\r\n";
  char buf[128];
  for (const auto& m : metrics) {
    std::snprintf(buf, sizeof(buf), "%zu,%.6f,%.2f,%.2f\r\n", m.epoch, m.train_loss, m.train_accuracy,
                  m.val_accuracy);
    out += buf;
  }
  return out;
}

/// Trains every configured model, reusing a checkpoint whose recorded
/// config hash matches.
inline std::vector<Classifier> train_stage(RunContext& ctx, const Dataset& ds) {
  const auto& c = ctx.config;
  std::vector<Classifier> models(c.models.size());
  std::vector<ModelRecord> records(c.models.size());
  std::vector<std::vector<EpochMetrics>> metrics(c.models.size());
  for (std::size_t i = 0; i < c.models.size(); ++i) {
    const auto path = ctx.paths.checkpoint(c.models[i].id);
    records[i].id = c.models[i].id;
    records[i].checkpoint = std::filesystem::relative(path, ctx.paths.root).generic_string();
    if (!std::filesystem::exists(path)) continue;
    try {
      auto m = load_checkpoint(path);
      if (m.provenance.config_hash == model_hash(c, i) && m.id == c.models[i].id) {
        models[i] = std::move(m);
        records[i].reused = true;
      }
    } catch (const CheckpointError& e) {
      ctx.manifest.warnings.push_back("checkpoint " + path.string() + " ignored: " + e.what());
    }
  }
  std::vector<Dataset> resized;
  for (const auto& m : c.models)
    resized.push_back(resized_for(ds, stock_descriptor(m.arch, ds.num_classes()).input_size));
  parallel_for(c.models.size(), c.workers, [&](std::size_t i) {
    if (records[i].reused) return;
    const auto& mc = c.models[i];
    auto model = build_model(stock_descriptor(mc.arch, ds.num_classes()), c.init_seed(i));
    model.id = mc.id;
    TrainParams hp{mc.lr, mc.momentum, mc.epochs, mc.batch, c.train_seed(i)};
    auto result = train(std::move(model), resized[i], hp);
    result.model.provenance.config_hash = model_hash(c, i);
    models[i] = std::move(result.model);
    metrics[i] = std::move(result.metrics);
  });
  for (std::size_t i = 0; i < c.models.size(); ++i) {
    records[i].train_accuracy = models[i].provenance.train_accuracy;
    records[i].val_accuracy = models[i].provenance.val_accuracy;
    if (!records[i].reused) {
      ctx.write(ctx.paths.checkpoint(c.models[i].id), serialize_checkpoint(models[i]));
      ctx.write(ctx.paths.training_log(c.models[i].id), training_csv(metrics[i]));
    } else {
      ctx.track(ctx.paths.checkpoint(c.models[i].id));
      if (std::filesystem::exists(ctx.paths.training_log(c.models[i].id)))
        ctx.track(ctx.paths.training_log(c.models[i].id));
    }
    char buf[160];
    std::snprintf(buf, sizeof(buf), "[train] %s %s: train %.1f%%, val %.1f%%", records[i].id.c_str(),
                  records[i].reused ? "reused" : "trained", records[i].train_accuracy, records[i].val_accuracy);
    ctx.say(buf);
  }
  ctx.manifest.models = records;
  return models;
}

/// Loads checkpoints produced by train_stage; stale or missing ones fail.
inline std::vector<Classifier> load_models(RunContext& ctx) {
  std::vector<Classifier> models;
  for (std::size_t i = 0; i < ctx.config.models.size(); ++i) {
    const auto& id = ctx.config.models[i].id;
    const auto path = ctx.paths.checkpoint(id);
    if (!std::filesystem::exists(path)) throw StageError("no checkpoint for '" + id + "'; run `train` first");
    auto m = load_checkpoint(path);
    if (m.provenance.config_hash != model_hash(ctx.config, i))
      throw StageError("checkpoint for '" + id + "' was trained with a different configuration");
    models.push_back(std::move(m));
  }
  return models;
}

inline TransferOptions transfer_options(const ExperimentConfig& c) {
  TransferOptions o;
  o.alpha = c.alpha;
  o.jpeg_quality = c.jpeg_quality;
  o.k_set = c.k_set;
  o.workers = c.workers;
  return o;
}

inline std::vector<AdvBatch> attack_stage(RunContext& ctx, const std::vector<Classifier>& models,
                                          const Dataset& ds) {
  const auto& c = ctx.config;
  const auto slice = eval_slice(ds, c.eval_samples);
  if (slice.empty()) throw StageError("evaluation split is empty");
  if (slice.size() < c.eval_samples) {
    ctx.manifest.warnings.push_back("eval_samples=" + std::to_string(c.eval_samples) + " but only " +
                                    std::to_string(slice.size()) + " evaluation images exist");
  }
  std::vector<AdvBatch> batches;
  const auto opt = transfer_options(c);
  for (std::size_t s = 0; s < models.size(); ++s) {
    const auto inputs = inputs_for(models[s], slice);
    for (Method m : c.methods) {
      for (double eps : c.epsilons) {
        AttackConfig cfg;
        cfg.method = m;
        cfg.epsilon = eps;
        cfg.alpha = opt.alpha;
        AdvBatch b{s, m, eps, attack_batch(models[s], inputs, cfg, c.workers)};
        std::size_t violations = 0, errors = 0;
        for (const auto& r : b.records) {
          violations += r.budget_violations;
          errors += !r.ok();
        }
        ctx.manifest.budget_violations += violations;
        ctx.manifest.attack_errors += errors;
        ctx.write(ctx.paths.records(models[s].id, m, eps), serialize_batch(b, models[s].id));
        ctx.say("[attack] " + models[s].id + " " + to_string(m) + " eps=" + fmt_eps(eps) + ": " +
                std::to_string(b.records.size()) + " images, " + std::to_string(violations) +
                " budget violations, " + std::to_string(errors) + " errors");
        if (c.save_images) {
          for (const auto& r : b.records) {
            char name[32];
            std::snprintf(name, sizeof(name), "%04zu.png", r.index);
            const auto dir = ctx.paths.root / "images" / models[s].id / to_string(m) / ("eps" + fmt_eps(eps));
            ctx.write(dir / name, encode_png(r.x_adv));
          }
        }
        batches.push_back(std::move(b));
      }
    }
  }
  return batches;
}

inline std::vector<AdvBatch> load_batches(RunContext& ctx, const std::vector<Classifier>& models) {
  std::vector<AdvBatch> batches;
  for (std::size_t s = 0; s < models.size(); ++s)
    for (Method m : ctx.config.methods)
      for (double eps : ctx.config.epsilons) {
        const auto path = ctx.paths.records(models[s].id, m, eps);
        if (!std::filesystem::exists(path))
          throw StageError("missing crafted examples " + path.string() + "; run `attack` first");
        auto b = load_batch(path);
        b.source = s;
        batches.push_back(std::move(b));
      }
  return batches;
}

struct Evaluation {
  TransferMatrix matrix;
  std::vector<std::pair<int, TransferMatrix>> sweep;
};

inline nlohmann::json sweep_to_json(const std::vector<std::pair<int, TransferMatrix>>& sweep) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& [q, mx] : sweep) j.push_back({{"quality", q}, {"matrix", to_json(mx)}});
  return j;
}

inline std::vector<std::pair<int, TransferMatrix>> sweep_from_json(const nlohmann::json& j) {
  std::vector<std::pair<int, TransferMatrix>> out;
  for (const auto& e : j) out.emplace_back(e.at("quality").get<int>(), matrix_from_json(e.at("matrix")));
  return out;
}

inline Evaluation evaluate_stage(RunContext& ctx, const std::vector<Classifier>& models,
                                 const std::vector<AdvBatch>& batches, const Dataset& ds) {
  const auto& c = ctx.config;
  auto opt = transfer_options(c);
  auto stamp = [&](TransferMatrix& mx) {
    mx.meta.dataset_id = ds.provenance;
    mx.meta.global_seed = c.seed;
  };
  Evaluation ev;
  ev.matrix = evaluate_all(batches, models, opt);
  stamp(ev.matrix);
  for (const auto& w : ev.matrix.meta.warnings) ctx.manifest.warnings.push_back(w);
  for (const auto& cell : ev.matrix.cells) {
    if (!cell.ok()) {
      ++ctx.manifest.error_cells;
      ctx.manifest.warnings.push_back("cell " + cell.source + "/" + to_string(cell.method) + "/eps" +
                                      fmt_eps(cell.epsilon) + "/" + cell.target + ": " + cell.error);
    }
  }
  for (int q : c.jpeg_sweep) {
    opt.jpeg_quality = q;
    auto mx = evaluate_all(batches, models, opt);
    stamp(mx);
    ev.sweep.emplace_back(q, std::move(mx));
  }
  ctx.write(ctx.paths.matrix_json(), to_json(ev.matrix).dump(1) + "\n");
  if (!ev.sweep.empty()) ctx.write(ctx.paths.sweep_json(), sweep_to_json(ev.sweep).dump(1) + "\n");
  ctx.say("[evaluate] " + std::to_string(ev.matrix.cells.size()) + " cells, " +
          std::to_string(ev.sweep.size()) + " storage qualities swept");
  return ev;
}

inline Evaluation load_evaluation(const RunContext& ctx) {
  Evaluation ev;
  if (!std::filesystem::exists(ctx.paths.matrix_json()))
    throw StageError("no matrix at " + ctx.paths.matrix_json().string() + "; run `evaluate` first");
  const auto bytes = read_file(ctx.paths.matrix_json());
  ev.matrix = matrix_from_json(nlohmann::json::parse(bytes.begin(), bytes.end()));
  if (std::filesystem::exists(ctx.paths.sweep_json())) {
    const auto sb = read_file(ctx.paths.sweep_json());
    ev.sweep = sweep_from_json(nlohmann::json::parse(sb.begin(), sb.end()));
  }
  return ev;
}

inline void report_stage(RunContext& ctx, const Evaluation& ev, const std::vector<AdvBatch>* batches) {
  const auto dir = ctx.paths.reports();
  ctx.write(dir / "matrix.csv", emit_table(ev.matrix, TableFormat::kCsv));
  ctx.write(dir / "matrix.md", emit_table(ev.matrix, TableFormat::kMarkdown));
  for (const auto& curve : emit_curves(ev.matrix)) ctx.write(dir / "curves" / curve.name, curve.content);
  const auto& ms = ev.matrix.meta.methods;
  if (std::find(ms.begin(), ms.end(), "BIM") != ms.end() && std::find(ms.begin(), ms.end(), "ILLC") != ms.end())
    ctx.write(dir / "bim_minus_illc.csv", emit_method_delta(ev.matrix));
  if (!ev.sweep.empty()) {
    ctx.write(dir / "storage_sweep.csv", emit_storage_sweep(ev.sweep));
    ctx.write(dir / "storage_images.csv", emit_storage_images(ev.sweep));
  }
  if (batches && !batches->empty()) {
    GridLayout layout;
    layout.samples = ctx.config.grid_samples;
    for (const auto& g : emit_image_grid(*batches, ev.matrix.meta.models, layout))
      ctx.write(dir / "grids" / g.name, encode_png(g.image));
  }
  ctx.say("[report] wrote " + dir.string());
}

enum Stage : unsigned { kStageTrain = 1, kStageAttack = 2, kStageEvaluate = 4, kStageReport = 8, kStageAll = 15 };

/// Runs the selected stages in order. Each stage's failure is recorded and
/// stops later stages; the manifest is always written.
inline RunManifest run_experiment(const ExperimentConfig& config, unsigned stages = kStageAll,
                                  std::ostream* log = nullptr) {
  RunContext ctx(config, log);
  std::filesystem::create_directories(ctx.paths.root);
  std::optional<Dataset> ds;
  std::vector<Classifier> models;
  std::vector<AdvBatch> batches;
  std::optional<Evaluation> ev;
  auto need_data = [&] {
    if (!ds) ds = prepare_dataset(ctx.config);
    return *ds;
  };

  auto stage = [&](const char* name, auto&& body) {
    const auto t0 = std::chrono::steady_clock::now();
    StageRecord rec{name, 0.0, ""};
    try {
      body();
    } catch (const std::exception& e) {
      rec.error = e.what();
      ctx.say(std::string("[") + name + "] error: " + e.what());
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ctx.manifest.stages.push_back(rec);
    return rec.error.empty();
  };

  bool ok = stage("data", [&] {
    const auto& d = need_data();
    for (const auto& w : d.warnings) ctx.manifest.warnings.push_back(w);
  });
  if (ok && (stages & kStageTrain)) ok = stage("train", [&] { models = train_stage(ctx, *ds); });
  if (ok && models.empty() && (stages & (kStageAttack | kStageEvaluate)))
    ok = stage("load-models", [&] { models = load_models(ctx); });
  if (ok && (stages & kStageAttack)) ok = stage("attack", [&] { batches = attack_stage(ctx, models, *ds); });
  if (ok && (stages & kStageEvaluate)) {
    if (batches.empty()) ok = stage("load-records", [&] { batches = load_batches(ctx, models); });
    if (ok) ok = stage("evaluate", [&] { ev = evaluate_stage(ctx, models, batches, *ds); });
  }
  if (ok && (stages & kStageReport)) {
    ok = stage("report", [&] {
      if (!ev) ev = load_evaluation(ctx);
      if (batches.empty()) {
        try {
          if (models.empty()) models = load_models(ctx);
          batches = load_batches(ctx, models);
        } catch (const std::exception& e) {
          ctx.manifest.warnings.push_back(std::string("image grids skipped: ") + e.what());
        }
      }
      report_stage(ctx, *ev, &batches);
    });
  }
  const auto text = to_json(ctx.manifest).dump(1) + "\n";
  write_file(ctx.paths.manifest(), text.data(), text.size());
  return ctx.manifest;
}

}  // namespace cloakbench
