#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cloakbench/experiment.hpp"

namespace {

using nlohmann::json;
namespace cb = cloakbench;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

struct Overrides {
  std::string config_path;
  std::string out;
  std::vector<std::string> sets;
  std::vector<std::string> methods;
  std::vector<double> epsilons;
  std::vector<std::size_t> k_set;
  std::vector<int> jpeg_sweep;
  std::string jpeg_quality;
  double alpha = -1;
  long long seed = -1;
  long long workers = -1;
  long long eval_samples = -1;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("-c,--config", o.config_path, "JSON experiment configuration")->check(CLI::ExistingFile);
  cmd->add_option("-o,--out", o.out, "output directory (output_dir)");
  cmd->add_option("--seed", o.seed, "global seed (seed)");
  cmd->add_option("-j,--workers", o.workers, "worker threads (workers)");
  cmd->add_option("--methods", o.methods, "attack methods (methods)")->delimiter(',');
  cmd->add_option("--epsilons", o.epsilons, "noise budgets in pixels (epsilons)")->delimiter(',');
  cmd->add_option("--alpha", o.alpha, "step size in pixels (alpha)");
  cmd->add_option("--jpeg-quality", o.jpeg_quality, "storage JPEG quality, or 'none' (jpeg_quality)");
  cmd->add_option("--jpeg-sweep", o.jpeg_sweep, "storage sweep qualities (jpeg_sweep)")->delimiter(',');
  cmd->add_option("-k,--k-set", o.k_set, "Top-k ranks (k_set)")->delimiter(',');
  cmd->add_option("-n,--eval-samples", o.eval_samples, "images per attack batch (eval_samples)");
  cmd->add_option("--set", o.sets, "override any key: path.to.key=<json value>");
  cmd->add_flag("-q,--quiet", o.quiet, "no progress lines");
}

void set_path(json& doc, const std::string& dotted, json value) {
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot - start);
    if (key.empty()) throw cb::ConfigError("--set: malformed key '" + dotted + "'");
    if (dot == std::string::npos) {
      (*node)[key] = std::move(value);
      return;
    }
    if (!node->contains(key) || !(*node)[key].is_object()) (*node)[key] = json::object();
    node = &(*node)[key];
    start = dot + 1;
  }
}

cb::ExperimentConfig resolve(const Overrides& o) {
  json doc = json::object();
  if (!o.config_path.empty()) {
    std::ifstream in(o.config_path);
    try {
      doc = json::parse(in);
    } catch (const json::parse_error& e) {
      throw cb::ConfigError("config " + o.config_path + ": " + e.what());
    }
  }
  if (const char* env = std::getenv("CLOAKBENCH_SEED"); env && *env) {
    try {
      doc["seed"] = std::stoull(env);
    } catch (const std::exception&) {
      throw cb::ConfigError(std::string("CLOAKBENCH_SEED is not an unsigned integer: '") + env + "'");
    }
  }
  if (!o.out.empty()) doc["output_dir"] = o.out;
  if (o.seed >= 0) doc["seed"] = o.seed;
  if (o.workers >= 0) doc["workers"] = o.workers;
  if (!o.methods.empty()) doc["methods"] = o.methods;
  if (!o.epsilons.empty()) doc["epsilons"] = o.epsilons;
  if (o.alpha >= 0) doc["alpha"] = o.alpha;
  if (!o.jpeg_quality.empty()) {
    if (o.jpeg_quality == "none") {
      doc["jpeg_quality"] = nullptr;
    } else {
      try {
        doc["jpeg_quality"] = std::stoi(o.jpeg_quality);
      } catch (const std::exception&) {
        throw cb::ConfigError("--jpeg-quality: expected an integer or 'none'");
      }
    }
  }
  if (!o.jpeg_sweep.empty()) doc["jpeg_sweep"] = o.jpeg_sweep;
  if (!o.k_set.empty()) doc["k_set"] = o.k_set;
  if (o.eval_samples >= 0) doc["eval_samples"] = o.eval_samples;
  for (const auto& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw cb::ConfigError("--set: expected key=value, got '" + s + "'");
    const std::string raw = s.substr(eq + 1);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    set_path(doc, s.substr(0, eq), std::move(value));
  }
  // The environment was folded into the document above so flags win over it.
  return cb::parse_config(doc, false);
}

int run_stages(const Overrides& o, unsigned stages) {
  cb::ExperimentConfig cfg;
  try {
    cfg = resolve(o);
  } catch (const cb::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  }
  const auto manifest = cb::run_experiment(cfg, stages, o.quiet ? nullptr : &std::cerr);
  for (const auto& w : manifest.warnings) std::cerr << "warning: " << w << "\n";
  if (!manifest.ok()) {
    for (const auto& s : manifest.stages)
      if (!s.error.empty()) std::cerr << "stage " << s.name << " failed: " << s.error << "\n";
    return kExitStage;
  }
  std::cout << (std::filesystem::path(cfg.output_dir) / "manifest.json").string() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cloakbench: adversarial de-identification transfer benchmark"};
  app.footer(cb::config_help() +
             "\nFlags override the matching config keys; CLOAKBENCH_SEED overrides `seed` from the file.\n"
             "Exit codes: 0 success, 2 configuration error, 3 stage failure (manifest still written).");
  app.set_version_flag("--version", std::string(cb::kToolVersion));
  app.require_subcommand(1);

  Overrides o;
  struct Cmd {
    const char* name;
    const char* help;
    unsigned stages;
  };
  const Cmd cmds[] = {
      {"train", "train (or reuse) every configured model", cb::kStageTrain},
      {"attack", "craft BIM/ILLC/FGSM examples on every source model", cb::kStageAttack},
      {"evaluate", "score crafted examples on every target model", cb::kStageEvaluate},
      {"report", "write tables, curves and image grids", cb::kStageReport},
      {"run", "train, attack, evaluate and report", cb::kStageAll},
  };
  std::vector<std::pair<CLI::App*, unsigned>> stage_cmds;
  for (const auto& c : cmds) {
    auto* sub = app.add_subcommand(c.name, c.help);
    add_common(sub, o);
    stage_cmds.emplace_back(sub, c.stages);
  }

  std::size_t classes = 10, per_class = 80, size = 32;
  std::uint64_t data_seed = 7;
  std::string data_out;
  auto* gen = app.add_subcommand("gen-data", "write a synthetic identity dataset as <out>/<identity>/*.png");
  gen->add_option("-o,--out", data_out, "destination directory")->required();
  gen->add_option("--classes", classes, "number of identities")->capture_default_str();
  gen->add_option("--per-class", per_class, "images per identity")->capture_default_str();
  gen->add_option("--size", size, "image side in pixels")->capture_default_str();
  gen->add_option("--seed", data_seed, "dataset seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  if (gen->parsed()) {
    try {
      const auto ds = cb::synth_dataset(classes, per_class, size, data_seed);
      cb::export_directory(ds, data_out);
      std::cout << data_out << ": " << ds.num_classes() << " identities, " << ds.samples.size() << " images\n";
      return kExitOk;
    } catch (const cb::DatasetError& e) {
      std::cerr << "config error: " << e.what() << "\n";
      return kExitConfig;
    } catch (const std::exception& e) {
      std::cerr << "gen-data failed: " << e.what() << "\n";
      return kExitStage;
    }
  }
  for (const auto& [sub, stages] : stage_cmds)
    if (sub->parsed()) return run_stages(o, stages);
  return kExitConfig;
}
