#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cloakbench/models.hpp"
#include "cloakbench/pipeline.hpp"

namespace fixture {

/// Small split synthetic dataset (10 identities, 32 px).
inline const cloakbench::Dataset& dataset() {
  static const auto ds = cloakbench::split(cloakbench::synth_dataset(10, 30, 32, 7), 0.7, 11);
  return ds;
}

/// A quickly trained classifier of the given stock architecture.
inline const cloakbench::Classifier& trained(const std::string& arch = "cnn-a") {
  static std::map<std::string, cloakbench::Classifier> cache;
  auto it = cache.find(arch);
  if (it != cache.end()) return it->second;
  const auto desc = cloakbench::stock_descriptor(arch, 10);
  auto model = cloakbench::build_model(desc, 100);
  model.id = arch;
  auto result = cloakbench::train(std::move(model), cloakbench::resized_for(dataset(), desc.input_size),
                                  cloakbench::TrainParams{0.01, 0.9, 8, 16, 200});
  return cache.emplace(arch, std::move(result.model)).first->second;
}

inline std::vector<cloakbench::Sample> eval_samples(std::size_t side, std::size_t n) {
  std::vector<cloakbench::Sample> out;
  for (const auto* s : dataset().select(cloakbench::Split::kEval)) {
    if (out.size() == n) break;
    auto copy = *s;
    copy.image = cloakbench::resize(copy.image, side);
    out.push_back(std::move(copy));
  }
  return out;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("cloakbench-test-" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace fixture
