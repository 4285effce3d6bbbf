#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "cloakbench/attacks.hpp"
#include "cloakbench/models.hpp"
#include "cloakbench/parallel.hpp"
#include "cloakbench/pipeline.hpp"

namespace cloakbench {

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Protection success rate in percent: 100 - 100 * (#true label within the
/// first k entries) / n. The count is exact; one rounding at the division.
inline double psr(std::span<const std::vector<std::size_t>> rankings,
                  std::span<const std::size_t> true_labels, std::size_t k) {
  if (rankings.size() != true_labels.size()) {
    throw std::invalid_argument("psr: " + std::to_string(rankings.size()) + " rankings vs " +
                                std::to_string(true_labels.size()) + " labels");
  }
  if (rankings.empty()) throw EvalError("psr: no samples (denominator is zero)");
  if (k == 0) throw std::out_of_range("psr: k must be at least 1");
  std::uint64_t hits = 0;
  for (std::size_t i = 0; i < rankings.size(); ++i) {
    if (rankings[i].size() < k) throw std::out_of_range("psr: ranking shorter than k");
    const auto end = rankings[i].begin() + static_cast<std::ptrdiff_t>(k);
    hits += std::find(rankings[i].begin(), end, true_labels[i]) != end;
  }
  const std::uint64_t n = rankings.size();
  return double(100 * (n - hits)) / double(n);
}

/// Drops k values that exceed the number of classes (with a warning) and
/// sorts the rest.
inline std::vector<std::size_t> effective_k_set(std::vector<std::size_t> k_set, std::size_t num_classes,
                                                std::vector<std::string>* warnings = nullptr) {
  std::vector<std::size_t> out;
  std::sort(k_set.begin(), k_set.end());
  k_set.erase(std::unique(k_set.begin(), k_set.end()), k_set.end());
  for (std::size_t k : k_set) {
    if (k >= 1 && k <= num_classes) {
      out.push_back(k);
    } else if (warnings) {
      warnings->push_back("top-" + std::to_string(k) + " dropped: only " + std::to_string(num_classes) +
                          " classes");
    }
  }
  if (out.empty()) throw std::invalid_argument("k set is empty after dropping values above N");
  return out;
}

struct EvalCell {
  std::string source;
  Method method = Method::kBim;
  double epsilon = 0.0;
  std::string target;
  std::vector<std::size_t> k_values;
  std::vector<double> psr;  // aligned with k_values
  std::size_t sample_count = 0;       // records that reached the classifier
  std::size_t detect_fail_count = 0;  // excluded by the detection gate
  std::size_t attack_error_count = 0;
  std::vector<double> storage_delta;  // per record: max|stored - x_adv|
  std::vector<double> stored_linf;    // per record: max|stored - x|
  std::string error;

  bool ok() const { return error.empty(); }

  std::optional<double> psr_at(std::size_t k) const {
    for (std::size_t i = 0; i < k_values.size(); ++i)
      if (k_values[i] == k) return psr[i];
    return std::nullopt;
  }
};

namespace detail {

inline void check_cell_records(std::span<const AdvRecord> records) {
  for (const auto& r : records) {
    if (r.source_model != records[0].source_model || r.method != records[0].method ||
        r.epsilon != records[0].epsilon) {
      throw std::invalid_argument("evaluate_cell: records mix (source, method, epsilon) keys");
    }
  }
}

inline EvalCell empty_cell(std::span<const AdvRecord> records, const Classifier& target,
                           const std::vector<std::size_t>& k_set) {
  EvalCell cell;
  if (!records.empty()) {
    cell.source = records[0].source_model;
    cell.method = records[0].method;
    cell.epsilon = records[0].epsilon;
  }
  cell.target = target.id;
  cell.k_values = k_set;
  return cell;
}

}  // namespace detail

/// Applies `chain` to each crafted example, gates, classifies with `target`
/// and computes PSR at every k over the gated survivors.
inline EvalCell evaluate_cell(std::span<const AdvRecord> records, const Classifier& target,
                              const TransformChain& chain, const std::vector<std::size_t>& k_set) {
  detail::check_cell_records(records);
  for (std::size_t k : k_set)
    if (k < 1 || k > target.num_classes()) throw std::out_of_range("evaluate_cell: k out of range");
  EvalCell cell = detail::empty_cell(records, target, k_set);
  const std::size_t kmax = k_set.empty() ? 1 : *std::max_element(k_set.begin(), k_set.end());
  std::vector<std::vector<std::size_t>> rankings;
  std::vector<std::size_t> labels;
  for (const auto& r : records) {
    if (!r.ok()) {
      ++cell.attack_error_count;
      continue;
    }
    const auto out = chain.apply(r.x_adv);
    cell.storage_delta.push_back(out.storage_delta);
    if (!out.detection.detected) {
      ++cell.detect_fail_count;
      continue;
    }
    if (out.image.height == r.x.height && out.image.width == r.x.width) {
      cell.stored_linf.push_back(max_abs_diff(out.image, r.x));
    }
    rankings.push_back(top_k(predict(target, out.image), kmax));
    labels.push_back(r.y_true);
  }
  if (rankings.empty()) {
    throw EvalError("evaluate_cell: no detectable samples (" + std::to_string(cell.detect_fail_count) +
                    " gated, " + std::to_string(cell.attack_error_count) + " attack errors)");
  }
  cell.sample_count = rankings.size();
  for (std::size_t k : k_set) cell.psr.push_back(psr(rankings, labels, k));
  return cell;
}

/// Brute-force reference for evaluate_cell: classifies one record at a time
/// and decides Top-k membership by counting the labels ranked strictly ahead
/// of the true label, without sorting.
inline std::vector<double> psr_oracle(std::span<const AdvRecord> records, const Classifier& target,
                                      const TransformChain& chain, const std::vector<std::size_t>& k_set) {
  std::vector<std::uint64_t> hits(k_set.size(), 0);
  std::uint64_t n = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!records[i].error.empty()) continue;
    const auto out = chain.apply(records[i].x_adv);
    if (!out.detection.detected) continue;
    const auto probs = predict(target, out.image);
    const std::size_t y = records[i].y_true;
    std::size_t ahead = 0;
    for (std::size_t j = 0; j < probs.size(); ++j) {
      if (probs[j] > probs[y] || (probs[j] == probs[y] && j < y)) ++ahead;
    }
    for (std::size_t q = 0; q < k_set.size(); ++q) {
      if (ahead < k_set[q]) ++hits[q];
    }
    ++n;
  }
  if (n == 0) throw EvalError("psr_oracle: no detectable samples");
  std::vector<double> out;
  for (std::size_t q = 0; q < k_set.size(); ++q) out.push_back(double(100 * (n - hits[q])) / double(n));
  return out;
}

// ---------------------------------------------------------------------------
// Transfer matrix

struct MatrixMetadata {
  std::string dataset_id;
  std::size_t num_classes = 0;
  std::size_t eval_samples = 0;
  std::optional<int> jpeg_quality;
  double alpha = 1.0;
  std::uint64_t global_seed = 0;
  std::vector<std::string> models;
  std::vector<std::uint64_t> model_seeds;
  std::vector<std::string> methods;
  std::vector<double> epsilons;
  std::vector<std::size_t> k_values;
  std::vector<std::string> warnings;
};

struct TransferMatrix {
  std::vector<EvalCell> cells;
  MatrixMetadata meta;

  const EvalCell* find(const std::string& source, Method method, double epsilon,
                       const std::string& target) const {
    for (const auto& c : cells)
      if (c.source == source && c.method == method && c.epsilon == epsilon && c.target == target) return &c;
    return nullptr;
  }
};

/// Crafted examples of one (source, method, epsilon) triple.
struct AdvBatch {
  std::size_t source = 0;  // index into the model list
  Method method = Method::kBim;
  double epsilon = 0.0;
  std::vector<AdvRecord> records;
};

struct TransferOptions {
  double alpha = 1.0;
  std::optional<int> jpeg_quality = 90;
  std::vector<std::size_t> k_set = {1, 5, 10, 25, 50};
  std::size_t workers = 1;
  Detector detector;
};

/// Samples (at dataset resolution) brought to a model's input side. Originals
/// are classified uncompressed; only crafted examples go through storage.
inline std::vector<Sample> inputs_for(const Classifier& model, std::span<const Sample> samples) {
  std::vector<Sample> out(samples.begin(), samples.end());
  for (auto& s : out) {
    if (!s.image.is_square()) s.image = center_crop_square(s.image);
    s.image = resize(s.image, model.input_size());
  }
  return out;
}

inline std::vector<AdvBatch> craft_all(std::span<const Classifier> models, std::span<const Method> methods,
                                       std::span<const double> eps_set, std::span<const Sample> samples,
                                       const TransferOptions& opt) {
  std::vector<AdvBatch> batches;
  for (std::size_t s = 0; s < models.size(); ++s) {
    const auto inputs = inputs_for(models[s], samples);
    for (Method m : methods) {
      for (double eps : eps_set) {
        AttackConfig cfg;
        cfg.method = m;
        cfg.epsilon = eps;
        cfg.alpha = opt.alpha;
        batches.push_back(AdvBatch{s, m, eps, attack_batch(models[s], inputs, cfg, opt.workers)});
      }
    }
  }
  return batches;
}

/// Evaluates every batch against every target. JPEG storage always applies
/// (when configured); resizing only when source and target sizes differ.
inline TransferMatrix evaluate_all(std::span<const AdvBatch> batches, std::span<const Classifier> models,
                                   const TransferOptions& opt) {
  TransferMatrix mx;
  if (models.empty()) throw std::invalid_argument("transfer matrix: no models");
  std::size_t n_classes = models[0].num_classes();
  for (const auto& m : models) {
    if (m.num_classes() != n_classes) {
      throw std::invalid_argument("transfer matrix: models disagree on the label space");
    }
  }
  const auto ks = effective_k_set(opt.k_set, n_classes, &mx.meta.warnings);
  mx.meta.k_values = ks;
  mx.meta.num_classes = n_classes;
  mx.meta.jpeg_quality = opt.jpeg_quality;
  mx.meta.alpha = opt.alpha;
  for (const auto& m : models) {
    mx.meta.models.push_back(m.id);
    mx.meta.model_seeds.push_back(m.provenance.seed);
  }
  mx.cells.resize(batches.size() * models.size());
  parallel_for(mx.cells.size(), opt.workers, [&](std::size_t i) {
    const auto& batch = batches[i / models.size()];
    const auto& source = models[batch.source];
    const auto& target = models[i % models.size()];
    const auto chain = storage_chain(opt.jpeg_quality, source.input_size(), target.input_size(), opt.detector);
    try {
      mx.cells[i] = evaluate_cell(batch.records, target, chain, ks);
    } catch (const std::exception& e) {
      mx.cells[i] = detail::empty_cell(batch.records, target, ks);
      mx.cells[i].error = e.what();
    }
    mx.cells[i].source = source.id;
    mx.cells[i].method = batch.method;
    mx.cells[i].epsilon = batch.epsilon;
  });
  for (const auto& b : batches) {
    const auto name = to_string(b.method);
    if (std::find(mx.meta.methods.begin(), mx.meta.methods.end(), name) == mx.meta.methods.end())
      mx.meta.methods.push_back(name);
    if (std::find(mx.meta.epsilons.begin(), mx.meta.epsilons.end(), b.epsilon) == mx.meta.epsilons.end())
      mx.meta.epsilons.push_back(b.epsilon);
    mx.meta.eval_samples = std::max(mx.meta.eval_samples, b.records.size());
  }
  return mx;
}

struct TransferResult {
  TransferMatrix matrix;
  std::vector<AdvBatch> batches;
};

/// Crafts once per (source, method, epsilon) and evaluates on every target.
inline TransferResult transfer_matrix(std::span<const Classifier> models, std::span<const Method> methods,
                                      std::span<const double> eps_set, std::span<const Sample> eval_slice,
                                      const TransferOptions& opt) {
  if (models.empty()) throw std::invalid_argument("transfer matrix: no models");
  if (eval_slice.empty()) throw std::invalid_argument("transfer matrix: empty evaluation slice");
  TransferResult out;
  out.batches = craft_all(models, methods, eps_set, eval_slice, opt);
  out.matrix = evaluate_all(out.batches, models, opt);
  return out;
}

}  // namespace cloakbench
