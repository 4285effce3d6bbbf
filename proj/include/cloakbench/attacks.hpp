#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cloakbench/image.hpp"
#include "cloakbench/models.hpp"
#include "cloakbench/parallel.hpp"
#include "cloakbench/pipeline.hpp"

namespace cloakbench {

enum class Method { kFgsm, kBim, kIllc };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::kFgsm: return "FGSM";
    case Method::kBim: return "BIM";
    case Method::kIllc: return "ILLC";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  std::string u = s;
  std::transform(u.begin(), u.end(), u.begin(), [](unsigned char c) { return std::toupper(c); });
  if (u == "FGSM") return Method::kFgsm;
  if (u == "BIM") return Method::kBim;
  if (u == "ILLC") return Method::kIllc;
  throw std::invalid_argument("unknown attack method '" + s + "' (FGSM, BIM, ILLC)");
}

/// Iteration count for budget `epsilon`: min(eps + 4, 1.25 eps), rounded
/// half away from zero, at least 1.
inline std::size_t schedule(double epsilon) {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) {
    throw std::invalid_argument("schedule: epsilon must be positive, got " + std::to_string(epsilon));
  }
  const double n = std::min(epsilon + 4.0, 1.25 * epsilon);
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(n)));
}

struct AttackConfig {
  Method method = Method::kBim;
  double epsilon = 8.0;  // pixel units in [0,255]
  double alpha = 1.0;    // pixels per iteration
  std::optional<std::size_t> n_iter;
  bool record_trajectory = false;

  std::size_t iterations() const { return n_iter ? *n_iter : schedule(epsilon); }

  void validate() const {
    if (!(epsilon > 0.0)) throw std::invalid_argument("attack: epsilon must be positive");
    if (!(alpha >= 0.0)) throw std::invalid_argument("attack: alpha must be non-negative");
    if (n_iter && *n_iter == 0) throw std::invalid_argument("attack: n_iter must be at least 1");
  }
};

struct AdvRecord {
  std::size_t index = 0;
  Image x;
  Image x_adv;
  Method method = Method::kBim;
  double epsilon = 0.0;
  std::size_t n_iter_used = 0;
  std::size_t y_true = 0;
  std::optional<std::size_t> y_target;
  std::string source_model;
  std::vector<double> loss_trajectory;  // J at every iterate, final included
  std::vector<double> linf_trajectory;  // max|x_adv - x| after each step
  std::size_t budget_violations = 0;    // steps that left the eps-ball or [0,255]
  std::string error;

  bool ok() const { return error.empty(); }
};

/// Intersection of the eps-ball around `x` with [0,255], per pixel:
/// min(max(candidate, x - eps, 0), x + eps, 255).
inline Image clip_eps(const Image& candidate, const Image& x, double epsilon) {
  require_same_shape(candidate, x, "clip_eps");
  Image out(x.height, x.width);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x.pixels[i];
    const double lo = std::max(xi - epsilon, 0.0);
    const double hi = std::min(xi + epsilon, 255.0);
    const double v = std::min(std::max(double(candidate.pixels[i]), lo), hi);
    float r = static_cast<float>(v);
    // f32 rounding may step just outside the bound; pull back toward x.
    if (double(r) > hi) r = std::nextafter(r, -INFINITY);
    if (double(r) < lo) r = std::nextafter(r, INFINITY);
    out.pixels[i] = r;
  }
  return out;
}

/// sign with sign(0) = 0.
inline float sign_of(float g) { return g > 0.0f ? 1.0f : (g < 0.0f ? -1.0f : 0.0f); }

namespace detail {

inline bool within_budget(const Image& x_adv, const Image& x, double epsilon) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x_adv.pixels[i];
    if (!(v >= 0.0 && v <= 255.0)) return false;
    if (std::abs(v - double(x.pixels[i])) > epsilon) return false;
  }
  return true;
}

inline void after_step(AdvRecord& rec, bool record) {
  if (!within_budget(rec.x_adv, rec.x, rec.epsilon)) ++rec.budget_violations;
  if (record) rec.linf_trajectory.push_back(max_abs_diff(rec.x_adv, rec.x));
}

inline AdvRecord start_record(const Classifier& model, const Image& x, std::size_t y_true,
                              Method method, double epsilon, std::size_t n_iter) {
  AdvRecord rec;
  rec.x = x;
  rec.x_adv = x;
  rec.method = method;
  rec.epsilon = epsilon;
  rec.n_iter_used = n_iter;
  rec.y_true = y_true;
  rec.source_model = model.id;
  return rec;
}

/// Shared BIM / ILLC loop: `direction` is +1 to ascend J(., label) and -1
/// to descend it.
inline void iterate(const Classifier& model, AdvRecord& rec, std::size_t label, float direction,
                    const AttackConfig& cfg) {
  const float step = static_cast<float>(cfg.alpha);
  Image candidate(rec.x.height, rec.x.width);
  for (std::size_t it = 0; it < rec.n_iter_used; ++it) {
    const auto lg = loss_and_input_gradient(model, rec.x_adv, label);
    if (cfg.record_trajectory) rec.loss_trajectory.push_back(lg.loss);
    for (std::size_t i = 0; i < candidate.size(); ++i) {
      candidate.pixels[i] = rec.x_adv.pixels[i] + direction * step * sign_of(lg.grad[i]);
    }
    rec.x_adv = clip_eps(candidate, rec.x, rec.epsilon);
    after_step(rec, cfg.record_trajectory);
  }
  if (cfg.record_trajectory) rec.loss_trajectory.push_back(loss_at(model, rec.x_adv, label));
}

}  // namespace detail

/// Single step: clip(x + eps * sign(grad_x J(x, y_true))).
inline AdvRecord fgsm(const Classifier& model, const Image& x, std::size_t y_true, double epsilon) {
  AttackConfig cfg{Method::kFgsm, epsilon, epsilon, std::size_t{1}, false};
  cfg.validate();
  auto rec = detail::start_record(model, x, y_true, Method::kFgsm, epsilon, 1);
  const auto g = input_gradient(model, x, y_true);
  const float step = static_cast<float>(epsilon);
  Image candidate(x.height, x.width);
  for (std::size_t i = 0; i < x.size(); ++i) {
    candidate.pixels[i] = x.pixels[i] + 1.0f * step * sign_of(g[i]);
  }
  rec.x_adv = clip_eps(candidate, x, epsilon);
  detail::after_step(rec, false);
  return rec;
}

/// Untargeted iterative ascent on J(., y_true) from x_adv(0) = x.
inline AdvRecord bim(const Classifier& model, const Image& x, std::size_t y_true,
                     const AttackConfig& cfg) {
  cfg.validate();
  auto rec = detail::start_record(model, x, y_true, Method::kBim, cfg.epsilon, cfg.iterations());
  detail::iterate(model, rec, y_true, 1.0f, cfg);
  return rec;
}

/// Targeted iterative descent on J(., y_LLC); y_LLC is fixed from the clean
/// image before the first step.
inline AdvRecord illc(const Classifier& model, const Image& x, std::size_t y_true,
                      const AttackConfig& cfg) {
  cfg.validate();
  auto rec = detail::start_record(model, x, y_true, Method::kIllc, cfg.epsilon, cfg.iterations());
  const std::size_t target = least_likely_class(model, x, y_true);
  rec.y_target = target;
  detail::iterate(model, rec, target, -1.0f, cfg);
  return rec;
}

inline AdvRecord attack(const Classifier& model, const Image& x, std::size_t y_true,
                        const AttackConfig& cfg) {
  switch (cfg.method) {
    case Method::kFgsm: return fgsm(model, x, y_true, cfg.epsilon);
    case Method::kBim: return bim(model, x, y_true, cfg);
    case Method::kIllc: return illc(model, x, y_true, cfg);
  }
  throw std::logic_error("unreachable");
}

/// Attacks every sample; output order follows input order for any
/// parallelism. Per-image failures land in AdvRecord::error.
inline std::vector<AdvRecord> attack_batch(const Classifier& model, std::span<const Sample> samples,
                                           const AttackConfig& cfg, std::size_t parallelism = 1) {
  std::vector<AdvRecord> out(samples.size());
  parallel_for(samples.size(), parallelism, [&](std::size_t i) {
    try {
      out[i] = attack(model, samples[i].image, samples[i].label, cfg);
    } catch (const std::exception& e) {
      out[i] = AdvRecord{};
      out[i].x = samples[i].image;
      out[i].x_adv = samples[i].image;
      out[i].method = cfg.method;
      out[i].epsilon = cfg.epsilon;
      out[i].y_true = samples[i].label;
      out[i].source_model = model.id;
      out[i].error = e.what();
    }
    out[i].index = i;
  });
  return out;
}

}  // namespace cloakbench
