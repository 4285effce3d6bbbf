#pragma once

// Independent f64 reference implementations used as test oracles. Nothing
// here calls into the tape; the layouts follow the library's documented
// conventions (HWC images, [K,K,C,O] kernels, row-major flatten).

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "cloakbench/autodiff.hpp"
#include "cloakbench/models.hpp"
#include "cloakbench/rng.hpp"

namespace oracle {

using Vec = std::vector<double>;
using cloakbench::Shape;

inline Vec conv2d(const Vec& x, const Shape& sx, const Vec& k, const Shape& sk, const Vec& b,
                  std::size_t stride, std::size_t pad, Shape* out_shape = nullptr) {
  const std::size_t h = sx[0], w = sx[1], c = sx[2], kk = sk[0], o = sk[3];
  const std::size_t ho = (h + 2 * pad - kk) / stride + 1, wo = (w + 2 * pad - kk) / stride + 1;
  Vec out(ho * wo * o);
  for (std::size_t oy = 0; oy < ho; ++oy)
    for (std::size_t ox = 0; ox < wo; ++ox)
      for (std::size_t oc = 0; oc < o; ++oc) {
        double acc = b[oc];
        for (std::size_t ky = 0; ky < kk; ++ky)
          for (std::size_t kx = 0; kx < kk; ++kx) {
            const long iy = long(oy * stride + ky) - long(pad);
            const long ix = long(ox * stride + kx) - long(pad);
            if (iy < 0 || ix < 0 || iy >= long(h) || ix >= long(w)) continue;
            for (std::size_t ic = 0; ic < c; ++ic)
              acc += x[(iy * w + ix) * c + ic] * k[((ky * kk + kx) * c + ic) * o + oc];
          }
        out[(oy * wo + ox) * o + oc] = acc;
      }
  if (out_shape) *out_shape = {ho, wo, o};
  return out;
}

inline Vec max_pool(const Vec& x, const Shape& sx, std::size_t size, Shape* out_shape = nullptr) {
  const std::size_t h = sx[0], w = sx[1], c = sx[2], ho = h / size, wo = w / size;
  Vec out(ho * wo * c, -INFINITY);
  for (std::size_t oy = 0; oy < ho; ++oy)
    for (std::size_t ox = 0; ox < wo; ++ox)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t dy = 0; dy < size; ++dy)
          for (std::size_t dx = 0; dx < size; ++dx) {
            double& o = out[(oy * wo + ox) * c + ch];
            o = std::max(o, x[((oy * size + dy) * w + ox * size + dx) * c + ch]);
          }
  if (out_shape) *out_shape = {ho, wo, c};
  return out;
}

inline Vec relu(Vec x) {
  for (double& v : x) v = v > 0 ? v : 0;
  return x;
}

inline Vec affine(const Vec& x, const Vec& w, const Vec& b) {
  Vec out(b);
  for (std::size_t o = 0; o < b.size(); ++o)
    for (std::size_t i = 0; i < x.size(); ++i) out[o] += w[o * x.size() + i] * x[i];
  return out;
}

inline Vec matmul(const Vec& a, const Vec& b, std::size_t m, std::size_t k, std::size_t n) {
  Vec out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) out[i * n + j] += a[i * k + p] * b[p * n + j];
  return out;
}

inline Vec softmax(const Vec& z) {
  const double m = *std::max_element(z.begin(), z.end());
  Vec p(z.size());
  double s = 0;
  for (std::size_t i = 0; i < z.size(); ++i) s += p[i] = std::exp(z[i] - m);
  for (double& v : p) v /= s;
  return p;
}

inline double cross_entropy(const Vec& z, std::size_t label) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0;
  for (double v : z) s += std::exp(v - m);
  return m + std::log(s) - z[label];
}

inline Vec to_f64(std::span<const float> v) { return Vec(v.begin(), v.end()); }

/// Full classifier forward in f64 from the raw [0,255] image.
inline Vec logits(const cloakbench::Classifier& model, const Vec& pixels) {
  Shape s{model.input_size(), model.input_size(), 3};
  Vec h(pixels);
  for (double& v : h) v /= 255.0;
  std::size_t p = 0;
  auto param = [&] { return to_f64(model.params[p++].value.data()); };
  for (const auto& l : model.descriptor.layers) {
    if (const auto* c = std::get_if<cloakbench::ConvSpec>(&l)) {
      const auto& ks = model.params[p].value.shape();
      const Vec k = param(), b = param();
      h = conv2d(h, s, k, ks, b, c->stride, c->padding, &s);
    } else if (std::holds_alternative<cloakbench::ReluSpec>(l)) {
      h = relu(h);
    } else if (const auto* mp = std::get_if<cloakbench::MaxPoolSpec>(&l)) {
      h = max_pool(h, s, mp->size, &s);
    } else {
      const Vec w = param(), b = param();
      h = affine(h, w, b);
      s = {h.size()};
    }
  }
  return h;
}

/// |a - n| / max(|a|, |n|), with both tiny treated as agreement.
inline double rel_error(double a, double n, double floor = 1e-7) {
  const double d = std::abs(a - n);
  const double scale = std::max(std::abs(a), std::abs(n));
  return scale < floor ? 0.0 : d / scale;
}

// ---------------------------------------------------------------------------
// Finite-difference harness for tape ops.

struct OpCase {
  std::string name;
  std::vector<Shape> inputs;
  // Draws input values; default uniform(-1,1).
  std::function<std::vector<float>(const Shape&, std::size_t input, cloakbench::Rng&)> draw;
  std::function<cloakbench::Var(cloakbench::Tape&, const std::vector<cloakbench::Var>&)> build;
  std::function<Vec(const std::vector<Vec>&)> shadow;
};

struct FdReport {
  std::size_t points = 0;
  double worst = 0.0;
  std::string worst_at;
};

/// Checks d/dinput of  f = sum_i w_i * op(inputs)_i  against central
/// differences of the f64 shadow with step h.
inline FdReport check_op(const OpCase& op, std::uint64_t seed, std::size_t instances,
                         std::size_t points_per_instance, double h = 1e-3) {
  using namespace cloakbench;
  FdReport rep;
  Rng rng(seed);
  for (std::size_t inst = 0; inst < instances; ++inst) {
    std::vector<std::vector<float>> vals;
    for (std::size_t i = 0; i < op.inputs.size(); ++i) {
      if (op.draw) {
        vals.push_back(op.draw(op.inputs[i], i, rng));
      } else {
        std::vector<float> v(numel(op.inputs[i]));
        for (float& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
        vals.push_back(std::move(v));
      }
    }
    Tape tape;
    std::vector<Var> vars;
    for (std::size_t i = 0; i < vals.size(); ++i) vars.push_back(tape.leaf(Tensor(op.inputs[i], vals[i]), true));
    Var y = op.build(tape, vars);
    std::vector<float> w(y.size());
    for (float& x : w) x = static_cast<float>(rng.uniform(-1.0, 1.0));
    Var flat = reshape(y, Shape{1, y.size()});
    Var loss = matmul(flat, tape.constant(Tensor(Shape{y.size(), 1}, w)));
    tape.backward(loss);

    std::vector<Vec> base;
    for (const auto& v : vals) base.emplace_back(v.begin(), v.end());
    auto f = [&](const std::vector<Vec>& in) {
      const Vec out = op.shadow(in);
      double s = 0;
      for (std::size_t i = 0; i < out.size(); ++i) s += double(w[i]) * out[i];
      return s;
    };
    for (std::size_t p = 0; p < points_per_instance; ++p) {
      const std::size_t which = rng.below(vals.size());
      const std::size_t j = rng.below(vals[which].size());
      auto plus = base, minus = base;
      plus[which][j] += h;
      minus[which][j] -= h;
      const double numeric = (f(plus) - f(minus)) / (2 * h);
      const double analytic = tape.grad(vars[which])[j];
      const double e = rel_error(analytic, numeric);
      ++rep.points;
      if (e > rep.worst) {
        rep.worst = e;
        rep.worst_at = op.name + " input " + std::to_string(which) + "[" + std::to_string(j) +
                       "] analytic " + std::to_string(analytic) + " numeric " + std::to_string(numeric);
      }
    }
  }
  return rep;
}

/// Values spaced at least `gap` apart with random signs, so kinks of relu
/// and max-pool stay farther than the FD step from every sample.
inline std::vector<float> spaced_values(std::size_t n, cloakbench::Rng& rng, double gap = 0.01) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<float> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<float>((double(order[i]) - double(n) / 2.0 + 0.5) * gap);
  return v;
}

inline std::vector<OpCase> standard_ops() {
  using namespace cloakbench;
  std::vector<OpCase> ops;
  ops.push_back({"add", {{3, 4}, {3, 4}}, {},
                 [](Tape&, const std::vector<Var>& v) { return add(v[0], v[1]); },
                 [](const std::vector<Vec>& in) {
                   Vec o(in[0]);
                   for (std::size_t i = 0; i < o.size(); ++i) o[i] += in[1][i];
                   return o;
                 }});
  ops.push_back({"scale", {{10}}, {},
                 [](Tape&, const std::vector<Var>& v) { return scale(v[0], 0.37f); },
                 [](const std::vector<Vec>& in) {
                   Vec o(in[0]);
                   for (double& x : o) x *= double(0.37f);
                   return o;
                 }});
  ops.push_back({"sum", {{4, 5}}, {},
                 [](Tape&, const std::vector<Var>& v) { return sum(v[0]); },
                 [](const std::vector<Vec>& in) {
                   double s = 0;
                   for (double x : in[0]) s += x;
                   return Vec{s};
                 }});
  ops.push_back({"relu", {{40}},
                 [](const Shape& s, std::size_t, Rng& r) { return spaced_values(numel(s), r, 0.02); },
                 [](Tape&, const std::vector<Var>& v) { return relu(v[0]); },
                 [](const std::vector<Vec>& in) { return relu(in[0]); }});
  ops.push_back({"matmul", {{3, 5}, {5, 4}}, {},
                 [](Tape&, const std::vector<Var>& v) { return matmul(v[0], v[1]); },
                 [](const std::vector<Vec>& in) { return matmul(in[0], in[1], 3, 5, 4); }});
  ops.push_back({"affine", {{6}, {4, 6}, {4}}, {},
                 [](Tape&, const std::vector<Var>& v) { return affine(v[0], v[1], v[2]); },
                 [](const std::vector<Vec>& in) { return affine(in[0], in[1], in[2]); }});
  ops.push_back({"conv2d_s1_p1", {{6, 6, 2}, {3, 3, 2, 3}, {3}}, {},
                 [](Tape&, const std::vector<Var>& v) { return conv2d(v[0], v[1], v[2], {1, 1}); },
                 [](const std::vector<Vec>& in) {
                   return conv2d(in[0], {6, 6, 2}, in[1], {3, 3, 2, 3}, in[2], 1, 1);
                 }});
  ops.push_back({"conv2d_s2_p2", {{7, 7, 3}, {5, 5, 3, 2}, {2}}, {},
                 [](Tape&, const std::vector<Var>& v) { return conv2d(v[0], v[1], v[2], {2, 2}); },
                 [](const std::vector<Vec>& in) {
                   return conv2d(in[0], {7, 7, 3}, in[1], {5, 5, 3, 2}, in[2], 2, 2);
                 }});
  ops.push_back({"max_pool2d", {{6, 6, 2}},
                 [](const Shape& s, std::size_t, Rng& r) { return spaced_values(numel(s), r, 0.01); },
                 [](Tape&, const std::vector<Var>& v) { return max_pool2d(v[0], 2); },
                 [](const std::vector<Vec>& in) { return max_pool(in[0], {6, 6, 2}, 2); }});
  ops.push_back({"softmax", {{7}},
                 [](const Shape& s, std::size_t, Rng& r) {
                   std::vector<float> v(numel(s));
                   for (float& x : v) x = static_cast<float>(r.uniform(-3.0, 3.0));
                   return v;
                 },
                 [](Tape&, const std::vector<Var>& v) { return softmax(v[0]); },
                 [](const std::vector<Vec>& in) { return softmax(in[0]); }});
  ops.push_back({"cross_entropy", {{9}},
                 [](const Shape& s, std::size_t, Rng& r) {
                   std::vector<float> v(numel(s));
                   for (float& x : v) x = static_cast<float>(r.uniform(-3.0, 3.0));
                   return v;
                 },
                 [](Tape&, const std::vector<Var>& v) { return cross_entropy(v[0], 4); },
                 [](const std::vector<Vec>& in) { return Vec{cross_entropy(in[0], 4)}; }});
  ops.push_back({"cross_entropy_of_affine", {{8}, {5, 8}, {5}}, {},
                 [](Tape&, const std::vector<Var>& v) { return cross_entropy(affine(v[0], v[1], v[2]), 2); },
                 [](const std::vector<Vec>& in) { return Vec{cross_entropy(affine(in[0], in[1], in[2]), 2)}; }});
  return ops;
}

/// Worst relative error between input_gradient and a central difference of
/// the f64 forward at `pixels` random positions.
inline double cnn_input_gradient_error(const cloakbench::Classifier& model, const cloakbench::Image& img,
                                       std::size_t label, std::size_t pixels, std::uint64_t seed,
                                       double h = 1e-3) {
  const auto g = cloakbench::input_gradient(model, img, label);
  const Vec base(img.pixels.begin(), img.pixels.end());
  cloakbench::Rng rng(seed);
  double worst = 0;
  for (std::size_t p = 0; p < pixels; ++p) {
    const std::size_t j = rng.below(base.size());
    Vec plus = base, minus = base;
    plus[j] += h;
    minus[j] -= h;
    const double numeric = (cross_entropy(logits(model, plus), label) - cross_entropy(logits(model, minus), label)) /
                           (2 * h);
    worst = std::max(worst, rel_error(g[j], numeric, 1e-9));
  }
  return worst;
}

}  // namespace oracle
