#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cloakbench/tensor.hpp"

namespace cloakbench {

/// A named trainable tensor with its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { std::fill(grad.storage().begin(), grad.storage().end(), 0.0f); }
};

class Tape;

/// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Shape& shape() const;
  std::span<const float> value() const;
  std::size_t size() const { return value().size(); }
};

/// Ordered record of executed operations. Nodes are appended in execution
/// order, so the record is already a topological order of the graph and
/// backward replays it once from the end.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  struct Node {
    std::string op;
    Shape shape;
    std::vector<float> value;
    std::vector<float> grad;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  Tape() { nodes_.reserve(32); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor t, bool requires_grad = false) {
    Node n;
    n.op = "leaf";
    n.shape = t.shape();
    n.value = std::move(t.storage());
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }

  Var constant(const Tensor& t) { return leaf(t, false); }

  /// Records a parameter. When tracked, backward adds into `p.grad`.
  Var parameter(Parameter& p, bool track = true) {
    Node n;
    n.op = "param:" + p.name;
    n.shape = p.value.shape();
    n.value = p.value.storage();
    n.requires_grad = track;
    n.param = track ? &p : nullptr;
    return push(std::move(n));
  }

  /// Appends an op node. `fn` is kept only if some input requires gradients.
  Var record(std::string op, Shape shape, std::vector<float> value,
             std::vector<std::size_t> inputs, BackwardFn fn) {
    Node n;
    n.op = std::move(op);
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.requires_grad = std::any_of(inputs.begin(), inputs.end(), [&](std::size_t i) {
      return nodes_[i].requires_grad;
    });
    n.inputs = std::move(inputs);
    if (n.requires_grad) n.backward = std::move(fn);
    return push(std::move(n));
  }

  Node& node(std::size_t id) { return nodes_.at(id); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }

  bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient buffer of a node; empty when the node does not require grad.
  std::span<float> grad_buffer(std::size_t id) { return nodes_[id].grad; }

  std::span<const float> grad(Var v) const {
    const auto& n = nodes_.at(v.id);
    if (!n.requires_grad) {
      throw std::logic_error("node '" + n.op + "' does not require gradients");
    }
    return n.grad;
  }

  /// Reverse-mode pass from a scalar. Every gradient on the tape is reset
  /// first, so repeated calls are idempotent.
  void backward(Var loss) {
    const auto& out = nodes_.at(loss.id);
    if (numel(out.shape) != 1) {
      throw ShapeError("backward requires a scalar loss, got shape " +
                       to_string(out.shape));
    }
    for (auto& n : nodes_) {
      n.grad.assign(n.requires_grad ? n.value.size() : 0, 0.0f);
    }
    if (!out.requires_grad) return;
    nodes_[loss.id].grad[0] = 1.0f;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.requires_grad && n.backward) n.backward(*this, i);
    }
    for (auto& n : nodes_) {
      if (n.param == nullptr) continue;
      auto& g = n.param->grad.storage();
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += n.grad[j];
    }
  }

 private:
  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

inline const Shape& Var::shape() const { return tape->node(id).shape; }
inline std::span<const float> Var::value() const { return tape->node(id).value; }

namespace detail {

inline void require_same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw std::logic_error("operands live on different tapes");
}

inline void require_shape(bool ok, const std::string& op, const Shape& a,
                          const Shape& b) {
  if (!ok) {
    throw ShapeError(op + ": incompatible shapes " + to_string(a) + " and " +
                     to_string(b));
  }
}

inline void accumulate(std::span<float> dst, const std::vector<double>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += static_cast<float>(src[i]);
}

}  // namespace detail

inline Var add(Var a, Var b) {
  detail::require_same_tape(a, b);
  detail::require_shape(a.shape() == b.shape(), "add", a.shape(), b.shape());
  auto av = a.value();
  auto bv = b.value();
  std::vector<float> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return a.tape->record("add", a.shape(), std::move(out), {a.id, b.id},
                        [a, b](Tape& t, std::size_t self) {
                          auto g = t.grad_buffer(self);
                          for (std::size_t id : {a.id, b.id}) {
                            if (!t.needs_grad(id)) continue;
                            auto d = t.grad_buffer(id);
                            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                          }
                        });
}

inline Var scale(Var a, float s) {
  auto av = a.value();
  std::vector<float> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  return a.tape->record("scale", a.shape(), std::move(out), {a.id},
                        [a, s](Tape& t, std::size_t self) {
                          auto g = t.grad_buffer(self);
                          auto d = t.grad_buffer(a.id);
                          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * s;
                        });
}

inline Var reshape(Var a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " +
                     to_string(shape));
  }
  std::vector<float> out(a.value().begin(), a.value().end());
  return a.tape->record("reshape", std::move(shape), std::move(out), {a.id},
                        [a](Tape& t, std::size_t self) {
                          auto g = t.grad_buffer(self);
                          auto d = t.grad_buffer(a.id);
                          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                        });
}

inline Var sum(Var a) {
  double acc = 0.0;
  for (float v : a.value()) acc += v;
  return a.tape->record("sum", Shape{1}, {static_cast<float>(acc)}, {a.id},
                        [a](Tape& t, std::size_t self) {
                          float g = t.grad_buffer(self)[0];
                          for (float& d : t.grad_buffer(a.id)) d += g;
                        });
}

inline Var relu(Var a) {
  auto av = a.value();
  std::vector<float> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0f ? av[i] : 0.0f;
  return a.tape->record("relu", a.shape(), std::move(out), {a.id},
                        [a](Tape& t, std::size_t self) {
                          auto g = t.grad_buffer(self);
                          const auto& x = t.node(a.id).value;
                          auto d = t.grad_buffer(a.id);
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            if (x[i] > 0.0f) d[i] += g[i];
                          }
                        });
}

/// [m,k] x [k,n] -> [m,n]
inline Var matmul(Var a, Var b) {
  detail::require_same_tape(a, b);
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  detail::require_shape(sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0],
                        "matmul", sa, sb);
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  auto av = a.value();
  auto bv = b.value();
  std::vector<float> out(m * n);
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double x = av[i * k + p];
      const float* row = &bv[p * n];
      for (std::size_t j = 0; j < n; ++j) acc[j] += x * row[j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = static_cast<float>(acc[j]);
  }
  return a.tape->record(
      "matmul", Shape{m, n}, std::move(out), {a.id, b.id},
      [a, b, m, k, n](Tape& t, std::size_t self) {
        auto g = t.grad_buffer(self);
        const auto& av = t.node(a.id).value;
        const auto& bv = t.node(b.id).value;
        if (t.needs_grad(a.id)) {
          std::vector<double> ga(m * k, 0.0);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0.0;
              for (std::size_t j = 0; j < n; ++j) s += double(g[i * n + j]) * bv[p * n + j];
              ga[i * k + p] = s;
            }
          detail::accumulate(t.grad_buffer(a.id), ga);
        }
        if (t.needs_grad(b.id)) {
          std::vector<double> gb(k * n, 0.0);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double x = av[i * k + p];
              for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += x * g[i * n + j];
            }
          detail::accumulate(t.grad_buffer(b.id), gb);
        }
      });
}

/// Dense layer: x [n], weight [out,n], bias [out] -> [out].
inline Var affine(Var x, Var weight, Var bias) {
  detail::require_same_tape(x, weight);
  detail::require_same_tape(x, bias);
  const auto& sw = weight.shape();
  detail::require_shape(x.shape().size() == 1 && sw.size() == 2 && sw[1] == x.shape()[0],
                        "affine", x.shape(), sw);
  detail::require_shape(bias.shape() == Shape{sw[0]}, "affine bias", bias.shape(), sw);
  const std::size_t out_n = sw[0], in_n = sw[1];
  auto xv = x.value();
  auto wv = weight.value();
  auto bv = bias.value();
  std::vector<float> out(out_n);
  for (std::size_t o = 0; o < out_n; ++o) {
    double acc = bv[o];
    const float* row = &wv[o * in_n];
    for (std::size_t i = 0; i < in_n; ++i) acc += double(row[i]) * xv[i];
    out[o] = static_cast<float>(acc);
  }
  return x.tape->record(
      "affine", Shape{out_n}, std::move(out), {x.id, weight.id, bias.id},
      [x, weight, bias, out_n, in_n](Tape& t, std::size_t self) {
        auto g = t.grad_buffer(self);
        const auto& xv = t.node(x.id).value;
        const auto& wv = t.node(weight.id).value;
        if (t.needs_grad(x.id)) {
          std::vector<double> gx(in_n, 0.0);
          for (std::size_t o = 0; o < out_n; ++o) {
            const double go = g[o];
            const float* row = &wv[o * in_n];
            for (std::size_t i = 0; i < in_n; ++i) gx[i] += go * row[i];
          }
          detail::accumulate(t.grad_buffer(x.id), gx);
        }
        if (t.needs_grad(weight.id)) {
          auto gw = t.grad_buffer(weight.id);
          for (std::size_t o = 0; o < out_n; ++o)
            for (std::size_t i = 0; i < in_n; ++i)
              gw[o * in_n + i] += static_cast<float>(double(g[o]) * xv[i]);
        }
        if (t.needs_grad(bias.id)) {
          auto gb = t.grad_buffer(bias.id);
          for (std::size_t o = 0; o < out_n; ++o) gb[o] += g[o];
        }
      });
}

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// Direct convolution in HWC layout: x [H,W,C], kernel [K,K,C,O], bias [O].
inline Var conv2d(Var x, Var kernel, Var bias, Conv2dOptions opt = {}) {
  detail::require_same_tape(x, kernel);
  detail::require_same_tape(x, bias);
  const auto& sx = x.shape();
  const auto& sk = kernel.shape();
  detail::require_shape(sx.size() == 3 && sk.size() == 4 && sk[0] == sk[1] &&
                            sk[2] == sx[2],
                        "conv2d", sx, sk);
  detail::require_shape(bias.shape() == Shape{sk[3]}, "conv2d bias", bias.shape(), sk);
  if (opt.stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  const std::size_t h = sx[0], w = sx[1], c = sx[2], k = sk[0], o = sk[3];
  const std::size_t s = opt.stride, pad = opt.padding;
  if (h + 2 * pad < k || w + 2 * pad < k) {
    throw ShapeError("conv2d: kernel " + to_string(sk) + " larger than padded input " +
                     to_string(sx));
  }
  const std::size_t ho = (h + 2 * pad - k) / s + 1;
  const std::size_t wo = (w + 2 * pad - k) / s + 1;

  auto xv = x.value();
  auto kv = kernel.value();
  auto bv = bias.value();
  std::vector<float> out(ho * wo * o);
  std::vector<double> acc(o);
  for (std::size_t oy = 0; oy < ho; ++oy) {
    for (std::size_t ox = 0; ox < wo; ++ox) {
      for (std::size_t q = 0; q < o; ++q) acc[q] = bv[q];
      for (std::size_t ky = 0; ky < k; ++ky) {
        const std::ptrdiff_t iy = std::ptrdiff_t(oy * s + ky) - std::ptrdiff_t(pad);
        if (iy < 0 || iy >= std::ptrdiff_t(h)) continue;
        for (std::size_t kx = 0; kx < k; ++kx) {
          const std::ptrdiff_t ix = std::ptrdiff_t(ox * s + kx) - std::ptrdiff_t(pad);
          if (ix < 0 || ix >= std::ptrdiff_t(w)) continue;
          const float* in = &xv[(std::size_t(iy) * w + std::size_t(ix)) * c];
          const float* kr = &kv[(ky * k + kx) * c * o];
          for (std::size_t ci = 0; ci < c; ++ci) {
            const double v = in[ci];
            const float* row = kr + ci * o;
            for (std::size_t q = 0; q < o; ++q) acc[q] += v * row[q];
          }
        }
      }
      float* dst = &out[(oy * wo + ox) * o];
      for (std::size_t q = 0; q < o; ++q) dst[q] = static_cast<float>(acc[q]);
    }
  }

  return x.tape->record(
      "conv2d", Shape{ho, wo, o}, std::move(out), {x.id, kernel.id, bias.id},
      [=](Tape& t, std::size_t self) {
        auto g = t.grad_buffer(self);
        const auto& xv = t.node(x.id).value;
        const auto& kv = t.node(kernel.id).value;
        const bool want_x = t.needs_grad(x.id);
        const bool want_k = t.needs_grad(kernel.id);
        std::vector<double> gx(want_x ? h * w * c : 0, 0.0);
        std::vector<double> gk(want_k ? k * k * c * o : 0, 0.0);
        // Kernel as [K,K,O,C] so the input-gradient update runs over
        // contiguous channels.
        std::vector<float> kt(want_x ? kv.size() : 0);
        for (std::size_t tap = 0; want_x && tap < k * k; ++tap)
          for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t q = 0; q < o; ++q) kt[(tap * o + q) * c + ci] = kv[(tap * c + ci) * o + q];
        for (std::size_t oy = 0; oy < ho; ++oy) {
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const float* go = &g[(oy * wo + ox) * o];
            for (std::size_t ky = 0; ky < k; ++ky) {
              const std::ptrdiff_t iy = std::ptrdiff_t(oy * s + ky) - std::ptrdiff_t(pad);
              if (iy < 0 || iy >= std::ptrdiff_t(h)) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const std::ptrdiff_t ix = std::ptrdiff_t(ox * s + kx) - std::ptrdiff_t(pad);
                if (ix < 0 || ix >= std::ptrdiff_t(w)) continue;
                const std::size_t in_off = (std::size_t(iy) * w + std::size_t(ix)) * c;
                const std::size_t k_off = (ky * k + kx) * c * o;
                if (want_x) {
                  double* gi = &gx[in_off];
                  const float* kr = &kt[k_off];
                  for (std::size_t q = 0; q < o; ++q) {
                    const double gq = go[q];
                    const float* col = kr + q * c;
                    for (std::size_t ci = 0; ci < c; ++ci) gi[ci] += gq * col[ci];
                  }
                }
                if (want_k) {
                  for (std::size_t ci = 0; ci < c; ++ci) {
                    const double v = xv[in_off + ci];
                    double* gr = &gk[k_off + ci * o];
                    for (std::size_t q = 0; q < o; ++q) gr[q] += v * go[q];
                  }
                }
              }
            }
          }
        }
        if (want_x) detail::accumulate(t.grad_buffer(x.id), gx);
        if (want_k) detail::accumulate(t.grad_buffer(kernel.id), gk);
        if (t.needs_grad(bias.id)) {
          std::vector<double> gb(o, 0.0);
          for (std::size_t p = 0; p < ho * wo; ++p)
            for (std::size_t q = 0; q < o; ++q) gb[q] += g[p * o + q];
          detail::accumulate(t.grad_buffer(bias.id), gb);
        }
      });
}

/// Non-overlapping max pooling (window == stride) over HWC input. Trailing
/// rows/columns that do not fill a window are dropped. Ties route the
/// gradient to the first maximum in scan order.
inline Var max_pool2d(Var x, std::size_t size) {
  const auto& sx = x.shape();
  if (sx.size() != 3) throw ShapeError("max_pool2d: expected HWC input, got " + to_string(sx));
  if (size == 0 || sx[0] < size || sx[1] < size) {
    throw ShapeError("max_pool2d: window " + std::to_string(size) + " does not fit " +
                     to_string(sx));
  }
  const std::size_t h = sx[0], w = sx[1], c = sx[2];
  const std::size_t ho = h / size, wo = w / size;
  auto xv = x.value();
  std::vector<float> out(ho * wo * c);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t oy = 0; oy < ho; ++oy)
    for (std::size_t ox = 0; ox < wo; ++ox)
      for (std::size_t ci = 0; ci < c; ++ci) {
        std::size_t best = ((oy * size) * w + ox * size) * c + ci;
        for (std::size_t dy = 0; dy < size; ++dy)
          for (std::size_t dx = 0; dx < size; ++dx) {
            const std::size_t idx = ((oy * size + dy) * w + ox * size + dx) * c + ci;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = (oy * wo + ox) * c + ci;
        out[o] = xv[best];
        argmax[o] = best;
      }
  return x.tape->record("max_pool2d", Shape{ho, wo, c}, std::move(out), {x.id},
                        [x, argmax = std::move(argmax)](Tape& t, std::size_t self) {
                          auto g = t.grad_buffer(self);
                          auto d = t.grad_buffer(x.id);
                          for (std::size_t i = 0; i < g.size(); ++i) d[argmax[i]] += g[i];
                        });
}

/// Max-subtracted softmax over a vector, normalized in f64.
inline std::vector<double> softmax_values(std::span<const float> logits) {
  std::vector<double> p(logits.size());
  if (logits.empty()) return p;
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(double(logits[i]) - m);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

inline Var softmax(Var logits) {
  if (logits.shape().size() != 1) {
    throw ShapeError("softmax: expected a vector, got " + to_string(logits.shape()));
  }
  auto p = softmax_values(logits.value());
  std::vector<float> out(p.begin(), p.end());
  return logits.tape->record("softmax", logits.shape(), std::move(out), {logits.id},
                             [logits](Tape& t, std::size_t self) {
                               auto g = t.grad_buffer(self);
                               const auto& y = t.node(self).value;
                               double dot = 0.0;
                               for (std::size_t i = 0; i < g.size(); ++i) dot += double(g[i]) * y[i];
                               auto d = t.grad_buffer(logits.id);
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 d[i] += static_cast<float>(y[i] * (g[i] - dot));
                             });
}

/// Log-sum-exp minus the label's logit; f64 internally.
inline double cross_entropy_value(std::span<const float> logits, std::size_t label) {
  std::size_t arg = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[arg]) arg = i;
  const double m = logits[arg];
  double rest = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (i != arg) rest += std::exp(double(logits[i]) - m);
  return (m - double(logits[label])) + std::log1p(rest);
}

inline Var cross_entropy(Var logits, std::size_t label) {
  if (logits.shape().size() != 1) {
    throw ShapeError("cross_entropy: expected a logit vector, got " +
                     to_string(logits.shape()));
  }
  if (label >= logits.size()) {
    throw std::out_of_range("cross_entropy: label " + std::to_string(label) +
                            " out of range for " + std::to_string(logits.size()) +
                            " classes");
  }
  const float loss = static_cast<float>(cross_entropy_value(logits.value(), label));
  return logits.tape->record("cross_entropy", Shape{1}, {loss}, {logits.id},
                             [logits, label](Tape& t, std::size_t self) {
                               const double g = t.grad_buffer(self)[0];
                               auto p = softmax_values(t.node(logits.id).value);
                               p[label] -= 1.0;
                               auto d = t.grad_buffer(logits.id);
                               for (std::size_t i = 0; i < d.size(); ++i)
                                 d[i] += static_cast<float>(g * p[i]);
                             });
}

}  // namespace cloakbench
