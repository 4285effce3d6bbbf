#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "cloakbench/autodiff.hpp"
#include "cloakbench/image.hpp"
#include "cloakbench/pipeline.hpp"
#include "cloakbench/rng.hpp"

namespace cloakbench {

// ---------------------------------------------------------------------------
// Architecture descriptors

struct ConvSpec {
  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
};
struct ReluSpec {
  friend bool operator==(const ReluSpec&, const ReluSpec&) = default;
};
struct MaxPoolSpec {
  friend bool operator==(const MaxPoolSpec&, const MaxPoolSpec&) = default;
  std::size_t size = 2;
};
/// Dense layers flatten their input; `in_features` must match it.
struct DenseSpec {
  friend bool operator==(const DenseSpec&, const DenseSpec&) = default;
  std::size_t in_features = 0;
  std::size_t out_features = 0;
};

using LayerSpec = std::variant<ConvSpec, ReluSpec, MaxPoolSpec, DenseSpec>;

class DescriptorError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ArchitectureDescriptor {
  std::string name;
  std::size_t input_size = 0;
  std::vector<LayerSpec> layers;
  std::size_t num_classes = 0;

  /// Activation shapes after each layer; throws naming the first layer
  /// whose declared shape does not chain.
  std::vector<Shape> validate() const {
    if (input_size == 0) throw DescriptorError(name + ": input size must be positive");
    if (num_classes == 0) throw DescriptorError(name + ": num_classes must be positive");
    if (layers.empty()) throw DescriptorError(name + ": no layers");
    Shape cur{input_size, input_size, Image::channels};
    std::vector<Shape> shapes;
    auto fail = [&](std::size_t i, const std::string& kind, const std::string& why) {
      throw DescriptorError(name + ": layer " + std::to_string(i) + " (" + kind + ") " + why);
    };
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      if (const auto* c = std::get_if<ConvSpec>(&l)) {
        if (cur.size() != 3) fail(i, "conv", "follows a dense layer");
        if (c->in_channels != cur[2])
          fail(i, "conv", "expects " + std::to_string(c->in_channels) + " input channels but receives " +
                              to_string(cur));
        if (c->kernel == 0 || c->stride == 0 || c->out_channels == 0) fail(i, "conv", "has a zero dimension");
        if (cur[0] + 2 * c->padding < c->kernel) fail(i, "conv", "kernel exceeds padded input " + to_string(cur));
        const std::size_t o = (cur[0] + 2 * c->padding - c->kernel) / c->stride + 1;
        cur = {o, o, c->out_channels};
      } else if (const auto* p = std::get_if<MaxPoolSpec>(&l)) {
        if (cur.size() != 3) fail(i, "max_pool", "follows a dense layer");
        if (p->size == 0 || cur[0] < p->size) fail(i, "max_pool", "window does not fit " + to_string(cur));
        cur = {cur[0] / p->size, cur[1] / p->size, cur[2]};
      } else if (const auto* d = std::get_if<DenseSpec>(&l)) {
        if (d->in_features != numel(cur))
          fail(i, "dense", "expects " + std::to_string(d->in_features) + " inputs but previous layer produces " +
                               std::to_string(numel(cur)) + " " + to_string(cur));
        if (d->out_features == 0) fail(i, "dense", "has zero outputs");
        cur = {d->out_features};
      }
      shapes.push_back(cur);
    }
    if (cur != Shape{num_classes}) {
      throw DescriptorError(name + ": final layer produces " + to_string(cur) + ", expected [" +
                            std::to_string(num_classes) + "] logits");
    }
    return shapes;
  }

  friend bool operator==(const ArchitectureDescriptor&, const ArchitectureDescriptor&) = default;
};

inline nlohmann::json to_json(const ArchitectureDescriptor& d) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : d.layers) {
    if (const auto* c = std::get_if<ConvSpec>(&l)) {
      layers.push_back({{"type", "conv"}, {"in", c->in_channels}, {"out", c->out_channels},
                        {"kernel", c->kernel}, {"stride", c->stride}, {"padding", c->padding}});
    } else if (std::holds_alternative<ReluSpec>(l)) {
      layers.push_back({{"type", "relu"}});
    } else if (const auto* p = std::get_if<MaxPoolSpec>(&l)) {
      layers.push_back({{"type", "max_pool"}, {"size", p->size}});
    } else if (const auto* dn = std::get_if<DenseSpec>(&l)) {
      layers.push_back({{"type", "dense"}, {"in", dn->in_features}, {"out", dn->out_features}});
    }
  }
  return {{"name", d.name}, {"input_size", d.input_size}, {"num_classes", d.num_classes},
          {"layers", layers}};
}

inline ArchitectureDescriptor descriptor_from_json(const nlohmann::json& j) {
  ArchitectureDescriptor d;
  d.name = j.at("name").get<std::string>();
  d.input_size = j.at("input_size").get<std::size_t>();
  d.num_classes = j.at("num_classes").get<std::size_t>();
  for (const auto& l : j.at("layers")) {
    const auto type = l.at("type").get<std::string>();
    if (type == "conv") {
      d.layers.push_back(ConvSpec{l.at("in"), l.at("out"), l.at("kernel"), l.at("stride"), l.at("padding")});
    } else if (type == "relu") {
      d.layers.push_back(ReluSpec{});
    } else if (type == "max_pool") {
      d.layers.push_back(MaxPoolSpec{l.at("size")});
    } else if (type == "dense") {
      d.layers.push_back(DenseSpec{l.at("in"), l.at("out")});
    } else {
      throw DescriptorError("unknown layer type '" + type + "'");
    }
  }
  return d;
}

/// CNN-A: 32 px input, two conv blocks.
inline ArchitectureDescriptor cnn_a(std::size_t num_classes = 10) {
  return {"cnn-a", 32,
          {ConvSpec{3, 8, 3, 1, 1}, ReluSpec{}, MaxPoolSpec{2},
           ConvSpec{8, 16, 3, 1, 1}, ReluSpec{}, MaxPoolSpec{2},
           DenseSpec{8 * 8 * 16, num_classes}},
          num_classes};
}

/// CNN-B: 32 px input, three conv blocks and a hidden dense layer.
inline ArchitectureDescriptor cnn_b(std::size_t num_classes = 10) {
  return {"cnn-b", 32,
          {ConvSpec{3, 8, 3, 1, 1}, ReluSpec{}, MaxPoolSpec{2},
           ConvSpec{8, 16, 3, 1, 1}, ReluSpec{}, MaxPoolSpec{2},
           ConvSpec{16, 32, 3, 1, 1}, ReluSpec{}, MaxPoolSpec{2},
           DenseSpec{4 * 4 * 32, 64}, ReluSpec{},
           DenseSpec{64, num_classes}},
          num_classes};
}

/// CNN-C: 48 px input, two conv blocks (the first strided).
inline ArchitectureDescriptor cnn_c(std::size_t num_classes = 10) {
  return {"cnn-c", 48,
          {ConvSpec{3, 12, 5, 2, 2}, ReluSpec{}, MaxPoolSpec{2},
           ConvSpec{12, 16, 3, 1, 1}, ReluSpec{}, MaxPoolSpec{2},
           DenseSpec{6 * 6 * 16, num_classes}},
          num_classes};
}

inline std::vector<std::string> stock_descriptor_names() { return {"cnn-a", "cnn-b", "cnn-c"}; }

inline ArchitectureDescriptor stock_descriptor(const std::string& name, std::size_t num_classes) {
  if (name == "cnn-a") return cnn_a(num_classes);
  if (name == "cnn-b") return cnn_b(num_classes);
  if (name == "cnn-c") return cnn_c(num_classes);
  throw DescriptorError("unknown architecture '" + name + "' (known: cnn-a, cnn-b, cnn-c)");
}

// ---------------------------------------------------------------------------
// Classifier

struct Provenance {
  std::string dataset_id;
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
  std::string config_hash;

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct Classifier {
  std::string id;
  ArchitectureDescriptor descriptor;
  std::vector<Parameter> params;
  Provenance provenance;

  std::size_t input_size() const { return descriptor.input_size; }
  std::size_t num_classes() const { return descriptor.num_classes; }
};

class ModelInputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Seeded He-normal weights (std = sqrt(2 / fan_in)), zero biases.
inline Classifier build_model(const ArchitectureDescriptor& descriptor, std::uint64_t seed) {
  descriptor.validate();
  Classifier model;
  model.id = descriptor.name;
  model.descriptor = descriptor;
  model.provenance.seed = seed;
  Rng rng(mix_seed(seed, 0xC1A55));
  auto he = [&](Shape shape, std::size_t fan_in) {
    Tensor t(std::move(shape));
    const double sd = std::sqrt(2.0 / double(fan_in));
    for (float& v : t.storage()) v = static_cast<float>(sd * rng.normal());
    return t;
  };
  for (std::size_t i = 0; i < descriptor.layers.size(); ++i) {
    const auto& l = descriptor.layers[i];
    const std::string prefix = "layer" + std::to_string(i);
    if (const auto* c = std::get_if<ConvSpec>(&l)) {
      model.params.emplace_back(prefix + ".kernel",
                                he({c->kernel, c->kernel, c->in_channels, c->out_channels},
                                   c->kernel * c->kernel * c->in_channels));
      model.params.emplace_back(prefix + ".bias", Tensor({c->out_channels}));
    } else if (const auto* d = std::get_if<DenseSpec>(&l)) {
      model.params.emplace_back(prefix + ".weight", he({d->out_features, d->in_features}, d->in_features));
      model.params.emplace_back(prefix + ".bias", Tensor({d->out_features}));
    }
  }
  return model;
}

namespace detail {

inline void check_input(const Classifier& model, const Image& img) {
  if (img.height != model.input_size() || img.width != model.input_size()) {
    throw ModelInputError("model '" + model.id + "' expects " + std::to_string(model.input_size()) + "x" +
                          std::to_string(model.input_size()) + " input but got " + to_string(img.shape()) +
                          "; resize the image first (pipeline resize)");
  }
}

/// Shared forward body; `bind` maps a parameter index to a tape variable.
template <typename Bind>
Var forward_impl(const ArchitectureDescriptor& desc, Var x, Bind&& bind) {
  Var h = scale(x, 1.0f / 255.0f);
  std::size_t p = 0;
  for (const auto& l : desc.layers) {
    if (const auto* c = std::get_if<ConvSpec>(&l)) {
      Var k = bind(p++);
      Var b = bind(p++);
      h = conv2d(h, k, b, {c->stride, c->padding});
    } else if (std::holds_alternative<ReluSpec>(l)) {
      h = relu(h);
    } else if (const auto* mp = std::get_if<MaxPoolSpec>(&l)) {
      h = max_pool2d(h, mp->size);
    } else if (std::holds_alternative<DenseSpec>(l)) {
      if (h.shape().size() != 1) h = reshape(h, Shape{h.size()});
      Var w = bind(p++);
      Var b = bind(p++);
      h = affine(h, w, b);
    }
  }
  return h;
}

}  // namespace detail

/// Logits with frozen (untracked) parameters. `x` holds raw [0,255] pixels.
inline Var forward(Tape& tape, const Classifier& model, Var x) {
  return detail::forward_impl(model.descriptor, x,
                              [&](std::size_t i) { return tape.constant(model.params[i].value); });
}

/// Logits with parameters tracked for training.
inline Var forward_trainable(Tape& tape, Classifier& model, Var x) {
  return detail::forward_impl(model.descriptor, x,
                              [&](std::size_t i) { return tape.parameter(model.params[i]); });
}

inline std::vector<float> logits(const Classifier& model, const Image& img) {
  detail::check_input(model, img);
  Tape tape;
  Var out = forward(tape, model, tape.leaf(img.to_tensor()));
  return {out.value().begin(), out.value().end()};
}

inline std::vector<double> predict(const Classifier& model, const Image& img) {
  return softmax_values(logits(model, img));
}

struct LossGradient {
  double loss = 0.0;
  Tensor grad;  // shape of the image, d loss / d pixel in [0,255] units
};

/// Cross-entropy of `label` and its gradient with respect to the raw pixels.
/// The model is read-only.
inline LossGradient loss_and_input_gradient(const Classifier& model, const Image& img,
                                            std::size_t label) {
  detail::check_input(model, img);
  if (label >= model.num_classes()) {
    throw std::out_of_range("label " + std::to_string(label) + " out of range for " +
                            std::to_string(model.num_classes()) + " classes");
  }
  Tape tape;
  Var x = tape.leaf(img.to_tensor(), true);
  Var loss = cross_entropy(forward(tape, model, x), label);
  tape.backward(loss);
  auto g = tape.grad(x);
  return {loss.value()[0], Tensor(img.shape(), std::vector<float>(g.begin(), g.end()))};
}

inline Tensor input_gradient(const Classifier& model, const Image& img, std::size_t label) {
  return loss_and_input_gradient(model, img, label).grad;
}

inline double loss_at(const Classifier& model, const Image& img, std::size_t label) {
  return cross_entropy_value(logits(model, img), label);
}

/// Labels by non-increasing probability, ties by ascending label.
inline std::vector<std::size_t> top_k(std::span<const double> probs, std::size_t k) {
  if (k < 1 || k > probs.size()) {
    throw std::out_of_range("top_k: k=" + std::to_string(k) + " outside [1," +
                            std::to_string(probs.size()) + "]");
  }
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  order.resize(k);
  return order;
}

inline std::size_t argmax(std::span<const double> probs) { return top_k(probs, 1).front(); }

/// Least likely label (ties by ascending label). If that is `y_true`, the
/// second least likely label is returned instead.
inline std::size_t least_likely_class(std::span<const double> probs, std::size_t y_true) {
  if (probs.size() < 2) throw std::invalid_argument("least_likely_class: need at least 2 classes");
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return probs[a] < probs[b]; });
  return order[0] == y_true ? order[1] : order[0];
}

inline std::size_t least_likely_class(const Classifier& model, const Image& img, std::size_t y_true) {
  const auto p = predict(model, img);
  return least_likely_class(p, y_true);
}

// ---------------------------------------------------------------------------
// Training

struct TrainParams {
  double lr = 0.01;
  double momentum = 0.9;
  std::size_t epochs = 15;
  std::size_t batch = 16;
  std::uint64_t seed = 1;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;  // running, during the epoch
  double val_accuracy = 0.0;
};

struct TrainResult {
  Classifier model;
  std::vector<EpochMetrics> metrics;
};

class TrainingError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Top-1 accuracy in percent over the given samples.
inline double accuracy(const Classifier& model, const std::vector<const Sample*>& samples) {
  if (samples.empty()) return 0.0;
  std::size_t hit = 0;
  for (const auto* s : samples) hit += argmax(predict(model, s->image)) == s->label;
  return 100.0 * double(hit) / double(samples.size());
}

/// Minibatch SGD with momentum on cross-entropy. Trains on the train split
/// (all samples when no split is assigned) and reports eval-split accuracy.
inline TrainResult train(Classifier model, const Dataset& data, const TrainParams& hp) {
  auto train_set = data.select(Split::kTrain);
  if (train_set.empty()) {
    for (const auto& s : data.samples) train_set.push_back(&s);
  }
  auto val_set = data.select(Split::kEval);
  if (train_set.empty()) throw TrainingError("train: empty dataset");
  if (hp.batch == 0) throw TrainingError("train: batch size must be positive");
  for (const auto& s : data.samples) {
    if (s.label >= model.num_classes()) {
      throw TrainingError("train: label " + std::to_string(s.label) + " overflows " +
                          std::to_string(model.num_classes()) + " classes");
    }
    detail::check_input(model, s.image);
  }

  std::vector<std::vector<float>> velocity;
  for (const auto& p : model.params) velocity.emplace_back(p.value.size(), 0.0f);

  TrainResult result;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < hp.epochs; ++epoch) {
    Rng rng(mix_seed(hp.seed, epoch));
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += hp.batch) {
      const std::size_t end = std::min(order.size(), start + hp.batch);
      for (auto& p : model.params) p.zero_grad();
      for (std::size_t i = start; i < end; ++i) {
        const Sample& s = *train_set[order[i]];
        Tape tape;
        Var out = forward_trainable(tape, model, tape.leaf(s.image.to_tensor()));
        Var loss = cross_entropy(out, s.label);
        loss_sum += loss.value()[0];
        const auto probs = softmax_values(out.value());
        correct += argmax(probs) == s.label;
        tape.backward(loss);
      }
      const double inv = 1.0 / double(end - start);
      for (std::size_t p = 0; p < model.params.size(); ++p) {
        auto& value = model.params[p].value.storage();
        const auto& grad = model.params[p].grad.storage();
        auto& v = velocity[p];
        for (std::size_t j = 0; j < value.size(); ++j) {
          v[j] = static_cast<float>(hp.momentum * v[j] - hp.lr * grad[j] * inv);
          value[j] += v[j];
        }
      }
    }
    EpochMetrics m;
    m.epoch = epoch + 1;
    m.train_loss = loss_sum / double(order.size());
    m.train_accuracy = 100.0 * double(correct) / double(order.size());
    m.val_accuracy = val_set.empty() ? m.train_accuracy : accuracy(model, val_set);
    result.metrics.push_back(m);
  }
  for (auto& p : model.params) p.zero_grad();
  model.provenance.dataset_id = data.provenance;
  model.provenance.seed = hp.seed;
  model.provenance.epochs = hp.epochs;
  model.provenance.train_accuracy = accuracy(model, train_set);
  model.provenance.val_accuracy = val_set.empty() ? model.provenance.train_accuracy : accuracy(model, val_set);
  result.model = std::move(model);
  return result;
}

}  // namespace cloakbench
