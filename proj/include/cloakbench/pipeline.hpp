#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "cloakbench/image.hpp"
#include "cloakbench/rng.hpp"

namespace cloakbench {

enum class Split { kUnassigned, kTrain, kEval };

struct Sample {
  Image image;
  std::size_t label = 0;
  Split split = Split::kUnassigned;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct Dataset {
  std::vector<std::string> identities;  // label -> name
  std::vector<Sample> samples;
  std::string provenance;
  std::vector<std::string> warnings;

  std::size_t num_classes() const { return identities.size(); }

  std::vector<const Sample*> select(Split s) const {
    std::vector<const Sample*> out;
    for (const auto& x : samples)
      if (x.split == s) out.push_back(&x);
    return out;
  }
};

inline bool operator==(const Dataset& a, const Dataset& b) {
  return a.identities == b.identities && a.samples == b.samples &&
         a.provenance == b.provenance;
}

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Storage and geometry transforms

/// Round half away from zero, clamp to [0,255].
inline Image quantize_u8(const Image& img) {
  Image out = img;
  for (float& v : out.pixels) v = static_cast<float>(to_u8(v));
  return out;
}

inline Image jpeg_roundtrip(const Image& img, int quality) {
  return decode_jpeg(encode_jpeg(img, quality));
}

/// Bilinear resampling with half-pixel centers (align_corners = false),
/// edge-clamped, output clamped to [0,255].
inline Image resize(const Image& img, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0 || img.empty()) {
    throw ShapeError("resize: degenerate size " + std::to_string(out_h) + "x" +
                     std::to_string(out_w) + " from " + to_string(img.shape()));
  }
  if (out_h == img.height && out_w == img.width) return img;
  Image out(out_h, out_w);
  const double sy = double(img.height) / double(out_h);
  const double sx = double(img.width) / double(out_w);
  auto coord = [](std::size_t dst, double scale, std::size_t n, std::size_t& i0,
                  std::size_t& i1, double& frac) {
    double src = (double(dst) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, double(n - 1));
    i0 = static_cast<std::size_t>(std::floor(src));
    i1 = std::min(i0 + 1, n - 1);
    frac = src - double(i0);
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    std::size_t y0, y1;
    double fy;
    coord(y, sy, img.height, y0, y1, fy);
    for (std::size_t x = 0; x < out_w; ++x) {
      std::size_t x0, x1;
      double fx;
      coord(x, sx, img.width, x0, x1, fx);
      for (std::size_t c = 0; c < Image::channels; ++c) {
        const double top = img.at(y0, x0, c) * (1.0 - fx) + img.at(y0, x1, c) * fx;
        const double bot = img.at(y1, x0, c) * (1.0 - fx) + img.at(y1, x1, c) * fx;
        out.at(y, x, c) = static_cast<float>(std::clamp(top * (1.0 - fy) + bot * fy, 0.0, 255.0));
      }
    }
  }
  return out;
}

/// Square resize. Inputs must be square; use center_crop_square first.
inline Image resize(const Image& img, std::size_t side) {
  if (!img.is_square()) {
    throw ShapeError("resize: expected a square image, got " + to_string(img.shape()));
  }
  return resize(img, side, side);
}

inline Image center_crop_square(const Image& img) {
  const std::size_t side = std::min(img.height, img.width);
  const std::size_t oy = (img.height - side) / 2, ox = (img.width - side) / 2;
  Image out(side, side);
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x)
      for (std::size_t c = 0; c < Image::channels; ++c) out.at(y, x, c) = img.at(y + oy, x + ox, c);
  return out;
}

// ---------------------------------------------------------------------------
// Detection gate

struct Detection {
  bool detected = true;
  std::string reason;
};

using Detector = std::function<Detection(const Image&)>;

inline Detector pass_through_detector() {
  return [](const Image&) { return Detection{true, {}}; };
}

/// Rejects images whose pixel standard deviation falls below `min_stddev`.
inline Detector contrast_detector(double min_stddev) {
  return [min_stddev](const Image& img) {
    double mean = 0.0;
    for (float v : img.pixels) mean += v;
    mean /= double(std::max<std::size_t>(img.size(), 1));
    double var = 0.0;
    for (float v : img.pixels) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / double(std::max<std::size_t>(img.size(), 1)));
    if (sd < min_stddev) return Detection{false, "contrast " + std::to_string(sd) + " below threshold"};
    return Detection{true, {}};
  };
}

inline Detection detect_gate(const Image& img, const Detector& detector) {
  if (!detector) return Detection{true, {}};
  try {
    return detector(img);
  } catch (const std::exception& e) {
    return Detection{false, std::string("detector error: ") + e.what()};
  }
}

// ---------------------------------------------------------------------------
// Transform chain

struct QuantizeU8 {};
struct JpegRoundtrip {
  int quality = 90;
};
struct Resize {
  std::size_t side = 0;
};
struct DetectGate {
  Detector detector;
};

using Transform = std::variant<QuantizeU8, JpegRoundtrip, Resize, DetectGate>;

struct ChainOutput {
  Image image;
  Detection detection;
  /// max|stored - input| over the storage transforms (quantize, JPEG) that
  /// run before the first resize.
  double storage_delta = 0.0;
};

class TransformChain {
 public:
  TransformChain() = default;
  explicit TransformChain(std::vector<Transform> steps) : steps_(std::move(steps)) {}

  TransformChain& then(Transform t) {
    steps_.push_back(std::move(t));
    return *this;
  }

  const std::vector<Transform>& steps() const { return steps_; }
  bool empty() const { return steps_.empty(); }

  ChainOutput apply(const Image& input) const {
    ChainOutput out{input, {true, {}}, 0.0};
    bool storage_open = true;
    for (const auto& step : steps_) {
      if (const auto* j = std::get_if<JpegRoundtrip>(&step)) {
        out.image = jpeg_roundtrip(out.image, j->quality);
      } else if (std::holds_alternative<QuantizeU8>(step)) {
        out.image = quantize_u8(out.image);
      } else if (const auto* r = std::get_if<Resize>(&step)) {
        if (storage_open) out.storage_delta = max_abs_diff(out.image, input);
        storage_open = false;
        out.image = resize(out.image, r->side);
        continue;
      } else if (const auto* g = std::get_if<DetectGate>(&step)) {
        out.detection = detect_gate(out.image, g->detector);
        if (!out.detection.detected) break;
        continue;
      }
    }
    if (storage_open) out.storage_delta = max_abs_diff(out.image, input);
    return out;
  }

 private:
  std::vector<Transform> steps_;
};

/// Storage then classification path for a crafted example:
/// quantize -> JPEG (optional) -> resize iff sizes differ -> detection gate.
inline TransformChain storage_chain(std::optional<int> jpeg_quality, std::size_t source_side,
                                    std::size_t target_side, Detector detector = {}) {
  TransformChain chain;
  chain.then(QuantizeU8{});
  if (jpeg_quality) chain.then(JpegRoundtrip{*jpeg_quality});
  if (source_side != target_side) chain.then(Resize{target_side});
  chain.then(DetectGate{detector ? std::move(detector) : pass_through_detector()});
  return chain;
}

// ---------------------------------------------------------------------------
// Datasets

namespace detail {

struct Blob {
  bool disc;
  double cx, cy, half;  // unit coordinates
  double rgb[3];
};

struct Wave {
  double fx, fy, phase, amp[3];
};

struct ClassPattern {
  double base[3];
  std::vector<Wave> waves;
  std::vector<Blob> blobs;
};

inline ClassPattern make_pattern(std::uint64_t seed, std::size_t label) {
  Rng rng(mix_seed(seed, 1000 + label));
  ClassPattern p;
  for (double& b : p.base) b = 128.0;
  for (int i = 0; i < 3; ++i) {
    Wave w;
    w.fx = double(1 + rng.below(3));
    w.fy = double(rng.below(3));
    w.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (double& a : w.amp) a = rng.uniform(-20.0, 20.0);
    p.waves.push_back(w);
  }
  for (int i = 0; i < 3; ++i) {
    Blob b;
    b.disc = rng.below(2) == 1;
    b.cx = rng.uniform(0.2, 0.8);
    b.cy = rng.uniform(0.2, 0.8);
    b.half = rng.uniform(0.08, 0.16);
    for (double& c : b.rgb) c = rng.uniform(-45.0, 45.0);
    p.blobs.push_back(b);
  }
  return p;
}

inline Image render(const ClassPattern& p, std::size_t side, Rng& rng) {
  const double brightness = rng.uniform(-15.0, 15.0);
  const double dx = double(static_cast<int>(rng.below(5)) - 2);
  const double dy = double(static_cast<int>(rng.below(5)) - 2);
  Image img(side, side);
  const double n = double(side);
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      const double u = (double(x) + 0.5 - dx) / n;
      const double v = (double(y) + 0.5 - dy) / n;
      double rgb[3] = {p.base[0], p.base[1], p.base[2]};
      for (const auto& w : p.waves) {
        const double s = std::sin(2.0 * std::numbers::pi * (w.fx * u + w.fy * v) + w.phase);
        for (int c = 0; c < 3; ++c) rgb[c] += w.amp[c] * s;
      }
      for (const auto& b : p.blobs) {
        const double ox = u - b.cx, oy = v - b.cy;
        const bool inside = b.disc ? (ox * ox + oy * oy <= b.half * b.half)
                                   : (std::abs(ox) <= b.half && std::abs(oy) <= b.half);
        if (inside)
          for (int c = 0; c < 3; ++c) rgb[c] += b.rgb[c];
      }
      for (std::size_t c = 0; c < 3; ++c) {
        const double val = rgb[c] + brightness + 8.0 * rng.normal();
        img.at(y, x, c) = static_cast<float>(to_u8(static_cast<float>(val)));
      }
    }
  }
  return img;
}

}  // namespace detail

/// Procedural identities: each class is a seeded low-frequency texture plus
/// a class-specific layout of discs and squares; each image adds brightness
/// jitter, a translation of at most 2 px and Gaussian noise (sigma 8).
inline Dataset synth_dataset(std::size_t num_classes, std::size_t per_class,
                             std::size_t image_size, std::uint64_t seed) {
  if (num_classes < 2) throw DatasetError("synth_dataset: need at least 2 classes");
  if (per_class == 0) throw DatasetError("synth_dataset: per_class must be positive");
  if (image_size < 4) throw DatasetError("synth_dataset: image size must be at least 4");
  Dataset ds;
  ds.provenance = "synth:classes=" + std::to_string(num_classes) +
                  ",per_class=" + std::to_string(per_class) +
                  ",size=" + std::to_string(image_size) + ",seed=" + std::to_string(seed);
  for (std::size_t c = 0; c < num_classes; ++c) {
    char name[32];
    std::snprintf(name, sizeof(name), "id%03zu", c);
    ds.identities.emplace_back(name);
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    const auto pattern = detail::make_pattern(seed, c);
    for (std::size_t i = 0; i < per_class; ++i) {
      Rng rng(mix_seed(mix_seed(seed, c), i));
      ds.samples.push_back(Sample{detail::render(pattern, image_size, rng), c, Split::kUnassigned});
    }
  }
  return ds;
}

/// Stratified split: per class, a seeded shuffle sends round(fraction * n)
/// images to train and the rest to eval. Sample order is preserved.
inline Dataset split(Dataset ds, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw DatasetError("split: train fraction must be in (0,1)");
  }
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes());
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto label = ds.samples[i].label;
    if (label >= by_class.size()) throw DatasetError("split: label out of range");
    by_class[label].push_back(i);
  }
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& idx = by_class[c];
    if (idx.size() < 2) {
      throw DatasetError("split: class '" + ds.identities[c] + "' has " +
                         std::to_string(idx.size()) +
                         " image(s); each split needs at least one");
    }
    Rng rng(mix_seed(seed, 7000 + c));
    rng.shuffle(idx);
    auto n_train = static_cast<std::size_t>(std::llround(train_fraction * double(idx.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, idx.size() - 1);
    for (std::size_t j = 0; j < idx.size(); ++j)
      ds.samples[idx[j]].split = j < n_train ? Split::kTrain : Split::kEval;
  }
  return ds;
}

/// Loads <root>/<identity>/<image>.png. Labels follow sorted directory
/// names; unreadable files are skipped and listed in `warnings`.
inline Dataset ingest_directory(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw DatasetError("ingest: not a directory: " + root.string());
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw DatasetError("ingest: no identity directories under " + root.string());
  Dataset ds;
  ds.provenance = "dir:" + root.string();
  for (std::size_t label = 0; label < dirs.size(); ++label) {
    ds.identities.push_back(dirs[label].filename().string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dirs[label]))
      if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      try {
        ds.samples.push_back(Sample{read_png(f), label, Split::kUnassigned});
      } catch (const std::exception& e) {
        ds.warnings.push_back("skipped " + f.string() + ": " + e.what());
      }
    }
  }
  return ds;
}

/// Writes a dataset in the layout ingest_directory reads.
inline void export_directory(const Dataset& ds, const std::filesystem::path& root) {
  std::vector<std::size_t> counter(ds.num_classes(), 0);
  for (const auto& s : ds.samples) {
    char name[32];
    std::snprintf(name, sizeof(name), "%05zu.png", counter[s.label]++);
    write_png(root / ds.identities[s.label] / name, s.image);
  }
}

/// Images center-cropped and resized to a model's input side.
inline Dataset resized_for(const Dataset& ds, std::size_t side) {
  Dataset out = ds;
  for (auto& s : out.samples) {
    if (!s.image.is_square()) s.image = center_crop_square(s.image);
    s.image = resize(s.image, side);
  }
  return out;
}

}  // namespace cloakbench
