#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "cloakbench/pipeline.hpp"
#include "fixtures.hpp"

using namespace cloakbench;

namespace {

Image checkerboard(std::size_t side, std::size_t cell) {
  Image img(side, side);
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = ((y / cell + x / cell) % 2) ? 255.0f : 0.0f;
  return img;
}

Image textured(std::size_t side, std::uint64_t seed) {
  return synth_dataset(2, 1, side, seed).samples[0].image;
}

}  // namespace

TEST(Quantize, RoundsHalfAwayAndClamps) {
  Image img(1, 2);
  img.pixels = {100.5f, 100.49f, -3.0f, 255.6f, 0.5f, 254.5f};
  const auto q = quantize_u8(img);
  EXPECT_EQ(q.pixels, (std::vector<float>{101, 100, 0, 255, 1, 255}));
  EXPECT_EQ(quantize_u8(q), q);
}

TEST(Resize, CheckerboardCenterIsTheAverage) {
  const auto out = resize(checkerboard(2, 1), 3);
  ASSERT_EQ(out.shape(), (Shape{3, 3, 3}));
  EXPECT_FLOAT_EQ(out.at(1, 1, 0), 127.5f);
  EXPECT_FLOAT_EQ(out.at(0, 0, 0), 0.0f);
  EXPECT_FLOAT_EQ(out.at(0, 2, 0), 255.0f);
  // Edge midpoint mixes the two top pixels only.
  EXPECT_FLOAT_EQ(out.at(0, 1, 1), 127.5f);
}

TEST(Resize, ConstantStaysConstantAndSameSizeIsIdentity) {
  for (std::size_t side : {7u, 32u, 48u, 61u}) {
    const auto out = resize(Image(32, 32, 91.0f), side);
    for (float v : out.pixels) EXPECT_FLOAT_EQ(v, 91.0f);
  }
  const auto img = textured(32, 3);
  EXPECT_EQ(resize(img, 32), img);
  EXPECT_THROW(resize(img, 0), ShapeError);
  EXPECT_THROW(resize(Image(4, 6), 4), ShapeError);
}

TEST(Resize, StaysInRangeAndBetweenNeighbours) {
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    Image img(5, 5);
    for (float& v : img.pixels) v = static_cast<float>(rng.uniform(0, 255));
    const auto out = resize(img, 3 + rng.below(20));
    const auto [lo, hi] = std::minmax_element(img.pixels.begin(), img.pixels.end());
    for (float v : out.pixels) {
      EXPECT_GE(v, *lo);
      EXPECT_LE(v, *hi);
    }
  }
}

TEST(CenterCrop, TakesTheMiddle) {
  Image img(2, 4);
  for (std::size_t x = 0; x < 4; ++x)
    for (std::size_t y = 0; y < 2; ++y) img.at(y, x, 0) = float(x);
  const auto out = center_crop_square(img);
  ASSERT_EQ(out.shape(), (Shape{2, 2, 3}));
  EXPECT_EQ(out.at(0, 0, 0), 1.0f);
  EXPECT_EQ(out.at(1, 1, 0), 2.0f);
}

TEST(Jpeg, FlatImageAtFullQualityIsNearlyExact) {
  for (float v : {0.0f, 17.0f, 128.0f, 200.0f, 255.0f}) {
    const Image img(32, 32, v);
    EXPECT_LE(max_abs_diff(jpeg_roundtrip(img, 100), img), 2.0) << v;
  }
}

TEST(Jpeg, DimensionsNeverChange) {
  for (auto [h, w] : std::vector<std::pair<std::size_t, std::size_t>>{{1, 1}, {7, 13}, {32, 32}, {48, 48}, {33, 17}}) {
    Image img(h, w);
    Rng rng(h * 100 + w);
    for (float& v : img.pixels) v = static_cast<float>(rng.below(256));
    for (int q : {1, 50, 95, 100}) {
      const auto out = jpeg_roundtrip(img, q);
      EXPECT_EQ(out.height, h);
      EXPECT_EQ(out.width, w);
    }
  }
}

TEST(Jpeg, LowerQualityDistortsMore) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto img = textured(48, seed);
    double prev = 0;
    for (int q : {95, 75, 50, 25}) {
      const double mad = mean_abs_diff(jpeg_roundtrip(img, q), quantize_u8(img));
      EXPECT_GE(mad, prev) << "q=" << q;
      prev = mad;
    }
  }
}

TEST(Jpeg, RejectsInvalidQuality) {
  EXPECT_THROW(jpeg_roundtrip(Image(8, 8), 0), std::invalid_argument);
  EXPECT_THROW(jpeg_roundtrip(Image(8, 8), 101), std::invalid_argument);
}

TEST(Png, RoundTripIsLossless) {
  const auto img = quantize_u8(textured(20, 9));
  EXPECT_EQ(decode_png(encode_png(img)), img);
}

TEST(Synth, DeterministicAndBalanced) {
  const auto a = synth_dataset(4, 5, 24, 12), b = synth_dataset(4, 5, 24, 12);
  EXPECT_EQ(a, b);
  EXPECT_NE(synth_dataset(4, 5, 24, 13).samples[0].image, a.samples[0].image);
  ASSERT_EQ(a.samples.size(), 20u);
  std::vector<std::size_t> count(4);
  for (const auto& s : a.samples) {
    ++count[s.label];
    EXPECT_EQ(s.image.shape(), (Shape{24, 24, 3}));
    for (float v : s.image.pixels) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 255.0f);
    }
  }
  EXPECT_EQ(count, (std::vector<std::size_t>(4, 5)));
  EXPECT_THROW(synth_dataset(1, 5, 24, 1), DatasetError);
  EXPECT_THROW(synth_dataset(3, 0, 24, 1), DatasetError);
}

TEST(Split, SingleImageClassIsAnError) {
  EXPECT_THROW(split(synth_dataset(3, 1, 16, 1), 0.8, 1), DatasetError);
  EXPECT_THROW(split(synth_dataset(3, 4, 16, 1), 1.0, 1), DatasetError);
}

TEST(Split, StratifiedDisjointAndSeeded) {
  Rng rng(17);
  for (int t = 0; t < 30; ++t) {
    const std::size_t classes = 2 + rng.below(5), per = 2 + rng.below(12);
    const double frac = rng.uniform(0.05, 0.95);
    const auto ds = split(synth_dataset(classes, per, 8, t), frac, t);
    EXPECT_EQ(ds, split(synth_dataset(classes, per, 8, t), frac, t));
    std::vector<std::size_t> train(classes), eval(classes);
    for (const auto& s : ds.samples) {
      ASSERT_NE(s.split, Split::kUnassigned);
      (s.split == Split::kTrain ? train : eval)[s.label]++;
    }
    for (std::size_t c = 0; c < classes; ++c) {
      EXPECT_EQ(train[c] + eval[c], per);
      EXPECT_GE(train[c], 1u);
      EXPECT_GE(eval[c], 1u);
      EXPECT_LE(std::abs(double(train[c]) - frac * per), 1.0);
    }
  }
}

TEST(Ingest, SortedLabelsAndWarnings) {
  const auto dir = fixture::scratch("ingest");
  auto ds = synth_dataset(3, 2, 16, 5);
  ds.identities = {"zoe", "adam", "mia"};
  export_directory(ds, dir);
  std::ofstream(dir / "mia" / "broken.png") << "not a png";
  std::ofstream(dir / "adam" / "notes.txt") << "ignored";

  const auto in = ingest_directory(dir);
  EXPECT_EQ(in.identities, (std::vector<std::string>{"adam", "mia", "zoe"}));
  ASSERT_EQ(in.samples.size(), 6u);
  ASSERT_EQ(in.warnings.size(), 1u);
  EXPECT_NE(in.warnings[0].find("broken.png"), std::string::npos);
  // "zoe" was label 0 on export and becomes label 2.
  EXPECT_EQ(in.samples[4].label, 2u);
  EXPECT_EQ(in.samples[4].image, quantize_u8(ds.samples[0].image));
  EXPECT_EQ(ingest_directory(dir), in);
}

TEST(Ingest, EmptyOrMissingDirectory) {
  const auto dir = fixture::scratch("ingest-empty");
  EXPECT_THROW(ingest_directory(dir), DatasetError);
  EXPECT_THROW(ingest_directory(dir / "missing"), DatasetError);
}

TEST(Detector, GateAndChain) {
  const Image flat(16, 16, 50.0f);
  const auto det = contrast_detector(5.0);
  EXPECT_FALSE(detect_gate(flat, det).detected);
  EXPECT_TRUE(detect_gate(checkerboard(16, 2), det).detected);
  EXPECT_TRUE(detect_gate(flat, {}).detected);
  const Detector throws = [](const Image&) -> Detection { throw std::runtime_error("boom"); };
  const auto d = detect_gate(flat, throws);
  EXPECT_FALSE(d.detected);
  EXPECT_NE(d.reason.find("boom"), std::string::npos);
  EXPECT_FALSE(storage_chain(std::nullopt, 16, 16, det).apply(flat).detection.detected);
}

TEST(Chain, EmptyChainIsIdentity) {
  const auto img = textured(16, 2);
  const auto out = TransformChain{}.apply(img);
  EXPECT_EQ(out.image, img);
  EXPECT_TRUE(out.detection.detected);
  EXPECT_EQ(out.storage_delta, 0.0);
}

TEST(Chain, StorageThenResize) {
  const auto img = textured(32, 4);
  const auto chain = storage_chain(90, 32, 48);
  ASSERT_EQ(chain.steps().size(), 4u);
  const auto out = chain.apply(img);
  EXPECT_EQ(out.image.height, 48u);
  const auto stored = jpeg_roundtrip(quantize_u8(img), 90);
  EXPECT_EQ(out.image, resize(stored, 48));
  EXPECT_DOUBLE_EQ(out.storage_delta, max_abs_diff(stored, img));
  // Same size: no resize step.
  EXPECT_EQ(storage_chain(std::nullopt, 32, 32).steps().size(), 2u);
  EXPECT_EQ(storage_chain(std::nullopt, 32, 32).apply(img).image, quantize_u8(img));
}
