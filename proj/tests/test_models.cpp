#include <gtest/gtest.h>

#include <map>

#include "cloakbench/checkpoint.hpp"
#include "cloakbench/models.hpp"
#include "cloakbench/pipeline.hpp"
#include "fixtures.hpp"

using namespace cloakbench;

TEST(BuildModel, DeterministicPerSeed) {
  const auto a = build_model(cnn_b(10), 42), b = build_model(cnn_b(10), 42), c = build_model(cnn_b(10), 43);
  ASSERT_EQ(a.params.size(), b.params.size());
  for (std::size_t i = 0; i < a.params.size(); ++i) EXPECT_EQ(a.params[i].value, b.params[i].value);
  EXPECT_NE(a.params[0].value, c.params[0].value);
}

TEST(BuildModel, StockArchitecturesChain) {
  for (const auto& name : stock_descriptor_names()) {
    const auto d = stock_descriptor(name, 10);
    EXPECT_EQ(d.validate().back(), (Shape{10})) << name;
  }
  EXPECT_EQ(cnn_c(10).input_size, 48u);
  EXPECT_EQ(cnn_a(10).input_size, 32u);
  EXPECT_THROW(stock_descriptor("resnet", 10), DescriptorError);
}

TEST(BuildModel, WrongFlattenSizeNamesLayer) {
  auto d = cnn_a(10);
  std::get<DenseSpec>(d.layers.back()).in_features = 1000;
  try {
    build_model(d, 1);
    FAIL() << "expected DescriptorError";
  } catch (const DescriptorError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("layer 6 (dense)"), std::string::npos) << msg;
    EXPECT_NE(msg.find("1024"), std::string::npos) << msg;
  }
}

TEST(BuildModel, DescriptorJsonRoundTrip) {
  for (const auto& name : stock_descriptor_names()) {
    const auto d = stock_descriptor(name, 7);
    EXPECT_EQ(descriptor_from_json(to_json(d)), d);
  }
}

TEST(Predict, ZeroModelIsUniform) {
  auto model = build_model(cnn_c(5), 1);
  for (auto& p : model.params) std::fill(p.value.storage().begin(), p.value.storage().end(), 0.0f);
  for (double p : predict(model, Image(48, 48, 30.0f))) EXPECT_DOUBLE_EQ(p, 0.2);
}

TEST(Predict, SumsToOne) {
  const auto model = build_model(cnn_b(10), 3);
  Rng rng(4);
  for (int t = 0; t < 10; ++t) {
    Image img(32, 32);
    for (float& v : img.pixels) v = static_cast<float>(rng.uniform(0, 255));
    const auto p = predict(model, img);
    ASSERT_EQ(p.size(), 10u);
    double s = 0;
    for (double v : p) s += v;
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Predict, WrongSizeAsksForResize) {
  const auto model = build_model(cnn_c(10), 3);
  try {
    predict(model, Image(32, 32));
    FAIL();
  } catch (const ModelInputError& e) {
    EXPECT_NE(std::string(e.what()).find("resize"), std::string::npos);
  }
}

TEST(TopK, Examples) {
  EXPECT_EQ(top_k(std::vector<double>{0.1, 0.7, 0.2}, 2), (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(top_k(std::vector<double>{0.25, 0.25, 0.25, 0.25}, 3), (std::vector<std::size_t>{0, 1, 2}));
  auto all = top_k(std::vector<double>{0.3, 0.1, 0.4, 0.2}, 4);
  std::sort(all.begin(), all.end());
  EXPECT_EQ(all, (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_THROW(top_k(std::vector<double>{0.5, 0.5}, 0), std::out_of_range);
  EXPECT_THROW(top_k(std::vector<double>{0.5, 0.5}, 3), std::out_of_range);
}

TEST(TopK, PrefixAndOrderProperty) {
  Rng rng(8);
  for (int t = 0; t < 300; ++t) {
    std::vector<double> p(2 + rng.below(12));
    // Coarse values force frequent ties.
    for (double& v : p) v = double(rng.below(4)) / 4.0;
    const auto full = top_k(p, p.size());
    for (std::size_t k = 1; k <= p.size(); ++k) {
      const auto part = top_k(p, k);
      ASSERT_TRUE(std::equal(part.begin(), part.end(), full.begin()));
    }
    for (std::size_t i = 1; i < full.size(); ++i) {
      ASSERT_GE(p[full[i - 1]], p[full[i]]);
      if (p[full[i - 1]] == p[full[i]]) ASSERT_LT(full[i - 1], full[i]);
    }
  }
}

TEST(LeastLikely, Examples) {
  EXPECT_EQ(least_likely_class(std::vector<double>{0.5, 0.3, 0.2}, 0), 2u);
  EXPECT_EQ(least_likely_class(std::vector<double>{0.25, 0.25, 0.25, 0.25}, 0), 1u);
  EXPECT_EQ(least_likely_class(std::vector<double>{0.5, 0.3, 0.2}, 2), 1u);
}

TEST(LeastLikely, TwoClassesPicksTheOtherClass) {
  EXPECT_EQ(least_likely_class(std::vector<double>{0.9, 0.1}, 0), 1u);
  EXPECT_EQ(least_likely_class(std::vector<double>{0.9, 0.1}, 1), 0u);
}

TEST(LeastLikely, NeverTheArgmaxForThreeOrMoreClasses) {
  Rng rng(5);
  for (int t = 0; t < 500; ++t) {
    std::vector<double> p(3 + rng.below(10));
    for (double& v : p) v = double(rng.below(5));
    if (std::all_of(p.begin(), p.end(), [&](double v) { return v == p[0]; })) continue;
    const std::size_t y = rng.below(p.size());
    // Excluded: y alone at the minimum with every other class tied (see
    // DegenerateTieReachesTheMaximum).
    std::vector<double> others;
    for (std::size_t i = 0; i < p.size(); ++i)
      if (i != y) others.push_back(p[i]);
    if (std::all_of(others.begin(), others.end(), [&](double v) { return v == others[0] && v > p[y]; })) continue;
    const auto llc = least_likely_class(p, y);
    EXPECT_NE(llc, y);
    EXPECT_LT(p[llc], *std::max_element(p.begin(), p.end()));
  }
}

TEST(LeastLikely, DegenerateTieReachesTheMaximum) {
  // The true label is the unique minimum and the rest tie: the second least
  // likely class is also a most likely one.
  EXPECT_EQ(least_likely_class(std::vector<double>{0.1, 0.45, 0.45}, 0), 1u);
}

TEST(Train, ZeroLearningRateKeepsParameters) {
  const auto ds = split(synth_dataset(3, 6, 32, 1), 0.5, 2);
  const auto model = build_model(cnn_a(3), 9);
  const auto out = train(model, ds, {0.0, 0.9, 2, 4, 1});
  for (std::size_t i = 0; i < model.params.size(); ++i) EXPECT_EQ(out.model.params[i].value, model.params[i].value);
  EXPECT_DOUBLE_EQ(accuracy(out.model, ds.select(Split::kTrain)), accuracy(model, ds.select(Split::kTrain)));
}

TEST(Train, SingleClassIsPerfect) {
  Dataset ds;
  ds.identities = {"only"};
  for (int i = 0; i < 4; ++i) ds.samples.push_back({Image(32, 32, float(40 * i)), 0, Split::kTrain});
  ArchitectureDescriptor d = cnn_a(1);
  const auto out = train(build_model(d, 1), ds, {0.01, 0.9, 1, 2, 1});
  EXPECT_DOUBLE_EQ(out.model.provenance.train_accuracy, 100.0);
}

TEST(Train, RejectsBadInput) {
  Dataset empty;
  empty.identities = {"a", "b"};
  EXPECT_THROW(train(build_model(cnn_a(2), 1), empty, {}), TrainingError);
  Dataset overflow;
  overflow.identities = {"a", "b"};
  overflow.samples.push_back({Image(32, 32), 5, Split::kTrain});
  EXPECT_THROW(train(build_model(cnn_a(2), 1), overflow, {}), TrainingError);
  Dataset wrong_size;
  wrong_size.identities = {"a", "b"};
  wrong_size.samples.push_back({Image(16, 16), 0, Split::kTrain});
  EXPECT_THROW(train(build_model(cnn_a(2), 1), wrong_size, {}), ModelInputError);
}

TEST(Train, DeterministicCheckpointBytes) {
  const auto ds = split(synth_dataset(4, 8, 32, 3), 0.5, 2);
  const auto a = train(build_model(cnn_a(4), 1), ds, {0.01, 0.9, 2, 4, 77});
  const auto b = train(build_model(cnn_a(4), 1), ds, {0.01, 0.9, 2, 4, 77});
  EXPECT_EQ(serialize_checkpoint(a.model), serialize_checkpoint(b.model));
  ASSERT_EQ(a.metrics.size(), 2u);
  EXPECT_EQ(a.metrics.back().train_loss, b.metrics.back().train_loss);
}

TEST(Train, TenClassSyntheticReachesValidationTarget) {
  // 10 identities x 64 images, 15 epochs; the reference build reaches 100%.
  const auto ds = split(synth_dataset(10, 64, 32, 5), 0.8, 6);
  const auto out = train(build_model(cnn_a(10), 10), ds, {0.01, 0.9, 15, 16, 20});
  EXPECT_GE(out.model.provenance.val_accuracy, 97.0);
  EXPECT_GE(out.model.provenance.train_accuracy, 95.0);
  ASSERT_EQ(out.metrics.size(), 15u);
  // Trained model: least likely class is never the true label on eval images.
  for (const auto* s : ds.select(Split::kEval)) EXPECT_NE(least_likely_class(out.model, s->image, s->label), s->label);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto& model = fixture::trained("cnn-a");
  const auto dir = fixture::scratch("ckpt");
  save_checkpoint(model, dir / "m.clkb");
  const auto loaded = load_checkpoint(dir / "m.clkb");
  EXPECT_EQ(loaded.id, model.id);
  EXPECT_EQ(loaded.descriptor, model.descriptor);
  EXPECT_EQ(loaded.provenance, model.provenance);
  for (const auto& s : fixture::eval_samples(32, 10)) EXPECT_EQ(predict(loaded, s.image), predict(model, s.image));
}

TEST(Checkpoint, CorruptedByteFailsChecksum) {
  auto bytes = serialize_checkpoint(build_model(cnn_a(3), 1));
  bytes[bytes.size() / 2] ^= 0x40;
  EXPECT_THROW(deserialize_checkpoint(bytes), CheckpointChecksumError);
}

TEST(Checkpoint, WrongVersionIsExplicit) {
  auto bytes = serialize_checkpoint(build_model(cnn_a(3), 1));
  bytes[4] = 9;
  try {
    deserialize_checkpoint(bytes);
    FAIL();
  } catch (const CheckpointVersionError& e) {
    EXPECT_NE(std::string(e.what()).find("version 9"), std::string::npos);
  }
}

TEST(Checkpoint, TruncatedFile) {
  auto bytes = serialize_checkpoint(build_model(cnn_a(3), 1));
  bytes.resize(bytes.size() - 100);
  EXPECT_THROW(deserialize_checkpoint(bytes), CheckpointTruncatedError);
  bytes.resize(10);
  EXPECT_THROW(deserialize_checkpoint(bytes), CheckpointTruncatedError);
}

TEST(Checkpoint, BadMagic) {
  auto bytes = serialize_checkpoint(build_model(cnn_a(3), 1));
  bytes[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bytes), CheckpointError);
}
