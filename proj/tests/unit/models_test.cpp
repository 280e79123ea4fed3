#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include <gtest/gtest.h>

#include "advkit/dataset.hpp"
#include "advkit/errors.hpp"
#include "advkit/models.hpp"
#include "helpers.hpp"

using namespace advkit;
using advkit::testing::random_tensor;

namespace {

ModelSpec small_cnn() {
  return {"small",
          {LayerSpec::conv2d(1, 2, 3), LayerSpec::relu(), LayerSpec::maxpool2(), LayerSpec::flatten(),
           LayerSpec::dense(2 * 3 * 3, 3)},
          {1, 8, 8},
          3};
}

// Class 0 is brighter on the left half, class 1 on the right, plus pixel noise.
Dataset two_blob_data(std::size_t per_class, std::uint64_t split) {
  Rng rng = Rng::derive(4, split, 0);
  Dataset d;
  d.geometry = {1, 8, 8};
  d.classes = 2;
  d.images = Tensor({2 * per_class, 1, 8, 8});
  for (std::size_t i = 0; i < 2 * per_class; ++i) {
    const std::size_t label = i % 2;
    d.labels.push_back(label);
    for (std::size_t y = 0; y < 8; ++y) {
      for (std::size_t x = 0; x < 8; ++x) {
        const bool lit = (x < 4) == (label == 0);
        d.images[i * 64 + y * 8 + x] = std::clamp((lit ? 0.6 : 0.3) + 0.1 * rng.normal(), 0.0, 1.0);
      }
    }
  }
  return d;
}

std::filesystem::path temp_file(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "advkit-models-test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::vector<unsigned char> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST(InitModel, DeterministicPerSeed) {
  EXPECT_EQ(init_model(small_cnn(), 3), init_model(small_cnn(), 3));
  EXPECT_NE(init_model(small_cnn(), 3).weights[0], init_model(small_cnn(), 4).weights[0]);
}

TEST(InitModel, GlorotBoundAndZeroBias) {
  const ModelSpec spec{"d", {LayerSpec::flatten(), LayerSpec::dense(3, 3)}, {1, 1, 3}, 3};
  const ModelParams m = init_model(spec, 1);
  for (double w : m.weights[1].data()) EXPECT_LE(std::abs(w), 1.0);
  const ModelSpec square{"d4", {LayerSpec::flatten(), LayerSpec::dense(4, 4)}, {1, 1, 4}, 4};
  const ModelParams sq = init_model(square, 2);
  for (double b : sq.biases[1].data()) EXPECT_EQ(b, 0.0);
}

TEST(InitModel, ArchitectureErrorNamesThePair) {
  const ModelSpec bad{"bad", {LayerSpec::flatten(), LayerSpec::dense(10, 3)}, {1, 3, 3}, 3};
  try {
    init_model(bad, 0);
    FAIL() << "expected ArchitectureError";
  } catch (const ArchitectureError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("flatten"), std::string::npos) << what;
    EXPECT_NE(what.find("dense"), std::string::npos) << what;
  }
  const ModelSpec odd{"odd", {LayerSpec::maxpool2(), LayerSpec::flatten(), LayerSpec::dense(4, 2)}, {1, 5, 5}, 2};
  EXPECT_THROW(init_model(odd, 0), ArchitectureError);
  const ModelSpec wrong_classes{"wc", {LayerSpec::flatten(), LayerSpec::dense(9, 4)}, {1, 3, 3}, 3};
  EXPECT_THROW(init_model(wrong_classes, 0), ArchitectureError);
}

TEST(ForwardLogits, ZeroWeightsGiveFinalBias) {
  ModelParams m = init_model(small_cnn(), 1);
  for (auto& w : m.weights) std::fill(w.data().begin(), w.data().end(), 0.0);
  m.biases.back() = Tensor::vector({0.5, -1.0, 2.0});
  Rng rng(1);
  const Tensor logits = forward_logits(m, random_tensor(rng, m.input.batch_shape(3), 0, 1));
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_EQ(logits[r * 3 + 0], 0.5);
    EXPECT_EQ(logits[r * 3 + 1], -1.0);
    EXPECT_EQ(logits[r * 3 + 2], 2.0);
  }
}

TEST(ForwardLogits, DuplicatedExampleGivesDuplicatedRows) {
  const ModelParams m = init_model(small_cnn(), 2);
  Rng rng(2);
  const Tensor one = random_tensor(rng, m.input.batch_shape(1), 0, 1);
  const Tensor pair[] = {one, one};
  const Tensor logits = forward_logits(m, stack_batch(pair));
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(logits[c], logits[3 + c]);
}

TEST(ForwardLogits, GeometryMismatchThrows) {
  const ModelParams m = init_model(small_cnn(), 2);
  EXPECT_THROW(forward_logits(m, Tensor({1, 1, 9, 9})), DimensionError);
}

TEST(Predict, TiesGoToLowestIndexAndShiftInvariance) {
  EXPECT_EQ(argmax_rows(Tensor::matrix({{1, 3, 3}, {2, 2, 2}})), (std::vector<std::size_t>{1, 0}));
  Rng rng(3);
  const Tensor logits = random_tensor(rng, {6, 4});
  Tensor shifted = logits;
  for (auto& v : shifted.data()) v += 17.25;
  EXPECT_EQ(argmax_rows(logits), argmax_rows(shifted));
}

TEST(Accuracy, ConstantPredictorOnBalancedSet) {
  SynthConfig cfg;
  cfg.per_class = 10;
  const Dataset data = synth_dataset(cfg);
  ModelParams m = init_model({"c", {LayerSpec::flatten(), LayerSpec::dense(784, 10)}, {1, 28, 28}, 10}, 0);
  std::fill(m.weights[1].data().begin(), m.weights[1].data().end(), 0.0);
  m.biases[1][0] = 1.0;
  EXPECT_DOUBLE_EQ(accuracy(m, data), 0.1);
}

TEST(Train, TwoBlobMlpReachesHighAccuracy) {
  const Dataset data = two_blob_data(100, 0);
  const ModelSpec mlp{"mlp", {LayerSpec::flatten(), LayerSpec::dense(64, 16), LayerSpec::relu(), LayerSpec::dense(16, 2)},
                      {1, 8, 8}, 2};
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.seed = 1;
  const ModelParams trained = train(init_model(mlp, 1), data, cfg);
  EXPECT_GE(accuracy(trained, data), 0.99);
  EXPECT_GE(accuracy(trained, two_blob_data(50, 1)), 0.99);
}

TEST(Train, ZeroEpochsReturnsInitialization) {
  const Dataset data = two_blob_data(5, 0);
  const ModelParams init = init_model(small_cnn(), 3);
  TrainConfig cfg;
  cfg.epochs = 0;
  const ModelParams out = train(init, two_blob_data(5, 0), cfg);
  EXPECT_EQ(out.weights, init.weights);
  EXPECT_EQ(out.biases, init.biases);
}

TEST(Train, DeterministicGivenSeed) {
  const Dataset data = two_blob_data(20, 0);
  ModelSpec spec = small_cnn();
  spec.classes = 2;
  spec.layers.back() = LayerSpec::dense(18, 2);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 9;
  cfg.mode = TrainingMode::adversarial;
  EXPECT_EQ(train(init_model(spec, 1), data, cfg), train(init_model(spec, 1), data, cfg));
}

TEST(Train, ConfigurationErrors) {
  const ModelParams m = init_model(small_cnn(), 1);
  TrainConfig cfg;
  EXPECT_THROW(train(m, Dataset{{1, 8, 8}, 3, Tensor(), {}}, cfg), ConfigError);
  cfg.mode = TrainingMode::ensemble_adversarial;
  EXPECT_THROW(train(m, two_blob_data(2, 0), cfg), ConfigError);
  TrainConfig bad_lr;
  bad_lr.learning_rate = 0.0;
  EXPECT_THROW(train(m, two_blob_data(2, 0), bad_lr), ConfigError);
}

TEST(Train, AdversarialTrainingLowersFgsmSuccess) {
  // Twin models (same arch and seed), one trained with FGSM halves; the
  // defended twin must be harder to fool at the same budget, averaged over seeds.
  const Dataset train_set = two_blob_data(150, 0);
  const Dataset test_set = two_blob_data(50, 1);
  const ModelSpec mlp{"mlp", {LayerSpec::flatten(), LayerSpec::dense(64, 16), LayerSpec::relu(), LayerSpec::dense(16, 2)},
                      {1, 8, 8}, 2};
  double normal_rate = 0.0, defended_rate = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.seed = seed;
    const ModelParams plain = train(init_model(mlp, seed), train_set, cfg);
    cfg.mode = TrainingMode::adversarial;
    cfg.crafting.epsilon = 0.15;
    const ModelParams robust = train(init_model(mlp, seed), train_set, cfg);
    for (const auto* m : {&plain, &robust}) {
      double fooled = 0.0;
      for (std::size_t i = 0; i < test_set.size(); ++i) {
        // FGSM at 0.15, written out here to keep the models module self-contained.
        const std::size_t labels[] = {test_set.labels[i]};
        const Tensor x = test_set.image(i);
        const Tensor g = loss_and_input_gradient(*m, x, labels).grad;
        Tensor adv = x;
        for (std::size_t k = 0; k < adv.size(); ++k) adv[k] = std::clamp(x[k] + 0.15 * sign(g[k]), 0.0, 1.0);
        fooled += predict(*m, adv)[0] != labels[0] ? 1.0 : 0.0;
      }
      (m == &plain ? normal_rate : defended_rate) += fooled / static_cast<double>(test_set.size()) / 5.0;
    }
  }
  EXPECT_LT(defended_rate, normal_rate);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  ModelParams m = init_model(small_cnn(), 7);
  m.meta = {"small", 7, TrainingMode::ensemble_adversarial};
  const auto path = temp_file("roundtrip.pbck");
  save_checkpoint(m, path);
  const ModelParams back = load_checkpoint(path);
  EXPECT_EQ(back, m);
  Rng rng(4);
  const Tensor x = random_tensor(rng, m.input.batch_shape(2), 0, 1);
  EXPECT_EQ(forward_logits(back, x), forward_logits(m, x));
}

TEST(Checkpoint, FlippedPayloadByteIsChecksumError) {
  const auto path = temp_file("flipped.pbck");
  save_checkpoint(init_model(small_cnn(), 7), path);
  auto bytes = read_bytes(path);
  bytes[bytes.size() - 20] ^= 0x01;
  write_bytes(path, bytes);
  EXPECT_THROW(load_checkpoint(path), ChecksumError);
}

TEST(Checkpoint, FutureVersionNamesBothVersions) {
  const auto path = temp_file("future.pbck");
  save_checkpoint(init_model(small_cnn(), 7), path);
  auto bytes = read_bytes(path);
  bytes[4] = 9;  // little-endian u32 version right after the magic
  write_bytes(path, bytes);
  try {
    load_checkpoint(path);
    FAIL() << "expected VersionError";
  } catch (const VersionError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find('9'), std::string::npos) << what;
    EXPECT_NE(what.find(std::to_string(kCheckpointVersion)), std::string::npos) << what;
  }
}

TEST(Checkpoint, TruncationAndBadMagic) {
  const auto path = temp_file("truncated.pbck");
  save_checkpoint(init_model(small_cnn(), 7), path);
  auto bytes = read_bytes(path);
  write_bytes(path, {bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(bytes.size() / 2)});
  EXPECT_THROW(load_checkpoint(path), TruncatedError);
  write_bytes(path, {bytes.begin(), bytes.begin() + 6});
  EXPECT_THROW(load_checkpoint(path), TruncatedError);
  bytes[0] = 'X';
  write_bytes(path, bytes);
  EXPECT_THROW(load_checkpoint(path), FormatError);
  EXPECT_THROW(load_checkpoint(temp_file("does-not-exist.pbck")), IoError);
}

TEST(Checkpoint, Crc64CheckValue) {
  const std::string s = "123456789";
  EXPECT_EQ(crc64({reinterpret_cast<const unsigned char*>(s.data()), s.size()}), 0x995DC9BBDF1939FAULL);
}
