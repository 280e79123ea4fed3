#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "advkit/autodiff.hpp"
#include "advkit/dataset.hpp"
#include "advkit/tensor.hpp"

namespace advkit {

enum class LayerKind { dense, conv2d, relu, maxpool2, flatten };

const char* layer_kind_name(LayerKind kind);
LayerKind parse_layer_kind(const std::string& name);

/// One layer of a feed-forward chain. For dense layers `in`/`out` are feature
/// counts; for conv2d they are channel counts and `kernel`/`stride` give the
/// square window geometry. Other kinds ignore the numeric fields.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;

  static LayerSpec dense(std::size_t in, std::size_t out) { return {LayerKind::dense, in, out, 0, 1}; }
  static LayerSpec conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride = 1) {
    return {LayerKind::conv2d, in, out, kernel, stride};
  }
  static LayerSpec relu() { return {LayerKind::relu}; }
  static LayerSpec maxpool2() { return {LayerKind::maxpool2}; }
  static LayerSpec flatten() { return {LayerKind::flatten}; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

enum class TrainingMode { normal, adversarial, ensemble_adversarial };

const char* training_mode_name(TrainingMode mode);
TrainingMode parse_training_mode(const std::string& name);

struct ModelSpec {
  std::string name;
  std::vector<LayerSpec> layers;
  Geometry input;
  std::size_t classes = 10;
};

struct ModelMeta {
  std::string name;
  std::uint64_t seed = 0;
  TrainingMode training_mode = TrainingMode::normal;
  friend bool operator==(const ModelMeta&, const ModelMeta&) = default;
};

/// Classifier parameters. `weights[i]`/`biases[i]` are empty for layers
/// without parameters.
struct ModelParams {
  std::vector<LayerSpec> layers;
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;
  Geometry input;
  std::size_t classes = 0;
  ModelMeta meta;

  std::size_t parameter_count() const;
  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Per-layer output shape (without batch axis). Throws ArchitectureError
/// naming the first incompatible pair of layers.
std::vector<Shape> infer_shapes(const std::vector<LayerSpec>& layers, const Geometry& input,
                                std::size_t classes);

/// Glorot-uniform weights (bound sqrt(6 / (fan_in + fan_out))) and zero biases.
ModelParams init_model(const ModelSpec& spec, std::uint64_t seed);

/// Logits [N, classes] for a batch [N, C, H, W].
Tensor forward_logits(const ModelParams& model, const Tensor& batch);

/// Same as forward_logits but records every layer on `tape`.
Tensor forward_recorded(const ModelParams& model, const Tensor& batch, Tape& tape);

struct LossGrad {
  double loss = 0.0;
  Tensor grad;  // d loss / d input, same shape as the input batch
};

/// Mean cross-entropy over the batch and its input gradient.
LossGrad loss_and_input_gradient(const ModelParams& model, const Tensor& batch,
                                 std::span<const std::size_t> labels);

double loss_value(const ModelParams& model, const Tensor& batch, std::span<const std::size_t> labels);

/// Argmax per row; ties resolve to the lowest class index.
std::vector<std::size_t> predict(const ModelParams& model, const Tensor& batch);
std::vector<std::size_t> argmax_rows(const Tensor& logits);

double accuracy(const ModelParams& model, const Dataset& data);

struct AdversarialCrafting {
  double epsilon = 8.0 / 255.0;
  /// 1 selects FGSM; more selects I-FGSM with step epsilon / steps.
  std::size_t steps = 1;
};

struct TrainConfig {
  double learning_rate = 0.05;
  std::size_t epochs = 3;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  TrainingMode mode = TrainingMode::normal;
  AdversarialCrafting crafting;
  std::vector<std::shared_ptr<const ModelParams>> donors;
};

/// Minibatch SGD on mean cross-entropy. Adversarial modes replace the first
/// half of each batch with examples crafted on the current model (adversarial)
/// or on the donors in round-robin order (ensemble-adversarial).
ModelParams train(ModelParams model, const Dataset& data, const TrainConfig& cfg);

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const ModelParams& model, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

/// CRC-64/XZ; the checkpoint trailer.
std::uint64_t crc64(std::span<const unsigned char> bytes);

}  // namespace advkit
