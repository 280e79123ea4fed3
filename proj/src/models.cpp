#include "advkit/models.hpp"

#include <cmath>

#include <fmt/format.h>

#include "advkit/errors.hpp"
#include "advkit/rng.hpp"

namespace advkit {

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2: return "maxpool2";
    case LayerKind::flatten: return "flatten";
  }
  return "?";
}

LayerKind parse_layer_kind(const std::string& name) {
  for (auto kind : {LayerKind::dense, LayerKind::conv2d, LayerKind::relu, LayerKind::maxpool2, LayerKind::flatten}) {
    if (name == layer_kind_name(kind)) return kind;
  }
  throw ConfigError(fmt::format("unknown layer kind '{}'", name));
}

const char* training_mode_name(TrainingMode mode) {
  switch (mode) {
    case TrainingMode::normal: return "normal";
    case TrainingMode::adversarial: return "adversarial";
    case TrainingMode::ensemble_adversarial: return "ensemble-adversarial";
  }
  return "?";
}

TrainingMode parse_training_mode(const std::string& name) {
  for (auto mode : {TrainingMode::normal, TrainingMode::adversarial, TrainingMode::ensemble_adversarial}) {
    if (name == training_mode_name(mode)) return mode;
  }
  throw ConfigError(fmt::format("unknown training mode '{}'", name));
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) n += weights[i].size() + biases[i].size();
  return n;
}

namespace {

std::string describe(std::size_t index, const LayerSpec& layer) {
  switch (layer.kind) {
    case LayerKind::dense: return fmt::format("#{} dense({}->{})", index, layer.in, layer.out);
    case LayerKind::conv2d:
      return fmt::format("#{} conv2d({}->{}, k={}, s={})", index, layer.in, layer.out, layer.kernel, layer.stride);
    default: return fmt::format("#{} {}", index, layer_kind_name(layer.kind));
  }
}

}  // namespace

std::vector<Shape> infer_shapes(const std::vector<LayerSpec>& layers, const Geometry& input,
                                std::size_t classes) {
  if (layers.empty()) throw ArchitectureError("architecture has no layers");
  std::vector<Shape> shapes;
  Shape current{input.channels, input.height, input.width};
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& layer = layers[i];
    const std::string prev = i == 0 ? fmt::format("input {}", shape_str(current)) : describe(i - 1, layers[i - 1]);
    auto fail = [&](const std::string& why) {
      throw ArchitectureError(fmt::format("{} incompatible with {}: {}", prev, describe(i, layer), why));
    };
    switch (layer.kind) {
      case LayerKind::dense:
        if (current.size() != 1) fail(fmt::format("dense needs a flat input, got {}", shape_str(current)));
        if (current[0] != layer.in) fail(fmt::format("expected {} features, got {}", layer.in, current[0]));
        if (layer.out == 0) fail("zero output features");
        current = {layer.out};
        break;
      case LayerKind::conv2d:
        if (current.size() != 3) fail(fmt::format("conv2d needs C x H x W, got {}", shape_str(current)));
        if (current[0] != layer.in) fail(fmt::format("expected {} channels, got {}", layer.in, current[0]));
        if (layer.kernel == 0 || layer.stride == 0 || layer.out == 0) fail("zero kernel, stride, or channels");
        if (layer.kernel > current[1] || layer.kernel > current[2]) fail("kernel larger than input");
        current = {layer.out, (current[1] - layer.kernel) / layer.stride + 1,
                   (current[2] - layer.kernel) / layer.stride + 1};
        break;
      case LayerKind::relu: break;
      case LayerKind::maxpool2:
        if (current.size() != 3) fail("maxpool2 needs C x H x W");
        if (current[1] % 2 != 0 || current[2] % 2 != 0) fail(fmt::format("odd spatial dims {}", shape_str(current)));
        current = {current[0], current[1] / 2, current[2] / 2};
        break;
      case LayerKind::flatten: current = {shape_numel(current)}; break;
    }
    shapes.push_back(current);
  }
  if (current != Shape{classes}) {
    throw ArchitectureError(fmt::format("{} produces {} but the model has {} classes",
                                        describe(layers.size() - 1, layers.back()), shape_str(current), classes));
  }
  return shapes;
}

ModelParams init_model(const ModelSpec& spec, std::uint64_t seed) {
  infer_shapes(spec.layers, spec.input, spec.classes);
  ModelParams model;
  model.layers = spec.layers;
  model.input = spec.input;
  model.classes = spec.classes;
  model.meta = {spec.name, seed, TrainingMode::normal};
  Rng rng(mix64(seed));
  for (const auto& layer : spec.layers) {
    Tensor w, b;
    std::size_t fan_in = 0, fan_out = 0;
    if (layer.kind == LayerKind::dense) {
      w = Tensor({layer.in, layer.out});
      b = Tensor({layer.out});
      fan_in = layer.in;
      fan_out = layer.out;
    } else if (layer.kind == LayerKind::conv2d) {
      w = Tensor({layer.out, layer.in, layer.kernel, layer.kernel});
      b = Tensor({layer.out});
      fan_in = layer.in * layer.kernel * layer.kernel;
      fan_out = layer.out * layer.kernel * layer.kernel;
    }
    if (!w.empty()) {
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      for (auto& v : w.data()) v = rng.uniform(-bound, bound);
    }
    model.weights.push_back(std::move(w));
    model.biases.push_back(std::move(b));
  }
  return model;
}

Tensor forward_recorded(const ModelParams& model, const Tensor& batch, Tape& tape) {
  const Geometry& g = model.input;
  if (batch.rank() != 4 || batch.dim(1) != g.channels || batch.dim(2) != g.height || batch.dim(3) != g.width) {
    throw DimensionError(fmt::format("batch {} does not match model input geometry ({},{},{})",
                                     shape_str(batch.shape()), g.channels, g.height, g.width));
  }
  Tensor x = batch;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const LayerSpec& layer = model.layers[i];
    switch (layer.kind) {
      case LayerKind::dense: x = forward_dense(x, model.weights[i], model.biases[i], tape); break;
      case LayerKind::conv2d: x = forward_conv2d(x, model.weights[i], model.biases[i], layer.stride, tape); break;
      case LayerKind::relu: x = forward_relu(x, tape); break;
      case LayerKind::maxpool2: x = forward_maxpool2(x, tape); break;
      case LayerKind::flatten: x = forward_flatten(x, tape); break;
    }
  }
  return x;
}

Tensor forward_logits(const ModelParams& model, const Tensor& batch) {
  Tape tape;
  return forward_recorded(model, batch, tape);
}

LossGrad loss_and_input_gradient(const ModelParams& model, const Tensor& batch,
                                 std::span<const std::size_t> labels) {
  Tape tape;
  const Tensor logits = forward_recorded(model, batch, tape);
  const Loss loss = softmax_cross_entropy(logits, labels, tape);
  return {loss.value, input_gradient(tape, loss)};
}

double loss_value(const ModelParams& model, const Tensor& batch, std::span<const std::size_t> labels) {
  Tape tape;
  const Tensor logits = forward_recorded(model, batch, tape);
  return softmax_cross_entropy(logits, labels, tape).value;
}

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<std::size_t> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (logits[r * k + j] > logits[r * k + best]) best = j;
    }
    out[r] = best;
  }
  return out;
}

std::vector<std::size_t> predict(const ModelParams& model, const Tensor& batch) {
  return argmax_rows(forward_logits(model, batch));
}

double accuracy(const ModelParams& model, const Dataset& data) {
  if (data.size() == 0) return 0.0;
  constexpr std::size_t kChunk = 256;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += kChunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + kChunk); ++i) idx.push_back(i);
    const auto pred = predict(model, data.gather(idx));
    for (std::size_t j = 0; j < idx.size(); ++j) correct += pred[j] == data.labels[idx[j]];
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace advkit
