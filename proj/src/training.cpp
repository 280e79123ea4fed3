#include <fmt/format.h>

#include "advkit/attacks.hpp"
#include "advkit/errors.hpp"
#include "advkit/models.hpp"
#include "advkit/rng.hpp"

namespace advkit {

namespace {

Tensor craft(const ModelParams& source, const Tensor& x, std::size_t label, const AdversarialCrafting& crafting) {
  AttackConfig cfg;
  cfg.epsilon = crafting.epsilon;
  cfg.iterations = std::max<std::size_t>(1, crafting.steps);
  if (cfg.iterations == 1) return fgsm(source, x, label, cfg);
  return i_fgsm(source, x, label, cfg);
}

}  // namespace

ModelParams train(ModelParams model, const Dataset& data, const TrainConfig& cfg) {
  if (data.size() == 0) throw ConfigError("cannot train on an empty dataset");
  if (cfg.batch_size == 0) throw ConfigError("batch size must be positive");
  if (!(cfg.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(data.geometry == model.input)) throw ConfigError("dataset geometry does not match the model input");
  for (auto label : data.labels) {
    if (label >= model.classes) {
      throw ConfigError(fmt::format("label {} exceeds the model's {} classes", label, model.classes));
    }
  }
  if (cfg.mode == TrainingMode::ensemble_adversarial && cfg.donors.empty()) {
    throw ConfigError("ensemble-adversarial training needs at least one donor model");
  }
  model.meta.training_mode = cfg.mode;
  model.meta.seed = cfg.seed;
  if (cfg.epochs == 0) return model;

  Rng rng(mix64(cfg.seed ^ 0x7472616eULL));
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t batch_counter = 0;
  const BackwardOptions opts{.param_grads = true};

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i-- > 1;) {
      std::swap(order[i], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
    }
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      Tensor batch = data.gather(idx);
      const auto labels = data.gather_labels(idx);

      if (cfg.mode != TrainingMode::normal) {
        const ModelParams* source = &model;
        if (cfg.mode == TrainingMode::ensemble_adversarial) {
          source = cfg.donors[batch_counter % cfg.donors.size()].get();
        }
        const std::size_t stride = data.geometry.numel();
        for (std::size_t j = 0; j < idx.size() / 2; ++j) {
          const Tensor adv = craft(*source, batch.slice_batch(j), labels[j], cfg.crafting);
          std::copy(adv.data().begin(), adv.data().end(), batch.data().begin() + static_cast<std::ptrdiff_t>(j * stride));
        }
      }
      ++batch_counter;

      Tape tape;
      const Tensor logits = forward_recorded(model, batch, tape);
      const Loss loss = softmax_cross_entropy(logits, labels, tape);
      const Gradients grads = backward(tape, loss, opts);
      for (const auto& pg : grads.params) {
        Tensor& w = model.weights[pg.record];
        Tensor& b = model.biases[pg.record];
        for (std::size_t k = 0; k < w.size(); ++k) w[k] -= cfg.learning_rate * pg.weight[k];
        for (std::size_t k = 0; k < b.size(); ++k) b[k] -= cfg.learning_rate * pg.bias[k];
      }
    }
  }
  return model;
}

}  // namespace advkit
