#pragma once

#include <cmath>
#include <vector>

#include "advkit/models.hpp"
#include "advkit/rng.hpp"
#include "advkit/tensor.hpp"

namespace advkit::testing {

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// A random small conv or MLP chain on a random little image geometry.
inline ModelSpec random_architecture(Rng& rng) {
  const std::size_t channels = 1 + static_cast<std::size_t>(rng.uniform_int(0, 1));
  const std::size_t classes = 2 + static_cast<std::size_t>(rng.uniform_int(0, 3));
  if (rng.bernoulli(0.3)) {
    const std::size_t side = 4 + static_cast<std::size_t>(rng.uniform_int(0, 3));
    const std::size_t hidden = 3 + static_cast<std::size_t>(rng.uniform_int(0, 5));
    const std::size_t flat = channels * side * side;
    return {"mlp", {LayerSpec::flatten(), LayerSpec::dense(flat, hidden), LayerSpec::relu(), LayerSpec::dense(hidden, classes)},
            {channels, side, side}, classes};
  }
  const std::size_t k = 2 + static_cast<std::size_t>(rng.uniform_int(0, 1));
  const std::size_t stride = 1 + static_cast<std::size_t>(rng.uniform_int(0, 1));
  const std::size_t filters = 2 + static_cast<std::size_t>(rng.uniform_int(0, 2));
  // Pick a side whose conv output is even so a pool can follow.
  std::size_t side = 6;
  while (((side - k) / stride + 1) % 2 != 0) ++side;
  const std::size_t conv_out = (side - k) / stride + 1;
  const std::size_t pooled = conv_out / 2;
  std::vector<LayerSpec> layers{LayerSpec::conv2d(channels, filters, k, stride), LayerSpec::relu(), LayerSpec::maxpool2(),
                                LayerSpec::flatten(), LayerSpec::dense(filters * pooled * pooled, classes)};
  return {"cnn", std::move(layers), {channels, side, side}, classes};
}

/// Symmetric infinity-norm relative error used by the gradient checks.
inline double relative_linf(const Tensor& analytic, const Tensor& numeric) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    num = std::max(num, std::abs(analytic[i] - numeric[i]));
    den = std::max(den, std::abs(numeric[i]));
  }
  return num / (den + 1e-12);
}

}  // namespace advkit::testing
