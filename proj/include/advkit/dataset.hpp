#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "advkit/tensor.hpp"

namespace advkit {

struct Geometry {
  std::size_t channels = 1;
  std::size_t height = 28;
  std::size_t width = 28;

  std::size_t numel() const noexcept { return channels * height * width; }
  Shape batch_shape(std::size_t n) const { return {n, channels, height, width}; }
  friend bool operator==(const Geometry&, const Geometry&) = default;
};

/// In-memory labeled image set. Pixels are in [0, 1].
struct Dataset {
  Geometry geometry;
  std::size_t classes = 0;
  Tensor images;  // [N, C, H, W]
  std::vector<std::size_t> labels;

  std::size_t size() const noexcept { return labels.size(); }
  /// Example `i` as a [1, C, H, W] tensor.
  Tensor image(std::size_t i) const { return images.slice_batch(i); }
  /// Gathers the listed examples into one batch tensor.
  Tensor gather(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> gather_labels(std::span<const std::size_t> indices) const;
  /// Subset in the listed order.
  Dataset subset(std::span<const std::size_t> indices) const;
};

/// A single (image, label) pair with image shape [1, C, H, W].
struct LabeledExample {
  Tensor image;
  std::size_t label = 0;
  std::size_t source_index = 0;
};

/// Parses an IDX image file (magic 0x00000803) and label file (magic
/// 0x00000801). Pixels are scaled from [0, 255] to [0, 1].
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

/// Writes `data` as an IDX pair, quantizing pixels to 8 bits. Single-channel only.
void save_idx(const Dataset& data, const std::filesystem::path& images, const std::filesystem::path& labels);

struct SynthConfig {
  std::size_t classes = 10;
  std::size_t per_class = 100;
  Geometry geometry{1, 28, 28};
  /// Determines the class prototypes.
  std::uint64_t seed = 0;
  /// Selects an independent sample draw over the same prototypes (train/test splits).
  std::uint64_t split = 0;
  /// Standard deviation of additive pixel noise.
  double noise = 0.05;
  /// Gaussian blobs per class prototype.
  std::size_t blobs = 16;
  /// Peak blob intensity above the background.
  double contrast = 0.12;
  /// Uniform background level.
  double background = 0.3;
  /// Maximum whole-image shift in pixels, drawn uniformly per example.
  /// Ignored when noise is zero, so a noiseless dataset repeats each prototype.
  std::size_t jitter = 1;
};

/// Gaussian-blob classes: each class owns a few blobs at fixed positions near
/// the image center; examples add shift jitter, per-blob intensity variation
/// (scaled by `noise`), and pixel noise, then clip to [0, 1]. With noise = 0
/// every image of a class is identical.
Dataset synth_dataset(const SynthConfig& cfg);

}  // namespace advkit
