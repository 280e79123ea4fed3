#include "advkit/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

#include <fmt/format.h>

#include "advkit/errors.hpp"
#include "advkit/rng.hpp"

namespace advkit {

Tensor Dataset::gather(std::span<const std::size_t> indices) const {
  const std::size_t stride = geometry.numel();
  std::vector<double> data;
  data.reserve(indices.size() * stride);
  for (auto i : indices) {
    if (i >= size()) throw IndexError(fmt::format("example {} out of range ({} examples)", i, size()));
    auto first = images.values().begin() + static_cast<std::ptrdiff_t>(i * stride);
    data.insert(data.end(), first, first + static_cast<std::ptrdiff_t>(stride));
  }
  return Tensor(geometry.batch_shape(indices.size()), std::move(data));
}

std::vector<std::size_t> Dataset::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<std::size_t> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  return {geometry, classes, gather(indices), gather_labels(indices)};
}

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

std::vector<unsigned char> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot open '{}'", path.string()));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset, const std::string& where) {
  if (bytes.size() < offset + 4) throw IdxTruncatedError(fmt::format("'{}': truncated header", where));
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                     static_cast<char>(v)};
  out.write(b, 4);
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto img = read_all(images_path);
  const auto lab = read_all(labels_path);
  const std::string img_name = images_path.string(), lab_name = labels_path.string();

  const auto img_magic = read_be32(img, 0, img_name);
  if (img_magic != kImageMagic) {
    throw IdxMagicError(fmt::format("'{}': bad image magic: expected 0x{:08x}, got 0x{:08x}", img_name,
                                    kImageMagic, img_magic));
  }
  const auto lab_magic = read_be32(lab, 0, lab_name);
  if (lab_magic != kLabelMagic) {
    throw IdxMagicError(fmt::format("'{}': bad label magic: expected 0x{:08x}, got 0x{:08x}", lab_name,
                                    kLabelMagic, lab_magic));
  }
  const std::size_t n = read_be32(img, 4, img_name);
  const std::size_t rows = read_be32(img, 8, img_name);
  const std::size_t cols = read_be32(img, 12, img_name);
  const std::size_t n_labels = read_be32(lab, 4, lab_name);
  if (n != n_labels) {
    throw IdxCountMismatchError(
        fmt::format("image count {} ('{}') differs from label count {} ('{}')", n, img_name, n_labels, lab_name));
  }
  if (n == 0 || rows == 0 || cols == 0) throw IdxError(fmt::format("'{}': empty image set", img_name));
  if (img.size() < 16 + n * rows * cols) {
    throw IdxTruncatedError(fmt::format("'{}': {} bytes, expected {}", img_name, img.size(), 16 + n * rows * cols));
  }
  if (lab.size() < 8 + n) {
    throw IdxTruncatedError(fmt::format("'{}': {} bytes, expected {}", lab_name, lab.size(), 8 + n));
  }

  Dataset data;
  data.geometry = {1, rows, cols};
  data.images = Tensor(data.geometry.batch_shape(n));
  for (std::size_t i = 0; i < n * rows * cols; ++i) data.images[i] = img[16 + i] / 255.0;
  data.labels.resize(n);
  std::size_t max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    data.labels[i] = lab[8 + i];
    max_label = std::max(max_label, data.labels[i]);
  }
  data.classes = max_label + 1;
  return data;
}

void save_idx(const Dataset& data, const std::filesystem::path& images, const std::filesystem::path& labels) {
  if (data.geometry.channels != 1) throw ConfigError("IDX export supports single-channel images only");
  std::ofstream img(images, std::ios::binary | std::ios::trunc);
  std::ofstream lab(labels, std::ios::binary | std::ios::trunc);
  if (!img || !lab) throw IoError(fmt::format("cannot write '{}' / '{}'", images.string(), labels.string()));
  put_be32(img, kImageMagic);
  put_be32(img, static_cast<std::uint32_t>(data.size()));
  put_be32(img, static_cast<std::uint32_t>(data.geometry.height));
  put_be32(img, static_cast<std::uint32_t>(data.geometry.width));
  for (double v : data.images.data()) {
    img.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
  }
  put_be32(lab, kLabelMagic);
  put_be32(lab, static_cast<std::uint32_t>(data.size()));
  for (auto l : data.labels) lab.put(static_cast<char>(l));
  if (!img || !lab) throw IoError(fmt::format("write to '{}' / '{}' failed", images.string(), labels.string()));
}

namespace {

struct Blob {
  double cy, cx, sigma;
  std::vector<double> amplitude;  // per channel
};

}  // namespace

Dataset synth_dataset(const SynthConfig& cfg) {
  const Geometry& g = cfg.geometry;
  if (cfg.classes == 0 || cfg.per_class == 0) throw ConfigError("synthetic dataset needs classes and examples");
  const std::size_t kBlobsPerClass = cfg.blobs;

  // Blob centers stay inside the central region so border crops lose little.
  Rng proto_rng = Rng::derive(cfg.seed, 0, 1);
  const double margin_y = 0.3 * static_cast<double>(g.height), margin_x = 0.3 * static_cast<double>(g.width);
  std::vector<std::vector<Blob>> prototypes(cfg.classes);
  for (auto& blobs : prototypes) {
    for (std::size_t b = 0; b < kBlobsPerClass; ++b) {
      Blob blob{proto_rng.uniform(margin_y, g.height - 1 - margin_y), proto_rng.uniform(margin_x, g.width - 1 - margin_x),
                proto_rng.uniform(1.2, 2.2), {}};
      for (std::size_t c = 0; c < g.channels; ++c) blob.amplitude.push_back(proto_rng.uniform(0.6, 1.0));
      blobs.push_back(std::move(blob));
    }
  }

  const std::size_t n = cfg.classes * cfg.per_class;
  Dataset data;
  data.geometry = g;
  data.classes = cfg.classes;
  data.images = Tensor(g.batch_shape(n));
  data.labels.resize(n);
  Rng rng = Rng::derive(cfg.seed, cfg.split, 2);
  const auto jitter = cfg.noise > 0.0 ? static_cast<std::int64_t>(cfg.jitter) : std::int64_t{0};
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % cfg.classes;
    data.labels[i] = label;
    const double dy = static_cast<double>(rng.uniform_int(-jitter, jitter));
    const double dx = static_cast<double>(rng.uniform_int(-jitter, jitter));
    std::vector<double> scale(kBlobsPerClass);
    for (auto& s : scale) s = 1.0 + cfg.noise * rng.normal();
    double* out = &data.images[i * g.numel()];
    for (std::size_t c = 0; c < g.channels; ++c) {
      for (std::size_t y = 0; y < g.height; ++y) {
        for (std::size_t x = 0; x < g.width; ++x) {
          double v = cfg.background;
          for (std::size_t b = 0; b < kBlobsPerClass; ++b) {
            const Blob& blob = prototypes[label][b];
            const double ry = static_cast<double>(y) - blob.cy - dy, rx = static_cast<double>(x) - blob.cx - dx;
            v += cfg.contrast * scale[b] * blob.amplitude[c] * std::exp(-(ry * ry + rx * rx) / (2.0 * blob.sigma * blob.sigma));
          }
          if (cfg.noise > 0.0) v += cfg.noise * rng.normal();
          out[(c * g.height + y) * g.width + x] = std::clamp(v, 0.0, 1.0);
        }
      }
    }
  }
  return data;
}

}  // namespace advkit
