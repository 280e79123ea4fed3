#include "advkit/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <numeric>

#include <fmt/format.h>

#include "advkit/errors.hpp"

namespace advkit {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) { return fmt::format("({})", fmt::join(shape, ",")); }

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  for (auto extent : shape_) {
    if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape_));
  }
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto extent : shape_) {
    if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape_));
  }
  if (data_.size() != shape_numel(shape_)) {
    throw DimensionError(fmt::format("data length {} does not match shape {}", data_.size(),
                                     shape_str(shape_)));
  }
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t n = rows.size();
  const std::size_t m = n ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(n * m);
  for (const auto& row : rows) {
    if (row.size() != m) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({n, m}, std::move(data));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != size()) {
    throw DimensionError(fmt::format("cannot reshape {} to {}", shape_str(shape_), shape_str(shape)));
  }
  return Tensor(std::move(shape), data_);
}

Tensor Tensor::slice_batch(std::size_t n) const {
  if (rank() == 0 || n >= shape_[0]) {
    throw IndexError(fmt::format("batch index {} out of range for shape {}", n, shape_str(shape_)));
  }
  Shape shape = shape_;
  shape[0] = 1;
  const std::size_t stride = size() / shape_[0];
  auto first = data_.begin() + static_cast<std::ptrdiff_t>(n * stride);
  return Tensor(std::move(shape), std::vector<double>(first, first + static_cast<std::ptrdiff_t>(stride)));
}

bool Tensor::all_finite() const noexcept {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void require_finite(const Tensor& t, const char* where) {
  if (!t.all_finite()) throw NumericError(fmt::format("non-finite value produced by {}", where));
}

Tensor stack_batch(std::span<const Tensor> items) {
  if (items.empty()) throw DimensionError("cannot stack an empty batch");
  Shape inner = items.front().shape();
  if (!inner.empty() && inner[0] == 1) inner.erase(inner.begin());
  const std::size_t stride = shape_numel(inner);
  std::vector<double> data;
  data.reserve(stride * items.size());
  for (const auto& item : items) {
    if (item.size() != stride) {
      throw DimensionError(fmt::format("cannot stack {} with {}", shape_str(item.shape()),
                                       shape_str(items.front().shape())));
    }
    data.insert(data.end(), item.values().begin(), item.values().end());
  }
  Shape shape{items.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  return Tensor(std::move(shape), std::move(data));
}

namespace {
void require_same_size(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(fmt::format("{}: shapes {} and {} differ", op, shape_str(a.shape()),
                                     shape_str(b.shape())));
  }
}
}  // namespace

double dot(const Tensor& a, const Tensor& b) {
  require_same_size(a, b, "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double l1_norm(const Tensor& t) {
  double acc = 0.0;
  for (double v : t.data()) acc += std::abs(v);
  return acc;
}

double l2_norm(const Tensor& t) {
  double acc = 0.0;
  for (double v : t.data()) acc += v * v;
  return std::sqrt(acc);
}

double linf_norm(const Tensor& t) {
  double best = 0.0;
  for (double v : t.data()) best = std::max(best, std::abs(v));
  return best;
}

double linf_distance(const Tensor& a, const Tensor& b) {
  require_same_size(a, b, "linf_distance");
  double best = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) best = std::max(best, std::abs(a[i] - b[i]));
  return best;
}

double l2_distance(const Tensor& a, const Tensor& b) {
  require_same_size(a, b, "l2_distance");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(acc);
}

std::uint64_t content_hash(const Tensor& t) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (auto extent : t.shape()) mix(&extent, sizeof extent);
  mix(t.data().data(), t.size() * sizeof(double));
  return h;
}

}  // namespace advkit
