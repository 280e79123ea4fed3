#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace advkit {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of doubles. The universal value type: images,
/// gradients, and weights are all Tensors.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  /// 2-D tensor from nested rows; all rows must have equal length.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::initializer_list<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }

  /// Same data under a new shape with equal element count.
  Tensor reshaped(Shape shape) const;

  /// Row `n` of the leading axis as a standalone tensor of shape [1, ...].
  Tensor slice_batch(std::size_t n) const;

  bool all_finite() const noexcept;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Throws NumericError when `t` holds NaN or Inf.
void require_finite(const Tensor& t, const char* where);

/// Stacks same-shaped tensors of shape [1, ...] (or [...]) into [N, ...].
Tensor stack_batch(std::span<const Tensor> items);

// Elementwise helpers used by the attack engine.
double dot(const Tensor& a, const Tensor& b);
double l1_norm(const Tensor& t);
double l2_norm(const Tensor& t);
double linf_norm(const Tensor& t);
double linf_distance(const Tensor& a, const Tensor& b);
double l2_distance(const Tensor& a, const Tensor& b);
/// sign(v) with sign(0) = 0.
inline double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

/// FNV-1a over the raw bytes; used by tests to detect mutation.
std::uint64_t content_hash(const Tensor& t);

}  // namespace advkit
