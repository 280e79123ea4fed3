#pragma once

// Tape-based reverse mode for feed-forward chains.
//
// Every forward_* call appends one record to the tape; the input of each call
// must be the output of the previous one. softmax_cross_entropy closes the
// chain. A closed tape supports exactly one backward pass, which visits the
// records in reverse order and yields the gradient with respect to the first
// input (and optionally with respect to every weight and bias).
//
// Weight and bias tensors are referenced, not copied: they must outlive the
// tape. Activations are saved by value.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "advkit/tensor.hpp"

namespace advkit {

enum class OpKind { dense, conv2d, relu, maxpool2, flatten, softmax_cross_entropy };

const char* op_name(OpKind kind);

struct TapeRecord {
  OpKind kind;
  Tensor input;
  const Tensor* weight = nullptr;
  const Tensor* bias = nullptr;
  std::size_t stride = 1;
  Shape output_shape;
  std::vector<std::size_t> argmax;  // maxpool2: flat input index per output element
  Tensor probs;                     // softmax_cross_entropy: row-wise softmax
  std::vector<std::size_t> labels;  // softmax_cross_entropy
};

class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  std::size_t size() const noexcept { return records_.size(); }
  const std::vector<TapeRecord>& records() const noexcept { return records_; }
  bool closed() const noexcept { return closed_; }
  bool consumed() const noexcept { return consumed_; }
  std::uint64_t id() const noexcept { return id_; }

  // Used by the forward ops and backward pass.
  void append(TapeRecord record);
  void close() { closed_ = true; }
  void mark_consumed() { consumed_ = true; }

 private:
  std::vector<TapeRecord> records_;
  std::uint64_t id_;
  bool closed_ = false;
  bool consumed_ = false;
};

/// Scalar loss produced by softmax_cross_entropy; tied to the tape that made it.
struct Loss {
  double value = 0.0;
  std::uint64_t tape_id = 0;
};

/// x [N, in] times weight [in, out] plus bias [out].
Tensor forward_dense(const Tensor& x, const Tensor& weight, const Tensor& bias, Tape& tape);

/// Valid cross-correlation: x [N, C, H, W], kernel [O, C, kh, kw], bias [O].
Tensor forward_conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t stride,
                      Tape& tape);

Tensor forward_relu(const Tensor& x, Tape& tape);

/// 2x2 windows, stride 2. Spatial dims must be even.
Tensor forward_maxpool2(const Tensor& x, Tape& tape);

Tensor forward_flatten(const Tensor& x, Tape& tape);

/// Mean over the batch of log-sum-exp(logits) - logits[label].
Loss softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels, Tape& tape);
Loss softmax_cross_entropy(const Tensor& logits, std::size_t label, Tape& tape);

/// Gradient of one weighted layer's parameters.
struct ParamGrad {
  std::size_t record = 0;
  Tensor weight;
  Tensor bias;
};

struct Gradients {
  Tensor input;
  std::vector<ParamGrad> params;  // one entry per dense/conv2d record, in tape order
};

struct BackwardOptions {
  bool param_grads = false;
  /// Called with each record index as it is visited.
  std::function<void(std::size_t)> on_visit;
  /// Multiplies the loss before differentiation.
  double loss_scale = 1.0;
};

Gradients backward(Tape& tape, const Loss& loss, const BackwardOptions& options = {});

/// d loss / d x for the first input of the tape. Model parameters are untouched.
Tensor input_gradient(Tape& tape, const Loss& loss);

/// Vector-Jacobian product from the output of the last forward op on an open
/// tape (no loss head). Consumes the tape.
Tensor vector_jacobian(Tape& tape, const Tensor& upstream);

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                  double h);

}  // namespace advkit
