#include "advkit/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

#include <fmt/format.h>

#include "advkit/errors.hpp"

namespace advkit {

namespace {

std::atomic<std::uint64_t> next_tape_id{1};

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError(fmt::format("{} expects rank {} but got shape {}", what, rank,
                                     shape_str(t.shape())));
  }
}

}  // namespace

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::dense: return "dense";
    case OpKind::conv2d: return "conv2d";
    case OpKind::relu: return "relu";
    case OpKind::maxpool2: return "maxpool2";
    case OpKind::flatten: return "flatten";
    case OpKind::softmax_cross_entropy: return "softmax_cross_entropy";
  }
  return "?";
}

Tape::Tape() : id_(next_tape_id.fetch_add(1, std::memory_order_relaxed)) {}

void Tape::append(TapeRecord record) {
  if (closed_) throw UsageError("tape already closed by a loss; start a new tape for a new forward pass");
  if (!records_.empty() && records_.back().output_shape != record.input.shape()) {
    throw UsageError(fmt::format("{} input {} does not continue the chain (previous output {})",
                                 op_name(record.kind), shape_str(record.input.shape()),
                                 shape_str(records_.back().output_shape)));
  }
  records_.push_back(std::move(record));
}

Tensor forward_dense(const Tensor& x, const Tensor& weight, const Tensor& bias, Tape& tape) {
  require_rank(x, 2, "dense input");
  require_rank(weight, 2, "dense weight");
  require_rank(bias, 1, "dense bias");
  const std::size_t n = x.dim(0), in = x.dim(1), out = weight.dim(1);
  if (weight.dim(0) != in || bias.dim(0) != out) {
    throw DimensionError(fmt::format("dense: input {} does not conform with weight {} / bias {}",
                                     shape_str(x.shape()), shape_str(weight.shape()),
                                     shape_str(bias.shape())));
  }
  Tensor y({n, out});
  for (std::size_t r = 0; r < n; ++r) {
    double* yr = &y[r * out];
    for (std::size_t j = 0; j < out; ++j) yr[j] = bias[j];
    for (std::size_t k = 0; k < in; ++k) {
      const double xv = x[r * in + k];
      if (xv == 0.0) continue;
      const double* wk = &weight[k * out];
      for (std::size_t j = 0; j < out; ++j) yr[j] += xv * wk[j];
    }
  }
  require_finite(y, "forward_dense");
  tape.append({.kind = OpKind::dense, .input = x, .weight = &weight, .bias = &bias, .output_shape = y.shape()});
  return y;
}

Tensor forward_conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t stride,
                      Tape& tape) {
  require_rank(x, 4, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  require_rank(bias, 1, "conv2d bias");
  if (stride == 0) throw DimensionError("conv2d stride must be positive");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t o = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != c || bias.dim(0) != o) {
    throw DimensionError(fmt::format("conv2d: input {} does not conform with kernel {} / bias {}",
                                     shape_str(x.shape()), shape_str(kernel.shape()),
                                     shape_str(bias.shape())));
  }
  if (kh > h || kw > w) {
    throw DimensionError(fmt::format("conv2d: kernel {} larger than input {}", shape_str(kernel.shape()),
                                     shape_str(x.shape())));
  }
  const std::size_t oh = (h - kh) / stride + 1, ow = (w - kw) / stride + 1;
  Tensor y({n, o, oh, ow});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t oc = 0; oc < o; ++oc) {
      double* yp = &y[((b * o + oc) * oh) * ow];
      std::fill(yp, yp + oh * ow, bias[oc]);
      for (std::size_t ic = 0; ic < c; ++ic) {
        const double* xp = &x[((b * c + ic) * h) * w];
        const double* kp = &kernel[((oc * c + ic) * kh) * kw];
        for (std::size_t i = 0; i < kh; ++i) {
          for (std::size_t j = 0; j < kw; ++j) {
            const double kv = kp[i * kw + j];
            for (std::size_t oy = 0; oy < oh; ++oy) {
              const double* xrow = xp + (oy * stride + i) * w + j;
              double* yrow = yp + oy * ow;
              for (std::size_t ox = 0; ox < ow; ++ox) yrow[ox] += kv * xrow[ox * stride];
            }
          }
        }
      }
    }
  }
  require_finite(y, "forward_conv2d");
  tape.append({.kind = OpKind::conv2d,
               .input = x,
               .weight = &kernel,
               .bias = &bias,
               .stride = stride,
               .output_shape = y.shape()});
  return y;
}

Tensor forward_relu(const Tensor& x, Tape& tape) {
  Tensor y = x;
  for (auto& v : y.data()) v = v > 0.0 ? v : 0.0;
  tape.append({.kind = OpKind::relu, .input = x, .output_shape = y.shape()});
  return y;
}

Tensor forward_maxpool2(const Tensor& x, Tape& tape) {
  require_rank(x, 4, "maxpool2 input");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw DimensionError(fmt::format("maxpool2 requires even spatial dims, got {}", shape_str(x.shape())));
  }
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor y({n, c, oh, ow});
  std::vector<std::size_t> argmax(y.size());
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = base + (2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = base + (2 * oy + dy) * w + 2 * ox + dx;
            if (x[idx] > x[best]) best = idx;
          }
        }
        const std::size_t out = (plane * oh + oy) * ow + ox;
        y[out] = x[best];
        argmax[out] = best;
      }
    }
  }
  tape.append({.kind = OpKind::maxpool2, .input = x, .output_shape = y.shape(), .argmax = std::move(argmax)});
  return y;
}

Tensor forward_flatten(const Tensor& x, Tape& tape) {
  if (x.rank() < 1) throw DimensionError("flatten of a scalar");
  const std::size_t n = x.dim(0);
  Tensor y = x.reshaped({n, x.size() / n});
  tape.append({.kind = OpKind::flatten, .input = x, .output_shape = y.shape()});
  return y;
}

Loss softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels, Tape& tape) {
  require_rank(logits, 2, "softmax_cross_entropy logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) {
    throw DimensionError(fmt::format("softmax_cross_entropy: {} labels for batch of {}", labels.size(), n));
  }
  Tensor probs({n, k});
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] >= k) {
      throw IndexError(fmt::format("label {} out of range for {} classes", labels[r], k));
    }
    const double* row = &logits[r * k];
    const double peak = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - peak);
    const double lse = peak + std::log(z);
    for (std::size_t j = 0; j < k; ++j) probs[r * k + j] = std::exp(row[j] - peak) / z;
    total += std::max(0.0, lse - row[labels[r]]);
  }
  const double value = total / static_cast<double>(n);
  if (!std::isfinite(value)) throw NumericError("non-finite cross-entropy");
  tape.append({.kind = OpKind::softmax_cross_entropy,
               .input = logits,
               .output_shape = {1},
               .probs = std::move(probs),
               .labels = std::vector<std::size_t>(labels.begin(), labels.end())});
  tape.close();
  return {value, tape.id()};
}

Loss softmax_cross_entropy(const Tensor& logits, std::size_t label, Tape& tape) {
  const std::size_t labels[] = {label};
  return softmax_cross_entropy(logits, std::span<const std::size_t>(labels), tape);
}

namespace {

// Backpropagates `grad` (w.r.t. records[last] output) down to the tape input.
Gradients run_backward(Tape& tape, std::size_t last, Tensor grad, const BackwardOptions& options) {
  const auto& records = tape.records();
  Gradients out;
  for (std::size_t step = last + 1; step-- > 0;) {
    const TapeRecord& rec = records[step];
    if (options.on_visit) options.on_visit(step);
    const Tensor& x = rec.input;
    Tensor gx(x.shape());
    switch (rec.kind) {
      case OpKind::softmax_cross_entropy: {
        const std::size_t n = x.dim(0), k = x.dim(1);
        const double scale = grad[0] / static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t j = 0; j < k; ++j) {
            const double target = j == rec.labels[r] ? 1.0 : 0.0;
            gx[r * k + j] = scale * (rec.probs[r * k + j] - target);
          }
        }
        break;
      }
      case OpKind::dense: {
        const Tensor& w = *rec.weight;
        const std::size_t n = x.dim(0), in = x.dim(1), outf = w.dim(1);
        for (std::size_t r = 0; r < n; ++r) {
          const double* gr = &grad[r * outf];
          for (std::size_t k = 0; k < in; ++k) {
            const double* wk = &w[k * outf];
            double acc = 0.0;
            for (std::size_t j = 0; j < outf; ++j) acc += gr[j] * wk[j];
            gx[r * in + k] = acc;
          }
        }
        if (options.param_grads) {
          ParamGrad pg{step, Tensor(w.shape()), Tensor(rec.bias->shape())};
          for (std::size_t r = 0; r < n; ++r) {
            const double* gr = &grad[r * outf];
            for (std::size_t j = 0; j < outf; ++j) pg.bias[j] += gr[j];
            for (std::size_t k = 0; k < in; ++k) {
              const double xv = x[r * in + k];
              if (xv == 0.0) continue;
              double* gw = &pg.weight[k * outf];
              for (std::size_t j = 0; j < outf; ++j) gw[j] += xv * gr[j];
            }
          }
          out.params.push_back(std::move(pg));
        }
        break;
      }
      case OpKind::conv2d: {
        const Tensor& kernel = *rec.weight;
        const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
        const std::size_t o = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
        const std::size_t oh = rec.output_shape[2], ow = rec.output_shape[3], s = rec.stride;
        ParamGrad pg;
        if (options.param_grads) pg = {step, Tensor(kernel.shape()), Tensor(rec.bias->shape())};
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t oc = 0; oc < o; ++oc) {
            const double* gp = &grad[((b * o + oc) * oh) * ow];
            if (options.param_grads) {
              for (std::size_t i = 0; i < oh * ow; ++i) pg.bias[oc] += gp[i];
            }
            for (std::size_t ic = 0; ic < c; ++ic) {
              double* gxp = &gx[((b * c + ic) * h) * w];
              const double* xp = &x[((b * c + ic) * h) * w];
              const double* kp = &kernel[((oc * c + ic) * kh) * kw];
              double* gkp = options.param_grads ? &pg.weight[((oc * c + ic) * kh) * kw] : nullptr;
              for (std::size_t i = 0; i < kh; ++i) {
                for (std::size_t j = 0; j < kw; ++j) {
                  const double kv = kp[i * kw + j];
                  double kacc = 0.0;
                  for (std::size_t oy = 0; oy < oh; ++oy) {
                    const std::size_t row = (oy * s + i) * w + j;
                    const double* grow = gp + oy * ow;
                    double* gxrow = gxp + row;
                    for (std::size_t ox = 0; ox < ow; ++ox) gxrow[ox * s] += kv * grow[ox];
                    if (gkp) {
                      const double* xrow = xp + row;
                      for (std::size_t ox = 0; ox < ow; ++ox) kacc += grow[ox] * xrow[ox * s];
                    }
                  }
                  if (gkp) gkp[i * kw + j] += kacc;
                }
              }
            }
          }
        }
        if (options.param_grads) out.params.push_back(std::move(pg));
        break;
      }
      case OpKind::relu:
        for (std::size_t i = 0; i < x.size(); ++i) gx[i] = x[i] > 0.0 ? grad[i] : 0.0;
        break;
      case OpKind::maxpool2:
        for (std::size_t i = 0; i < rec.argmax.size(); ++i) gx[rec.argmax[i]] += grad[i];
        break;
      case OpKind::flatten:
        gx = grad.reshaped(x.shape());
        break;
    }
    grad = std::move(gx);
  }
  std::reverse(out.params.begin(), out.params.end());
  require_finite(grad, "backward");
  out.input = std::move(grad);
  return out;
}

}  // namespace

Gradients backward(Tape& tape, const Loss& loss, const BackwardOptions& options) {
  if (loss.tape_id != tape.id()) throw UsageError("loss was not produced by this tape");
  if (tape.consumed()) throw UsageError("tape already used for a backward pass");
  if (!tape.closed()) throw UsageError("tape has no loss head");
  tape.mark_consumed();
  return run_backward(tape, tape.size() - 1, Tensor({1}, options.loss_scale), options);
}

Tensor input_gradient(Tape& tape, const Loss& loss) { return backward(tape, loss).input; }

Tensor vector_jacobian(Tape& tape, const Tensor& upstream) {
  if (tape.consumed()) throw UsageError("tape already used for a backward pass");
  if (tape.closed()) throw UsageError("vector_jacobian expects a tape without a loss head");
  if (tape.size() == 0) throw UsageError("empty tape");
  if (upstream.shape() != tape.records().back().output_shape) {
    throw DimensionError(fmt::format("upstream {} does not match output {}", shape_str(upstream.shape()),
                                     shape_str(tape.records().back().output_shape)));
  }
  tape.mark_consumed();
  return run_backward(tape, tape.size() - 1, upstream, {}).input;
}

Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                  double h) {
  if (!(h > 0.0)) throw ConfigError(fmt::format("finite-difference step must be positive, got {}", h));
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double up = f(probe);
    probe[i] = x[i] - h;
    const double down = f(probe);
    probe[i] = x[i];
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

}  // namespace advkit
