#pragma once

// Loss-preserving input transformations used by the attack engine. Each one
// is linear in its input and comes with an exact adjoint, so input gradients
// chain through it: grad_x J(T(x)) = T^T grad J.
//
// All transforms act on the two trailing (spatial) axes of a [N, C, H, H]
// tensor and assume square images.

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "advkit/dataset.hpp"
#include "advkit/rng.hpp"
#include "advkit/tensor.hpp"

namespace advkit {

struct ModelParams;

// ---------------------------------------------------------------------------
// Crop and pad

enum class CropOffsetMode { uniform, centered };

/// Crop an rnd x rnd window at (crop_y, crop_x) and paste it at (pad_y, pad_x)
/// of an all-zero side x side canvas.
struct CropPadParams {
  std::size_t rnd = 0;
  std::size_t crop_y = 0, crop_x = 0;
  std::size_t pad_y = 0, pad_x = 0;
  std::size_t side = 0;

  static CropPadParams identity(std::size_t side) { return {side, 0, 0, 0, 0, side}; }
  bool is_identity() const noexcept { return rnd == side; }
  /// Throws ParameterError on invariant violation.
  void validate() const;
  friend bool operator==(const CropPadParams&, const CropPadParams&) = default;
};

/// Proportional lower bound on the crop side: floor(side * 279 / 299).
std::size_t default_min_crop(std::size_t side);

/// rnd uniform on [min_rnd, side]; offsets uniform on [0, side - rnd].
CropPadParams sample_crop(Rng& rng, std::size_t side, std::size_t min_rnd,
                          CropOffsetMode mode = CropOffsetMode::uniform);

/// Fixed crop side `rnd`; only the offsets are drawn.
CropPadParams place_crop(Rng& rng, std::size_t side, std::size_t rnd, CropOffsetMode mode = CropOffsetMode::uniform);

Tensor apply_crop_pad(const Tensor& x, const CropPadParams& prm);
Tensor adjoint_crop_pad(const Tensor& g, const CropPadParams& prm);

// ---------------------------------------------------------------------------
// Diverse input: shrink by bilinear resize, then zero-pad back

struct DiverseInputParams {
  bool applied = false;
  std::size_t resized = 0;  // r
  std::size_t pad_y = 0, pad_x = 0;
  std::size_t side = 0;

  void validate() const;
  friend bool operator==(const DiverseInputParams&, const DiverseInputParams&) = default;
};

/// Applied with probability p; r uniform on [round(0.9 * side), side].
DiverseInputParams sample_diverse_input(Rng& rng, std::size_t side, double p);

Tensor apply_diverse_input(const Tensor& x, const DiverseInputParams& prm);
Tensor adjoint_diverse_input(const Tensor& g, const DiverseInputParams& prm);

/// Draws parameters from `rng` and applies them.
std::pair<Tensor, DiverseInputParams> apply_diverse_input(const Tensor& x, double p, Rng& rng);

/// Corner-aligned bilinear resize of the spatial axes from `from` to `to` pixels.
Tensor bilinear_resize(const Tensor& x, std::size_t to);
/// Exact transpose of bilinear_resize(., to) for an input side of `from`.
Tensor bilinear_resize_adjoint(const Tensor& g, std::size_t from);

// ---------------------------------------------------------------------------
// Scale

/// Multiplicative factor in (0, 1].
class ScaleFactor {
 public:
  explicit ScaleFactor(double s);
  double value() const noexcept { return s_; }

 private:
  double s_;
};

enum class ScaleMode { off, random, halving };

const char* scale_mode_name(ScaleMode mode);
ScaleMode parse_scale_mode(const std::string& name);

/// Factor for copy `copy`: random draws uniform [0.1, 1]; halving gives 1 / 2^copy.
ScaleFactor draw_scale(ScaleMode mode, std::size_t copy, Rng& rng);

/// Elementwise s * x. Self-adjoint.
Tensor apply_scale(const Tensor& x, ScaleFactor s);

// ---------------------------------------------------------------------------
// Translation-invariant gradient smoothing

struct TiKernel {
  std::size_t size = 1;
  double sigma = 1.0;
  std::vector<double> weights;  // size x size, row-major

  double at(std::size_t i, std::size_t j) const { return weights[i * size + j]; }
};

/// Normalized Gaussian; k must be odd, sigma positive.
TiKernel gaussian_kernel(std::size_t k, double sigma);

/// sigma used when none is configured: k / sqrt(3).
double default_ti_sigma(std::size_t k);

/// Per-channel same-size convolution with zero boundary extension.
Tensor convolve_gradient(const Tensor& g, const TiKernel& kernel);

// ---------------------------------------------------------------------------
// Crop-invariance probe

struct CropCurvePoint {
  std::size_t width = 0;
  double mean_loss = 0.0;
  double mean_accuracy = 0.0;
};

/// For each width w, crops every image to (side - w) at a random offset and
/// pads it back at a random offset, then averages loss and accuracy. Draws
/// come from streams keyed on (seed, image, width).
std::vector<CropCurvePoint> crop_invariance_loss_curve(const ModelParams& model, const Dataset& data,
                                                       const std::vector<std::size_t>& widths, std::uint64_t seed);

/// CSV with header `width,mean_loss,mean_accuracy`.
void write_crop_curve_csv(const std::vector<CropCurvePoint>& curve, const std::filesystem::path& path);
std::string crop_curve_csv(const std::vector<CropCurvePoint>& curve);

}  // namespace advkit
