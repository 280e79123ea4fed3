#include "advkit/transforms.hpp"

#include <cmath>
#include <fstream>

#include <fmt/format.h>

#include "advkit/errors.hpp"
#include "advkit/models.hpp"

namespace advkit {

namespace {

struct Planes {
  std::size_t count;  // N * C
  std::size_t side;
};

Planes square_planes(const Tensor& x, const char* op) {
  if (x.rank() != 4 || x.dim(2) != x.dim(3)) {
    throw DimensionError(fmt::format("{} expects [N, C, H, H], got {}", op, shape_str(x.shape())));
  }
  return {x.dim(0) * x.dim(1), x.dim(2)};
}

// Copies a rows x cols block from (sy, sx) of src planes to (dy, dx) of a zero canvas.
Tensor move_block(const Tensor& src, std::size_t block, std::size_t sy, std::size_t sx, std::size_t dy,
                  std::size_t dx) {
  const std::size_t planes = src.dim(0) * src.dim(1), side = src.dim(2);
  Tensor out(src.shape());
  for (std::size_t p = 0; p < planes; ++p) {
    const double* in = &src[p * side * side];
    double* o = &out[p * side * side];
    for (std::size_t i = 0; i < block; ++i) {
      for (std::size_t j = 0; j < block; ++j) o[(dy + i) * side + dx + j] = in[(sy + i) * side + sx + j];
    }
  }
  return out;
}

}  // namespace

void CropPadParams::validate() const {
  if (side == 0 || rnd == 0 || rnd > side || crop_y > side - rnd || crop_x > side - rnd || pad_y > side - rnd ||
      pad_x > side - rnd) {
    throw ParameterError(fmt::format("invalid crop/pad params: rnd={} crop=({},{}) pad=({},{}) side={}", rnd, crop_y,
                                     crop_x, pad_y, pad_x, side));
  }
}

std::size_t default_min_crop(std::size_t side) { return side * 279 / 299; }

CropPadParams sample_crop(Rng& rng, std::size_t side, std::size_t min_rnd, CropOffsetMode mode) {
  if (min_rnd > side || min_rnd == 0) {
    throw ConfigError(fmt::format("crop lower bound {} must lie in [1, {}]", min_rnd, side));
  }
  const auto rnd = static_cast<std::size_t>(
      rng.uniform_int(static_cast<std::int64_t>(min_rnd), static_cast<std::int64_t>(side)));
  return place_crop(rng, side, rnd, mode);
}

CropPadParams place_crop(Rng& rng, std::size_t side, std::size_t rnd, CropOffsetMode mode) {
  if (rnd > side || rnd == 0) throw ConfigError(fmt::format("crop side {} must lie in [1, {}]", rnd, side));
  CropPadParams prm;
  prm.side = side;
  prm.rnd = rnd;
  const auto slack = static_cast<std::int64_t>(side - prm.rnd);
  if (mode == CropOffsetMode::centered) {
    prm.crop_y = prm.crop_x = prm.pad_y = prm.pad_x = static_cast<std::size_t>(slack / 2);
  } else {
    prm.crop_y = static_cast<std::size_t>(rng.uniform_int(0, slack));
    prm.crop_x = static_cast<std::size_t>(rng.uniform_int(0, slack));
    prm.pad_y = static_cast<std::size_t>(rng.uniform_int(0, slack));
    prm.pad_x = static_cast<std::size_t>(rng.uniform_int(0, slack));
  }
  return prm;
}

Tensor apply_crop_pad(const Tensor& x, const CropPadParams& prm) {
  prm.validate();
  const auto planes = square_planes(x, "apply_crop_pad");
  if (planes.side != prm.side) {
    throw ParameterError(fmt::format("crop params for side {} applied to side {}", prm.side, planes.side));
  }
  if (prm.is_identity()) return x;
  return move_block(x, prm.rnd, prm.crop_y, prm.crop_x, prm.pad_y, prm.pad_x);
}

Tensor adjoint_crop_pad(const Tensor& g, const CropPadParams& prm) {
  prm.validate();
  const auto planes = square_planes(g, "adjoint_crop_pad");
  if (planes.side != prm.side) {
    throw DimensionError(fmt::format("gradient side {} does not match crop params side {}", planes.side, prm.side));
  }
  if (prm.is_identity()) return g;
  return move_block(g, prm.rnd, prm.pad_y, prm.pad_x, prm.crop_y, prm.crop_x);
}

// ---------------------------------------------------------------------------

namespace {

struct Tap {
  std::size_t lo, hi;
  double w_lo, w_hi;
};

// Source taps for each output index of a corner-aligned resize from -> to.
std::vector<Tap> resize_taps(std::size_t from, std::size_t to) {
  std::vector<Tap> taps(to);
  for (std::size_t i = 0; i < to; ++i) {
    const double src = to > 1 ? static_cast<double>(i) * static_cast<double>(from - 1) / static_cast<double>(to - 1) : 0.0;
    const auto lo = std::min(static_cast<std::size_t>(std::floor(src)), from - 1);
    const double frac = src - static_cast<double>(lo);
    taps[i] = {lo, std::min(lo + 1, from - 1), 1.0 - frac, frac};
  }
  return taps;
}

}  // namespace

Tensor bilinear_resize(const Tensor& x, std::size_t to) {
  const auto planes = square_planes(x, "bilinear_resize");
  const std::size_t from = planes.side;
  if (to == from) return x;
  const auto taps = resize_taps(from, to);
  Tensor out({x.dim(0), x.dim(1), to, to});
  for (std::size_t p = 0; p < planes.count; ++p) {
    const double* in = &x[p * from * from];
    double* o = &out[p * to * to];
    for (std::size_t i = 0; i < to; ++i) {
      const Tap& ty = taps[i];
      for (std::size_t j = 0; j < to; ++j) {
        const Tap& tx = taps[j];
        o[i * to + j] = ty.w_lo * (tx.w_lo * in[ty.lo * from + tx.lo] + tx.w_hi * in[ty.lo * from + tx.hi]) +
                        ty.w_hi * (tx.w_lo * in[ty.hi * from + tx.lo] + tx.w_hi * in[ty.hi * from + tx.hi]);
      }
    }
  }
  return out;
}

Tensor bilinear_resize_adjoint(const Tensor& g, std::size_t from) {
  const auto planes = square_planes(g, "bilinear_resize_adjoint");
  const std::size_t to = planes.side;
  if (to == from) return g;
  const auto taps = resize_taps(from, to);
  Tensor out({g.dim(0), g.dim(1), from, from});
  for (std::size_t p = 0; p < planes.count; ++p) {
    const double* in = &g[p * to * to];
    double* o = &out[p * from * from];
    for (std::size_t i = 0; i < to; ++i) {
      const Tap& ty = taps[i];
      for (std::size_t j = 0; j < to; ++j) {
        const Tap& tx = taps[j];
        const double v = in[i * to + j];
        o[ty.lo * from + tx.lo] += ty.w_lo * tx.w_lo * v;
        o[ty.lo * from + tx.hi] += ty.w_lo * tx.w_hi * v;
        o[ty.hi * from + tx.lo] += ty.w_hi * tx.w_lo * v;
        o[ty.hi * from + tx.hi] += ty.w_hi * tx.w_hi * v;
      }
    }
  }
  return out;
}

void DiverseInputParams::validate() const {
  if (!applied) return;
  if (resized == 0 || resized > side || pad_y > side - resized || pad_x > side - resized) {
    throw ParameterError(fmt::format("invalid diverse-input params: r={} pad=({},{}) side={}", resized, pad_y, pad_x, side));
  }
}

DiverseInputParams sample_diverse_input(Rng& rng, std::size_t side, double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(fmt::format("DIM probability {} outside [0, 1]", p));
  DiverseInputParams prm;
  prm.side = side;
  prm.resized = side;
  if (!rng.bernoulli(p)) return prm;
  prm.applied = true;
  const auto lo = static_cast<std::int64_t>(std::lround(0.9 * static_cast<double>(side)));
  prm.resized = static_cast<std::size_t>(rng.uniform_int(lo, static_cast<std::int64_t>(side)));
  const auto slack = static_cast<std::int64_t>(side - prm.resized);
  prm.pad_y = static_cast<std::size_t>(rng.uniform_int(0, slack));
  prm.pad_x = static_cast<std::size_t>(rng.uniform_int(0, slack));
  return prm;
}

Tensor apply_diverse_input(const Tensor& x, const DiverseInputParams& prm) {
  prm.validate();
  if (!prm.applied) return x;
  const auto planes = square_planes(x, "apply_diverse_input");
  if (planes.side != prm.side) throw ParameterError("diverse-input params do not match image side");
  if (prm.resized == prm.side) return x;  // pad offsets are necessarily zero
  const Tensor small = bilinear_resize(x, prm.resized);
  Tensor out(x.shape());
  const std::size_t r = prm.resized, side = prm.side;
  for (std::size_t p = 0; p < planes.count; ++p) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < r; ++j) {
        out[p * side * side + (prm.pad_y + i) * side + prm.pad_x + j] = small[p * r * r + i * r + j];
      }
    }
  }
  return out;
}

Tensor adjoint_diverse_input(const Tensor& g, const DiverseInputParams& prm) {
  prm.validate();
  if (!prm.applied) return g;
  const auto planes = square_planes(g, "adjoint_diverse_input");
  if (planes.side != prm.side) throw DimensionError("gradient side does not match diverse-input params");
  if (prm.resized == prm.side) return g;
  const std::size_t r = prm.resized, side = prm.side;
  Tensor small({g.dim(0), g.dim(1), r, r});
  for (std::size_t p = 0; p < planes.count; ++p) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < r; ++j) {
        small[p * r * r + i * r + j] = g[p * side * side + (prm.pad_y + i) * side + prm.pad_x + j];
      }
    }
  }
  return bilinear_resize_adjoint(small, side);
}

std::pair<Tensor, DiverseInputParams> apply_diverse_input(const Tensor& x, double p, Rng& rng) {
  const auto side = square_planes(x, "apply_diverse_input").side;
  auto prm = sample_diverse_input(rng, side, p);
  return {apply_diverse_input(x, prm), prm};
}

// ---------------------------------------------------------------------------

ScaleFactor::ScaleFactor(double s) : s_(s) {
  if (!(s > 0.0 && s <= 1.0)) throw ParameterError(fmt::format("scale factor {} outside (0, 1]", s));
}

const char* scale_mode_name(ScaleMode mode) {
  switch (mode) {
    case ScaleMode::off: return "off";
    case ScaleMode::random: return "random";
    case ScaleMode::halving: return "halving";
  }
  return "?";
}

ScaleMode parse_scale_mode(const std::string& name) {
  for (auto mode : {ScaleMode::off, ScaleMode::random, ScaleMode::halving}) {
    if (name == scale_mode_name(mode)) return mode;
  }
  throw ConfigError(fmt::format("unknown scale mode '{}' (off, random, halving)", name));
}

ScaleFactor draw_scale(ScaleMode mode, std::size_t copy, Rng& rng) {
  switch (mode) {
    case ScaleMode::off: return ScaleFactor(1.0);
    case ScaleMode::random: return ScaleFactor(0.1 + 0.9 * (1.0 - rng.uniform()));
    case ScaleMode::halving: return ScaleFactor(std::ldexp(1.0, -static_cast<int>(copy)));
  }
  return ScaleFactor(1.0);
}

Tensor apply_scale(const Tensor& x, ScaleFactor s) {
  if (s.value() == 1.0) return x;
  Tensor out = x;
  for (auto& v : out.data()) v *= s.value();
  return out;
}

// ---------------------------------------------------------------------------

double default_ti_sigma(std::size_t k) { return static_cast<double>(k) / std::sqrt(3.0); }

TiKernel gaussian_kernel(std::size_t k, double sigma) {
  if (k % 2 == 0) throw ParameterError(fmt::format("TI kernel size must be odd, got {}", k));
  if (!(sigma > 0.0)) throw ParameterError(fmt::format("TI kernel sigma must be positive, got {}", sigma));
  TiKernel kernel{k, sigma, std::vector<double>(k * k)};
  const double c = static_cast<double>(k - 1) / 2.0;
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const double di = static_cast<double>(i) - c, dj = static_cast<double>(j) - c;
      const double w = std::exp(-(di * di + dj * dj) / (2.0 * sigma * sigma));
      kernel.weights[i * k + j] = w;
      total += w;
    }
  }
  for (auto& w : kernel.weights) w /= total;
  return kernel;
}

Tensor convolve_gradient(const Tensor& g, const TiKernel& kernel) {
  if (g.rank() != 4) throw DimensionError(fmt::format("convolve_gradient expects [N, C, H, W], got {}", shape_str(g.shape())));
  const std::size_t h = g.dim(2), w = g.dim(3), k = kernel.size;
  if (h < k || w < k) {
    throw DimensionError(fmt::format("gradient {} smaller than {}x{} kernel", shape_str(g.shape()), k, k));
  }
  if (k == 1 && kernel.weights[0] == 1.0) return g;
  const auto c = static_cast<std::ptrdiff_t>(k / 2);
  Tensor out(g.shape());
  const std::size_t planes = g.dim(0) * g.dim(1);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* in = &g[p * h * w];
    double* o = &out[p * h * w];
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
          const auto sy = static_cast<std::ptrdiff_t>(y + i) - c;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t j = 0; j < k; ++j) {
            const auto sx = static_cast<std::ptrdiff_t>(x + j) - c;
            if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) continue;
            acc += kernel.weights[i * k + j] * in[sy * static_cast<std::ptrdiff_t>(w) + sx];
          }
        }
        o[y * w + x] = acc;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<CropCurvePoint> crop_invariance_loss_curve(const ModelParams& model, const Dataset& data,
                                                       const std::vector<std::size_t>& widths, std::uint64_t seed) {
  const std::size_t side = data.geometry.height;
  if (data.geometry.width != side) throw DimensionError("crop probe requires square images");
  std::vector<CropCurvePoint> curve;
  constexpr std::size_t kChunk = 128;
  for (auto width : widths) {
    if (width >= side) throw ConfigError(fmt::format("crop width {} must be below image side {}", width, side));
    double loss_sum = 0.0;
    std::size_t correct = 0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < data.size(); start += kChunk) {
      idx.clear();
      for (std::size_t i = start; i < std::min(data.size(), start + kChunk); ++i) idx.push_back(i);
      std::vector<Tensor> cropped;
      for (auto i : idx) {
        Rng rng = Rng::derive(seed, i, 0x100 + width);
        cropped.push_back(apply_crop_pad(data.image(i), place_crop(rng, side, side - width)));
      }
      const Tensor batch = stack_batch(cropped);
      const auto labels = data.gather_labels(idx);
      const Tensor logits = forward_logits(model, batch);
      const auto pred = argmax_rows(logits);
      for (std::size_t j = 0; j < idx.size(); ++j) {
        Tape tape;
        const Tensor row = logits.slice_batch(j);
        loss_sum += softmax_cross_entropy(row, labels[j], tape).value;
        correct += pred[j] == labels[j];
      }
    }
    const auto n = static_cast<double>(data.size());
    curve.push_back({width, loss_sum / n, static_cast<double>(correct) / n});
  }
  return curve;
}

std::string crop_curve_csv(const std::vector<CropCurvePoint>& curve) {
  std::string out = "width,mean_loss,mean_accuracy\n";
  for (const auto& pt : curve) out += fmt::format("{},{:.9f},{:.6f}\n", pt.width, pt.mean_loss, pt.mean_accuracy);
  return out;
}

void write_crop_curve_csv(const std::vector<CropCurvePoint>& curve, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(fmt::format("cannot open '{}' for writing", path.string()));
  out << crop_curve_csv(curve);
  if (!out) throw IoError(fmt::format("write to '{}' failed", path.string()));
}

}  // namespace advkit
