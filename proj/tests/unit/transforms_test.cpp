#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "advkit/dataset.hpp"
#include "advkit/errors.hpp"
#include "advkit/models.hpp"
#include "advkit/transforms.hpp"
#include "helpers.hpp"

using namespace advkit;
using advkit::testing::random_tensor;

namespace {

std::size_t nonzero_count(const Tensor& t) {
  std::size_t n = 0;
  for (double v : t.data()) n += v != 0.0;
  return n;
}

// <A x, y> == <x, A^T y> for random x, y.
template <typename Fwd, typename Adj>
void expect_adjoint(Rng& rng, const Shape& in, const Fwd& fwd, const Adj& adj) {
  const Tensor x = random_tensor(rng, in);
  const Tensor ax = fwd(x);
  const Tensor y = random_tensor(rng, ax.shape());
  const double lhs = dot(ax, y);
  const double rhs = dot(x, adj(y));
  EXPECT_NEAR(lhs, rhs, 1e-10 * (1.0 + std::abs(lhs)));
}

}  // namespace

TEST(CropPad, DefaultLowerBound) {
  EXPECT_EQ(default_min_crop(299), 279u);
  EXPECT_EQ(default_min_crop(28), 26u);
}

TEST(CropPad, SampledSideCoversTheRange) {
  Rng rng(1);
  std::set<std::size_t> seen;
  for (int i = 0; i < 500; ++i) {
    const CropPadParams p = sample_crop(rng, 28, default_min_crop(28));
    p.validate();
    seen.insert(p.rnd);
    EXPECT_LE(p.crop_y + p.rnd, 28u);
    EXPECT_LE(p.pad_x + p.rnd, 28u);
  }
  EXPECT_EQ(seen, (std::set<std::size_t>{26, 27, 28}));
  EXPECT_THROW(sample_crop(rng, 28, 29), ConfigError);
  EXPECT_THROW(sample_crop(rng, 28, 0), ConfigError);
}

TEST(CropPad, CenteredOffsets) {
  Rng rng(1);
  const CropPadParams p = place_crop(rng, 10, 6, CropOffsetMode::centered);
  EXPECT_EQ(p.crop_y, 2u);
  EXPECT_EQ(p.pad_x, 2u);
}

TEST(CropPad, IdentityAndInvalidParams) {
  Rng rng(2);
  const Tensor x = random_tensor(rng, {1, 2, 5, 5});
  EXPECT_EQ(apply_crop_pad(x, CropPadParams::identity(5)), x);
  EXPECT_THROW((CropPadParams{4, 2, 0, 0, 0, 5}).validate(), ParameterError);
  EXPECT_THROW(apply_crop_pad(x, CropPadParams::identity(6)), ParameterError);
}

TEST(CropPad, HandExampleMovesTheWindow) {
  Tensor x({1, 1, 3, 3});
  for (std::size_t i = 0; i < 9; ++i) x[i] = static_cast<double>(i + 1);
  // Take the bottom-right 2x2 and paste it in the top-left corner.
  const Tensor y = apply_crop_pad(x, {2, 1, 1, 0, 0, 3});
  EXPECT_EQ(y.values(), (std::vector<double>{5, 6, 0, 8, 9, 0, 0, 0, 0}));
}

TEST(CropPad, RowAndColumnOffsetsAreNotSwapped) {
  Tensor x({1, 1, 3, 3});
  for (std::size_t i = 0; i < 9; ++i) x[i] = static_cast<double>(i + 1);
  // Window rows 1-2, columns 0-1, pasted at row 0, column 1.
  const Tensor y = apply_crop_pad(x, {2, 1, 0, 0, 1, 3});
  EXPECT_EQ(y.values(), (std::vector<double>{0, 4, 5, 0, 7, 8, 0, 0, 0}));
}

TEST(CropPad, OutputKeepsExactlyTheWindowedPixels) {
  Rng rng(3);
  const Tensor x = random_tensor(rng, {1, 1, 28, 28}, 0.5, 1.0);
  for (int i = 0; i < 50; ++i) {
    const CropPadParams p = sample_crop(rng, 28, 20);
    EXPECT_EQ(nonzero_count(apply_crop_pad(x, p)), p.rnd * p.rnd);
  }
}

TEST(CropPad, AdjointIdentityOverRandomDraws) {
  Rng rng(4);
  for (int trial = 0; trial < 1000; ++trial) {
    const CropPadParams p = sample_crop(rng, 9, 5);
    expect_adjoint(
        rng, {1, 2, 9, 9}, [&](const Tensor& t) { return apply_crop_pad(t, p); },
        [&](const Tensor& t) { return adjoint_crop_pad(t, p); });
  }
}

TEST(DiverseInput, ZeroProbabilityIsIdentity) {
  Rng rng(5);
  const Tensor x = random_tensor(rng, {1, 1, 12, 12});
  for (int i = 0; i < 100; ++i) {
    const auto [y, prm] = apply_diverse_input(x, 0.0, rng);
    EXPECT_FALSE(prm.applied);
    EXPECT_EQ(y, x);
  }
}

TEST(DiverseInput, ApplicationFrequencyMatchesProbability) {
  Rng rng(6);
  int applied = 0;
  constexpr int kTrials = 10000;
  for (int i = 0; i < kTrials; ++i) applied += sample_diverse_input(rng, 28, 0.5).applied;
  EXPECT_NEAR(static_cast<double>(applied) / kTrials, 0.5, 0.02);
}

TEST(DiverseInput, ResizedSideWithinRange) {
  Rng rng(7);
  for (int i = 0; i < 200; ++i) {
    const auto p = sample_diverse_input(rng, 28, 1.0);
    ASSERT_TRUE(p.applied);
    EXPECT_GE(p.resized, 25u);  // round(0.9 * 28)
    EXPECT_LE(p.resized, 28u);
    EXPECT_LE(p.pad_y + p.resized, 28u);
  }
  EXPECT_THROW(sample_diverse_input(rng, 28, 1.5), ConfigError);
}

TEST(DiverseInput, ResizeOfConstantImageStaysConstant) {
  const Tensor x({1, 1, 10, 10}, 0.25);
  const Tensor y = bilinear_resize(x, 7);
  for (double v : y.data()) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(DiverseInput, ResizeMatchesHandInterpolation) {
  // Corner-aligned 2 -> 3: the middle sample sits exactly halfway.
  const Tensor x({1, 1, 2, 2}, std::vector<double>{0, 2, 4, 6});
  const Tensor y = bilinear_resize(x, 3);
  EXPECT_EQ(y.values(), (std::vector<double>{0, 1, 2, 2, 3, 4, 4, 5, 6}));
}

TEST(DiverseInput, ResizeAndFullTransformAdjoints) {
  Rng rng(8);
  for (std::size_t to : {5u, 7u, 9u, 12u}) {
    expect_adjoint(
        rng, {2, 1, 9, 9}, [&](const Tensor& t) { return bilinear_resize(t, to); },
        [&](const Tensor& t) { return bilinear_resize_adjoint(t, 9); });
  }
  for (int trial = 0; trial < 200; ++trial) {
    const auto p = sample_diverse_input(rng, 14, 0.7);
    expect_adjoint(
        rng, {1, 1, 14, 14}, [&](const Tensor& t) { return apply_diverse_input(t, p); },
        [&](const Tensor& t) { return adjoint_diverse_input(t, p); });
  }
}

TEST(Scale, FactorBoundsAndApplication) {
  EXPECT_THROW(ScaleFactor(0.0), ParameterError);
  EXPECT_THROW(ScaleFactor(1.01), ParameterError);
  const Tensor x = Tensor::vector({0.2, -0.4, 1.0});
  EXPECT_EQ(apply_scale(x, ScaleFactor(0.5)).values(), (std::vector<double>{0.1, -0.2, 0.5}));
  EXPECT_EQ(apply_scale(x, ScaleFactor(1.0)), x);
}

TEST(Scale, HalvingAndRandomDraws) {
  Rng rng(9);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(draw_scale(ScaleMode::halving, i, rng).value(), std::ldexp(1.0, -int(i)));
  for (int i = 0; i < 1000; ++i) {
    const double s = draw_scale(ScaleMode::random, 0, rng).value();
    EXPECT_GE(s, 0.1);
    EXPECT_LE(s, 1.0);
  }
  EXPECT_EQ(draw_scale(ScaleMode::off, 3, rng).value(), 1.0);
  EXPECT_EQ(parse_scale_mode("halving"), ScaleMode::halving);
  EXPECT_THROW(parse_scale_mode("double"), ConfigError);
}

TEST(GaussianKernel, UnitSizeIsOne) {
  const TiKernel k = gaussian_kernel(1, 0.3);
  ASSERT_EQ(k.weights.size(), 1u);
  EXPECT_EQ(k.weights[0], 1.0);
}

TEST(GaussianKernel, NormalizedAndSymmetric) {
  const TiKernel k = gaussian_kernel(7, default_ti_sigma(7));
  double total = 0.0;
  for (double w : k.weights) total += w;
  EXPECT_NEAR(total, 1.0, 1e-12);
  for (std::size_t i = 0; i < 7; ++i) {
    for (std::size_t j = 0; j < 7; ++j) {
      EXPECT_DOUBLE_EQ(k.at(i, j), k.at(j, i));
      EXPECT_DOUBLE_EQ(k.at(i, j), k.at(6 - i, j));
    }
  }
  EXPECT_GT(k.at(3, 3), k.at(3, 2));
}

TEST(GaussianKernel, HandTableForThreeByThree) {
  // With sigma 1 the unnormalized weights are 1, e^-1/2, e^-1 by ring.
  const double a = 1.0, b = std::exp(-0.5), c = std::exp(-1.0);
  const double z = a + 4 * b + 4 * c;
  const TiKernel k = gaussian_kernel(3, 1.0);
  EXPECT_NEAR(k.at(1, 1), a / z, 1e-15);
  EXPECT_NEAR(k.at(0, 1), b / z, 1e-15);
  EXPECT_NEAR(k.at(0, 0), c / z, 1e-15);
  EXPECT_NEAR(k.at(1, 1), 0.2041799555716581, 1e-12);
}

TEST(GaussianKernel, InvalidParameters) {
  EXPECT_THROW(gaussian_kernel(4, 1.0), ParameterError);
  EXPECT_THROW(gaussian_kernel(3, 0.0), ParameterError);
  EXPECT_NEAR(default_ti_sigma(15), 15.0 / std::sqrt(3.0), 1e-15);
}

TEST(Convolve, UnitKernelIsIdentity) {
  Rng rng(10);
  const Tensor g = random_tensor(rng, {2, 3, 6, 6});
  EXPECT_EQ(convolve_gradient(g, gaussian_kernel(1, 1.0)), g);
}

TEST(Convolve, MatchesNaiveLoop) {
  Rng rng(11);
  const Tensor g = random_tensor(rng, {1, 2, 6, 5});
  const TiKernel k = gaussian_kernel(3, 0.8);
  const Tensor out = convolve_gradient(g, k);
  for (std::size_t c = 0; c < 2; ++c) {
    for (long y = 0; y < 6; ++y) {
      for (long x = 0; x < 5; ++x) {
        double acc = 0.0;
        for (long dy = -1; dy <= 1; ++dy) {
          for (long dx = -1; dx <= 1; ++dx) {
            const long yy = y + dy, xx = x + dx;
            if (yy < 0 || yy >= 6 || xx < 0 || xx >= 5) continue;
            acc += k.at(std::size_t(dy + 1), std::size_t(dx + 1)) * g[(c * 6 + std::size_t(yy)) * 5 + std::size_t(xx)];
          }
        }
        EXPECT_NEAR(out[(c * 6 + std::size_t(y)) * 5 + std::size_t(x)], acc, 1e-14);
      }
    }
  }
}

TEST(Convolve, LinearAndSizeChecked) {
  Rng rng(12);
  const Tensor a = random_tensor(rng, {1, 1, 8, 8});
  const Tensor b = random_tensor(rng, {1, 1, 8, 8});
  const TiKernel k = gaussian_kernel(5, 1.5);
  Tensor combo = a;
  for (std::size_t i = 0; i < combo.size(); ++i) combo[i] = 2.0 * a[i] - 3.0 * b[i];
  const Tensor lhs = convolve_gradient(combo, k);
  const Tensor ca = convolve_gradient(a, k), cb = convolve_gradient(b, k);
  for (std::size_t i = 0; i < lhs.size(); ++i) EXPECT_NEAR(lhs[i], 2.0 * ca[i] - 3.0 * cb[i], 1e-13);
  EXPECT_THROW(convolve_gradient(Tensor({1, 1, 4, 4}), k), DimensionError);
}

TEST(CropProbe, ZeroWidthMatchesCleanLoss) {
  SynthConfig sc;
  sc.per_class = 4;
  sc.geometry = {1, 12, 12};
  const Dataset data = synth_dataset(sc);
  const ModelParams m = init_model({"m", {LayerSpec::flatten(), LayerSpec::dense(144, 10)}, {1, 12, 12}, 10}, 3);
  const auto curve = crop_invariance_loss_curve(m, data, {0, 2, 4}, 5);
  ASSERT_EQ(curve.size(), 3u);
  EXPECT_EQ(curve[1].width, 2u);
  EXPECT_NEAR(curve[0].mean_loss, loss_value(m, data.images, data.labels), 1e-12);
  EXPECT_DOUBLE_EQ(curve[0].mean_accuracy, accuracy(m, data));
  EXPECT_EQ(crop_invariance_loss_curve(m, data, {0, 2, 4}, 5)[2].mean_loss, curve[2].mean_loss);
  EXPECT_THROW(crop_invariance_loss_curve(m, data, {12}, 5), ConfigError);
  EXPECT_EQ(crop_curve_csv(curve).rfind("width,mean_loss,mean_accuracy\n", 0), 0u);
}
