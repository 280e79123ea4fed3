#include <cmath>

#include <gtest/gtest.h>

#include "advkit/autodiff.hpp"
#include "advkit/errors.hpp"
#include "advkit/models.hpp"
#include "advkit/rng.hpp"
#include "advkit/tensor.hpp"
#include "helpers.hpp"

using namespace advkit;
using advkit::testing::random_architecture;
using advkit::testing::random_tensor;
using advkit::testing::relative_linf;

namespace {

Tensor naive_matmul(const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::size_t n = x.dim(0), in = x.dim(1), out = w.dim(1);
  Tensor y({n, out});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < out; ++c) {
      double acc = b[c];
      for (std::size_t k = 0; k < in; ++k) acc += x[r * in + k] * w[k * out + c];
      y[r * out + c] = acc;
    }
  }
  return y;
}

}  // namespace

TEST(Tensor, ShapeAndDataAgree) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
  const Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.reshaped({3, 2}).shape(), (Shape{3, 2}));
  EXPECT_THROW(t.reshaped({4, 2}), DimensionError);
}

TEST(Tensor, NormsAndSign) {
  const Tensor t = Tensor::vector({3.0, -4.0, 0.0});
  EXPECT_DOUBLE_EQ(l1_norm(t), 7.0);
  EXPECT_DOUBLE_EQ(l2_norm(t), 5.0);
  EXPECT_DOUBLE_EQ(linf_norm(t), 4.0);
  EXPECT_EQ(sign(0.0), 0.0);
  EXPECT_EQ(sign(-2.0), -1.0);
}

TEST(Tensor, RequireFiniteRejectsNan) {
  Tensor t({2}, 0.0);
  t[1] = std::nan("");
  EXPECT_THROW(require_finite(t, "test"), NumericError);
}

TEST(Dense, IdentityWeights) {
  Tape tape;
  const Tensor x = Tensor::matrix({{1, 2}});
  const Tensor w = Tensor::matrix({{1, 0}, {0, 1}});
  const Tensor b = Tensor::vector({0, 0});
  EXPECT_EQ(forward_dense(x, w, b, tape), x);
}

TEST(Dense, ZeroWeightsPassBias) {
  Tape tape;
  const Tensor w = Tensor::matrix({{0, 0}, {0, 0}});
  EXPECT_EQ(forward_dense(Tensor::matrix({{1, 2}}), w, Tensor::vector({3, 4}), tape), Tensor::matrix({{3, 4}}));
}

TEST(Dense, MatchesNaiveProduct) {
  Rng rng(1);
  const Tensor x = random_tensor(rng, {2, 3});
  const Tensor w = random_tensor(rng, {3, 4});
  const Tensor b = random_tensor(rng, {4});
  Tape tape;
  const Tensor y = forward_dense(x, w, b, tape);
  const Tensor ref = naive_matmul(x, w, b);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-14);
}

TEST(Dense, ShapeMismatchNamesBothShapes) {
  Tape tape;
  try {
    forward_dense(Tensor({1, 3}), Tensor({2, 2}), Tensor({2}), tape);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("(1,3)"), std::string::npos) << what;
    EXPECT_NE(what.find("(2,2)"), std::string::npos) << what;
  }
}

TEST(Conv2d, SumOfOnes) {
  Tape tape;
  const Tensor y = forward_conv2d(Tensor({1, 1, 3, 3}, 1.0), Tensor({1, 1, 3, 3}, 1.0), Tensor({1}), 1, tape);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y[0], 9.0);
}

TEST(Conv2d, DeltaKernelExtractsCenter) {
  Rng rng(2);
  const Tensor x = random_tensor(rng, {1, 1, 5, 5});
  Tensor k({1, 1, 3, 3});
  k[4] = 1.0;
  Tape tape;
  const Tensor y = forward_conv2d(x, k, Tensor({1}), 1, tape);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(y[i * 3 + j], x[(i + 1) * 5 + (j + 1)]);
  }
}

TEST(Conv2d, MatchesNaiveLoops) {
  Rng rng(3);
  const Tensor x = random_tensor(rng, {2, 2, 5, 5});
  const Tensor k = random_tensor(rng, {3, 2, 3, 3});
  const Tensor b = random_tensor(rng, {3});
  for (std::size_t stride : {1u, 2u}) {
    Tape tape;
    const Tensor y = forward_conv2d(x, k, b, stride, tape);
    const std::size_t oh = (5 - 3) / stride + 1;
    ASSERT_EQ(y.shape(), (Shape{2, 3, oh, oh}));
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t o = 0; o < 3; ++o)
        for (std::size_t i = 0; i < oh; ++i)
          for (std::size_t j = 0; j < oh; ++j) {
            double acc = b[o];
            for (std::size_t c = 0; c < 2; ++c)
              for (std::size_t u = 0; u < 3; ++u)
                for (std::size_t v = 0; v < 3; ++v)
                  acc += x[((n * 2 + c) * 5 + i * stride + u) * 5 + j * stride + v] * k[((o * 2 + c) * 3 + u) * 3 + v];
            EXPECT_NEAR(y[((n * 3 + o) * oh + i) * oh + j], acc, 1e-13);
          }
  }
}

TEST(Conv2d, KernelLargerThanInputThrows) {
  Tape tape;
  EXPECT_THROW(forward_conv2d(Tensor({1, 1, 2, 2}), Tensor({1, 1, 3, 3}), Tensor({1}), 1, tape), DimensionError);
}

TEST(Elementwise, ReluMaxpoolFlatten) {
  {
    Tape tape;
    EXPECT_EQ(forward_relu(Tensor::vector({-1, 0, 2}), tape), Tensor::vector({0, 0, 2}));
  }
  {
    Tape tape;
    const Tensor y = forward_maxpool2(Tensor({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4}), tape);
    EXPECT_EQ(y, Tensor({1, 1, 1, 1}, std::vector<double>{4}));
  }
  {
    Tape tape;
    EXPECT_THROW(forward_maxpool2(Tensor({1, 1, 3, 2}), tape), DimensionError);
  }
  {
    Rng rng(4);
    const Tensor x = random_tensor(rng, {2, 3, 4, 4});
    Tape tape;
    const Tensor y = forward_flatten(x, tape);
    EXPECT_EQ(y.shape(), (Shape{2, 48}));
    EXPECT_EQ(y.values(), x.values());
  }
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  for (std::size_t c : {2u, 5u, 10u}) {
    Tape tape;
    const Loss loss = softmax_cross_entropy(Tensor({1, c}), 0, tape);
    EXPECT_NEAR(loss.value, std::log(static_cast<double>(c)), 1e-12);
  }
}

TEST(CrossEntropy, StableForExtremeLogits) {
  Tape tape;
  const Loss loss = softmax_cross_entropy(Tensor::matrix({{1000, 0}}), 0, tape);
  EXPECT_TRUE(std::isfinite(loss.value));
  EXPECT_NEAR(loss.value, 0.0, 1e-300);
  Tape tape2;
  const Loss wrong = softmax_cross_entropy(Tensor::matrix({{1000, 0}}), 1, tape2);
  EXPECT_NEAR(wrong.value, 1000.0, 1e-9);
}

TEST(CrossEntropy, MatchesExtendedPrecision) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor logits = random_tensor(rng, {1, 5}, -20.0, 20.0);
    const auto label = static_cast<std::size_t>(rng.uniform_int(0, 4));
    long double z = 0.0L;
    for (double v : logits.data()) z += std::exp(static_cast<long double>(v));
    const long double expected = std::log(z) - static_cast<long double>(logits[label]);
    Tape tape;
    const Loss loss = softmax_cross_entropy(logits, label, tape);
    EXPECT_NEAR(loss.value, static_cast<double>(expected), 1e-12);
    EXPECT_GE(loss.value, 0.0);
  }
}

TEST(CrossEntropy, LabelOutOfRange) {
  Tape tape;
  EXPECT_THROW(softmax_cross_entropy(Tensor({1, 3}), 3, tape), IndexError);
}

TEST(Backward, SymmetricDenseGradientSumsToZero) {
  // W = I over two features and two classes: d loss / d x = p - onehot, which sums to zero.
  const Tensor w = Tensor::matrix({{1, 0}, {0, 1}});
  const Tensor b = Tensor::vector({0, 0});
  Tape tape;
  const Tensor logits = forward_dense(Tensor::matrix({{0.3, -0.3}}), w, b, tape);
  const Tensor g = input_gradient(tape, softmax_cross_entropy(logits, 0, tape));
  EXPECT_NEAR(g[0] + g[1], 0.0, 1e-15);
}

TEST(Backward, DeadReluBlocksGradient) {
  const Tensor w1 = Tensor::matrix({{1, 0}, {0, 1}});
  const Tensor b1 = Tensor::vector({0, 0});
  const Tensor w2 = Tensor::matrix({{1, -1}, {2, 3}});
  const Tensor b2 = Tensor::vector({0, 0});
  Tape tape;
  Tensor h = forward_dense(Tensor::matrix({{-1.0, 0.5}}), w1, b1, tape);
  h = forward_relu(h, tape);
  const Tensor logits = forward_dense(h, w2, b2, tape);
  const Tensor g = input_gradient(tape, softmax_cross_entropy(logits, 1, tape));
  EXPECT_EQ(g[0], 0.0);
  EXPECT_NE(g[1], 0.0);
}

TEST(Backward, SecondPassIsUsageError) {
  const Tensor w = Tensor::matrix({{1, 0}, {0, 1}});
  const Tensor b = Tensor::vector({0, 0});
  Tape tape;
  const Loss loss = softmax_cross_entropy(forward_dense(Tensor::matrix({{1, 2}}), w, b, tape), 0, tape);
  input_gradient(tape, loss);
  EXPECT_THROW(input_gradient(tape, loss), UsageError);
}

TEST(Backward, LossFromOtherTapeRejected) {
  const Tensor w = Tensor::matrix({{1, 0}, {0, 1}});
  const Tensor b = Tensor::vector({0, 0});
  Tape a, other;
  const Loss la = softmax_cross_entropy(forward_dense(Tensor::matrix({{1, 2}}), w, b, a), 0, a);
  softmax_cross_entropy(forward_dense(Tensor::matrix({{1, 2}}), w, b, other), 0, other);
  EXPECT_THROW(input_gradient(other, la), UsageError);
}

TEST(Backward, ClosedTapeRejectsFurtherOps) {
  const Tensor w = Tensor::matrix({{1, 0}, {0, 1}});
  const Tensor b = Tensor::vector({0, 0});
  Tape tape;
  const Tensor logits = forward_dense(Tensor::matrix({{1, 2}}), w, b, tape);
  softmax_cross_entropy(logits, 0, tape);
  EXPECT_THROW(forward_relu(logits, tape), UsageError);
}

TEST(Backward, VisitsEveryRecordOnceInReverse) {
  Rng rng(6);
  const ModelParams model = init_model(random_architecture(rng), 1);
  Tape tape;
  const Tensor logits = forward_recorded(model, random_tensor(rng, model.input.batch_shape(1), 0, 1), tape);
  const Loss loss = softmax_cross_entropy(logits, 0, tape);
  std::vector<std::size_t> visited;
  backward(tape, loss, {.on_visit = [&](std::size_t i) { visited.push_back(i); }});
  ASSERT_EQ(visited.size(), tape.size());
  for (std::size_t i = 0; i < visited.size(); ++i) EXPECT_EQ(visited[i], tape.size() - 1 - i);
}

TEST(Backward, MatchesFiniteDifferencesOnRandomArchitectures) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const ModelParams model = init_model(random_architecture(rng), 100 + static_cast<std::uint64_t>(trial));
    const Tensor x = random_tensor(rng, model.input.batch_shape(1), 0.0, 1.0);
    const std::size_t labels[] = {static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(model.classes) - 1))};
    const Tensor analytic = loss_and_input_gradient(model, x, labels).grad;
    const Tensor numeric =
        finite_difference_gradient([&](const Tensor& z) { return loss_value(model, z, labels); }, x, 1e-5);
    EXPECT_LT(relative_linf(analytic, numeric), 1e-4) << "trial " << trial;
  }
}

TEST(Backward, IsLinearInTheLoss) {
  // grad(a J1 + b J2) = a grad J1 + b grad J2, using loss_scale for the scalars.
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const ModelParams model = init_model(random_architecture(rng), 200 + static_cast<std::uint64_t>(trial));
    const Tensor x = random_tensor(rng, model.input.batch_shape(1), 0.0, 1.0);
    const double a = rng.uniform(-2, 2), b = rng.uniform(-2, 2);
    auto grad = [&](std::size_t label, double scale) {
      Tape tape;
      const Tensor logits = forward_recorded(model, x, tape);
      return backward(tape, softmax_cross_entropy(logits, label, tape), {.loss_scale = scale}).input;
    };
    const Tensor g1 = grad(0, 1.0), g2 = grad(1, 1.0), ga = grad(0, a), gb = grad(1, b);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(ga[i] + gb[i], a * g1[i] + b * g2[i], 1e-10);
  }
}

TEST(Backward, ParameterGradientsMatchFiniteDifferences) {
  Rng rng(9);
  ModelParams model = init_model(random_architecture(rng), 5);
  const Tensor x = random_tensor(rng, model.input.batch_shape(2), 0.0, 1.0);
  const std::size_t labels[] = {0, 1};
  Tape tape;
  const Tensor logits = forward_recorded(model, x, tape);
  const Gradients grads = backward(tape, softmax_cross_entropy(logits, labels, tape), {.param_grads = true});
  ASSERT_FALSE(grads.params.empty());
  const ParamGrad& pg = grads.params.back();
  Tensor& w = model.weights[pg.record];
  for (std::size_t k = 0; k < std::min<std::size_t>(w.size(), 12); ++k) {
    const double keep = w[k];
    w[k] = keep + 1e-5;
    const double up = loss_value(model, x, labels);
    w[k] = keep - 1e-5;
    const double down = loss_value(model, x, labels);
    w[k] = keep;
    EXPECT_NEAR(pg.weight[k], (up - down) / 2e-5, 1e-7);
  }
}

TEST(Backward, NoOperationMutatesItsInputs) {
  Rng rng(10);
  for (int trial = 0; trial < 10; ++trial) {
    const ModelParams model = init_model(random_architecture(rng), 300 + static_cast<std::uint64_t>(trial));
    const Tensor x = random_tensor(rng, model.input.batch_shape(1), 0.0, 1.0);
    const auto hx = content_hash(x);
    std::vector<std::uint64_t> hw;
    for (const auto& w : model.weights) hw.push_back(content_hash(w));
    Tape tape;
    const Tensor logits = forward_recorded(model, x, tape);
    const auto hl = content_hash(logits);
    backward(tape, softmax_cross_entropy(logits, 0, tape), {.param_grads = true});
    EXPECT_EQ(content_hash(x), hx);
    EXPECT_EQ(content_hash(logits), hl);
    for (std::size_t i = 0; i < hw.size(); ++i) EXPECT_EQ(content_hash(model.weights[i]), hw[i]);
  }
}

TEST(VectorJacobian, MatchesDotProductDerivative) {
  Rng rng(11);
  const ModelParams model = init_model(random_architecture(rng), 9);
  const Tensor x = random_tensor(rng, model.input.batch_shape(1), 0.0, 1.0);
  const Tensor u = random_tensor(rng, {1, model.classes});
  Tape tape;
  const Tensor logits = forward_recorded(model, x, tape);
  const Tensor vjp = vector_jacobian(tape, u);
  const Tensor numeric =
      finite_difference_gradient([&](const Tensor& z) { return dot(forward_logits(model, z), u); }, x, 1e-5);
  EXPECT_LT(relative_linf(vjp, numeric), 1e-6);
  EXPECT_THROW(vector_jacobian(tape, u), UsageError);
}

TEST(FiniteDifference, QuadraticAndConstant) {
  const Tensor x = Tensor::vector({3.0});
  const Tensor g = finite_difference_gradient([](const Tensor& z) { return z[0] * z[0]; }, x, 1e-5);
  EXPECT_NEAR(g[0], 6.0, 1e-8);
  const Tensor c = finite_difference_gradient([](const Tensor&) { return 4.2; }, Tensor::vector({1, 2, 3}), 1e-5);
  for (double v : c.data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(finite_difference_gradient([](const Tensor&) { return 0.0; }, x, 0.0), ConfigError);
}
