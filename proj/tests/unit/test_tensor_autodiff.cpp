#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "fd.hpp"
#include "pidm/ops.hpp"

using namespace pidm;
using pidm::testing::gradient_error;
using pidm::testing::random_tensor;

namespace {

constexpr double kTol = 1e-6;

Var weighted_sum(Tape& tape, const Var& y, std::uint64_t seed = 99) {
  // A random linear functional so every output element gets a distinct cotangent.
  return sum(y * tape.constant(random_tensor(y.shape(), seed)));
}

}  // namespace

TEST(Tensor, ShapeAndIndexing) {
  Tensor t(Shape{2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  t(1, 2) = 4.0;
  EXPECT_DOUBLE_EQ(t[5], 4.0);
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(t.reshaped(Shape{4}), ShapeError);
  EXPECT_EQ(t.reshaped(Shape{3, 2}).dim(0), 3u);
  EXPECT_DOUBLE_EQ(Tensor::scalar(2.5).item(), 2.5);
  EXPECT_THROW((void)t.item(), ShapeError);
}

TEST(Tensor, FiniteCheck) {
  Tensor t(Shape{3});
  EXPECT_TRUE(t.all_finite());
  t[1] = std::numeric_limits<double>::infinity();
  EXPECT_FALSE(t.all_finite());
}

TEST(Autodiff, ElementwiseGradientsMatchFiniteDifferences) {
  const Tensor x = random_tensor(Shape{2, 5}, 1, 0.2, 2.0);
  const Tensor other = random_tensor(Shape{2, 5}, 2, 0.5, 1.5);
  const std::vector<std::pair<const char*, pidm::testing::ScalarFn>> cases = {
      {"add", [&](Tape& t, const Var& v) { return weighted_sum(t, v + t.constant(other)); }},
      {"sub", [&](Tape& t, const Var& v) { return weighted_sum(t, t.constant(other) - v); }},
      {"mul", [&](Tape& t, const Var& v) { return weighted_sum(t, v * v); }},
      {"div", [&](Tape& t, const Var& v) { return weighted_sum(t, t.constant(other) / v); }},
      {"scalar", [&](Tape& t, const Var& v) { return weighted_sum(t, 2.0 - 3.0 * v + 1.0 / v); }},
      {"exp", [&](Tape& t, const Var& v) { return weighted_sum(t, exp(v)); }},
      {"log", [&](Tape& t, const Var& v) { return weighted_sum(t, log(v)); }},
      {"log1p", [&](Tape& t, const Var& v) { return weighted_sum(t, log1p(v)); }},
      {"sqrt", [&](Tape& t, const Var& v) { return weighted_sum(t, sqrt(v)); }},
      {"square", [&](Tape& t, const Var& v) { return weighted_sum(t, square(v)); }},
      {"sigmoid", [&](Tape& t, const Var& v) { return weighted_sum(t, sigmoid(v)); }},
      {"silu", [&](Tape& t, const Var& v) { return weighted_sum(t, silu(v)); }},
      {"neg", [&](Tape& t, const Var& v) { return weighted_sum(t, -v); }},
      {"clamp", [&](Tape& t, const Var& v) { return weighted_sum(t, clamp(v, 0.5, 1.5)); }},
      {"mean", [&](Tape&, const Var& v) { return mean(square(v)); }},
      {"mse", [&](Tape& t, const Var& v) { return mse(v, t.constant(other)); }},
  };
  for (const auto& [name, f] : cases) EXPECT_LT(gradient_error(f, x), kTol) << name;
}

TEST(Autodiff, StructuralGradientsMatchFiniteDifferences) {
  const Tensor x = random_tensor(Shape{3, 4}, 3);
  const Tensor w = random_tensor(Shape{4, 2}, 4);
  const std::vector<std::pair<const char*, pidm::testing::ScalarFn>> cases = {
      {"matmul", [&](Tape& t, const Var& v) { return weighted_sum(t, matmul(v, t.constant(w))); }},
      {"transpose", [&](Tape& t, const Var& v) { return weighted_sum(t, transpose(v)); }},
      {"reshape", [&](Tape& t, const Var& v) { return weighted_sum(t, reshape(v, Shape{2, 6})); }},
      {"slice", [&](Tape& t, const Var& v) { return weighted_sum(t, slice(v, 1, 1, 3)); }},
      {"select", [&](Tape& t, const Var& v) { return weighted_sum(t, select(v, 0, 2)); }},
      {"sum_axis", [&](Tape& t, const Var& v) { return weighted_sum(t, sum(v, 0)); }},
      {"mean_axis", [&](Tape& t, const Var& v) { return weighted_sum(t, mean(v, 1)); }},
      {"concat", [&](Tape& t, const Var& v) { return weighted_sum(t, concat({v, v * v}, 1)); }},
      {"stack", [&](Tape& t, const Var& v) { return weighted_sum(t, stack({v, exp(v)}, 0)); }},
      {"broadcast", [&](Tape& t, const Var& v) {
         return weighted_sum(t, broadcast_to(reshape(sum(v, 1), Shape{3, 1}), Shape{2, 3, 5}));
       }},
      {"suffix_broadcast", [&](Tape& t, const Var& v) { return weighted_sum(t, v * select(v, 0, 1)); }},
      {"softmax", [&](Tape& t, const Var& v) { return weighted_sum(t, softmax_last(v)); }},
  };
  for (const auto& [name, f] : cases) EXPECT_LT(gradient_error(f, x), kTol) << name;
}

TEST(Autodiff, ConvolutionAndNormalizationGradients) {
  const Tensor x = random_tensor(Shape{2, 4, 8}, 5);
  const Tensor w = random_tensor(Shape{3, 4, 3}, 6);
  const Tensor b = random_tensor(Shape{3}, 7);
  const Tensor gamma = random_tensor(Shape{4}, 8, 0.5, 1.5);
  const Tensor beta = random_tensor(Shape{4}, 9);
  const std::vector<std::pair<const char*, pidm::testing::ScalarFn>> on_input = {
      {"conv1d", [&](Tape& t, const Var& v) {
         return weighted_sum(t, conv1d(v, t.constant(w), t.constant(b)));
       }},
      {"upsample2", [&](Tape& t, const Var& v) { return weighted_sum(t, upsample2(v)); }},
      {"avg_pool2", [&](Tape& t, const Var& v) { return weighted_sum(t, avg_pool2(v)); }},
      {"group_norm", [&](Tape& t, const Var& v) {
         return weighted_sum(t, group_norm(v, t.constant(gamma), t.constant(beta), 2));
       }},
  };
  for (const auto& [name, f] : on_input) EXPECT_LT(gradient_error(f, x), kTol) << name;

  auto conv_w = [&](Tape& t, const Var& v) { return weighted_sum(t, conv1d(t.constant(x), v, t.constant(b))); };
  EXPECT_LT(gradient_error(conv_w, w), kTol);
  auto conv_b = [&](Tape& t, const Var& v) { return weighted_sum(t, conv1d(t.constant(x), t.constant(w), v)); };
  EXPECT_LT(gradient_error(conv_b, b), kTol);
  auto gn_gamma = [&](Tape& t, const Var& v) {
    return weighted_sum(t, group_norm(t.constant(x), v, t.constant(beta), 2));
  };
  EXPECT_LT(gradient_error(gn_gamma, gamma), kTol);
}

TEST(Autodiff, ConvolutionMatchesDirectSum) {
  const Tensor x = random_tensor(Shape{1, 2, 5}, 10);
  const Tensor w = random_tensor(Shape{1, 2, 3}, 11);
  Tape tape;
  const Tensor y = conv1d(tape.constant(x), tape.constant(w), tape.constant(Tensor(Shape{1}, 0.25))).value();
  for (std::size_t l = 0; l < 5; ++l) {
    double acc = 0.25;
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t k = 0; k < 3; ++k) {
        const long src = static_cast<long>(l) + static_cast<long>(k) - 1;
        if (src >= 0 && src < 5) acc += w(0, c, k) * x(0, c, static_cast<std::size_t>(src));
      }
    EXPECT_NEAR(y(0, 0, l), acc, 1e-14);
  }
}

TEST(Autodiff, SharedSubexpressionsAccumulate) {
  Tape tape;
  const Var x = tape.leaf(Tensor::scalar(3.0));
  const Var y = x * x + x * 2.0;  // dy/dx = 2x + 2
  tape.backward(y);
  EXPECT_DOUBLE_EQ(tape.grad(x).item(), 8.0);
}

TEST(Autodiff, ConstantsReceiveNoGradient) {
  Tape tape;
  const Var c = tape.constant(Tensor::scalar(2.0));
  const Var x = tape.leaf(Tensor::scalar(1.0));
  tape.backward(c * x);
  EXPECT_FALSE(c.requires_grad());
  EXPECT_DOUBLE_EQ(tape.grad(c).item(), 0.0);
  EXPECT_DOUBLE_EQ(tape.grad(x).item(), 2.0);
}

TEST(Autodiff, ShapeMismatchNamesBothShapes) {
  Tape tape;
  const Var a = tape.leaf(Tensor(Shape{2, 3}));
  const Var b = tape.leaf(Tensor(Shape{3, 2}));
  try {
    (void)(a + b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[3, 2]"), std::string::npos) << msg;
  }
  EXPECT_THROW(matmul(a, a), ShapeError);
}

TEST(Autodiff, NonFiniteForwardRaises) {
  Tape tape;
  const Var x = tape.leaf(Tensor::vector({-1.0, 1.0}));
  EXPECT_THROW(log(x), NumericError);
  EXPECT_THROW(sqrt(x), NumericError);
  tape.set_check_finite(false);
  EXPECT_NO_THROW(log(x));
}

TEST(Autodiff, BackwardNeedsScalarRoot) {
  Tape tape;
  const Var x = tape.leaf(Tensor(Shape{2}, 1.0));
  EXPECT_THROW(tape.backward(x), ShapeError);
}

TEST(Autodiff, MixingTapesIsRejected) {
  Tape a, b;
  const Var x = a.leaf(Tensor::scalar(1.0));
  const Var y = b.leaf(Tensor::scalar(1.0));
  EXPECT_THROW((void)(x + y), std::invalid_argument);
}
