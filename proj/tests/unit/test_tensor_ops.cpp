#include <gtest/gtest.h>

#include <cmath>

#include "mhaff/ops.hpp"
#include "test_util.hpp"

using namespace mhaff;
using mhaff::testing::naive_conv2d;
using mhaff::testing::random_tensor;

TEST(Tensor, DataLengthMatchesShape) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
  EXPECT_THROW(Tensor(Shape{2, 0}), DimensionError);
  Tensor t({2, 3, 4});
  EXPECT_EQ(t.numel(), 24u);
  EXPECT_FALSE(t.has_grad());
}

TEST(Tensor, CloneIsDeep) {
  Tensor a = Tensor::vector({1, 2, 3});
  Tensor b = a;
  Tensor c = a.clone();
  a[0] = 9;
  EXPECT_EQ(b[0], 9);
  EXPECT_EQ(c[0], 1);
}

TEST(Tensor, AnomalyDetectionFlagsNonFinite) {
  set_anomaly_detection(true);
  const Tensor x = Tensor::vector({1e308, 1e308});
  EXPECT_THROW(ops::scale(x, 10.0), NumericError);
  set_anomaly_detection(false);
  EXPECT_NO_THROW(ops::scale(x, 10.0));
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const Tensor m = Tensor::matrix({{1.5, -2}, {3, 4.25}});
  EXPECT_TRUE(bitwise_equal(ops::matmul(Tensor::identity(2), m), m));
}

TEST(Matmul, HandComputedProduct) {
  // 1*5 + 2*6 = 17, 3*5 + 4*6 = 39
  const Tensor c = ops::matmul(Tensor::matrix({{1, 2}, {3, 4}}), Tensor::matrix({{5}, {6}}));
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(c[0], 17.0);
  EXPECT_EQ(c[1], 39.0);
}

TEST(Matmul, ZeroTimesAnythingIsZero) {
  Rng rng(3);
  const Tensor c = ops::matmul(Tensor::zeros({2, 3}), random_tensor({3, 4}, rng));
  EXPECT_EQ(c.shape(), (Shape{2, 4}));
  for (double v : c.data()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 5}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[4x5]"), std::string::npos);
  }
}

TEST(Matmul, MatchesNaiveOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng.uniform_index(8), k = 1 + rng.uniform_index(8), n = 1 + rng.uniform_index(8);
    const Tensor a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
    const auto expect = mhaff::testing::naive_matmul(mhaff::testing::rows_of(a), mhaff::testing::rows_of(b));
    const Tensor c = ops::matmul(a, b);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(c.at(i, j), expect[i][j], 1e-13);
  }
}

TEST(Softmax, SymmetricInputIsUniform) {
  const Tensor y = ops::softmax(Tensor::vector({0, 0}), 0);
  EXPECT_EQ(y[0], 0.5);
  EXPECT_EQ(y[1], 0.5);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  const Tensor y = ops::softmax(Tensor::vector({1000, 1000}), 0);
  EXPECT_EQ(y[0], 0.5);
  EXPECT_EQ(y[1], 0.5);
}

TEST(Softmax, MatchesScalarOracle) {
  const Tensor y = ops::softmax(Tensor::vector({1, 2, 3}), 0);
  const double denom = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(y[0], std::exp(1.0) / denom, 1e-15);
  EXPECT_NEAR(y[1], std::exp(2.0) / denom, 1e-15);
  EXPECT_NEAR(y[2], std::exp(3.0) / denom, 1e-15);
  // Frozen values.
  EXPECT_NEAR(y[0], 0.0900, 5e-5);
  EXPECT_NEAR(y[1], 0.2447, 5e-5);
  EXPECT_NEAR(y[2], 0.6652, 5e-5);
}

TEST(Softmax, SlicesSumToOneAndStayInOpenInterval) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const Shape s{1 + rng.uniform_index(8), 1 + rng.uniform_index(8), 1 + rng.uniform_index(4)};
    const Tensor x = random_tensor(s, rng, 10.0);
    const std::size_t axis = rng.uniform_index(3);
    const Tensor y = ops::softmax(x, axis);
    const Tensor sums = ops::mean(y, axis);
    for (double v : sums.data()) EXPECT_NEAR(v * static_cast<double>(s[axis]), 1.0, 1e-9);
    for (double v : y.data()) {
      EXPECT_GT(v, 0.0);
      if (s[axis] > 1) EXPECT_LT(v, 1.0);
    }
  }
}

TEST(Softmax, ShiftInvariance) {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor x = random_tensor({1 + rng.uniform_index(8), 1 + rng.uniform_index(8)}, rng, 5.0);
    const double c = rng.uniform(-100.0, 100.0);
    EXPECT_LE(max_abs_diff(ops::softmax(ops::add_scalar(x, c), 1), ops::softmax(x, 1)), 1e-12);
  }
}

TEST(Softmax, AxisOutOfRange) { EXPECT_THROW(ops::softmax(Tensor::zeros({2, 2}), 2), DimensionError); }

TEST(Conv2d, UnitOneByOneKernelIsIdentity) {
  Rng rng(1);
  const Tensor x = random_tensor({1, 5, 4}, rng);
  EXPECT_TRUE(bitwise_equal(ops::conv2d(x, Tensor::ones({1, 1, 1, 1})), x));
}

TEST(Conv2d, AllOnesSum) {
  const Tensor y = ops::conv2d(Tensor::ones({1, 3, 3}), Tensor::ones({1, 1, 3, 3}));
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(y[0], 9.0);
}

TEST(Conv2d, StrideTwoMatchesSlidingWindowOracle) {
  Rng rng(21);
  const Tensor x = random_tensor({1, 4, 4}, rng);
  const Tensor k = random_tensor({1, 1, 2, 2}, rng);
  const Tensor y = ops::conv2d(x, k, 2, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 2, 2}));
  for (std::size_t oy = 0; oy < 2; ++oy) {
    for (std::size_t ox = 0; ox < 2; ++ox) {
      double acc = 0.0;
      for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t b = 0; b < 2; ++b) acc += x[(oy * 2 + a) * 4 + ox * 2 + b] * k[a * 2 + b];
      EXPECT_EQ(y[oy * 2 + ox], acc);
    }
  }
}

TEST(Conv2d, BitwiseEqualToNaiveOracle) {
  Rng rng(99);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t c = 1 + rng.uniform_index(2), f = 1 + rng.uniform_index(2);
    const std::size_t h = 1 + rng.uniform_index(8), w = 1 + rng.uniform_index(8);
    const std::size_t k = 1 + rng.uniform_index(3), stride = 1 + rng.uniform_index(2), pad = rng.uniform_index(2);
    if (k > h + 2 * pad || k > w + 2 * pad) continue;
    const Tensor x = random_tensor({c, h, w}, rng);
    const Tensor ker = random_tensor({f, c, k, k}, rng);
    EXPECT_TRUE(bitwise_equal(ops::conv2d(x, ker, stride, pad), naive_conv2d(x, ker, stride, pad)))
        << "c=" << c << " h=" << h << " w=" << w << " k=" << k << " s=" << stride << " p=" << pad;
  }
}

TEST(Conv2d, KernelLargerThanPaddedInput) {
  EXPECT_THROW(ops::conv2d(Tensor::zeros({1, 2, 2}), Tensor::zeros({1, 1, 3, 3})), DimensionError);
  EXPECT_NO_THROW(ops::conv2d(Tensor::zeros({1, 2, 2}), Tensor::zeros({1, 1, 3, 3}), 1, 1));
  EXPECT_THROW(ops::conv2d(Tensor::zeros({2, 4, 4}), Tensor::zeros({1, 1, 3, 3})), DimensionError);
}

TEST(LayerNorm, ConstantRowCollapsesToZero) {
  const Tensor y = ops::layer_norm(Tensor({1, 4}, 3.5), Tensor::ones({4}), Tensor::zeros({4}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, UnitVarianceFixedPoint) {
  const Tensor y = ops::layer_norm(Tensor::matrix({{1, -1}}), Tensor::ones({2}), Tensor::zeros({2}), 1e-14);
  EXPECT_NEAR(y[0], 1.0, 1e-12);
  EXPECT_NEAR(y[1], -1.0, 1e-12);
}

TEST(LayerNorm, MatchesScalarMeanVarOracle) {
  const Tensor y = ops::layer_norm(Tensor::matrix({{1, 2, 3}}), Tensor::vector({2, 2, 2}), Tensor::vector({1, 1, 1}));
  const double mu = 2.0;
  const double var = ((1 - mu) * (1 - mu) + 0 + (3 - mu) * (3 - mu)) / 3.0;
  for (int i = 0; i < 3; ++i) {
    EXPECT_NEAR(y[i], (i + 1 - mu) / std::sqrt(var + 1e-5) * 2.0 + 1.0, 1e-14);
  }
}

TEST(LayerNorm, RejectsNonPositiveEps) {
  EXPECT_THROW(ops::layer_norm(Tensor::zeros({1, 2}), Tensor::ones({2}), Tensor::zeros({2}), 0.0), UsageError);
}

TEST(GroupNorm, MatchesPerGroupOracle) {
  Rng rng(4);
  const Tensor x = random_tensor({4, 2, 3}, rng);
  const Tensor gain = random_tensor({4}, rng);
  const Tensor bias = random_tensor({4}, rng);
  const Tensor y = ops::group_norm(x, gain, bias, 2);
  for (std::size_t g = 0; g < 2; ++g) {
    double mu = 0, var = 0;
    for (std::size_t i = 0; i < 12; ++i) mu += x[g * 12 + i];
    mu /= 12;
    for (std::size_t i = 0; i < 12; ++i) var += (x[g * 12 + i] - mu) * (x[g * 12 + i] - mu);
    var /= 12;
    for (std::size_t i = 0; i < 12; ++i) {
      const std::size_t idx = g * 12 + i;
      EXPECT_NEAR(y[idx], (x[idx] - mu) / std::sqrt(var + 1e-5) * gain[idx / 6] + bias[idx / 6], 1e-13);
    }
  }
}

TEST(Pooling, AdaptiveAverageQuadrants) {
  Tensor x({1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) x[i] = static_cast<double>(i);
  const Tensor y = ops::adaptive_avg_pool2d(x, 2, 2);
  EXPECT_EQ(y[0], (0 + 1 + 4 + 5) / 4.0);
  EXPECT_EQ(y[1], (2 + 3 + 6 + 7) / 4.0);
  EXPECT_EQ(y[2], (8 + 9 + 12 + 13) / 4.0);
  EXPECT_EQ(y[3], (10 + 11 + 14 + 15) / 4.0);
}

TEST(Pooling, MaxPoolPicksWindowMaximum) {
  const Tensor x({1, 2, 4}, {1, 5, 2, 0, 3, 4, 8, 7});
  const Tensor y = ops::max_pool2d(x, 2, 2);
  EXPECT_EQ(y[0], 5.0);
  EXPECT_EQ(y[1], 8.0);
}

TEST(Patches, RowMajorGridChannelMajorFlatten) {
  Tensor x({2, 4, 4});
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] = static_cast<double>(i);
  const Tensor p = ops::extract_patches(x, 2);
  ASSERT_EQ(p.shape(), (Shape{4, 8}));
  // Patch 1 is the top-right 2x2 block; channel 0 then channel 1.
  const std::vector<double> expect{2, 3, 6, 7, 18, 19, 22, 23};
  for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(p.at(1, j), expect[j]);
  EXPECT_THROW(ops::extract_patches(Tensor::zeros({1, 5, 4}), 2), DimensionError);
}

TEST(ConcatSlice, FeatureAxis) {
  const Tensor c = ops::concat({Tensor::matrix({{1, 2}}), Tensor::matrix({{3, 4}})}, 1);
  EXPECT_EQ(c.shape(), (Shape{1, 4}));
  for (int i = 0; i < 4; ++i) EXPECT_EQ(c[i], i + 1.0);
  const Tensor s = ops::slice(c, 1, 1, 2);
  EXPECT_EQ(s[0], 2.0);
  EXPECT_EQ(s[1], 3.0);
  EXPECT_THROW(ops::slice(c, 1, 3, 2), DimensionError);
  EXPECT_THROW(ops::concat({Tensor::zeros({1, 2}), Tensor::zeros({2, 2})}, 1), DimensionError);
}

TEST(Gelu, TanhApproximation) {
  const Tensor x = Tensor::vector({-3, -0.5, 0, 0.7, 2.5});
  const Tensor y = ops::gelu(x);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y[i], mhaff::testing::scalar_gelu(x[i]), 1e-15);
  EXPECT_EQ(y[2], 0.0);
}

TEST(Dropout, EvalModeIsIdentity) {
  Rng rng(1);
  const Tensor x = random_tensor({3, 5}, rng);
  EXPECT_TRUE(bitwise_equal(ops::dropout(x, 0.3, false, rng), x));
  EXPECT_TRUE(bitwise_equal(ops::dropout(x, 0.0, true, rng), x));
}

TEST(Dropout, TrainModeZeroesOrRescales) {
  Rng rng(2);
  const Tensor x = Tensor::ones({1000});
  const Tensor y = ops::dropout(x, 0.3, true, rng);
  std::size_t dropped = 0;
  for (double v : y.data()) {
    if (v == 0.0) {
      ++dropped;
    } else {
      EXPECT_NEAR(v, 1.0 / 0.7, 1e-15);
    }
  }
  EXPECT_GT(dropped, 230u);
  EXPECT_LT(dropped, 370u);
  EXPECT_THROW(ops::dropout(x, 1.0, true, rng), UsageError);
}

TEST(CrossEntropy, CertainTargetIsZero) {
  const std::vector<std::size_t> t{1};
  EXPECT_EQ(ops::cross_entropy_loss(Tensor::matrix({{0, 1}}), t).item(), 0.0);
}

TEST(CrossEntropy, UniformIsLogC) {
  for (std::size_t c = 2; c <= 10; ++c) {
    const std::vector<std::size_t> t{0};
    const double loss = ops::cross_entropy_loss(Tensor({1, c}, 1.0 / static_cast<double>(c)), t).item();
    EXPECT_NEAR(loss, std::log(static_cast<double>(c)), 1e-12);
  }
  const std::vector<std::size_t> t{0};
  EXPECT_NEAR(ops::cross_entropy_loss(Tensor::matrix({{0.5, 0.5}}), t).item(), 0.693147, 1e-6);
}

TEST(CrossEntropy, TwoRowScalarOracle) {
  const std::vector<std::size_t> t{0, 1};
  const double loss = ops::cross_entropy_loss(Tensor::matrix({{0.9, 0.1}, {0.2, 0.8}}), t).item();
  EXPECT_NEAR(loss, -(std::log(0.9) + std::log(0.8)) / 2.0, 1e-12);
  EXPECT_NEAR(loss, 0.164252, 1e-6);
}

TEST(CrossEntropy, ZeroProbabilityIsClampedAndCounted) {
  ops::LossDiagnostics diag;
  const std::vector<std::size_t> t{1};
  const double loss = ops::cross_entropy_loss(Tensor::matrix({{1, 0}}), t, &diag).item();
  EXPECT_NEAR(loss, -std::log(1e-12), 1e-9);
  EXPECT_EQ(diag.clamped, 1u);
}

TEST(CrossEntropy, Preconditions) {
  const std::vector<std::size_t> bad_target{2};
  EXPECT_THROW(ops::cross_entropy_loss(Tensor::matrix({{0.5, 0.5}}), bad_target), UsageError);
  const std::vector<std::size_t> t{0};
  EXPECT_THROW(ops::cross_entropy_loss(Tensor::matrix({{0.5, 0.6}}), t), UsageError);
}
