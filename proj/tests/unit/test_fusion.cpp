#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mhaff/attention.hpp"
#include "mhaff/fusion.hpp"
#include "mhaff/ops.hpp"
#include "mhaff/tape.hpp"
#include "test_util.hpp"

using namespace mhaff;
using mhaff::testing::random_tensor;
using mhaff::testing::rows_of;
using mhaff::testing::scalar_attention;

namespace {

MhaFusionParams identity_fusion(std::size_t d, std::size_t heads) {
  MhaFusionParams p;
  p.heads = heads;
  p.w_query = Tensor::identity(d);
  p.w_key = Tensor::identity(d);
  p.w_value = Tensor::identity(d);
  p.w_out = Tensor::identity(d);
  p.f = {Tensor::zeros({d, kFusedDim}), Tensor::zeros({kFusedDim})};
  return p;
}

Tensor permute_rows(const Tensor& t, const std::vector<std::size_t>& perm) {
  Tensor out(t.shape());
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) out[i * t.dim(1) + j] = t.at(perm[i], j);
  return out;
}

}  // namespace

TEST(Wiring, ParseAndName) {
  EXPECT_EQ(QkvWiring::parse("XYX").name(), "XYX");
  EXPECT_EQ(QkvWiring::parse("yxx").name(), "YXX");
  EXPECT_THROW(QkvWiring::parse("XY"), ConfigError);
  EXPECT_THROW(QkvWiring::parse("XZX"), ConfigError);
  EXPECT_FALSE(QkvWiring::parse("XXX").mixed());
  EXPECT_TRUE(QkvWiring::parse("XXY").mixed());
}

TEST(Wiring, AblationRowsAreTheSixMixedWirings) {
  const auto& rows = QkvWiring::ablation_rows();
  const std::vector<std::string> expect{"XYY", "YXY", "YYX", "YXX", "XXY", "XYX"};
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(rows[i].name(), expect[i]);
    EXPECT_TRUE(rows[i].mixed());
  }
}

TEST(Wiring, MakeQkvRoutesSources) {
  Rng rng(1);
  const TokenMatrix x{random_tensor({4, 6}, rng), TokenSource::vit};
  const TokenMatrix y{random_tensor({4, 6}, rng), TokenSource::cnn};
  const MhaFusionParams id = identity_fusion(6, 2);
  for (const auto& w : QkvWiring::ablation_rows()) {
    const Qkv qkv = make_qkv(x, y, w, id);
    const auto& q = w.query == FeatureSource::X ? x.tokens : y.tokens;
    const auto& k = w.key == FeatureSource::X ? x.tokens : y.tokens;
    const auto& v = w.value == FeatureSource::X ? x.tokens : y.tokens;
    EXPECT_TRUE(bitwise_equal(qkv.query, q)) << w.name();
    EXPECT_TRUE(bitwise_equal(qkv.key, k)) << w.name();
    EXPECT_TRUE(bitwise_equal(qkv.value, v)) << w.name();
  }
  MhaFusionParams p = MhaFusionParams::init(6, 2, kFusedDim, rng);
  const Qkv xyx = make_qkv(x, y, QkvWiring::parse("XYX"), p);
  EXPECT_LE(max_abs_diff(xyx.query, ops::matmul(x.tokens, p.w_query)), 0.0);
  EXPECT_LE(max_abs_diff(xyx.key, ops::matmul(y.tokens, p.w_key)), 0.0);
  const Qkv yxx = make_qkv(x, y, QkvWiring::parse("YXX"), p);
  EXPECT_LE(max_abs_diff(yxx.query, ops::matmul(y.tokens, p.w_query)), 0.0);
  EXPECT_LE(max_abs_diff(yxx.value, ops::matmul(x.tokens, p.w_value)), 0.0);
}

TEST(Wiring, UnequalTokenCountsAreWiringError) {
  Rng rng(2);
  const MhaFusionParams p = MhaFusionParams::init(4, 2, kFusedDim, rng);
  const TokenMatrix x{random_tensor({4, 4}, rng), TokenSource::vit};
  const TokenMatrix y{random_tensor({3, 4}, rng), TokenSource::cnn};
  EXPECT_THROW(make_qkv(x, y, QkvWiring{}, p), WiringError);
}

TEST(Attention, SingletonReturnsValue) {
  const Tensor out = attention(Tensor::matrix({{0.3}}), Tensor::matrix({{-2.0}}), Tensor::matrix({{7.0}}));
  EXPECT_EQ(out[0], 7.0);
}

TEST(Attention, OrthonormalKeysHandValue) {
  const Tensor out = attention(Tensor::matrix({{1, 0}}), Tensor::identity(2), Tensor::matrix({{10, 0}, {0, 10}}));
  const double w = std::exp(1.0 / std::sqrt(2.0)) / (std::exp(1.0 / std::sqrt(2.0)) + 1.0);
  EXPECT_NEAR(out[0], 10.0 * w, 1e-12);
  EXPECT_NEAR(out[0], 6.698, 5e-4);
  EXPECT_NEAR(out[1], 3.302, 5e-4);
}

TEST(Attention, ZeroQueryAveragesValues) {
  Rng rng(3);
  const Tensor v = random_tensor({5, 3}, rng);
  const Tensor out = attention(Tensor::zeros({2, 4}), random_tensor({5, 4}, rng), v);
  const Tensor col_mean = ops::mean(v, 0);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(out.at(i, j), col_mean[j], 1e-15);
}

TEST(Attention, WeightsAreRowStochastic) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.uniform_index(8), m = 1 + rng.uniform_index(8), d = 1 + rng.uniform_index(8);
    const Tensor w = attention_weights(random_tensor({n, d}, rng, 3.0), random_tensor({m, d}, rng, 3.0));
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        EXPECT_GT(w.at(i, j), 0.0);
        s += w.at(i, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Attention, KeyValuePermutationInvariance) {
  Rng rng(5);
  const Tensor q = random_tensor({3, 4}, rng), k = random_tensor({6, 4}, rng), v = random_tensor({6, 4}, rng);
  std::vector<std::size_t> perm(6);
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  std::swap(perm[0], perm[3]);
  const Tensor a = multi_head_attention(q, k, v, 2, Tensor::identity(4));
  const Tensor b = multi_head_attention(q, permute_rows(k, perm), permute_rows(v, perm), 2, Tensor::identity(4));
  EXPECT_LE(max_abs_diff(a, b), 1e-14);
}

TEST(MultiHead, SingleHeadIsProjectedAttention) {
  Rng rng(6);
  const Tensor q = random_tensor({3, 4}, rng), k = random_tensor({5, 4}, rng), v = random_tensor({5, 4}, rng);
  const Tensor wo = random_tensor({4, 4}, rng);
  EXPECT_LE(max_abs_diff(multi_head_attention(q, k, v, 1, wo), ops::matmul(attention(q, k, v), wo)), 1e-15);
}

TEST(MultiHead, TwoHeadsMatchScalarOracle) {
  Rng rng(7);
  const Tensor q = random_tensor({3, 4}, rng), k = random_tensor({5, 4}, rng), v = random_tensor({5, 4}, rng);
  const Tensor wo = random_tensor({4, 4}, rng);
  auto cols = [](const std::vector<std::vector<double>>& m, std::size_t from) {
    std::vector<std::vector<double>> r;
    for (const auto& row : m) r.push_back({row[from], row[from + 1]});
    return r;
  };
  const auto h0 = scalar_attention(cols(rows_of(q), 0), cols(rows_of(k), 0), cols(rows_of(v), 0));
  const auto h1 = scalar_attention(cols(rows_of(q), 2), cols(rows_of(k), 2), cols(rows_of(v), 2));
  std::vector<std::vector<double>> joined;
  for (std::size_t i = 0; i < 3; ++i) joined.push_back({h0[i][0], h0[i][1], h1[i][0], h1[i][1]});
  const auto expect = mhaff::testing::naive_matmul(joined, rows_of(wo));
  const Tensor out = multi_head_attention(q, k, v, 2, wo);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(out.at(i, j), expect[i][j], 1e-14);
}

TEST(MultiHead, IndivisibleWidthIsConfigError) {
  EXPECT_THROW(multi_head_attention(Tensor::zeros({2, 6}), Tensor::zeros({2, 6}), Tensor::zeros({2, 6}), 4,
                                    Tensor::identity(6)),
               ConfigError);
  Rng rng(1);
  EXPECT_THROW(MhaFusionParams::init(6, 4, kFusedDim, rng), ConfigError);
}

TEST(FuseMhaff, OutputIsSixtyFourWide) {
  Rng rng(8);
  const MhaFusionParams p = MhaFusionParams::init(8, 2, kFusedDim, rng);
  const TokenMatrix x{random_tensor({4, 8}, rng), TokenSource::vit};
  const TokenMatrix y{random_tensor({4, 8}, rng), TokenSource::cnn};
  EXPECT_EQ(fuse_mhaff(x, y, QkvWiring{}, p).shape(), (Shape{kFusedDim}));
}

TEST(FuseMhaff, SingleTokenPairCollapsesToProjectedValue) {
  Rng rng(9);
  MhaFusionParams p = MhaFusionParams::init(4, 2, kFusedDim, rng);
  p.f.bias = random_tensor({kFusedDim}, rng);
  const TokenMatrix x{random_tensor({1, 4}, rng), TokenSource::vit};
  const TokenMatrix y{random_tensor({1, 4}, rng), TokenSource::cnn};
  // One key: attention weight 1, so the output is (V Wo) for the value source.
  const Tensor expect_tokens = ops::matmul(ops::matmul(x.tokens, p.w_value), p.w_out);
  const Tensor z = fuse_mhaff(x, y, QkvWiring::parse("YYX"), p);
  const Tensor pre = ops::add_bias(ops::matmul(expect_tokens, p.f.weight), p.f.bias);
  for (std::size_t j = 0; j < kFusedDim; ++j) EXPECT_NEAR(z[j], mhaff::testing::scalar_gelu(pre[j]), 1e-13);
}

TEST(FuseMhaff, ZeroProjectionGivesZero) {
  Rng rng(10);
  MhaFusionParams p = MhaFusionParams::init(4, 2, kFusedDim, rng);
  p.f.weight = Tensor::zeros({4, kFusedDim});
  const TokenMatrix x{random_tensor({3, 4}, rng), TokenSource::vit};
  const TokenMatrix y{random_tensor({3, 4}, rng), TokenSource::cnn};
  const Tensor z = fuse_mhaff(x, y, QkvWiring{}, p);
  for (double v : z.data()) EXPECT_EQ(v, 0.0);
}

TEST(FuseMhaff, ToyOracle) {
  Rng rng(11);
  const MhaFusionParams p = MhaFusionParams::init(4, 2, kFusedDim, rng);
  const TokenMatrix x{random_tensor({3, 4}, rng), TokenSource::vit};
  const TokenMatrix y{random_tensor({3, 4}, rng), TokenSource::cnn};
  const auto q = mhaff::testing::naive_matmul(rows_of(x.tokens), rows_of(p.w_query));
  const auto k = mhaff::testing::naive_matmul(rows_of(y.tokens), rows_of(p.w_key));
  const auto v = mhaff::testing::naive_matmul(rows_of(x.tokens), rows_of(p.w_value));
  auto cols = [](const std::vector<std::vector<double>>& m, std::size_t from) {
    std::vector<std::vector<double>> r;
    for (const auto& row : m) r.push_back({row[from], row[from + 1]});
    return r;
  };
  const auto h0 = scalar_attention(cols(q, 0), cols(k, 0), cols(v, 0));
  const auto h1 = scalar_attention(cols(q, 2), cols(k, 2), cols(v, 2));
  std::vector<std::vector<double>> joined;
  for (std::size_t i = 0; i < 3; ++i) joined.push_back({h0[i][0], h0[i][1], h1[i][0], h1[i][1]});
  const auto mha = mhaff::testing::naive_matmul(joined, rows_of(p.w_out));
  std::vector<std::vector<double>> pooled(1, std::vector<double>(4, 0.0));
  for (const auto& row : mha)
    for (std::size_t j = 0; j < 4; ++j) pooled[0][j] += row[j] / 3.0;
  const auto proj = mhaff::testing::naive_matmul(pooled, rows_of(p.f.weight));
  const Tensor z = fuse_mhaff(x, y, QkvWiring::parse("XYX"), p);
  for (std::size_t j = 0; j < kFusedDim; ++j)
    EXPECT_NEAR(z[j], mhaff::testing::scalar_gelu(proj[0][j] + p.f.bias[j]), 1e-13);
}

TEST(FuseMhaff, GradientsReachBothSources) {
  Rng rng(12);
  const MhaFusionParams p = MhaFusionParams::init(4, 2, kFusedDim, rng);
  for (const auto& w : QkvWiring::ablation_rows()) {
    TokenMatrix x{random_tensor({3, 4}, rng).set_requires_grad(), TokenSource::vit};
    TokenMatrix y{random_tensor({3, 4}, rng).set_requires_grad(), TokenSource::cnn};
    Tape tape;
    const Tensor r = random_tensor({kFusedDim}, rng);
    tape.backward(ops::sum(ops::mul(fuse_mhaff(x, y, w, p), r)));
    auto nonzero = [](const Tensor& t) {
      return std::any_of(t.grad().begin(), t.grad().end(), [](double g) { return g != 0.0; });
    };
    EXPECT_TRUE(nonzero(x.tokens)) << w.name();
    EXPECT_TRUE(nonzero(y.tokens)) << w.name();
  }
}

TEST(Baselines, AdditionIsElementwiseAndSymmetric) {
  const TokenMatrix x{Tensor::matrix({{1, 2}, {3, 4}}), TokenSource::vit};
  const TokenMatrix y{Tensor::matrix({{10, 20}, {30, 40}}), TokenSource::cnn};
  const TokenMatrix s = fuse_addition(x, y);
  EXPECT_EQ(s.tokens[3], 44.0);
  EXPECT_EQ(s.source, TokenSource::fused);
  EXPECT_TRUE(bitwise_equal(s.tokens, fuse_addition(y, x).tokens));
  EXPECT_THROW(fuse_addition(x, {Tensor::zeros({2, 3}), TokenSource::cnn}), FusionError);
}

TEST(Baselines, ConcatenationWidensFeatures) {
  Rng rng(13);
  const TokenMatrix x{random_tensor({4, 3}, rng), TokenSource::vit};
  const TokenMatrix y{random_tensor({4, 5}, rng), TokenSource::cnn};
  const TokenMatrix c = fuse_concatenation(x, y);
  ASSERT_EQ(c.tokens.shape(), (Shape{4, 8}));
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(c.tokens.at(i, j), x.tokens.at(i, j));
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(c.tokens.at(i, 3 + j), y.tokens.at(i, j));
  }
  EXPECT_THROW(fuse_concatenation(x, {Tensor::zeros({3, 5}), TokenSource::cnn}), FusionError);
}

TEST(Classifier, ZeroWeightsGiveUniform) {
  ClassifierParams p{Tensor::zeros({4, kFusedDim}), Tensor::zeros({4})};
  Rng rng(14);
  const Tensor probs = classify(random_tensor({kFusedDim}, rng), p);
  for (double v : probs.data()) EXPECT_EQ(v, 0.25);
}

TEST(Classifier, BiasOnlyHandValue) {
  ClassifierParams p{Tensor::zeros({3, kFusedDim}), Tensor::vector({10, 0, 0})};
  const Tensor probs = classify(Tensor::ones({kFusedDim}), p);
  EXPECT_NEAR(probs[0], 0.99991, 1e-5);
  EXPECT_NEAR(probs[1], 4.5e-5, 1e-6);
  EXPECT_NEAR(probs[2], 4.5e-5, 1e-6);
}

TEST(Classifier, Preconditions) {
  Rng rng(15);
  EXPECT_THROW(ClassifierParams::init(1, kFusedDim, rng), ConfigError);
  const ClassifierParams p = ClassifierParams::init(3, kFusedDim, rng);
  EXPECT_THROW(classify(Tensor::zeros({32}), p), DimensionError);
}
