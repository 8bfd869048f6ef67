// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "oracles.hpp"
#include "tinyglass/tensor.hpp"

using namespace tinyglass;

TEST(Conv2d, TwoByTwoDiagonalKernel) {
  Tensor4 x(Shape4{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  ConvSpec k{1, 1, 2, 2, 1, 0, {1, 0, 0, 1}, {}};
  const Tensor4 y = conv2d(x, k);
  ASSERT_EQ(y.shape(), (Shape4{1, 1, 1, 1}));
  EXPECT_EQ(y[0], 5.0);
}

TEST(Conv2d, MatchesDirectSummationOnRandomShapes) {
  std::mt19937_64 g(11);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t k = 1 + g() % 4, stride = 1 + g() % 3, pad = g() % 3;
    const std::size_t ic = 1 + g() % 4, oc = 1 + g() % 4;
    const std::size_t h = k + g() % 7, w = k + g() % 7;
    const Tensor4 x = oracle::random_tensor({2, ic, h, w}, g());
    ConvSpec spec = ConvSpec::zeros(oc, ic, k, k, stride, pad, trial % 2 == 0);
    const Tensor4 wt = oracle::random_tensor({oc, ic, k, k}, g());
    spec.weights.assign(wt.data().begin(), wt.data().end());
    for (double& b : spec.bias) b = 0.25;
    const Tensor4 got = conv2d(x, spec);
    const oracle::Nd want = oracle::conv(oracle::from(x), spec.weights, spec.bias, oc, k, stride, pad);
    ASSERT_EQ(got.shape(), (Shape4{want.n, want.c, want.h, want.w}));
    for (std::size_t i = 0; i < got.size(); ++i) ASSERT_NEAR(got[i], want.v[i], 1e-12) << "trial " << trial;
  }
}

TEST(Conv2d, ChannelMismatchIsContractError) {
  Tensor4 x(Shape4{1, 3, 4, 4});
  EXPECT_THROW(conv2d(x, ConvSpec::zeros(1, 2, 1, 1)), ContractError);
}

TEST(Conv2d, KernelLargerThanPaddedInputIsContractError) {
  Tensor4 x(Shape4{1, 1, 2, 2});
  EXPECT_THROW(conv2d(x, ConvSpec::zeros(1, 1, 5, 5)), ContractError);
}

TEST(WindowExtent, FloorConvention) {
  EXPECT_EQ(window_extent(256, 7, 2, 3), 128u);
  EXPECT_EQ(window_extent(128, 3, 2, 1), 64u);
  EXPECT_EQ(window_extent(7, 3, 2, 1), 4u);
  EXPECT_EQ(window_extent(6, 3, 2, 0), 2u);
}

TEST(Pool2d, AverageExcludesPadding) {
  Tensor4 x(Shape4{1, 1, 3, 3});
  x.at(0, 0, 1, 1) = 9.0;
  const Tensor4 y = pool2d(x, PoolKind::avg, 3, 1, 1);
  EXPECT_DOUBLE_EQ(y.at(0, 0, 1, 1), 1.0);
  EXPECT_DOUBLE_EQ(y.at(0, 0, 0, 0), 9.0 / 4.0);
}

TEST(Pool2d, MatchesOracle) {
  std::mt19937_64 g(3);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t k = 1 + g() % 3, stride = 1 + g() % 2, pad = g() % (k / 2 + 1);
    const Tensor4 x = oracle::random_tensor({1, 2, k + g() % 6, k + g() % 6}, g());
    for (bool is_max : {true, false}) {
      const Tensor4 got = pool2d(x, is_max ? PoolKind::max : PoolKind::avg, k, stride, pad);
      const oracle::Nd want = oracle::pool(oracle::from(x), is_max, k, stride, pad);
      ASSERT_EQ(got.size(), want.v.size());
      for (std::size_t i = 0; i < got.size(); ++i) ASSERT_NEAR(got[i], want.v[i], 1e-12);
    }
  }
}

TEST(BilinearResize, MatchesOracleBothDirections) {
  const Tensor4 x = oracle::random_tensor({1, 2, 5, 7}, 4);
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{10, 14}, {3, 4}, {16, 5}, {1, 1}}) {
    const Tensor4 got = bilinear_resize(x, h, w);
    const oracle::Nd want = oracle::resize(oracle::from(x), h, w);
    for (std::size_t i = 0; i < got.size(); ++i) ASSERT_NEAR(got[i], want.v[i], 1e-12);
  }
}

TEST(BilinearResize, ConstantStaysConstant) {
  Tensor4 x(Shape4{1, 1, 4, 4}, 0.7);
  const Tensor4 y = bilinear_resize(x, 13, 9);
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 0.7);
}

TEST(ConcatChannels, EmbeddingWidth) {
  Tensor4 a(Shape4{1, 128, 16, 16}, 1.0), b(Shape4{1, 256, 16, 16}, 2.0);
  const Tensor4 c = concat_channels(a, b);
  EXPECT_EQ(c.shape(), (Shape4{1, 384, 16, 16}));
  EXPECT_EQ(c.at(0, 127, 3, 3), 1.0);
  EXPECT_EQ(c.at(0, 128, 3, 3), 2.0);
}

TEST(ConcatChannels, SpatialMismatchIsContractError) {
  EXPECT_THROW(concat_channels(Tensor4(Shape4{1, 2, 4, 4}), Tensor4(Shape4{1, 2, 4, 5})), ContractError);
}

TEST(FoldBatchnorm, MatchesTwoStageReference) {
  std::mt19937_64 g(21);
  std::uniform_real_distribution<double> u(0.1, 2.0), s(-1.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t c = 1 + g() % 5, oc = 1 + g() % 5;
    const Tensor4 x = oracle::random_tensor({1, c, 4, 4}, g());
    ConvSpec conv = ConvSpec::zeros(oc, c, 3, 3, 1, 1);
    for (double& v : conv.weights) v = s(g);
    std::vector<double> gamma(oc), beta(oc), mean(oc), var(oc);
    for (std::size_t i = 0; i < oc; ++i) {
      gamma[i] = u(g);
      beta[i] = s(g);
      mean[i] = s(g);
      var[i] = u(g);
    }
    const Tensor4 folded = conv2d(x, fold_batchnorm(conv, gamma, beta, mean, var, 1e-5));
    oracle::Nd ref = oracle::conv(oracle::from(x), conv.weights, {}, oc, 3, 1, 1);
    oracle::batchnorm(ref, gamma, beta, mean, var, 1e-5);
    EXPECT_LE(oracle::max_rel_err(folded.values(), ref.v), 1e-5);
  }
}

TEST(FoldBatchnorm, NegativeVarianceIsContractError) {
  const ConvSpec c = ConvSpec::zeros(1, 1, 1, 1);
  const std::vector<double> one{1.0}, zero{0.0}, neg{-1.0};
  EXPECT_THROW(fold_batchnorm(c, one, zero, zero, neg, 1e-5), ContractError);
}

TEST(Sigmoid, StableAtExtremes) {
  EXPECT_EQ(sigmoid(-1000.0), 0.0);
  EXPECT_EQ(sigmoid(1000.0), 1.0);
  EXPECT_NEAR(softplus(-20.0), 2.0611536203143807e-9, 1e-23);
  EXPECT_DOUBLE_EQ(softplus(800.0), 800.0);
}

TEST(Tensor, SliceAndStackRoundTrip) {
  const Tensor4 x = oracle::random_tensor({3, 2, 2, 2}, 5);
  const Tensor4 y = stack_batch({x.slice_batch(0, 1), x.slice_batch(1, 2)});
  EXPECT_EQ(x, y);
  EXPECT_THROW(x.slice_batch(2, 2), ContractError);
}
