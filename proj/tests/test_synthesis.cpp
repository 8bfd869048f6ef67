// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <set>

#include "oracles.hpp"
#include "tinyglass/synthesis.hpp"

using namespace tinyglass;

namespace {

Sample make_sample(Label l, double v) {
  Sample s;
  s.image = Tensor4(Shape4{1, 3, 8, 8}, v);
  s.label = l;
  if (l == Label::anomalous) s.mask = Tensor4(Shape4{1, 1, 8, 8}, 1.0);
  return s;
}

}  // namespace

TEST(Perlin, DeterministicPerSeed) {
  const PerlinMask a = perlin(64, 64, 4, 11, 0.5);
  const PerlinMask b = perlin(64, 64, 4, 11, 0.5);
  const PerlinMask c = perlin(64, 64, 4, 12, 0.5);
  EXPECT_EQ(a.binary, b.binary);
  EXPECT_EQ(a.grid, b.grid);
  EXPECT_NE(a.grid, c.grid);
}

TEST(Perlin, GridNormalizedAndThresholded) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const PerlinMask m = perlin(32, 48, 3, seed, 0.6);
    double lo = 1, hi = 0;
    for (std::size_t i = 0; i < m.grid.size(); ++i) {
      lo = std::min(lo, m.grid[i]);
      hi = std::max(hi, m.grid[i]);
      EXPECT_EQ(m.binary[i], m.grid[i] > 0.6 ? 1.0 : 0.0);
    }
    EXPECT_EQ(lo, 0.0);
    EXPECT_EQ(hi, 1.0);
    EXPECT_GT(m.area_fraction(), 0.0);
    EXPECT_LT(m.area_fraction(), 1.0);
  }
}

TEST(Perlin, HigherThresholdShrinksArea) {
  for (std::uint64_t seed = 0; seed < 5; ++seed)
    EXPECT_LE(perlin(64, 64, 4, seed, 0.8).area_fraction(), perlin(64, 64, 4, seed, 0.5).area_fraction());
}

TEST(Perlin, RejectsBadArguments) {
  EXPECT_THROW(perlin(4, 64, 3, 0, 0.5), ContractError);
  EXPECT_THROW(perlin(64, 64, 0, 0, 0.5), ContractError);
  EXPECT_THROW(perlin(64, 64, 3, 0, 1.0), ContractError);
}

TEST(Las, BitExactOutsideMaskAcrossSeeds) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Tensor4 img = oracle::random_tensor({1, 3, 32, 32}, seed, 0.0, 1.0);
    const Tensor4 tex = oracle::random_tensor({1, 3, 32, 32}, seed + 1000, 0.0, 1.0);
    const PerlinMask m = perlin(32, 32, 3, seed, 0.7);
    const double beta = 0.1 * static_cast<double>(seed % 10);
    const auto [out, mask] = las_corrupt(img, tex, m, beta);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 32 * 32; ++i) {
        const std::size_t k = c * 32 * 32 + i;
        if (m.binary[i] == 0.0) {
          ASSERT_EQ(out[k], img[k]);
        } else {
          ASSERT_NEAR(out[k], beta * img[k] + (1 - beta) * tex[k], 1e-15);
        }
      }
    EXPECT_EQ(mask, m.binary);
  }
}

TEST(Las, ShapeMismatchIsContractError) {
  const Tensor4 img(Shape4{1, 3, 16, 16});
  EXPECT_THROW(las_corrupt(img, Tensor4(Shape4{1, 3, 8, 8}), Tensor4(Shape4{1, 1, 16, 16}), 0.5), ContractError);
  EXPECT_THROW(las_corrupt(img, img, Tensor4(Shape4{1, 1, 8, 16}), 0.5), ContractError);
  EXPECT_THROW(las_corrupt(img, img, Tensor4(Shape4{1, 1, 16, 16}), 1.5), ContractError);
}

TEST(DownsampleMask, MajorityPerCell) {
  Tensor4 m(Shape4{1, 1, 4, 4});
  m.at(0, 0, 0, 0) = 1;
  m.at(0, 0, 0, 1) = 1;  // half of the top-left cell
  m.at(0, 0, 3, 3) = 1;  // a quarter of the bottom-right cell
  const Tensor4 d = downsample_mask(m, 2, 2);
  EXPECT_EQ(d.values(), (std::vector<double>{1, 0, 0, 0}));
  EXPECT_THROW(downsample_mask(m, 3, 3), ContractError);
}

TEST(Gas, NormsStayInBandOver1e5Vectors) {
  const std::size_t dim = 384, side = 64;
  const GasConfig cfg = GasConfig::defaults(dim);
  std::mt19937_64 g(9);
  const GradientFn grad = [&](const Tensor4& p) {
    Tensor4 out(p.shape());
    std::normal_distribution<double> nd(0.0, 5.0);
    for (double& v : out.data()) v = nd(g);
    return out;
  };
  std::size_t checked = 0;
  for (std::uint64_t batch = 0; batch < 25; ++batch) {
    const Tensor4 e = oracle::random_tensor({1, dim, side, side}, batch);
    const Tensor4 d = gas_delta(e, cfg, grad, batch);
    const std::size_t plane = side * side;
    for (std::size_t p = 0; p < plane; ++p) {
      double s = 0.0;
      for (std::size_t c = 0; c < dim; ++c) s += d[c * plane + p] * d[c * plane + p];
      const double r = std::sqrt(s);
      ASSERT_GE(r, cfg.r_min);
      ASSERT_LE(r, cfg.r_max);
      ++checked;
    }
  }
  EXPECT_GE(checked, 100'000u);
}

TEST(Gas, SingleStepIsNormalizedAscentBeforeProjection) {
  const std::size_t dim = 6;
  const Tensor4 e = oracle::random_tensor({1, dim, 3, 3}, 4);
  GasConfig wide;
  wide.sigma = 0.5;
  wide.ascent_lr = 0.2;
  wide.r_min = 1e-9;
  wide.r_max = 1e9;
  const GradientFn zero = [](const Tensor4& p) { return Tensor4(p.shape()); };
  const Tensor4 d0 = gas_delta(e, wide, zero, 77);
  const Tensor4 gconst = oracle::random_tensor({1, dim, 3, 3}, 5);
  const GradientFn grad = [&](const Tensor4&) { return gconst; };
  const Tensor4 d1 = gas_delta(e, wide, grad, 77);
  for (std::size_t p = 0; p < 9; ++p) {
    double gn = 0.0;
    for (std::size_t c = 0; c < dim; ++c) gn += gconst[c * 9 + p] * gconst[c * 9 + p];
    gn = std::sqrt(gn);
    for (std::size_t c = 0; c < dim; ++c)
      EXPECT_NEAR(d1[c * 9 + p], d0[c * 9 + p] + 0.2 * gconst[c * 9 + p] / gn, 1e-14);
  }
}

TEST(Gas, ProbeSeesPerturbedEmbedding) {
  const Tensor4 e = oracle::random_tensor({1, 4, 2, 2}, 6);
  GasConfig cfg = GasConfig::defaults(4, 0.1);
  Tensor4 seen;
  const GradientFn grad = [&](const Tensor4& p) {
    seen = p;
    return Tensor4(p.shape(), 1.0);
  };
  GasConfig wide = cfg;
  wide.r_min = 1e-9;
  wide.r_max = 1e9;
  const GradientFn zero = [](const Tensor4& p) { return Tensor4(p.shape()); };
  const Tensor4 d0 = gas_delta(e, wide, zero, 2);
  gas_perturb(e, cfg, grad, 2);
  for (std::size_t i = 0; i < e.size(); ++i) EXPECT_NEAR(seen[i], e[i] + d0[i], 1e-15);
}

TEST(Gas, InvalidBandOrMissingGradient) {
  GasConfig c = GasConfig::defaults(4);
  c.r_min = 2 * c.r_max;
  EXPECT_THROW(gas_delta(Tensor4(Shape4{1, 4, 1, 1}), c, {}, 0), ContractError);
  EXPECT_THROW(gas_delta(Tensor4(Shape4{1, 4, 1, 1}), GasConfig::defaults(4), {}, 0), ContractError);
}

TEST(Contamination, CountMatchesRate) {
  EXPECT_EQ(contamination_count(95, 0.05), 5u);
  EXPECT_EQ(contamination_count(100, 0.0), 0u);
  for (double rate : {0.05, 0.1, 0.15, 0.2, 0.3})
    for (std::size_t n : {10u, 64u, 95u, 200u}) {
      const std::size_t k = contamination_count(n, rate);
      const double frac = static_cast<double>(k) / static_cast<double>(n + k);
      EXPECT_GE(frac, rate - 1e-12);
      EXPECT_LT(static_cast<double>(k - 1) / static_cast<double>(n + k - 1), rate);
    }
}

TEST(Contamination, AppendsRelabeledDistinctPoolSamples) {
  SampleList train, pool;
  for (int i = 0; i < 19; ++i) train.push_back(make_sample(Label::normal, 0.0));
  for (int i = 0; i < 10; ++i) pool.push_back(make_sample(Label::anomalous, 0.1 * (i + 1)));
  const SampleList out = contaminate(train, pool, 0.05, 3);
  ASSERT_EQ(out.size(), 20u);
  EXPECT_EQ(count_anomalous(out), 0u);
  EXPECT_FALSE(out.back().mask.has_value());
  EXPECT_GT(out.back().image[0], 0.0);
  const SampleList big = contaminate(train, pool, 0.3, 3);
  std::set<double> seen;
  for (std::size_t i = 19; i < big.size(); ++i) seen.insert(big[i].image[0]);
  EXPECT_EQ(seen.size(), big.size() - 19);
  EXPECT_EQ(contaminate(train, pool, 0.3, 3)[20].image, big[20].image);
  EXPECT_EQ(contaminate(train, pool, 0.0, 3).size(), 19u);
}

TEST(Contamination, RejectsOutOfRangeAndSmallPool) {
  SampleList train(10, make_sample(Label::normal, 0.0));
  SampleList pool(2, make_sample(Label::anomalous, 1.0));
  EXPECT_THROW(contaminate(train, pool, 0.31, 0), ContractError);
  EXPECT_THROW(contaminate(train, pool, 0.3, 0), ContractError);
}
