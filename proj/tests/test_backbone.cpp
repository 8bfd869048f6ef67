// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <map>

#include "oracles.hpp"
#include "tinyglass/backbone.hpp"
#include "tinyglass/tgw.hpp"

using namespace tinyglass;

namespace {

struct Unfolded {
  std::map<std::string, std::vector<double>> t;
};

// Random unfolded conv + BN parameters, already rounded to float.
Unfolded random_unfolded(const BackboneConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 g(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> ud(0.5, 1.5);
  auto f = [](double v) { return static_cast<double>(static_cast<float>(v)); };
  Unfolded u;
  for (const auto& l : backbone_layout(cfg)) {
    const double sd = std::sqrt(2.0 / static_cast<double>(l.in_ch * l.k * l.k));
    auto& w = u.t[l.name + ".weight"];
    for (std::size_t i = 0; i < l.out_ch * l.in_ch * l.k * l.k; ++i) w.push_back(f(sd * nd(g)));
    for (const char* s : {".weight", ".bias", ".running_mean", ".running_var"}) {
      auto& v = u.t[l.bn + s];
      for (std::size_t i = 0; i < l.out_ch; ++i) {
        const std::string k = s;
        v.push_back(f(k == ".weight" || k == ".running_var" ? ud(g) : 0.1 * nd(g)));
      }
    }
  }
  return u;
}

TgwFile to_tgw(const BackboneConfig& cfg, const Unfolded& u) {
  TgwFile f;
  for (const auto& [name, dims] : backbone_tensor_table(cfg)) f.add_f32(name, dims, u.t.at(name));
  return f;
}

// Two-stage reference: unfolded conv, then batch norm, then activation.
oracle::Nd conv_bn(const oracle::Nd& x, const Unfolded& u, const ConvLayout& l, double eps) {
  oracle::Nd y = oracle::conv(x, u.t.at(l.name + ".weight"), {}, l.out_ch, l.k, l.stride, l.padding);
  oracle::batchnorm(y, u.t.at(l.bn + ".weight"), u.t.at(l.bn + ".bias"), u.t.at(l.bn + ".running_mean"),
                    u.t.at(l.bn + ".running_var"), eps);
  return y;
}

std::pair<oracle::Nd, oracle::Nd> reference_forward(const BackboneConfig& cfg, const Unfolded& u, const oracle::Nd& x) {
  const auto layout = backbone_layout(cfg);
  std::map<std::string, ConvLayout> by;
  for (const auto& l : layout) by[l.name] = l;
  oracle::Nd h = conv_bn(x, u, by["conv1"], cfg.bn_eps);
  oracle::relu(h);
  h = oracle::pool(h, true, 3, 2, 1);
  oracle::Nd f2;
  for (int s = 1; s <= 3; ++s) {
    for (int b = 0; b < 2; ++b) {
      const std::string p = "layer" + std::to_string(s) + "." + std::to_string(b) + ".";
      oracle::Nd a = conv_bn(h, u, by[p + "conv1"], cfg.bn_eps);
      oracle::relu(a);
      a = conv_bn(a, u, by[p + "conv2"], cfg.bn_eps);
      const oracle::Nd id = by.count(p + "downsample.0") ? conv_bn(h, u, by[p + "downsample.0"], cfg.bn_eps) : h;
      for (std::size_t i = 0; i < a.v.size(); ++i) a.v[i] += id.v[i];
      oracle::relu(a);
      h = a;
    }
    if (s == 2) f2 = h;
  }
  return {f2, h};
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("tinyglass_test_" + name);
}

}  // namespace

TEST(BackboneParams, Resnet18ConvCount) {
  EXPECT_EQ(backbone_param_count(BackboneConfig::resnet18()).conv, 2'778'304u);
  // Stem through layer3 by hand: 9408 + 4*36864 + (73728+147456*3+8192) + (294912+589824*3+32768).
  EXPECT_EQ(9408u + 4u * 36864u + (73728u + 3u * 147456u + 8192u) + (294912u + 3u * 589824u + 32768u), 2'778'304u);
}

TEST(BackboneParams, CountIsSeedIndependent) {
  for (std::uint64_t seed : {0u, 1u, 99u}) {
    const BackboneWeights w = backbone_random_init(seed);
    std::size_t n = 0;
    w.for_each_conv([&](const std::string&, const ConvSpec& c) { n += c.weight_count(); });
    EXPECT_EQ(n, 2'778'304u);
  }
}

TEST(BackboneLayout, NoStageFourOrClassifier) {
  for (const auto& [name, dims] : backbone_tensor_table(BackboneConfig::resnet18())) {
    EXPECT_EQ(name.find("layer4"), std::string::npos);
    EXPECT_EQ(name.find("fc."), std::string::npos);
  }
}

TEST(ExtractFeatures, ShapesAt256) {
  const auto [f2, f3] = feature_shapes(BackboneConfig::resnet18(), Shape4{1, 3, 256, 256});
  EXPECT_EQ(f2, (Shape4{1, 128, 32, 32}));
  EXPECT_EQ(f3, (Shape4{1, 256, 16, 16}));
}

TEST(ExtractFeatures, RejectsBadInput) {
  const BackboneWeights w = backbone_random_init(0, 1.0, BackboneConfig::tiny());
  EXPECT_THROW(extract_features(w, Tensor4(Shape4{1, 1, 64, 64})), ContractError);
  EXPECT_THROW(extract_features(w, Tensor4(Shape4{1, 3, 48, 64})), ContractError);
}

TEST(ExtractFeatures, DeterministicAndWeightsUntouched) {
  const BackboneWeights w = backbone_random_init(4, 1.0, BackboneConfig::tiny());
  const BackboneWeights before = w;
  const Tensor4 x = oracle::random_tensor({2, 3, 64, 64}, 8);
  const FeaturePair a = extract_features(w, x);
  const FeaturePair b = extract_features(w, x);
  EXPECT_EQ(a.f2, b.f2);
  EXPECT_EQ(a.f3, b.f3);
  EXPECT_EQ(w.stem.weights, before.stem.weights);
}

TEST(LoadWeights, UnfoldedBnMatchesTwoStageReferenceResnet18) {
  const BackboneConfig cfg = BackboneConfig::resnet18();
  const Unfolded u = random_unfolded(cfg, 5);
  const Tensor4 x = oracle::random_tensor({1, 3, 64, 64}, 6, 0.0, 1.0);
  const auto [f2, f3] = reference_forward(cfg, u, oracle::from(x));

  TgwFile f = to_tgw(cfg, u);
  f.add_f32("ref.input", x);
  f.add_f32("ref.f2", oracle::to(f2));
  f.add_f32("ref.f3", oracle::to(f3));
  const auto path = temp_path("ref_resnet18.tgw");
  f.write(path);

  const TgwFile back = TgwFile::read(path);
  const BackboneWeights w = backbone_from_tgw(back, cfg);
  const ReferenceCheck rc = check_reference(w, back);
  EXPECT_LE(rc.f2_rel, 1e-4);
  EXPECT_LE(rc.f3_rel, 1e-4);
  EXPECT_TRUE(rc.pass());
  EXPECT_EQ(back.get("ref.f2").dims, (std::vector<std::uint32_t>{1, 128, 8, 8}));
  std::filesystem::remove(path);
}

TEST(LoadWeights, ReferenceCheckDetectsCorruption) {
  const BackboneConfig cfg = BackboneConfig::tiny();
  const Unfolded u = random_unfolded(cfg, 9);
  const Tensor4 x = oracle::random_tensor({1, 3, 32, 32}, 10, 0.0, 1.0);
  auto [f2, f3] = reference_forward(cfg, u, oracle::from(x));
  f3.v[0] += 1.0;
  TgwFile f = to_tgw(cfg, u);
  f.add_f32("ref.input", x);
  f.add_f32("ref.f2", oracle::to(f2));
  f.add_f32("ref.f3", oracle::to(f3));
  const ReferenceCheck rc = check_reference(backbone_from_tgw(f, cfg), f);
  EXPECT_LE(rc.f2_rel, 1e-4);
  EXPECT_GT(rc.f3_rel, 1e-4);
  EXPECT_FALSE(rc.pass());
}

TEST(LoadWeights, RejectsStageFourTensor) {
  const BackboneConfig cfg = BackboneConfig::tiny();
  TgwFile f = to_tgw(cfg, random_unfolded(cfg, 1));
  const std::vector<double> w(4, 0.0);
  f.add_f32("layer4.0.conv1.weight", {1, 1, 2, 2}, w);
  try {
    backbone_from_tgw(f, cfg);
    FAIL() << "expected rejection";
  } catch (const TgwError& e) {
    EXPECT_EQ(e.code(), TgwErrc::unexpected_tensor);
    EXPECT_NE(std::string(e.what()).find("unexpected tensor"), std::string::npos);
  }
}

TEST(LoadWeights, MissingAndMisshapenTensors) {
  const BackboneConfig cfg = BackboneConfig::tiny();
  const Unfolded u = random_unfolded(cfg, 2);
  TgwFile missing;
  for (const auto& [name, dims] : backbone_tensor_table(cfg))
    if (name != "layer3.1.bn2.running_var") missing.add_f32(name, dims, u.t.at(name));
  try {
    backbone_from_tgw(missing, cfg);
    FAIL();
  } catch (const TgwError& e) {
    EXPECT_EQ(e.code(), TgwErrc::missing_tensor);
  }
  TgwFile bad;
  for (const auto& [name, dims] : backbone_tensor_table(cfg)) {
    if (name == "conv1.weight") {
      bad.add_f32(name, {dims[0], dims[1], 3, 3}, std::vector<double>(dims[0] * dims[1] * 9, 0.0));
    } else {
      bad.add_f32(name, dims, u.t.at(name));
    }
  }
  try {
    backbone_from_tgw(bad, cfg);
    FAIL();
  } catch (const TgwError& e) {
    EXPECT_EQ(e.code(), TgwErrc::shape_mismatch);
  }
}

TEST(LoadWeights, EmptyFileIsBadMagic) {
  const auto path = temp_path("empty.tgw");
  { std::ofstream(path, std::ios::binary); }
  try {
    load_weights(path);
    FAIL();
  } catch (const TgwError& e) {
    EXPECT_EQ(e.code(), TgwErrc::bad_magic);
  }
  std::filesystem::remove(path);
}

TEST(RandomInit, SeededAndScaled) {
  const auto a = backbone_random_init(3, 1.0, BackboneConfig::tiny());
  const auto b = backbone_random_init(3, 1.0, BackboneConfig::tiny());
  const auto c = backbone_random_init(3, 0.5, BackboneConfig::tiny());
  EXPECT_EQ(a.stem.weights, b.stem.weights);
  for (std::size_t i = 0; i < a.stem.weights.size(); ++i)
    EXPECT_NEAR(c.stem.weights[i], 0.5 * a.stem.weights[i], 1e-6 * std::abs(a.stem.weights[i]) + 1e-12);
}
