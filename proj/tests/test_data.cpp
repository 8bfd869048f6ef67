// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>

#include "oracles.hpp"
#include "tinyglass/data.hpp"

using namespace tinyglass;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("tinyglass_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

SynthConfig small_synth() {
  SynthConfig c;
  c.seed = 3;
  c.n_train = 6;
  c.n_val = 4;
  c.n_test = 8;
  c.n_pool = 3;
  c.size = 64;
  return c;
}

}  // namespace

TEST(Synth, DeterministicAndSeeded) {
  const Dataset a = synth_dataset(small_synth());
  const Dataset b = synth_dataset(small_synth());
  SynthConfig other = small_synth();
  other.seed = 4;
  const Dataset c = synth_dataset(other);
  ASSERT_EQ(a.test.size(), 8u);
  for (std::size_t i = 0; i < a.test.size(); ++i) {
    EXPECT_EQ(a.test[i].image, b.test[i].image);
    EXPECT_EQ(a.test[i].label, b.test[i].label);
  }
  EXPECT_NE(a.train[0].image, c.train[0].image);
}

TEST(Synth, SplitContents) {
  const Dataset d = synth_dataset(small_synth());
  EXPECT_EQ(count_anomalous(d.train), 0u);
  EXPECT_EQ(count_anomalous(d.test), 4u);
  EXPECT_EQ(count_anomalous(d.val), 2u);
  EXPECT_EQ(count_anomalous(d.pool), 3u);
  for (const auto* part : {&d.train, &d.val, &d.test, &d.pool})
    for (const auto& s : *part) {
      EXPECT_NO_THROW(s.validate());
      EXPECT_EQ(s.image.shape(), (Shape4{1, 3, 64, 64}));
      for (double v : s.image.data()) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
      if (s.anomalous() && s.mask) {
        double area = 0.0;
        for (double v : s.mask->data()) area += v;
        EXPECT_GT(area, 0.0);
      }
    }
}

TEST(Synth, DefectsLieInsideMasks) {
  SynthConfig c = small_synth();
  const Dataset d = synth_dataset(c);
  // Re-drawing the same slot as normal yields the undamaged part.
  for (std::size_t i = 0; i < d.test.size(); ++i) {
    const Sample& s = d.test[i];
    if (!s.anomalous()) continue;
    const Sample clean = detail::synth_sample(c, 2, i, false);
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t p = 0; p < 64 * 64; ++p)
        if ((*s.mask)[p] == 0.0) ASSERT_EQ(s.image[ch * 64 * 64 + p], clean.image[ch * 64 * 64 + p]);
  }
}

TEST(Dataset, WriteThenLoadRoundTrip) {
  const fs::path root = fresh_dir("roundtrip");
  const Dataset d = synth_dataset(small_synth());
  write_dataset(root, "synth", d);
  const Dataset back = load_dataset(root, "synth", 0.0, 0);
  ASSERT_EQ(back.train.size(), d.train.size());
  ASSERT_EQ(back.test.size(), d.val.size() + d.test.size());
  EXPECT_TRUE(back.val.empty());
  for (std::size_t i = 0; i < d.train.size(); ++i)
    for (std::size_t p = 0; p < d.train[i].image.size(); ++p)
      ASSERT_NEAR(back.train[i].image[p], d.train[i].image[p], 0.5 / 255.0 + 1e-12);
  EXPECT_EQ(count_anomalous(back.test), count_anomalous(d.val) + count_anomalous(d.test));
  for (const auto& s : back.test) EXPECT_EQ(s.mask.has_value(), s.anomalous());
  EXPECT_EQ(load_pool(root, "synth").size(), 3u);
  fs::remove_all(root);
}

TEST(Dataset, StratifiedSplitKeepsClassRatio) {
  const fs::path root = fresh_dir("split");
  SynthConfig c = small_synth();
  c.n_test = 20;
  c.n_val = 0;
  write_dataset(root, "synth", synth_dataset(c));
  const Dataset d = load_dataset(root, "synth", 0.3, 1);
  EXPECT_EQ(d.val.size(), 6u);
  EXPECT_EQ(count_anomalous(d.val), 3u);
  EXPECT_EQ(d.test.size(), 14u);
  const Dataset again = load_dataset(root, "synth", 0.3, 1);
  for (std::size_t i = 0; i < d.val.size(); ++i) EXPECT_EQ(d.val[i].source, again.val[i].source);
  fs::remove_all(root);
}

TEST(Dataset, CarvePoolFromTest) {
  Dataset d = synth_dataset(small_synth());
  d.pool.clear();
  carve_contamination_pool(d, 2);
  EXPECT_EQ(d.pool.size(), 2u);
  EXPECT_EQ(d.test.size(), 6u);
  EXPECT_EQ(count_anomalous(d.test), 2u);
  EXPECT_THROW(carve_contamination_pool(d, 5), ContractError);
}

TEST(Dataset, LoadErrors) {
  const fs::path root = fresh_dir("errors");
  try {
    load_dataset(root, "nope");
    FAIL();
  } catch (const DatasetError& e) {
    EXPECT_EQ(e.code(), DatasetErrc::missing_directory);
  }
  write_dataset(root, "synth", synth_dataset(small_synth()));
  fs::create_directories(root / "synth" / "train" / "scratch");
  try {
    load_dataset(root, "synth");
    FAIL();
  } catch (const DatasetError& e) {
    EXPECT_EQ(e.code(), DatasetErrc::defect_in_train);
  }
  fs::remove_all(root / "synth" / "train" / "scratch");
  { std::ofstream(root / "synth" / "train" / "good" / "0000.png") << "not a png"; }
  try {
    load_dataset(root, "synth");
    FAIL();
  } catch (const DatasetError& e) {
    EXPECT_EQ(e.code(), DatasetErrc::unreadable_image);
  }
  fs::remove_all(root);
}

TEST(Preprocess, NormalizesAndResizes) {
  Sample s;
  s.image = Tensor4(Shape4{1, 3, 40, 40}, 0.5);
  const Tensor4 x = preprocess(s, 64);
  EXPECT_EQ(x.shape(), (Shape4{1, 3, 64, 64}));
  EXPECT_NEAR(x.at(0, 0, 10, 10), (0.5 - 0.485) / 0.229, 1e-12);
  EXPECT_NEAR(x.at(0, 2, 10, 10), (0.5 - 0.406) / 0.225, 1e-12);
  EXPECT_THROW(preprocess(s, 50), ContractError);
}

TEST(Augment, DisabledIsNoOp) {
  const Dataset d = synth_dataset(small_synth());
  const Sample& s = d.test[1];
  const Sample a = augment(s, AugmentConfig::disabled(), 5);
  EXPECT_EQ(a.image, s.image);
  EXPECT_EQ(a.mask.has_value(), s.mask.has_value());
}

TEST(Augment, DeterministicPerIndexAndMaskStaysBinary) {
  const Dataset d = synth_dataset(small_synth());
  AugmentConfig cfg;
  cfg.apply_prob = 1.0;
  cfg.seed = 9;
  const Sample* bad = nullptr;
  for (const auto& s : d.test)
    if (s.mask) bad = &s;
  ASSERT_NE(bad, nullptr);
  const Sample a = augment(*bad, cfg, 3), b = augment(*bad, cfg, 3), c = augment(*bad, cfg, 4);
  EXPECT_EQ(a.image, b.image);
  EXPECT_NE(a.image, c.image);
  for (double v : a.mask->data()) EXPECT_TRUE(v == 0.0 || v == 1.0);
  EXPECT_EQ(a.label, bad->label);
}

TEST(Augment, FlipOnlyIsExactMirror) {
  const Dataset d = synth_dataset(small_synth());
  AugmentConfig cfg = AugmentConfig::disabled();
  cfg.hflip = true;
  cfg.apply_prob = 1.0;
  const Sample a = augment(d.train[0], cfg, 0);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 64; ++y)
      for (std::size_t x = 0; x < 64; ++x) ASSERT_EQ(a.image.at(0, c, y, x), d.train[0].image.at(0, c, y, 63 - x));
}

TEST(Textures, SeededAndInRange) {
  const Tensor4 a = procedural_texture(32, 32, 1), b = procedural_texture(32, 32, 1);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, procedural_texture(32, 32, 2));
  for (double v : a.data()) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
}
