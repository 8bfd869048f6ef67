// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "tinyglass/trainer.hpp"

using namespace tinyglass;

namespace {

struct Fixture {
  Dataset data;
  Model model;
  TrainConfig cfg;
};

Fixture small_fixture() {
  SynthConfig sc;
  sc.seed = 2;
  sc.n_train = 8;
  sc.n_val = 4;
  sc.n_test = 8;
  sc.n_pool = 4;
  sc.size = 64;
  ModelConfig mc;
  mc.backbone = BackboneConfig::tiny();
  mc.hidden = 16;
  TrainConfig tc;
  tc.input_size = 64;
  tc.max_epochs = 2;
  tc.batch_size = 4;
  tc.lr_disc = 1e-3;
  tc.lr_adaptor = 1e-3;
  tc.gas_sigma = 1.0;
  tc.seed = 2;
  return {synth_dataset(sc), make_model(mc, 2), tc};
}

}  // namespace

TEST(Train, ShortRunIsDeterministic) {
  const Fixture f = small_fixture();
  const TrainResult a = train(f.model, f.data.train, f.data.val, f.cfg);
  const TrainResult b = train(f.model, f.data.train, f.data.val, f.cfg);
  ASSERT_EQ(a.history.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(a.history[i].l_total, b.history[i].l_total);
    EXPECT_EQ(a.history[i].val_auroc, b.history[i].val_auroc);
    EXPECT_DOUBLE_EQ(a.history[i].l_total, a.history[i].l_bce + a.history[i].l_focal);
  }
  EXPECT_EQ(a.last.disc.wa, b.last.disc.wa);
  EXPECT_EQ(*a.last.adaptor, *b.last.adaptor);
  EXPECT_GE(a.best.epoch, 1u);
  EXPECT_NE(a.last.disc.wa, f.model.head.disc.wa);
}

TEST(Train, ThreadCountDoesNotChangeResult) {
  Fixture f = small_fixture();
  f.cfg.max_epochs = 1;
  const TrainResult one = train(f.model, f.data.train, f.data.val, f.cfg);
  f.cfg.threads = 3;
  const TrainResult three = train(f.model, f.data.train, f.data.val, f.cfg);
  EXPECT_EQ(one.history[0].l_total, three.history[0].l_total);
  EXPECT_EQ(one.last.disc.wa, three.last.disc.wa);
}

TEST(Train, BackboneIsFrozen) {
  const Fixture f = small_fixture();
  const BackboneWeights before = f.model.backbone;
  train(f.model, f.data.train, f.data.val, f.cfg);
  EXPECT_EQ(f.model.backbone.stem.weights, before.stem.weights);
}

TEST(Train, InvalidConfigIsContractError) {
  Fixture f = small_fixture();
  f.cfg.input_size = 70;
  EXPECT_THROW(train(f.model, f.data.train, f.data.val, f.cfg), ContractError);
  f = small_fixture();
  f.cfg.lr_disc = 0.0;
  EXPECT_THROW(train(f.model, f.data.train, f.data.val, f.cfg), ContractError);
}

TEST(History, CsvHasOneRowPerEpoch) {
  const std::vector<EpochRecord> h{{1, 0.5, 0.1, 0.6, 0.7}, {2, 0.4, 0.1, 0.5, 0.8}};
  const std::string csv = history_csv(h);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_EQ(csv.rfind("epoch,l_bce,l_focal,l_total,val_auroc\n", 0), 0u);
}

TEST(Sweep, RejectsBadRates) {
  const Fixture f = small_fixture();
  EXPECT_THROW(contamination_sweep(f.model, f.data, {}, f.cfg, {}), ContractError);
  EXPECT_THROW(contamination_sweep(f.model, f.data, {0.0, 0.4}, f.cfg, {}), ContractError);
  EXPECT_THROW(contamination_sweep(f.model, f.data, {0.1, 0.05}, f.cfg, {}), ContractError);
  Dataset tiny_pool = f.data;
  tiny_pool.pool.resize(1);
  EXPECT_THROW(contamination_sweep(f.model, tiny_pool, {0.0, 0.3}, f.cfg, {}), ContractError);
}

TEST(Sweep, EntriesFollowRates) {
  Fixture f = small_fixture();
  f.cfg.max_epochs = 1;
  EvalConfig ev;
  ev.input_size = 64;
  const SweepResult r = contamination_sweep(f.model, f.data, {0.0, 0.2}, f.cfg, ev);
  ASSERT_EQ(r.entries.size(), 2u);
  EXPECT_EQ(r.at(0.0).injected, 0u);
  EXPECT_EQ(r.at(0.2).injected, contamination_count(8, 0.2));
  EXPECT_THROW(r.at(0.1), ContractError);
}

TEST(Calibration, NormalThenLasCopyPerImage) {
  const Fixture f = small_fixture();
  const auto imgs = calibration_images(f.model, f.data.train, 3, f.cfg);
  ASSERT_EQ(imgs.size(), 6u);
  for (std::size_t i = 0; i < 3; ++i) {
    const Tensor4 normal = preprocess(f.data.train[i], 64);
    EXPECT_EQ(imgs[2 * i], normal);
    EXPECT_EQ(imgs[2 * i + 1].shape(), normal.shape());
    EXPECT_NE(imgs[2 * i + 1], normal);
  }
  EXPECT_EQ(calibration_images(f.model, f.data.train, 3, f.cfg), imgs);
  EXPECT_EQ(calibration_images(f.model, f.data.train, 100, f.cfg).size(), 2 * f.data.train.size());
  EXPECT_THROW(calibration_images(f.model, f.data.train, 0, f.cfg), ContractError);
}
