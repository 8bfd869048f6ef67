// SPDX-License-Identifier: Apache-2.0
//
// Three-branch head training (normal, GAS, LAS) with best-checkpoint
// selection on validation image AUROC, and the contamination sweep.
#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tinyglass/data.hpp"
#include "tinyglass/error.hpp"
#include "tinyglass/evaluator.hpp"
#include "tinyglass/head.hpp"
#include "tinyglass/model.hpp"
#include "tinyglass/parallel.hpp"
#include "tinyglass/rng.hpp"
#include "tinyglass/synthesis.hpp"

namespace tinyglass {

struct LasConfig {
  std::size_t octaves = 6;
  double threshold = 0.78;
  double beta = 0.5;
  std::size_t max_tries = 8;  // redraws when the mask vanishes on the patch grid

  void validate() const {
    detail::require(octaves >= 1, "LAS octaves must be positive");
    detail::require(threshold > 0.0 && threshold < 1.0, "LAS threshold must lie in (0,1)");
    detail::require(beta >= 0.0 && beta <= 1.0, "LAS beta must lie in [0,1]");
    detail::require(max_tries >= 1, "LAS max_tries must be positive");
  }
};

struct TrainConfig {
  double lr_adaptor = 1e-4;
  double lr_disc = 2e-4;
  double weight_decay = 1e-5;
  std::size_t batch_size = 8;
  std::size_t max_epochs = 200;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  std::uint64_t seed = 0;
  std::size_t input_size = 256;
  std::size_t threads = 1;

  // GAS; the radius band is derived from the embedding width when zero.
  double gas_sigma = 0.015;
  std::size_t gas_steps = 1;
  double gas_lr = 0.01;
  double gas_r_min = 0.0;
  double gas_r_max = 0.0;

  LasConfig las;
  AugmentConfig augment;
  std::filesystem::path texture_dir;  // empty: procedural textures

  double score_sigma = 4.0;
  std::size_t score_top_k = 1;
  NormStats stats;

  LossConfig loss() const { return {focal_alpha, focal_gamma}; }

  GasConfig gas(std::size_t dim) const {
    GasConfig g = GasConfig::defaults(dim, gas_sigma);
    g.ascent_steps = gas_steps;
    g.ascent_lr = gas_lr;
    if (gas_r_min > 0.0) g.r_min = gas_r_min;
    if (gas_r_max > 0.0) g.r_max = gas_r_max;
    return g;
  }

  void validate() const {
    detail::require(lr_adaptor > 0.0 && lr_disc > 0.0, "learning rates must be positive");
    detail::require(weight_decay >= 0.0, "weight_decay must be non-negative");
    detail::require(batch_size >= 1, "batch_size must be positive");
    detail::require(focal_alpha > 0.0 && focal_alpha <= 1.0, "focal_alpha must lie in (0,1]");
    detail::require(focal_gamma >= 0.0, "focal_gamma must be non-negative");
    detail::require(input_size > 0 && input_size % 32 == 0, "input_size must be a positive multiple of 32");
    las.validate();
    augment.validate();
  }
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double l_bce = 0.0;
  double l_focal = 0.0;
  double l_total = 0.0;
  double val_auroc = 0.0;
};

struct TrainResult {
  Checkpoint best;   // head with the highest validation AUROC
  HeadParams last;   // head after the final epoch
  std::vector<EpochRecord> history;
};

inline std::string history_csv(const std::vector<EpochRecord>& h) {
  std::ostringstream o;
  o << std::setprecision(17) << "epoch,l_bce,l_focal,l_total,val_auroc\n";
  for (const auto& r : h) o << r.epoch << "," << r.l_bce << "," << r.l_focal << "," << r.l_total << "," << r.val_auroc << "\n";
  return o.str();
}

/// Texture images for LAS, resized to the training resolution on use.
inline std::vector<Tensor4> load_textures(const std::filesystem::path& dir) {
  std::vector<Tensor4> out;
  if (dir.empty()) return out;
  if (!std::filesystem::is_directory(dir)) throw IoError("texture directory not found: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) out.push_back(read_image(f));
  if (out.empty()) throw IoError("no texture images in " + dir.string());
  return out;
}

namespace detail {

struct PreparedPair {
  Tensor4 normal;    // normalized (1,3,S,S)
  Tensor4 las;       // normalized LAS-corrupted image
  Tensor4 las_grid;  // (1,1,G,G) labels
};

inline void normalize_inplace(Tensor4& img, const NormStats& stats) {
  const std::size_t plane = img.h() * img.w();
  for (std::size_t c = 0; c < 3; ++c) {
    double* p = img.plane(0, c);
    for (std::size_t i = 0; i < plane; ++i) p[i] = (p[i] - stats.mean[c]) / stats.std[c];
  }
}

// Augment -> resize -> LAS -> normalize, all keyed by `key`.
inline PreparedPair prepare_pair(const Sample& s, const TrainConfig& cfg, std::uint64_t key, std::size_t grid,
                                 const std::vector<Tensor4>& textures) {
  AugmentConfig aug = cfg.augment;
  aug.seed = cfg.seed;
  const Sample a = augment(s, aug, key);
  Tensor4 img = bilinear_resize(a.image, cfg.input_size, cfg.input_size);
  const std::size_t S = cfg.input_size;
  PreparedPair out;
  for (std::size_t attempt = 0; attempt < cfg.las.max_tries; ++attempt) {
    const std::uint64_t k = derive_seed(key, attempt);
    const PerlinMask m = perlin(S, S, cfg.las.octaves, derive_seed(cfg.seed, Stream::perlin, k), cfg.las.threshold);
    Tensor4 tex;
    const std::uint64_t ts = derive_seed(cfg.seed, Stream::texture, k);
    if (textures.empty()) {
      tex = procedural_texture(S, S, ts);
    } else {
      Rng pick(ts);
      tex = bilinear_resize(textures[pick.below(textures.size())], S, S);
    }
    auto [las, mask] = las_corrupt(img, tex, m, cfg.las.beta);
    Tensor4 g = downsample_mask(mask, grid, grid);
    bool any = false;
    for (double v : g.data()) any = any || v > 0.0;
    if (any || attempt + 1 == cfg.las.max_tries) {
      out.las = std::move(las);
      out.las_grid = std::move(g);
      break;
    }
  }
  out.normal = std::move(img);
  normalize_inplace(out.normal, cfg.stats);
  normalize_inplace(out.las, cfg.stats);
  return out;
}

inline double val_auroc(const HeadParams& head, const Tensor4& val_raw, const std::vector<int>& labels,
                        const TrainConfig& cfg) {
  const Tensor4 p = sigmoid(disc_forward(head.disc, head.project(val_raw)));
  std::vector<double> scores(p.n());
  for (std::size_t i = 0; i < p.n(); ++i) {
    const Tensor4 up = bilinear_resize(p.slice_batch(i, 1), cfg.input_size, cfg.input_size);
    scores[i] = image_score(up, cfg.score_sigma, cfg.score_top_k);
  }
  return auroc(scores, labels);
}

}  // namespace detail

/// Trains the head on top of a frozen backbone. Every random draw comes from
/// cfg.seed, so identical inputs give bit-identical results.
inline TrainResult train(const BackboneWeights& backbone, const EmbeddingConfig& emb, HeadParams head,
                         const SampleList& data, const SampleList& val, const TrainConfig& cfg) {
  cfg.validate();
  detail::require(!data.empty(), "train needs a nonempty training set");
  const std::size_t n_bad = count_anomalous(val);
  detail::require(n_bad > 0 && n_bad < val.size(), "validation set needs both normal and anomalous samples");

  const Shape4 in{1, 3, cfg.input_size, cfg.input_size};
  const std::size_t grid = patch_grid_shape(backbone.config, emb, in).h;
  const std::size_t dim = backbone.config.embedding_channels();
  const GasConfig gas = cfg.gas(dim);
  const LossConfig loss = cfg.loss();
  const auto textures = load_textures(cfg.texture_dir);

  std::vector<int> val_labels(val.size());
  for (std::size_t i = 0; i < val.size(); ++i) val_labels[i] = val[i].anomalous() ? 1 : 0;
  const Tensor4 val_raw = raw_features(backbone, emb, preprocess_batch(val, cfg.input_size, cfg.stats), cfg.threads);

  TrainResult res;
  res.best = {head, 0, detail::val_auroc(head, val_raw, val_labels, cfg)};
  HeadOptimizer opt({cfg.lr_adaptor, 0.9, 0.999, 1e-8, cfg.weight_decay},
                    {cfg.lr_disc, 0.9, 0.999, 1e-8, cfg.weight_decay});
  std::vector<std::size_t> order(data.size());
  std::uint64_t step = 0;

  // Without augmentation the normal branch never changes between epochs.
  std::vector<Tensor4> normal_cache;
  if (!cfg.augment.any()) {
    normal_cache.resize(data.size());
    parallel_for(data.size(), cfg.threads, [&](std::size_t i) {
      Tensor4 img = bilinear_resize(data[i].image, cfg.input_size, cfg.input_size);
      detail::normalize_inplace(img, cfg.stats);
      normal_cache[i] = embed_raw(extract_features(backbone, img), emb);
    });
  }

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(derive_seed(cfg.seed, Stream::shuffle, epoch));
    shuffle_rng.shuffle(std::span<std::size_t>(order));

    double sb = 0.0, sf = 0.0, st = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t bs = std::min(cfg.batch_size, order.size() - start);
      std::vector<detail::PreparedPair> prep(bs);
      std::vector<Tensor4> nraw(bs), lraw(bs);
      parallel_for(bs, cfg.threads, [&](std::size_t j) {
        const std::size_t idx = order[start + j];
        const std::uint64_t key = epoch * data.size() + idx;
        prep[j] = detail::prepare_pair(data[idx], cfg, key, grid, textures);
        nraw[j] = normal_cache.empty() ? embed_raw(extract_features(backbone, prep[j].normal), emb)
                                       : normal_cache[idx];
        lraw[j] = embed_raw(extract_features(backbone, prep[j].las), emb);
      });
      std::vector<Tensor4> masks(bs);
      for (std::size_t j = 0; j < bs; ++j) masks[j] = std::move(prep[j].las_grid);
      AnomalyBatch batch = make_anomaly_batch(head, stack_batch<double>(nraw), stack_batch<double>(lraw),
                                              stack_batch<double>(masks), gas, loss,
                                              derive_seed(cfg.seed, Stream::gas, step));
      const HeadTape tape = head_forward(head, batch, loss);
      const HeadGradients g = head_backward(head, batch, tape, loss);
      opt.step(head, g);
      sb += tape.loss.l_bce;
      sf += tape.loss.l_focal;
      st += tape.loss.l_total;
      ++batches;
      ++step;
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.l_bce = sb / static_cast<double>(batches);
    rec.l_focal = sf / static_cast<double>(batches);
    rec.l_total = st / static_cast<double>(batches);
    if (!std::isfinite(rec.l_total)) {
      throw NumericError("non-finite training loss at epoch " + std::to_string(rec.epoch));
    }
    rec.val_auroc = detail::val_auroc(head, val_raw, val_labels, cfg);
    // The first trained epoch always replaces the initialization.
    if (res.best.epoch == 0 || rec.val_auroc > res.best.best_auroc) {
      res.best = {head, static_cast<std::uint32_t>(rec.epoch), rec.val_auroc};
    }
    res.history.push_back(rec);
  }
  res.last = head;
  return res;
}

inline TrainResult train(const Model& init, const SampleList& data, const SampleList& val, const TrainConfig& cfg) {
  return train(init.backbone, init.embedding, init.head, data, val, cfg);
}

/// INT8 calibration inputs: the first `count` training images, each followed
/// by a LAS-corrupted copy so activation ranges also cover anomalous
/// responses. Normal-only ranges clip every positive logit.
inline std::vector<Tensor4> calibration_images(const Model& m, const SampleList& data, std::size_t count,
                                               const TrainConfig& cfg) {
  cfg.validate();
  count = std::min(count, data.size());
  detail::require(count > 0, "calibration needs at least one training image");
  TrainConfig c = cfg;
  c.augment = AugmentConfig::disabled();
  const Shape4 in{1, 3, cfg.input_size, cfg.input_size};
  const std::size_t grid = patch_grid_shape(m.backbone.config, m.embedding, in).h;
  const auto textures = load_textures(cfg.texture_dir);
  std::vector<Tensor4> out;
  for (std::size_t i = 0; i < count; ++i) {
    detail::PreparedPair p = detail::prepare_pair(data[i], c, derive_seed(cfg.seed, Stream::calibration, i), grid, textures);
    out.push_back(std::move(p.normal));
    out.push_back(std::move(p.las));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Contamination sweep

struct SweepEntry {
  double rate = 0.0;
  std::size_t injected = 0;
  Metrics metrics;
  std::vector<EpochRecord> history;
  std::uint32_t best_epoch = 0;
};

struct SweepResult {
  std::vector<SweepEntry> entries;
  std::uint64_t seed = 0;

  const SweepEntry& at(double rate) const {
    for (const auto& e : entries)
      if (e.rate == rate) return e;
    detail::contract_fail("sweep has no entry for rate " + std::to_string(rate));
  }
};

inline std::vector<double> default_sweep_rates() { return {0.0, 0.05, 0.10, 0.20, 0.30}; }

/// For each rate: contaminate the training set, train from the same
/// initialization and seed, evaluate the best checkpoint on the untouched
/// test split.
inline SweepResult contamination_sweep(const Model& init, const Dataset& d, const std::vector<double>& rates,
                                       const TrainConfig& cfg, const EvalConfig& eval) {
  detail::require(!rates.empty(), "sweep needs at least one rate");
  for (std::size_t i = 0; i < rates.size(); ++i) {
    detail::require(rates[i] >= 0.0 && rates[i] <= 0.3, "sweep rates must lie in [0,0.3]");
    detail::require(i == 0 || rates[i] > rates[i - 1], "sweep rates must be strictly ascending");
  }
  const std::size_t need = contamination_count(d.train.size(), rates.back());
  if (need > d.pool.size()) {
    detail::contract_fail("sweep up to rate " + std::to_string(rates.back()) + " needs " + std::to_string(need) +
                          " defective samples, pool has " + std::to_string(d.pool.size()));
  }
  SweepResult out;
  out.seed = cfg.seed;
  for (double rate : rates) {
    const SampleList train_set = contaminate(d.train, d.pool, rate, cfg.seed);
    TrainResult r = train(init, train_set, d.val, cfg);
    Model m = init;
    m.head = r.best.head;
    SweepEntry e;
    e.rate = rate;
    e.injected = train_set.size() - d.train.size();
    e.metrics = evaluate(m, d.test, eval);
    e.history = std::move(r.history);
    e.best_epoch = r.best.epoch;
    out.entries.push_back(std::move(e));
  }
  return out;
}

}  // namespace tinyglass
