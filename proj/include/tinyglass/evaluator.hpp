// SPDX-License-Identifier: Apache-2.0
//
// Heatmap post-processing, AUROC and evaluation reports.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "tinyglass/data.hpp"
#include "tinyglass/error.hpp"
#include "tinyglass/model.hpp"
#include "tinyglass/quantizer.hpp"
#include "tinyglass/rng.hpp"
#include "tinyglass/sample.hpp"
#include "tinyglass/tensor.hpp"

namespace tinyglass {

// ---------------------------------------------------------------------------
// AUROC

/// Mann-Whitney AUROC with ties counted as one half. Scores are ranked once;
/// the pair count is accumulated in integers as 2*wins + ties, so the result
/// is bit-identical to brute-force pair counting.
inline double auroc(std::span<const double> scores, std::span<const int> labels) {
  detail::require(scores.size() == labels.size(), "auroc: scores and labels differ in length");
  std::uint64_t pos = 0, neg = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    detail::require(labels[i] == 0 || labels[i] == 1, "auroc labels must be 0 or 1");
    detail::require(!std::isnan(scores[i]), "auroc scores must not be NaN");
    (labels[i] ? pos : neg) += 1;
  }
  if (pos == 0 || neg == 0) detail::contract_fail("auroc needs both classes present");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::uint64_t doubled = 0;  // sum over positives of 2*(negatives below) + (negatives tied)
  std::uint64_t neg_below = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::uint64_t p = 0, n = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] ? p : n) += 1;
      ++j;
    }
    doubled += p * (2 * neg_below + n);
    neg_below += n;
    i = j;
  }
  return static_cast<double>(doubled) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

inline double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  return auroc(std::span<const double>(scores), std::span<const int>(labels));
}

// ---------------------------------------------------------------------------
// Heatmaps

inline Tensor4 upsample_heatmap(const Tensor4& heatmap, std::size_t h, std::size_t w) {
  return bilinear_resize(heatmap, h, w);
}

/// Separable Gaussian blur, kernel truncated at 4 sigma, replicate border.
inline Tensor4 gaussian_blur(const Tensor4& x, double sigma) {
  detail::require(sigma >= 0.0 && std::isfinite(sigma), "blur sigma must be non-negative");
  if (sigma == 0.0) return x;
  const auto r = static_cast<std::ptrdiff_t>(4.0 * sigma + 0.5);
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double sum = 0.0;
  for (std::ptrdiff_t i = -r; i <= r; ++i) {
    const double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    k[static_cast<std::size_t>(i + r)] = v;
    sum += v;
  }
  for (double& v : k) v /= sum;
  const auto H = static_cast<std::ptrdiff_t>(x.h()), W = static_cast<std::ptrdiff_t>(x.w());
  Tensor4 tmp(x.shape()), out(x.shape());
  for (std::size_t p = 0; p < x.n() * x.c(); ++p) {
    const double* in = x.data().data() + p * x.h() * x.w();
    double* t = tmp.data().data() + p * x.h() * x.w();
    double* o = out.data().data() + p * x.h() * x.w();
    for (std::ptrdiff_t y = 0; y < H; ++y)
      for (std::ptrdiff_t xx = 0; xx < W; ++xx) {
        double s = 0.0;
        for (std::ptrdiff_t i = -r; i <= r; ++i)
          s += k[static_cast<std::size_t>(i + r)] * in[y * W + std::clamp<std::ptrdiff_t>(xx + i, 0, W - 1)];
        t[y * W + xx] = s;
      }
    for (std::ptrdiff_t y = 0; y < H; ++y)
      for (std::ptrdiff_t xx = 0; xx < W; ++xx) {
        double s = 0.0;
        for (std::ptrdiff_t i = -r; i <= r; ++i)
          s += k[static_cast<std::size_t>(i + r)] * t[std::clamp<std::ptrdiff_t>(y + i, 0, H - 1) * W + xx];
        o[y * W + xx] = s;
      }
  }
  return out;
}

/// Smooths a (1,1,h,w) map and returns the mean of its top_k values.
inline double image_score(const Tensor4& heatmap, double sigma, std::size_t top_k) {
  detail::require(heatmap.n() == 1 && heatmap.c() == 1, "image_score expects (1,1,h,w), got " + heatmap.shape().str());
  detail::require(top_k >= 1 && top_k <= heatmap.size(),
                  "top_k " + std::to_string(top_k) + " out of range for " + heatmap.shape().str());
  const Tensor4 s = gaussian_blur(heatmap, sigma);
  if (top_k == 1) return *std::max_element(s.data().begin(), s.data().end());
  std::vector<double> v(s.data().begin(), s.data().end());
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(top_k - 1), v.end(), std::greater<>());
  std::sort(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(top_k), std::greater<>());
  double sum = 0.0;
  for (std::size_t i = 0; i < top_k; ++i) sum += v[i];
  return sum / static_cast<double>(top_k);
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalConfig {
  std::size_t input_size = 256;
  double sigma = 4.0;  // pixels at input resolution
  std::size_t top_k = 1;
  bool pixel_auroc = true;
  std::size_t max_pixels = std::size_t{1} << 22;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  NormStats stats;
};

struct CategoryMetrics {
  double image_auroc = 0.0;
  std::size_t n_images = 0, n_anomalous = 0;
};

struct Metrics {
  double image_auroc = 0.0;
  std::optional<double> pixel_auroc;
  std::size_t n_images = 0;
  std::size_t n_anomalous = 0;
  std::size_t pixels_used = 0;  // pixel AUROC sample size after subsampling
  std::map<std::string, CategoryMetrics> per_category;
  std::vector<double> scores;   // per image, in input order
};

/// Metrics from patch heatmaps (1,1,G,G), one per sample. Image scores use
/// the map upsampled to input_size; pixel AUROC uses maps upsampled to each
/// image's own resolution. Normal images count as all-background.
inline Metrics evaluate_heatmaps(std::span<const Tensor4> heatmaps, const SampleList& samples, const EvalConfig& cfg) {
  detail::require(!samples.empty(), "evaluate needs a nonempty set");
  detail::require(heatmaps.size() == samples.size(), "one heatmap per sample required");
  Metrics m;
  m.n_images = samples.size();
  m.n_anomalous = count_anomalous(samples);
  m.scores.resize(samples.size());
  std::vector<int> labels(samples.size());
  parallel_for(samples.size(), cfg.threads, [&](std::size_t i) {
    const Tensor4 up = upsample_heatmap(heatmaps[i], cfg.input_size, cfg.input_size);
    m.scores[i] = image_score(up, cfg.sigma, cfg.top_k);
  });
  for (std::size_t i = 0; i < samples.size(); ++i) labels[i] = samples[i].anomalous() ? 1 : 0;
  m.image_auroc = auroc(m.scores, labels);

  std::map<std::string, std::vector<std::size_t>> by_cat;
  for (std::size_t i = 0; i < samples.size(); ++i) by_cat[samples[i].category].push_back(i);
  if (by_cat.size() > 1) {
    for (const auto& [cat, idx] : by_cat) {
      CategoryMetrics c;
      std::vector<double> s;
      std::vector<int> l;
      for (std::size_t i : idx) {
        s.push_back(m.scores[i]);
        l.push_back(labels[i]);
        c.n_anomalous += static_cast<std::size_t>(labels[i]);
      }
      c.n_images = idx.size();
      if (c.n_anomalous > 0 && c.n_anomalous < c.n_images) c.image_auroc = auroc(s, l);
      m.per_category[cat] = c;
    }
  }

  if (!cfg.pixel_auroc) return m;
  bool any_mask = false;
  for (const auto& s : samples) any_mask = any_mask || s.mask.has_value();
  if (!any_mask) return m;

  std::size_t total = 0;
  for (const auto& s : samples)
    if (!s.anomalous() || s.mask) total += s.image.h() * s.image.w();
  // Seeded subsample: keep each pixel with probability max_pixels / total.
  const double keep = total > cfg.max_pixels ? static_cast<double>(cfg.max_pixels) / static_cast<double>(total) : 1.0;
  Rng rng(derive_seed(cfg.seed, Stream::pixel_subsample));
  std::vector<double> ps;
  std::vector<int> pl;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (s.anomalous() && !s.mask) continue;
    const Tensor4 map = gaussian_blur(upsample_heatmap(heatmaps[i], s.image.h(), s.image.w()),
                                      cfg.sigma * static_cast<double>(s.image.h()) / static_cast<double>(cfg.input_size));
    for (std::size_t p = 0; p < map.size(); ++p) {
      if (keep < 1.0 && !rng.bernoulli(keep)) continue;
      ps.push_back(map[p]);
      pl.push_back(s.mask ? static_cast<int>((*s.mask)[p]) : 0);
    }
  }
  m.pixels_used = ps.size();
  const bool both = std::find(pl.begin(), pl.end(), 1) != pl.end() && std::find(pl.begin(), pl.end(), 0) != pl.end();
  if (both) m.pixel_auroc = auroc(ps, pl);
  return m;
}

inline std::vector<Tensor4> model_heatmaps(const Model& model, const SampleList& samples, const EvalConfig& cfg) {
  std::vector<Tensor4> maps(samples.size());
  parallel_for(samples.size(), cfg.threads, [&](std::size_t i) {
    maps[i] = model_heatmap(model, preprocess(samples[i], cfg.input_size, cfg.stats));
  });
  return maps;
}

inline std::vector<Tensor4> quantized_heatmaps(const QuantizedModel& qm, const SampleList& samples,
                                               const EvalConfig& cfg) {
  std::vector<Tensor4> maps(samples.size());
  parallel_for(samples.size(), cfg.threads, [&](std::size_t i) {
    maps[i] = quantized_forward(qm, preprocess(samples[i], cfg.input_size, cfg.stats));
  });
  return maps;
}

inline Metrics evaluate(const Model& model, const SampleList& samples, const EvalConfig& cfg) {
  detail::require(!samples.empty(), "evaluate needs a nonempty set");
  const auto maps = model_heatmaps(model, samples, cfg);
  return evaluate_heatmaps(maps, samples, cfg);
}

inline Metrics evaluate(const QuantizedModel& qm, const SampleList& samples, const EvalConfig& cfg) {
  detail::require(!samples.empty(), "evaluate needs a nonempty set");
  const auto maps = quantized_heatmaps(qm, samples, cfg);
  return evaluate_heatmaps(maps, samples, cfg);
}

/// Pearson correlation of two equally sized sequences.
inline double pearson(std::span<const double> a, std::span<const double> b) {
  detail::require(a.size() == b.size() && a.size() > 1, "pearson needs two equal sequences of length >= 2");
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw NumericError("pearson is undefined for a constant sequence");
  return sab / std::sqrt(saa * sbb);
}

/// Correlation over every heatmap value of two aligned heatmap lists.
inline double heatmap_pearson(const std::vector<Tensor4>& a, const std::vector<Tensor4>& b) {
  detail::require(a.size() == b.size(), "heatmap lists differ in length");
  std::vector<double> fa, fb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    detail::require(a[i].shape() == b[i].shape(), "heatmap shapes differ at index " + std::to_string(i));
    fa.insert(fa.end(), a[i].data().begin(), a[i].data().end());
    fb.insert(fb.end(), b[i].data().begin(), b[i].data().end());
  }
  return pearson(fa, fb);
}

// ---------------------------------------------------------------------------
// Reports

inline constexpr const char* kMetricsCsvHeader = "run_id,rate,split,image_auroc,pixel_auroc,n_images,n_anomalous,seed";

inline std::string metrics_csv_row(const std::string& run_id, double rate, const std::string& split, const Metrics& m,
                                   std::uint64_t seed) {
  std::ostringstream o;
  o << std::setprecision(17) << run_id << "," << rate << "," << split << "," << m.image_auroc << ",";
  if (m.pixel_auroc) o << *m.pixel_auroc;
  o << "," << m.n_images << "," << m.n_anomalous << "," << seed;
  return o.str();
}

/// Min-max scaled binary PGM plus "<file>.txt" holding the scale.
inline void export_heatmap_pgm(const fs::path& path, const Tensor4& map) {
  detail::require(map.n() == 1 && map.c() == 1, "heatmap export expects (1,1,h,w)");
  const auto [mn, mx] = std::minmax_element(map.data().begin(), map.data().end());
  const double lo = *mn, hi = *mx;
  Tensor4 scaled(map.shape());
  for (std::size_t i = 0; i < map.size(); ++i) scaled[i] = hi > lo ? (map[i] - lo) / (hi - lo) : 0.0;
  write_image(path, scaled);
  std::ofstream side(path.string() + ".txt");
  if (!side) throw IoError("cannot write " + path.string() + ".txt");
  side << std::setprecision(17) << "min " << lo << "\nmax " << hi << "\n";
}

}  // namespace tinyglass
