// SPDX-License-Identifier: Apache-2.0
//
// Self-supervised anomaly synthesis.
//
//  * LAS: image-space defects. A fractal Perlin mask selects where an
//    external texture is blended into a normal image.
//  * GAS: feature-space defects. Normal embeddings get Gaussian noise,
//    pushed along the discriminator's loss gradient, and the per-position
//    perturbation norm is projected into [r_min, r_max].
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "tinyglass/error.hpp"
#include "tinyglass/rng.hpp"
#include "tinyglass/sample.hpp"
#include "tinyglass/tensor.hpp"

namespace tinyglass {

// ---------------------------------------------------------------------------
// Perlin masks

struct PerlinMask {
  Tensor4 grid;    // (1,1,H,W) in [0,1]
  Tensor4 binary;  // (1,1,H,W) in {0,1}
  std::uint64_t seed = 0;
  std::size_t octaves = 0;
  double threshold = 0.0;

  double area_fraction() const {
    double s = 0.0;
    for (double v : binary.data()) s += v;
    return binary.empty() ? 0.0 : s / static_cast<double>(binary.size());
  }
};

namespace detail {

inline double perlin_fade(double t) { return t * t * t * (t * (t * 6.0 - 15.0) + 10.0); }

// One octave of gradient-lattice noise with `cy` x `cx` cells over the image.
inline void perlin_octave(std::vector<double>& acc, std::size_t h, std::size_t w, std::size_t cy, std::size_t cx,
                          double amplitude, Rng& rng) {
  std::vector<double> gx((cy + 1) * (cx + 1));
  std::vector<double> gy(gx.size());
  for (std::size_t i = 0; i < gx.size(); ++i) {
    const double a = 2.0 * std::numbers::pi * rng.uniform();
    gx[i] = std::cos(a);
    gy[i] = std::sin(a);
  }
  auto dot = [&](std::size_t iy, std::size_t ix, double dy, double dx) {
    const std::size_t k = iy * (cx + 1) + ix;
    return gx[k] * dx + gy[k] * dy;
  };
  for (std::size_t y = 0; y < h; ++y) {
    const double fy = (static_cast<double>(y) + 0.5) * static_cast<double>(cy) / static_cast<double>(h);
    const auto iy = std::min(static_cast<std::size_t>(fy), cy - 1);
    const double ty = fy - static_cast<double>(iy);
    const double uy = perlin_fade(ty);
    for (std::size_t x = 0; x < w; ++x) {
      const double fx = (static_cast<double>(x) + 0.5) * static_cast<double>(cx) / static_cast<double>(w);
      const auto ix = std::min(static_cast<std::size_t>(fx), cx - 1);
      const double tx = fx - static_cast<double>(ix);
      const double ux = perlin_fade(tx);
      const double n00 = dot(iy, ix, ty, tx);
      const double n01 = dot(iy, ix + 1, ty, tx - 1.0);
      const double n10 = dot(iy + 1, ix, ty - 1.0, tx);
      const double n11 = dot(iy + 1, ix + 1, ty - 1.0, tx - 1.0);
      const double top = n00 + ux * (n01 - n00);
      const double bot = n10 + ux * (n11 - n10);
      acc[y * w + x] += amplitude * (top + uy * (bot - top));
    }
  }
}

}  // namespace detail

/// Fractal Perlin noise (octave o has 2^(o+1) lattice cells per side and
/// amplitude 2^-o; octaves finer than 2 px per cell are skipped), min-max
/// normalized to [0,1] and thresholded.
inline PerlinMask perlin(std::size_t h, std::size_t w, std::size_t octaves, std::uint64_t seed, double threshold) {
  detail::require(h >= 8 && w >= 8, "perlin extents must be at least 8x8");
  detail::require(octaves >= 1, "perlin needs at least one octave");
  detail::require(threshold > 0.0 && threshold < 1.0, "perlin threshold must lie in (0,1)");
  Rng rng(derive_seed(seed, Stream::perlin));
  std::vector<double> acc(h * w, 0.0);
  double amplitude = 1.0;
  for (std::size_t o = 0; o < octaves; ++o) {
    const std::size_t cells = std::size_t{2} << o;
    if (o > 0 && (cells * 2 > h || cells * 2 > w)) break;
    detail::perlin_octave(acc, h, w, std::min(cells, h / 2), std::min(cells, w / 2), amplitude, rng);
    amplitude *= 0.5;
  }
  const auto [mn, mx] = std::minmax_element(acc.begin(), acc.end());
  const double lo = *mn;
  const double span = *mx - *mn;
  PerlinMask m;
  m.grid = Tensor4(Shape4{1, 1, h, w});
  m.binary = Tensor4(Shape4{1, 1, h, w});
  for (std::size_t i = 0; i < acc.size(); ++i) {
    const double v = span > 0.0 ? (acc[i] - lo) / span : 0.0;
    m.grid[i] = v;
    m.binary[i] = v > threshold ? 1.0 : 0.0;
  }
  m.seed = seed;
  m.octaves = octaves;
  m.threshold = threshold;
  return m;
}

// ---------------------------------------------------------------------------
// LAS

/// Blends `texture` into `image` where `mask` is set:
///   out = image                                 where mask == 0
///   out = beta * image + (1 - beta) * texture   where mask == 1
/// Returns the corrupted image and the (1,1,H,W) mask it used.
inline std::pair<Tensor4, Tensor4> las_corrupt(const Tensor4& image, const Tensor4& texture, const Tensor4& mask,
                                               double beta) {
  if (image.shape() != texture.shape()) {
    detail::contract_fail("las_corrupt: image " + image.shape().str() + " vs texture " + texture.shape().str());
  }
  if (mask.n() != 1 || mask.c() != 1 || mask.h() != image.h() || mask.w() != image.w()) {
    detail::contract_fail("las_corrupt: mask " + mask.shape().str() + " vs image " + image.shape().str());
  }
  detail::require(beta >= 0.0 && beta <= 1.0, "las_corrupt: beta must lie in [0,1]");
  Tensor4 out = image;
  const std::size_t plane = image.h() * image.w();
  for (std::size_t n = 0; n < image.n(); ++n) {
    for (std::size_t c = 0; c < image.c(); ++c) {
      const double* src = image.plane(n, c);
      const double* tex = texture.plane(n, c);
      double* dst = out.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        if (mask[i] > 0.5) dst[i] = beta * src[i] + (1.0 - beta) * tex[i];
      }
    }
  }
  Tensor4 m(mask.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) m[i] = mask[i] > 0.5 ? 1.0 : 0.0;
  return {std::move(out), std::move(m)};
}

inline std::pair<Tensor4, Tensor4> las_corrupt(const Tensor4& image, const Tensor4& texture, const PerlinMask& mask,
                                               double beta) {
  return las_corrupt(image, texture, mask.binary, beta);
}

/// Area-average a full-resolution mask down to (gh, gw) and binarize at 0.5.
inline Tensor4 downsample_mask(const Tensor4& mask, std::size_t gh, std::size_t gw) {
  detail::require(mask.c() == 1, "downsample_mask expects one channel");
  detail::require(gh > 0 && gw > 0 && mask.h() % gh == 0 && mask.w() % gw == 0,
                  "mask " + mask.shape().str() + " not divisible to grid " + std::to_string(gh) + "x" +
                      std::to_string(gw));
  const std::size_t fy = mask.h() / gh;
  const std::size_t fx = mask.w() / gw;
  Tensor4 out(Shape4{mask.n(), 1, gh, gw});
  for (std::size_t n = 0; n < mask.n(); ++n) {
    const double* src = mask.plane(n, 0);
    for (std::size_t gy = 0; gy < gh; ++gy) {
      for (std::size_t gx = 0; gx < gw; ++gx) {
        double s = 0.0;
        for (std::size_t y = gy * fy; y < (gy + 1) * fy; ++y)
          for (std::size_t x = gx * fx; x < (gx + 1) * fx; ++x) s += src[y * mask.w() + x];
        out.at(n, 0, gy, gx) = s >= 0.5 * static_cast<double>(fy * fx) ? 1.0 : 0.0;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// GAS

struct GasConfig {
  double sigma = 0.015;
  std::size_t ascent_steps = 1;
  double ascent_lr = 0.01;
  double r_min = 0.0;
  double r_max = 0.0;

  /// sigma-scaled band (0.5 sigma sqrt(d), 2 sigma sqrt(d)).
  static GasConfig defaults(std::size_t dim, double sigma = 0.015) {
    GasConfig g;
    g.sigma = sigma;
    const double root = std::sqrt(static_cast<double>(dim));
    g.r_min = 0.5 * sigma * root;
    g.r_max = 2.0 * sigma * root;
    return g;
  }

  void validate() const {
    detail::require(sigma > 0.0, "GAS sigma must be positive");
    detail::require(ascent_lr > 0.0, "GAS ascent_lr must be positive");
    detail::require(r_min > 0.0 && r_min <= r_max, "GAS band must satisfy 0 < r_min <= r_max");
  }
};

using GradientFn = std::function<Tensor4(const Tensor4&)>;

namespace detail {

// Visits every embedding vector (n, :, y, x) as a strided view.
template <typename Fn>
void for_each_vector(Tensor4& t, Fn&& fn) {
  const std::size_t plane = t.h() * t.w();
  for (std::size_t n = 0; n < t.n(); ++n) {
    double* base = t.plane(n, 0);
    for (std::size_t p = 0; p < plane; ++p) fn(base + p, plane, t.c());
  }
}

inline double strided_norm(const double* v, std::size_t stride, std::size_t len) {
  double s = 0.0;
  for (std::size_t i = 0; i < len; ++i) s += v[i * stride] * v[i * stride];
  return std::sqrt(s);
}

}  // namespace detail

/// Returns the perturbation delta (same shape as `normal`). The perturbed
/// embedding is normal + delta.
inline Tensor4 gas_delta(const Tensor4& normal, const GasConfig& cfg, const GradientFn& grad_fn, std::uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, Stream::gas));
  Tensor4 delta(normal.shape());
  for (double& v : delta.data()) v = rng.normal(0.0, cfg.sigma);

  for (std::size_t step = 0; step < cfg.ascent_steps; ++step) {
    detail::require(static_cast<bool>(grad_fn), "gas_perturb: ascent requested without a gradient function");
    Tensor4 probe = normal;
    for (std::size_t i = 0; i < probe.size(); ++i) probe[i] += delta[i];
    Tensor4 g = grad_fn(probe);
    if (g.shape() != normal.shape()) {
      detail::contract_fail("gas_perturb: gradient " + g.shape().str() + " vs embedding " + normal.shape().str());
    }
    const std::size_t plane = g.h() * g.w();
    for (std::size_t n = 0; n < g.n(); ++n) {
      const double* gb = g.plane(n, 0);
      double* db = delta.plane(n, 0);
      for (std::size_t p = 0; p < plane; ++p) {
        const double norm = detail::strided_norm(gb + p, plane, g.c());
        if (!(norm > 0.0)) continue;
        const double k = cfg.ascent_lr / norm;
        for (std::size_t c = 0; c < g.c(); ++c) db[p + c * plane] += k * gb[p + c * plane];
      }
    }
  }

  // Targets sit a hair inside the band so rounding never lands outside it.
  const double lo = cfg.r_min * (1.0 + 1e-12);
  const double hi = cfg.r_max * (1.0 - 1e-12);
  detail::for_each_vector(delta, [&](double* v, std::size_t stride, std::size_t len) {
    const double r = detail::strided_norm(v, stride, len);
    double target = r;
    if (r < cfg.r_min) target = std::min(lo, cfg.r_max);
    if (r > cfg.r_max) target = std::max(hi, cfg.r_min);
    if (target == r) return;
    if (r > 0.0) {
      const double k = target / r;
      for (std::size_t i = 0; i < len; ++i) v[i * stride] *= k;
    } else {
      v[0] = target;
    }
  });
  check_finite(delta, "gas_perturb");
  return delta;
}

/// e' = e + delta, see gas_delta.
inline Tensor4 gas_perturb(const Tensor4& normal, const GasConfig& cfg, const GradientFn& grad_fn,
                           std::uint64_t seed) {
  Tensor4 delta = gas_delta(normal, cfg, grad_fn, seed);
  for (std::size_t i = 0; i < delta.size(); ++i) delta[i] += normal[i];
  return delta;
}

// ---------------------------------------------------------------------------
// Training-set contamination

/// Number of defectives to add to `n` clean samples so they make up `rate`
/// of the result.
inline std::size_t contamination_count(std::size_t n, double rate) {
  if (rate <= 0.0) return 0;
  const double exact = rate * static_cast<double>(n) / (1.0 - rate);
  return static_cast<std::size_t>(std::ceil(exact - 1e-9));
}

/// Appends defective samples drawn without replacement from `pool`,
/// relabeled normal (masks dropped) as an unlabeled contamination would be.
inline SampleList contaminate(const SampleList& train, const SampleList& pool, double rate, std::uint64_t seed) {
  detail::require(rate >= 0.0 && rate <= 0.3, "contamination rate must lie in [0, 0.3]");
  const std::size_t k = contamination_count(train.size(), rate);
  if (k > pool.size()) {
    detail::contract_fail("contamination at rate " + std::to_string(rate) + " needs " + std::to_string(k) +
                          " defective samples, pool has " + std::to_string(pool.size()));
  }
  SampleList out = train;
  if (k == 0) return out;
  std::vector<std::size_t> idx(pool.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(derive_seed(seed, Stream::contaminate));
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(idx.size() - i));
    std::swap(idx[i], idx[j]);
  }
  for (std::size_t i = 0; i < k; ++i) {
    Sample s = pool[idx[i]];
    s.label = Label::normal;
    s.mask.reset();
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace tinyglass
