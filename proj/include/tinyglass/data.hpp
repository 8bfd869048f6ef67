// SPDX-License-Identifier: Apache-2.0
//
// Datasets: MVTec-style directory trees, normalization, seeded augmentation,
// and a procedural generator of textured parts with exact defect masks.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "tinyglass/error.hpp"
#include "tinyglass/image_io.hpp"
#include "tinyglass/rng.hpp"
#include "tinyglass/sample.hpp"
#include "tinyglass/synthesis.hpp"
#include "tinyglass/tensor.hpp"

namespace tinyglass {

enum class DatasetErrc { missing_directory, unreadable_image, mask_mismatch, defect_in_train, empty };

class DatasetError : public IoError {
 public:
  DatasetError(DatasetErrc code, const std::string& what) : IoError(what), code_(code) {}
  DatasetErrc code() const { return code_; }

 private:
  DatasetErrc code_;
};

struct Dataset {
  SampleList train;
  SampleList val;
  SampleList test;
  SampleList pool;  // defective samples available for training contamination
};

// ---------------------------------------------------------------------------
// Directory datasets

namespace detail {

inline std::vector<fs::path> sorted_entries(const fs::path& dir, bool dirs) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (dirs ? e.is_directory() : (e.is_regular_file() && is_image_file(e.path()))) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline void require_dir(const fs::path& p) {
  if (!fs::is_directory(p)) throw DatasetError(DatasetErrc::missing_directory, "missing directory: " + p.string());
}

inline Tensor4 load_image_checked(const fs::path& p) {
  try {
    return read_image(p);
  } catch (const IoError& e) {
    throw DatasetError(DatasetErrc::unreadable_image, e.what());
  }
}

inline std::optional<fs::path> find_mask(const fs::path& gt_dir, const fs::path& image) {
  if (!fs::is_directory(gt_dir)) return std::nullopt;
  const std::string stem = image.stem().string();
  for (const char* suffix : {"_mask", ""}) {
    for (const char* ext : {".png", ".pgm"}) {
      const fs::path p = gt_dir / (stem + suffix + ext);
      if (fs::is_regular_file(p)) return p;
    }
  }
  return std::nullopt;
}

}  // namespace detail

/// Moves round(fraction * count) samples of each class from `from` into a
/// new list. Selection is seeded; both lists keep their original order.
inline SampleList stratified_split(SampleList& from, double fraction, std::uint64_t seed) {
  detail::require(fraction >= 0.0 && fraction < 1.0, "val fraction must lie in [0,1)");
  std::vector<bool> take(from.size(), false);
  Rng rng(derive_seed(seed, Stream::split));
  for (Label cls : {Label::normal, Label::anomalous}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < from.size(); ++i)
      if (from[i].label == cls) idx.push_back(i);
    rng.shuffle(std::span<std::size_t>(idx));
    const auto k = static_cast<std::size_t>(std::round(fraction * static_cast<double>(idx.size())));
    for (std::size_t i = 0; i < k; ++i) take[idx[i]] = true;
  }
  SampleList picked, rest;
  for (std::size_t i = 0; i < from.size(); ++i) (take[i] ? picked : rest).push_back(std::move(from[i]));
  from = std::move(rest);
  return picked;
}

/// Loads root/category/{train/good, test/<defect|good>, ground_truth/<defect>}.
/// The validation split is carved from test; the pool is left empty.
inline Dataset load_dataset(const fs::path& root, const std::string& category, double val_fraction = 0.3,
                            std::uint64_t seed = 0) {
  const fs::path base = root / category;
  detail::require_dir(base);
  detail::require_dir(base / "train");
  detail::require_dir(base / "train" / "good");
  detail::require_dir(base / "test");
  Dataset d;
  for (const auto& sub : detail::sorted_entries(base / "train", true)) {
    if (sub.filename() != "good") {
      throw DatasetError(DatasetErrc::defect_in_train,
                         "train must be defect-free, found " + sub.string());
    }
  }
  for (const auto& p : detail::sorted_entries(base / "train" / "good", false)) {
    Sample s{detail::load_image_checked(p), Label::normal, std::nullopt, p.string(), category, "good"};
    d.train.push_back(std::move(s));
  }
  for (const auto& sub : detail::sorted_entries(base / "test", true)) {
    const std::string defect = sub.filename().string();
    const bool good = defect == "good";
    for (const auto& p : detail::sorted_entries(sub, false)) {
      Sample s{detail::load_image_checked(p), good ? Label::normal : Label::anomalous, std::nullopt, p.string(),
               category, defect};
      if (!good) {
        if (auto mp = detail::find_mask(base / "ground_truth" / defect, p)) {
          Tensor4 m;
          try {
            m = read_mask(*mp);
          } catch (const IoError& e) {
            throw DatasetError(DatasetErrc::unreadable_image, e.what());
          }
          if (m.h() != s.image.h() || m.w() != s.image.w()) {
            throw DatasetError(DatasetErrc::mask_mismatch, "mask " + mp->string() + " is " + std::to_string(m.h()) +
                                                               "x" + std::to_string(m.w()) + " but image " +
                                                               p.string() + " is " + std::to_string(s.image.h()) +
                                                               "x" + std::to_string(s.image.w()));
          }
          s.mask = std::move(m);
        }
      }
      d.test.push_back(std::move(s));
    }
  }
  if (d.train.empty()) throw DatasetError(DatasetErrc::empty, "no training images under " + base.string());
  d.val = stratified_split(d.test, val_fraction, seed);
  return d;
}

/// Defective samples stored under root/<category>_pool/<defect>/, as written
/// by write_dataset. Returns an empty list if the directory is absent.
inline SampleList load_pool(const fs::path& root, const std::string& category) {
  const fs::path dir = root / (category + "_pool");
  SampleList out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& sub : detail::sorted_entries(dir, true)) {
    for (const auto& p : detail::sorted_entries(sub, false)) {
      out.push_back({detail::load_image_checked(p), Label::anomalous, std::nullopt, p.string(), category,
                     sub.filename().string()});
    }
  }
  return out;
}

/// Splits `k` anomalous test samples off into the contamination pool so they
/// are never evaluated. Deterministic: takes the first k in order.
inline void carve_contamination_pool(Dataset& d, std::size_t k) {
  SampleList keep;
  for (auto& s : d.test) {
    if (s.anomalous() && d.pool.size() < k) {
      d.pool.push_back(std::move(s));
    } else {
      keep.push_back(std::move(s));
    }
  }
  detail::require(d.pool.size() == k, "not enough anomalous test samples for a pool of " + std::to_string(k));
  d.test = std::move(keep);
}

// ---------------------------------------------------------------------------
// Normalization

struct NormStats {
  std::array<double, 3> mean{0.485, 0.456, 0.406};
  std::array<double, 3> std{0.229, 0.224, 0.225};

  static NormStats imagenet() { return {}; }
  static NormStats identity() { return {{0, 0, 0}, {1, 1, 1}}; }
};

inline Tensor4 preprocess_image(const Tensor4& image, std::size_t size, const NormStats& stats = {}) {
  detail::require(size > 0 && size % 32 == 0, "input size must be a positive multiple of 32, got " +
                                                  std::to_string(size));
  detail::require(image.n() == 1 && image.c() == 3, "preprocess expects (1,3,H,W), got " + image.shape().str());
  for (double s : stats.std) detail::require(s > 0.0, "normalization std must be positive");
  Tensor4 out = bilinear_resize(image, size, size);
  const std::size_t plane = size * size;
  for (std::size_t c = 0; c < 3; ++c) {
    double* p = out.plane(0, c);
    for (std::size_t i = 0; i < plane; ++i) p[i] = (p[i] - stats.mean[c]) / stats.std[c];
  }
  return out;
}

inline Tensor4 preprocess(const Sample& s, std::size_t size, const NormStats& stats = {}) {
  return preprocess_image(s.image, size, stats);
}

inline Tensor4 preprocess_batch(const SampleList& s, std::size_t size, const NormStats& stats = {}) {
  detail::require(!s.empty(), "preprocess_batch needs samples");
  std::vector<Tensor4> parts;
  parts.reserve(s.size());
  for (const auto& x : s) parts.push_back(preprocess(x, size, stats));
  return stack_batch<double>(parts);
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  bool rotate = true;
  bool translate = true;
  bool jitter = true;
  bool hflip = true;
  bool vflip = true;
  double rotation_deg = 15.0;
  double translation = 0.1;  // fraction of extent
  double brightness = 0.2;
  double contrast = 0.2;
  double saturation = 0.2;
  double apply_prob = 0.5;
  std::uint64_t seed = 0;

  static AugmentConfig disabled() {
    AugmentConfig c;
    c.rotate = c.translate = c.jitter = c.hflip = c.vflip = false;
    return c;
  }

  bool any() const { return rotate || translate || jitter || hflip || vflip; }

  void validate() const {
    detail::require(apply_prob >= 0.0 && apply_prob <= 1.0, "augment probability must lie in [0,1]");
    for (double v : {rotation_deg, translation, brightness, contrast, saturation}) {
      detail::require(std::isfinite(v) && v >= 0.0, "augment ranges must be finite and non-negative");
    }
  }
};

namespace detail {

inline Tensor4 flip(const Tensor4& x, bool horizontal) {
  Tensor4 out(x.shape());
  const std::size_t H = x.h(), W = x.w();
  for (std::size_t p = 0; p < x.n() * x.c(); ++p) {
    const double* in = x.data().data() + p * H * W;
    double* o = out.data().data() + p * H * W;
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) {
        o[y * W + xx] = horizontal ? in[y * W + (W - 1 - xx)] : in[(H - 1 - y) * W + xx];
      }
  }
  return out;
}

// Inverse-maps each output pixel through the affine map (rotation about the
// center then translation). Bilinear or nearest sampling, replicate border.
inline Tensor4 warp(const Tensor4& x, double angle_rad, double tx, double ty, bool nearest) {
  Tensor4 out(x.shape());
  const auto H = static_cast<std::ptrdiff_t>(x.h()), W = static_cast<std::ptrdiff_t>(x.w());
  const double cy = (static_cast<double>(H) - 1.0) / 2.0, cx = (static_cast<double>(W) - 1.0) / 2.0;
  const double ca = std::cos(angle_rad), sa = std::sin(angle_rad);
  auto clampi = [](std::ptrdiff_t v, std::ptrdiff_t n) { return std::clamp<std::ptrdiff_t>(v, 0, n - 1); };
  for (std::size_t p = 0; p < x.n() * x.c(); ++p) {
    const double* in = x.data().data() + p * x.h() * x.w();
    double* o = out.data().data() + p * x.h() * x.w();
    for (std::ptrdiff_t y = 0; y < H; ++y) {
      for (std::ptrdiff_t xx = 0; xx < W; ++xx) {
        const double dx = static_cast<double>(xx) - cx - tx;
        const double dy = static_cast<double>(y) - cy - ty;
        const double sx = ca * dx + sa * dy + cx;
        const double sy = -sa * dx + ca * dy + cy;
        double v;
        if (nearest) {
          v = in[clampi(static_cast<std::ptrdiff_t>(std::nearbyint(sy)), H) * W +
                 clampi(static_cast<std::ptrdiff_t>(std::nearbyint(sx)), W)];
        } else {
          const auto x0 = static_cast<std::ptrdiff_t>(std::floor(sx));
          const auto y0 = static_cast<std::ptrdiff_t>(std::floor(sy));
          const double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
          auto at = [&](std::ptrdiff_t yy, std::ptrdiff_t xq) { return in[clampi(yy, H) * W + clampi(xq, W)]; };
          const double top = (1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1);
          const double bot = (1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1);
          v = (1.0 - fy) * top + fy * bot;
        }
        o[y * W + xx] = v;
      }
    }
  }
  return out;
}

inline void color_jitter(Tensor4& img, double b, double c, double s) {
  const std::size_t plane = img.h() * img.w();
  double* r = img.plane(0, 0);
  double* g = img.plane(0, 1);
  double* bl = img.plane(0, 2);
  double mean = 0.0;
  for (std::size_t i = 0; i < plane; ++i) mean += 0.299 * r[i] + 0.587 * g[i] + 0.114 * bl[i];
  mean /= static_cast<double>(plane);
  for (std::size_t i = 0; i < plane; ++i) {
    double px[3] = {r[i], g[i], bl[i]};
    const double lum = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
    for (double& v : px) {
      v = lum + (v - lum) * (1.0 + s);
      v = mean + (v - mean) * (1.0 + c);
      v = std::clamp(v + b, 0.0, 1.0);
    }
    r[i] = px[0];
    g[i] = px[1];
    bl[i] = px[2];
  }
}

}  // namespace detail

/// Applies each enabled transform independently with probability
/// cfg.apply_prob. Draws depend only on (cfg.seed, index). Masks follow the
/// geometric transforms with nearest-neighbor sampling.
inline Sample augment(const Sample& s, const AugmentConfig& cfg, std::uint64_t index) {
  cfg.validate();
  if (!cfg.any()) return s;
  Rng rng(derive_seed(cfg.seed, Stream::augment, index));
  // Every gate and magnitude is drawn regardless of flags so enabling one
  // transform does not reshuffle the others.
  const bool do_h = rng.bernoulli(cfg.apply_prob);
  const bool do_v = rng.bernoulli(cfg.apply_prob);
  const bool do_r = rng.bernoulli(cfg.apply_prob);
  const double angle = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg) * std::numbers::pi / 180.0;
  const bool do_t = rng.bernoulli(cfg.apply_prob);
  const double tx = rng.uniform(-cfg.translation, cfg.translation) * static_cast<double>(s.image.w());
  const double ty = rng.uniform(-cfg.translation, cfg.translation) * static_cast<double>(s.image.h());
  const bool do_j = rng.bernoulli(cfg.apply_prob);
  const double jb = rng.uniform(-cfg.brightness, cfg.brightness);
  const double jc = rng.uniform(-cfg.contrast, cfg.contrast);
  const double js = rng.uniform(-cfg.saturation, cfg.saturation);

  Sample out = s;
  auto geo = [&](auto&& fn) {
    out.image = fn(out.image, false);
    if (out.mask) out.mask = fn(*out.mask, true);
  };
  if (cfg.hflip && do_h) geo([](const Tensor4& t, bool) { return detail::flip(t, true); });
  if (cfg.vflip && do_v) geo([](const Tensor4& t, bool) { return detail::flip(t, false); });
  const double a = (cfg.rotate && do_r) ? angle : 0.0;
  const double dx = (cfg.translate && do_t) ? tx : 0.0;
  const double dy = (cfg.translate && do_t) ? ty : 0.0;
  if (a != 0.0 || dx != 0.0 || dy != 0.0) {
    geo([&](const Tensor4& t, bool nearest) { return detail::warp(t, a, dx, dy, nearest); });
  }
  if (cfg.jitter && do_j) detail::color_jitter(out.image, jb, jc, js);
  return out;
}

// ---------------------------------------------------------------------------
// Procedural textures and synthetic parts

/// Colored fractal texture used as the LAS blend source.
inline Tensor4 procedural_texture(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(derive_seed(seed, Stream::texture));
  Tensor4 t(Shape4{1, 3, h, w});
  const double freq = rng.uniform(4.0, 16.0);
  const double theta = rng.uniform(0.0, std::numbers::pi);
  const double stripe = rng.uniform(0.0, 0.5);
  for (std::size_t c = 0; c < 3; ++c) {
    const PerlinMask n = perlin(h, w, 5, rng.next(), 0.5);
    const double base = rng.uniform(0.0, 1.0);
    const double amp = rng.uniform(0.3, 0.8);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double u = (std::cos(theta) * static_cast<double>(x) + std::sin(theta) * static_cast<double>(y)) /
                         static_cast<double>(w);
        const double s = stripe * std::sin(2.0 * std::numbers::pi * freq * u);
        const double v = base + amp * (n.grid[y * w + x] - 0.5) + s;
        t.at(0, c, y, x) = std::clamp(v, 0.0, 1.0);
      }
  }
  return t;
}

struct SynthConfig {
  std::uint64_t seed = 0;
  std::size_t n_train = 64;
  std::size_t n_val = 16;
  std::size_t n_test = 48;
  std::size_t n_pool = 32;  // defective samples reserved for contamination
  double defect_rate = 0.5;  // fraction of anomalous samples in val/test
  std::size_t size = 128;

  void validate() const {
    detail::require(n_train > 0 && n_test > 0, "synthetic dataset counts must be positive");
    detail::require(size >= 32 && size % 32 == 0, "synthetic image size must be a positive multiple of 32");
    detail::require(defect_rate >= 0.0 && defect_rate <= 1.0, "defect_rate must lie in [0,1]");
  }
};

enum class SynthDefect { scratch, hole, occlusion };

inline const char* to_string(SynthDefect d) {
  switch (d) {
    case SynthDefect::scratch: return "scratch";
    case SynthDefect::hole: return "hole";
    case SynthDefect::occlusion: return "occlusion";
  }
  return "?";
}

namespace detail {

// A machined part: a brushed plate with a ring-shaped boss and smooth shading.
inline Tensor4 synth_part(std::size_t size, Rng& rng) {
  const auto S = static_cast<double>(size);
  Tensor4 img(Shape4{1, 3, size, size});
  const PerlinMask shade = perlin(size, size, 3, rng.next(), 0.5);
  const double base = 0.55 + rng.uniform(-0.03, 0.03);
  const double tint[3] = {1.0, 0.97 + rng.uniform(-0.01, 0.01), 0.92 + rng.uniform(-0.01, 0.01)};
  const double cx = S / 2.0 + rng.uniform(-0.03, 0.03) * S;
  const double cy = S / 2.0 + rng.uniform(-0.03, 0.03) * S;
  const double r_out = S * (0.30 + rng.uniform(-0.01, 0.01));
  const double r_in = r_out * 0.55;
  const double brush_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
      const double r = std::sqrt(dx * dx + dy * dy);
      double v = base + 0.08 * (shade.grid[y * size + x] - 0.5);
      v += 0.015 * std::sin(static_cast<double>(y) * 1.7 + brush_phase);
      if (r < r_out && r > r_in) v -= 0.18;
      else if (r <= r_in) v += 0.06;
      v += rng.uniform(-0.015, 0.015);
      for (std::size_t c = 0; c < 3; ++c) img.at(0, c, y, x) = std::clamp(v * tint[c], 0.0, 1.0);
    }
  }
  return img;
}

// Paints one defect and returns its exact mask.
inline Tensor4 paint_defect(Tensor4& img, SynthDefect kind, Rng& rng) {
  const std::size_t size = img.h();
  const auto S = static_cast<double>(size);
  Tensor4 mask(Shape4{1, 1, size, size});
  double color[3];
  auto set = [&](std::size_t y, std::size_t x) {
    mask.at(0, 0, y, x) = 1.0;
    for (std::size_t c = 0; c < 3; ++c) img.at(0, c, y, x) = color[c];
  };
  const double px = rng.uniform(0.2, 0.8) * S, py = rng.uniform(0.2, 0.8) * S;
  switch (kind) {
    case SynthDefect::scratch: {
      const double len = rng.uniform(0.25, 0.45) * S;
      const double ang = rng.uniform(0.0, std::numbers::pi);
      const double half_w = rng.uniform(1.0, 2.0) * S / 128.0;
      const double shade = rng.bernoulli(0.5) ? rng.uniform(0.85, 0.98) : rng.uniform(0.05, 0.2);
      for (double& c : color) c = shade;
      const double ux = std::cos(ang), uy = std::sin(ang);
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          const double dx = static_cast<double>(x) + 0.5 - px, dy = static_cast<double>(y) + 0.5 - py;
          const double along = dx * ux + dy * uy;
          const double across = -dx * uy + dy * ux;
          if (std::abs(along) <= len / 2.0 && std::abs(across) <= half_w) set(y, x);
        }
      break;
    }
    case SynthDefect::hole: {
      const double r = rng.uniform(0.05, 0.09) * S;
      const double shade = rng.uniform(0.02, 0.12);
      for (double& c : color) c = shade;
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          const double dx = static_cast<double>(x) + 0.5 - px, dy = static_cast<double>(y) + 0.5 - py;
          if (dx * dx + dy * dy <= r * r) set(y, x);
        }
      break;
    }
    case SynthDefect::occlusion: {
      const double hw = rng.uniform(0.07, 0.13) * S, hh = rng.uniform(0.07, 0.13) * S;
      for (double& c : color) c = rng.uniform(0.0, 1.0);
      color[rng.below(3)] = rng.uniform(0.8, 1.0);
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          const double dx = static_cast<double>(x) + 0.5 - px, dy = static_cast<double>(y) + 0.5 - py;
          if (std::abs(dx) <= hw && std::abs(dy) <= hh) set(y, x);
        }
      break;
    }
  }
  return mask;
}

// Sample `index` of a split; `split` separates the seed streams of the splits.
inline Sample synth_sample(const SynthConfig& cfg, std::uint64_t split, std::size_t index, bool anomalous) {
  Rng rng(derive_seed(derive_seed(cfg.seed, Stream::synth, split), index));
  Sample s;
  s.image = synth_part(cfg.size, rng);
  s.category = "synth";
  s.source = "synth:" + std::to_string(cfg.seed) + ":" + std::to_string(split) + ":" + std::to_string(index);
  s.defect = "good";
  if (anomalous) {
    const auto kind = static_cast<SynthDefect>(rng.below(3));
    s.mask = paint_defect(s.image, kind, rng);
    s.label = Label::anomalous;
    s.defect = to_string(kind);
  }
  return s;
}

inline SampleList synth_split(const SynthConfig& cfg, std::uint64_t split, std::size_t n, double rate) {
  const auto n_bad = static_cast<std::size_t>(std::round(rate * static_cast<double>(n)));
  SampleList out;
  out.reserve(n);
  // Anomalous slots are spread evenly through the list.
  for (std::size_t i = 0; i < n; ++i) {
    const bool bad = (i * n_bad) / n != ((i + 1) * n_bad) / n;
    out.push_back(synth_sample(cfg, split, i, bad));
  }
  return out;
}

}  // namespace detail

/// Seeded stand-in for an industrial inspection category. Train is
/// defect-free; val and test hold round(defect_rate * n) anomalous samples.
inline Dataset synth_dataset(const SynthConfig& cfg) {
  cfg.validate();
  Dataset d;
  d.train = detail::synth_split(cfg, 0, cfg.n_train, 0.0);
  d.val = detail::synth_split(cfg, 1, cfg.n_val, cfg.defect_rate);
  d.test = detail::synth_split(cfg, 2, cfg.n_test, cfg.defect_rate);
  d.pool = detail::synth_split(cfg, 3, cfg.n_pool, 1.0);
  return d;
}

/// Writes a dataset in the directory layout load_dataset reads back.
inline void write_dataset(const fs::path& root, const std::string& category, const Dataset& d) {
  const fs::path base = root / category;
  fs::create_directories(base / "train" / "good");
  auto name = [](std::size_t i) {
    std::string s = std::to_string(i);
    return std::string(4 - std::min<std::size_t>(4, s.size()), '0') + s;
  };
  for (std::size_t i = 0; i < d.train.size(); ++i) write_image(base / "train" / "good" / (name(i) + ".png"), d.train[i].image);
  // val and test go under test/ in order; the reader carves val back out.
  std::size_t idx = 0;
  for (const SampleList* part : {&d.val, &d.test}) {
    for (const auto& s : *part) {
      const fs::path dir = base / "test" / s.defect;
      fs::create_directories(dir);
      const std::string stem = name(idx++);
      write_image(dir / (stem + ".png"), s.image);
      if (s.mask) {
        const fs::path gt = base / "ground_truth" / s.defect;
        fs::create_directories(gt);
        write_image(gt / (stem + "_mask.png"), *s.mask);
      }
    }
  }
  if (!d.pool.empty()) {
    for (std::size_t i = 0; i < d.pool.size(); ++i) {
      const fs::path dir = root / (category + "_pool") / d.pool[i].defect;
      fs::create_directories(dir);
      write_image(dir / (name(i) + ".png"), d.pool[i].image);
    }
  }
}

}  // namespace tinyglass
