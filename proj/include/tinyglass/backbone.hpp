// SPDX-License-Identifier: Apache-2.0
//
// ResNet-18 truncated after its third residual stage. Only the stage-2 and
// stage-3 outputs leave this module; stage 4 and the classifier never exist.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "tinyglass/error.hpp"
#include "tinyglass/rng.hpp"
#include "tinyglass/tensor.hpp"
#include "tinyglass/tgw.hpp"

namespace tinyglass {

struct BackboneConfig {
  std::size_t stem_channels = 64;
  std::array<std::size_t, 3> stage_channels{64, 128, 256};
  double bn_eps = 1e-5;

  static BackboneConfig resnet18() { return {}; }
  /// Narrow channel plan for desk-scale experiments; same topology.
  static BackboneConfig tiny() { return {16, {16, 32, 64}, 1e-5}; }

  std::size_t level2_channels() const { return stage_channels[1]; }
  std::size_t level3_channels() const { return stage_channels[2]; }
  std::size_t embedding_channels() const { return stage_channels[1] + stage_channels[2]; }

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

struct BasicBlock {
  ConvSpec conv1;
  ConvSpec conv2;
  std::optional<ConvSpec> downsample;
};

/// Inference-ready weights: batch norm already folded into every conv.
struct BackboneWeights {
  BackboneConfig config;
  ConvSpec stem;
  std::array<std::array<BasicBlock, 2>, 3> stages;

  /// Visits (name, conv) in execution order.
  template <typename Fn>
  void for_each_conv(Fn&& fn) const {
    fn(std::string("conv1"), stem);
    for (std::size_t s = 0; s < 3; ++s) {
      for (std::size_t b = 0; b < 2; ++b) {
        const std::string p = "layer" + std::to_string(s + 1) + "." + std::to_string(b) + ".";
        const auto& blk = stages[s][b];
        fn(p + "conv1", blk.conv1);
        fn(p + "conv2", blk.conv2);
        if (blk.downsample) fn(p + "downsample.0", *blk.downsample);
      }
    }
  }
};

struct FeaturePair {
  Tensor4 f2;  // (n, c2, H/8, W/8)
  Tensor4 f3;  // (n, c3, H/16, W/16)
};

struct BackboneParamCount {
  std::size_t conv = 0;        // conv weights only
  std::size_t batchnorm = 0;   // affine gamma + beta
  std::size_t running_stats = 0;
  std::size_t conv_plus_bn() const { return conv + batchnorm; }
};

// ---------------------------------------------------------------------------
// Static layout

struct ConvLayout {
  std::string name;  // torchvision-style prefix, e.g. "layer2.0.conv1"
  std::string bn;    // matching batch-norm prefix
  std::size_t out_ch, in_ch, k, stride, padding;
};

inline std::vector<ConvLayout> backbone_layout(const BackboneConfig& cfg) {
  std::vector<ConvLayout> out;
  out.push_back({"conv1", "bn1", cfg.stem_channels, 3, 7, 2, 3});
  std::size_t in = cfg.stem_channels;
  for (std::size_t s = 0; s < 3; ++s) {
    const std::size_t ch = cfg.stage_channels[s];
    for (std::size_t b = 0; b < 2; ++b) {
      const std::string p = "layer" + std::to_string(s + 1) + "." + std::to_string(b) + ".";
      const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
      out.push_back({p + "conv1", p + "bn1", ch, in, 3, stride, 1});
      out.push_back({p + "conv2", p + "bn2", ch, ch, 3, 1, 1});
      if (b == 0 && (stride != 1 || in != ch)) {
        out.push_back({p + "downsample.0", p + "downsample.1", ch, in, 1, stride, 0});
      }
      in = ch;
    }
  }
  return out;
}

inline BackboneParamCount backbone_param_count(const BackboneConfig& cfg) {
  BackboneParamCount c;
  for (const auto& l : backbone_layout(cfg)) {
    c.conv += l.out_ch * l.in_ch * l.k * l.k;
    c.batchnorm += 2 * l.out_ch;
    c.running_stats += 2 * l.out_ch;
  }
  return c;
}

/// Expected (name, dims) table of the weight container.
inline std::vector<std::pair<std::string, std::vector<std::uint32_t>>> backbone_tensor_table(
    const BackboneConfig& cfg) {
  std::vector<std::pair<std::string, std::vector<std::uint32_t>>> t;
  for (const auto& l : backbone_layout(cfg)) {
    const auto o = static_cast<std::uint32_t>(l.out_ch);
    const auto i = static_cast<std::uint32_t>(l.in_ch);
    const auto k = static_cast<std::uint32_t>(l.k);
    t.push_back({l.name + ".weight", {o, i, k, k}});
    for (const char* f : {".weight", ".bias", ".running_mean", ".running_var"}) t.push_back({l.bn + f, {o}});
  }
  return t;
}

/// Static shapes of (f2, f3) for an input shape; validates the input.
inline std::pair<Shape4, Shape4> feature_shapes(const BackboneConfig& cfg, const Shape4& input) {
  if (input.c != 3) detail::contract_fail("backbone expects 3 input channels, got " + input.str());
  if (input.h == 0 || input.w == 0 || input.h % 32 != 0 || input.w % 32 != 0) {
    detail::contract_fail("backbone input extents must be positive multiples of 32, got " + input.str());
  }
  return {Shape4{input.n, cfg.stage_channels[1], input.h / 8, input.w / 8},
          Shape4{input.n, cfg.stage_channels[2], input.h / 16, input.w / 16}};
}

// ---------------------------------------------------------------------------
// Construction

namespace detail {

inline BackboneWeights assemble_backbone(const BackboneConfig& cfg, std::vector<ConvSpec> convs) {
  BackboneWeights w;
  w.config = cfg;
  std::size_t idx = 0;
  w.stem = std::move(convs[idx++]);
  std::size_t in = cfg.stem_channels;
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t b = 0; b < 2; ++b) {
      auto& blk = w.stages[s][b];
      blk.conv1 = std::move(convs[idx++]);
      blk.conv2 = std::move(convs[idx++]);
      const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
      if (b == 0 && (stride != 1 || in != cfg.stage_channels[s])) blk.downsample = std::move(convs[idx++]);
      in = cfg.stage_channels[s];
    }
  }
  return w;
}

}  // namespace detail

/// Builds folded weights from a container holding unfolded conv + BN tensors.
/// Names "ref.*" (reference activations) are tolerated; anything else outside
/// the expected table is rejected.
inline BackboneWeights backbone_from_tgw(const TgwFile& file, const BackboneConfig& cfg = {}) {
  const auto table = backbone_tensor_table(cfg);
  std::set<std::string> expected;
  for (const auto& [name, dims] : table) expected.insert(name);
  for (const auto& t : file.tensors()) {
    if (t.name.rfind("ref.", 0) == 0) continue;
    if (!expected.contains(t.name)) {
      throw TgwError(TgwErrc::unexpected_tensor, "unexpected tensor '" + t.name + "' in backbone weights");
    }
  }
  for (const auto& [name, dims] : table) {
    const TgwTensor& t = file.get(name);
    t.require_dtype(DType::f32);
    if (t.dims != dims) {
      std::string got, want;
      for (auto d : t.dims) got += std::to_string(d) + " ";
      for (auto d : dims) want += std::to_string(d) + " ";
      throw TgwError(TgwErrc::shape_mismatch, "tensor '" + name + "' has dims [" + got + "], expected [" + want + "]");
    }
  }

  std::vector<ConvSpec> convs;
  for (const auto& l : backbone_layout(cfg)) {
    ConvSpec raw{l.out_ch, l.in_ch, l.k, l.k, l.stride, l.padding, file.get(l.name + ".weight").to_f64(), {}};
    const auto gamma = file.get(l.bn + ".weight").to_f64();
    const auto beta = file.get(l.bn + ".bias").to_f64();
    const auto mean = file.get(l.bn + ".running_mean").to_f64();
    const auto var = file.get(l.bn + ".running_var").to_f64();
    convs.push_back(fold_batchnorm(raw, gamma, beta, mean, var, cfg.bn_eps));
  }
  return detail::assemble_backbone(cfg, std::move(convs));
}

inline BackboneWeights load_weights(const std::filesystem::path& path, const BackboneConfig& cfg = {}) {
  return backbone_from_tgw(TgwFile::read(path), cfg);
}

/// He-normal conv weights scaled by `scale`, identity batch norm.
inline BackboneWeights backbone_random_init(std::uint64_t seed, double scale = 1.0, const BackboneConfig& cfg = {}) {
  Rng rng(derive_seed(seed, Stream::backbone));
  std::vector<ConvSpec> convs;
  for (const auto& l : backbone_layout(cfg)) {
    ConvSpec c = ConvSpec::zeros(l.out_ch, l.in_ch, l.k, l.k, l.stride, l.padding, true);
    const double std = scale * std::sqrt(2.0 / static_cast<double>(l.in_ch * l.k * l.k));
    for (double& v : c.weights) v = static_cast<double>(static_cast<float>(rng.normal(0.0, std)));
    convs.push_back(std::move(c));
  }
  return detail::assemble_backbone(cfg, std::move(convs));
}

// ---------------------------------------------------------------------------
// Forward

namespace detail {

inline Tensor4 conv_act(const Tensor4& x, const ConvSpec& spec, const Activation& act) {
  Tensor4 y = conv2d(x, spec);
  activation_inplace(y, act);
  return y;
}

inline Tensor4 basic_block(const Tensor4& x, const BasicBlock& blk) {
  Tensor4 out = conv_act(x, blk.conv1, Activation::relu());
  out = conv2d(out, blk.conv2);
  const Tensor4 id = blk.downsample ? conv2d(x, *blk.downsample) : x;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = out[i] + id[i];
    out[i] = v > 0.0 ? v : 0.0;
  }
  return out;
}

}  // namespace detail

inline FeaturePair extract_features(const BackboneWeights& w, const Tensor4& x) {
  const auto [s2, s3] = feature_shapes(w.config, x.shape());
  Tensor4 h = detail::conv_act(x, w.stem, Activation::relu());
  h = pool2d(h, PoolKind::max, 3, 2, 1);
  for (const auto& blk : w.stages[0]) h = detail::basic_block(h, blk);
  for (const auto& blk : w.stages[1]) h = detail::basic_block(h, blk);
  FeaturePair out;
  out.f2 = h;
  for (const auto& blk : w.stages[2]) h = detail::basic_block(h, blk);
  out.f3 = std::move(h);
  if (out.f2.shape() != s2 || out.f3.shape() != s3) {
    throw NumericError("backbone produced " + out.f2.shape().str() + "/" + out.f3.shape().str() +
                       ", planned " + s2.str() + "/" + s3.str());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reference activations

struct ReferenceCheck {
  double f2_rel = 0.0;  // max |engine - ref| / max |ref|
  double f3_rel = 0.0;

  bool pass(double tol = 1e-4) const { return f2_rel <= tol && f3_rel <= tol; }
};

namespace detail {

inline double rel_error(const Tensor4& got, const Tensor4& want) {
  if (got.size() != want.size()) contract_fail("reference size mismatch: " + got.shape().str() + " vs " + want.shape().str());
  double peak = 0.0, err = 0.0;
  for (std::size_t i = 0; i < want.size(); ++i) {
    peak = std::max(peak, std::abs(want[i]));
    err = std::max(err, std::abs(got[i] - want[i]));
  }
  return peak > 0.0 ? err / peak : err;
}

}  // namespace detail

/// Runs the engine on "ref.input" and compares with "ref.f2"/"ref.f3".
inline ReferenceCheck check_reference(const BackboneWeights& w, const TgwFile& file) {
  const Tensor4 x = file.get("ref.input").to_tensor4();
  const FeaturePair f = extract_features(w, x);
  const Tensor4 f2 = file.get("ref.f2").to_tensor4();
  const Tensor4 f3 = file.get("ref.f3").to_tensor4();
  if (f2.shape() != f.f2.shape() || f3.shape() != f.f3.shape()) {
    throw TgwError(TgwErrc::shape_mismatch, "reference activations " + f2.shape().str() + "/" + f3.shape().str() +
                                                " do not match engine " + f.f2.shape().str() + "/" + f.f3.shape().str());
  }
  return {detail::rel_error(f.f2, f2), detail::rel_error(f.f3, f3)};
}

}  // namespace tinyglass
