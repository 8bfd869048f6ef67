// SPDX-License-Identifier: Apache-2.0
//
// Post-training INT8 quantization. Weights are symmetric per output channel,
// activations affine per tensor. Integer products accumulate in int32; every
// requantization rounds half to even through std::nearbyint.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "tinyglass/error.hpp"
#include "tinyglass/graph.hpp"
#include "tinyglass/model.hpp"
#include "tinyglass/tensor.hpp"
#include "tinyglass/tgw.hpp"

namespace tinyglass {

inline constexpr double kMinScale = 1e-8;

/// Per-tensor affine parameters: real = (q - zero_point) * scale.
struct QuantParams {
  double scale = 1.0;
  std::int32_t zero_point = 0;

  void validate() const {
    detail::require(std::isfinite(scale) && scale > 0.0, "quant scale must be positive and finite");
    detail::require(zero_point >= -128 && zero_point <= 127, "zero_point out of int8 range");
  }

  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

using QPayload = BasicTensor4<std::int8_t>;

struct QTensor {
  QPayload payload;
  QuantParams params;

  const Shape4& shape() const { return payload.shape(); }
};

namespace detail {

inline double rhe(double v) { return std::nearbyint(v); }

inline std::int8_t saturate_i8(double v) {
  return static_cast<std::int8_t>(std::clamp(v, -128.0, 127.0));
}

inline double as_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace detail

inline std::int8_t quantize_value(double x, const QuantParams& p) {
  return detail::saturate_i8(detail::rhe(x / p.scale) + p.zero_point);
}

inline double dequantize_value(std::int8_t q, const QuantParams& p) {
  return (static_cast<double>(q) - p.zero_point) * p.scale;
}

inline QTensor quantize_tensor(const Tensor4& x, const QuantParams& p) {
  p.validate();
  QTensor q{QPayload(x.shape()), p};
  for (std::size_t i = 0; i < x.size(); ++i) q.payload[i] = quantize_value(x[i], p);
  return q;
}

inline Tensor4 dequantize(const QTensor& q) {
  Tensor4 out(q.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = dequantize_value(q.payload[i], q.params);
  return out;
}

/// Range -> params. The range is widened to contain 0 so zero is exact. A
/// range symmetric about 0 maps to zero_point 0 over [-127,127]. Scales are
/// stored as float so a saved model reloads bit-exactly.
inline QuantParams activation_params(double lo, double hi, bool* floored = nullptr) {
  detail::require(std::isfinite(lo) && std::isfinite(hi) && lo <= hi, "activation range must be finite and ordered");
  lo = std::min(lo, 0.0);
  hi = std::max(hi, 0.0);
  if (floored) *floored = false;
  if (hi - lo <= 0.0) {
    if (floored) *floored = true;
    return {kMinScale, 0};
  }
  if (lo == -hi) return {std::max(kMinScale, detail::as_f32(hi / 127.0)), 0};
  const double scale = std::max(kMinScale, detail::as_f32((hi - lo) / 255.0));
  const double zp = std::clamp(detail::rhe(-128.0 - lo / scale), -128.0, 127.0);
  return {scale, static_cast<std::int32_t>(zp)};
}

// ---------------------------------------------------------------------------
// Quantized convolution

struct QuantizedConv {
  std::size_t out_ch = 0, in_ch = 0, k = 1, stride = 1, padding = 0;
  std::vector<std::int8_t> weights;  // OIHW
  std::vector<double> weight_scales;   // per output channel
  std::vector<std::int32_t> bias;      // accumulator domain; empty if none
  std::vector<double> float_bias;      // kept until the input scale is known

  std::size_t weight_count() const { return out_ch * in_ch * k * k; }
  std::size_t fan_in() const { return in_ch * k * k; }
};

/// Symmetric per-channel weight quantization: scale = max|w| / 127.
inline QuantizedConv quantize_weights(const ConvSpec& spec) {
  spec.validate();
  detail::require(spec.kh == spec.kw, "quantized conv needs square kernels");
  QuantizedConv q{spec.out_ch, spec.in_ch, spec.kh, spec.stride, spec.padding, {}, {}, {}, spec.bias};
  q.weights.resize(spec.weight_count());
  q.weight_scales.resize(spec.out_ch);
  const std::size_t per = q.fan_in();
  for (std::size_t o = 0; o < spec.out_ch; ++o) {
    double m = 0.0;
    for (std::size_t i = 0; i < per; ++i) m = std::max(m, std::abs(spec.weights[o * per + i]));
    const double s = std::max(kMinScale, detail::as_f32(m / 127.0));
    q.weight_scales[o] = s;
    for (std::size_t i = 0; i < per; ++i) {
      q.weights[o * per + i] =
          static_cast<std::int8_t>(std::clamp(detail::rhe(spec.weights[o * per + i] / s), -127.0, 127.0));
    }
  }
  return q;
}

/// Worst-case |accumulator| for this kernel: |q - zp| <= 255, |w| <= 127.
inline std::int64_t accumulator_bound(const QuantizedConv& q) {
  std::int64_t b = 255LL * 127LL * static_cast<std::int64_t>(q.fan_in());
  std::int64_t mb = 0;
  for (auto v : q.bias) mb = std::max<std::int64_t>(mb, std::abs(static_cast<std::int64_t>(v)));
  return b + mb;
}

/// Converts float bias into the accumulator domain for a given input scale.
/// Returns false if any value had to be clamped to the int32 range.
inline bool bind_bias(QuantizedConv& q, double input_scale) {
  q.bias.clear();
  if (q.float_bias.empty()) return true;
  bool ok = true;
  const double lim = static_cast<double>(std::numeric_limits<std::int32_t>::max()) / 2.0;
  q.bias.resize(q.out_ch);
  for (std::size_t o = 0; o < q.out_ch; ++o) {
    double v = detail::rhe(q.float_bias[o] / (input_scale * q.weight_scales[o]));
    if (std::abs(v) > lim) {
      v = std::clamp(v, -lim, lim);
      ok = false;
    }
    q.bias[o] = static_cast<std::int32_t>(v);
  }
  return ok;
}

/// INT8 convolution with int32 accumulation. `act` is applied in the real
/// domain before requantizing to `out`.
inline QTensor qconv2d(const QTensor& x, const QuantizedConv& spec, const QuantParams& out,
                       const Activation& act = Activation::none()) {
  detail::require(spec.weights.size() == spec.weight_count(), "quantized conv weights have the wrong length");
  if (accumulator_bound(spec) > std::numeric_limits<std::int32_t>::max()) {
    detail::contract_fail("quantized conv could overflow its int32 accumulator");
  }
  ConvSpec geom{spec.out_ch, spec.in_ch, spec.k, spec.k, spec.stride, spec.padding, {}, {}};
  const Shape4 os = conv_output_shape(x.shape(), geom);
  const std::size_t H = x.shape().h, W = x.shape().w;
  const std::size_t k = spec.k, stride = spec.stride, pad = spec.padding;

  // Centered input; padding is zero in this domain.
  std::vector<std::int32_t> centered(x.payload.size());
  for (std::size_t i = 0; i < centered.size(); ++i) centered[i] = x.payload[i] - x.params.zero_point;

  QTensor y{QPayload(os), out};
  std::vector<std::int32_t> acc(os.plane());
  for (std::size_t n = 0; n < os.n; ++n) {
    for (std::size_t oc = 0; oc < os.c; ++oc) {
      std::fill(acc.begin(), acc.end(), spec.bias.empty() ? 0 : spec.bias[oc]);
      for (std::size_t ic = 0; ic < spec.in_ch; ++ic) {
        const std::int32_t* in = centered.data() + (n * spec.in_ch + ic) * H * W;
        for (std::size_t ky = 0; ky < k; ++ky) {
          const auto [oy0, oy1] = detail::valid_range(os.h, H, ky, stride, pad);
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::int32_t wv = spec.weights[((oc * spec.in_ch + ic) * k + ky) * k + kx];
            if (wv == 0) continue;
            const auto [ox0, ox1] = detail::valid_range(os.w, W, kx, stride, pad);
            const auto col_off = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(pad);
            for (std::size_t oy = oy0; oy < oy1; ++oy) {
              const std::int32_t* row = in + (oy * stride + ky - pad) * W;
              std::int32_t* dst = acc.data() + oy * os.w;
              for (std::size_t ox = ox0; ox < ox1; ++ox) {
                dst[ox] += wv * row[static_cast<std::ptrdiff_t>(ox * stride) + col_off];
              }
            }
          }
        }
      }
      const double m = x.params.scale * spec.weight_scales[oc];
      std::int8_t* o = y.payload.plane(n, oc);
      for (std::size_t i = 0; i < acc.size(); ++i) {
        const double real = act(static_cast<double>(acc[i]) * m);
        o[i] = quantize_value(real, out);
      }
    }
  }
  return y;
}

// ---------------------------------------------------------------------------
// Calibration and the quantized model

struct CalibrationConfig {
  enum class Method { minmax, percentile };
  Method method = Method::minmax;
  double percentile = 99.9;  // upper quantile; lower is 100 - percentile

  void validate() const {
    detail::require(percentile > 50.0 && percentile <= 100.0, "calibration percentile must lie in (50,100]");
  }
};

struct QuantizedModel {
  ModelConfig config;
  GraphPlan plan;                     // structure only
  std::vector<QuantParams> act;       // one per node
  std::vector<QuantizedConv> convs;   // one per node; unused for non-conv nodes
  std::vector<std::string> warnings;

  bool calibrated() const { return !plan.nodes.empty() && act.size() == plan.size(); }
};

namespace detail {

inline std::pair<double, double> tensor_range(const Tensor4& t, const CalibrationConfig& cfg) {
  if (cfg.method == CalibrationConfig::Method::minmax || cfg.percentile == 100.0) {
    const auto [lo, hi] = std::minmax_element(t.data().begin(), t.data().end());
    return {*lo, *hi};
  }
  std::vector<double> v(t.data().begin(), t.data().end());
  std::sort(v.begin(), v.end());
  auto q = [&](double pct) {
    const double pos = pct / 100.0 * static_cast<double>(v.size() - 1);
    const auto i = static_cast<std::size_t>(std::floor(pos));
    const std::size_t j = std::min(i + 1, v.size() - 1);
    return v[i] + (pos - static_cast<double>(i)) * (v[j] - v[i]);
  };
  return {q(100.0 - cfg.percentile), q(cfg.percentile)};
}

}  // namespace detail

/// Runs the float graph over every calibration image and fixes all
/// quantization parameters. Min-max ranges are running extremes; percentile
/// ranges are averaged per-image quantiles.
inline QuantizedModel calibrate(const Model& model, std::span<const Tensor4> images,
                                const CalibrationConfig& cfg = {}) {
  cfg.validate();
  detail::require(!images.empty(), "calibration needs at least one image");
  Shape4 in = images.front().shape();
  detail::require(in.n == 1, "calibration images must be single samples, got " + in.str());
  const GraphPlan bound = build_plan(model, in);

  const std::size_t nn = bound.size();
  std::vector<double> lo(nn, 0.0), hi(nn, 0.0);
  std::vector<bool> seen(nn, false);
  const bool averaged = cfg.method == CalibrationConfig::Method::percentile;
  for (const auto& img : images) {
    if (img.shape() != in) detail::contract_fail("calibration image " + img.shape().str() + " != " + in.str());
    run_graph(bound, img, [&](std::size_t i, const Tensor4& v) {
      const auto [a, b] = detail::tensor_range(v, cfg);
      if (averaged) {
        lo[i] += a;
        hi[i] += b;
      } else if (!seen[i]) {
        lo[i] = a;
        hi[i] = b;
      } else {
        lo[i] = std::min(lo[i], a);
        hi[i] = std::max(hi[i], b);
      }
      seen[i] = true;
    });
  }

  QuantizedModel qm;
  qm.config = model.config();
  qm.plan = build_plan(qm.config, in);
  qm.act.resize(nn);
  qm.convs.resize(nn);
  for (std::size_t i = 0; i < nn; ++i) {
    if (averaged) {
      lo[i] /= static_cast<double>(images.size());
      hi[i] /= static_cast<double>(images.size());
    }
    bool floored = false;
    // max_pool reuses its input's parameters, so it never needs its own.
    const auto& node = bound.nodes[i];
    if (node.op == OpKind::max_pool) {
      qm.act[i] = qm.act[node.inputs[0]];
    } else {
      qm.act[i] = activation_params(lo[i], hi[i], &floored);
    }
    if (floored) qm.warnings.push_back("constant-zero activation at " + node.name + ": scale floored at 1e-8");
    if (node.op == OpKind::conv) {
      qm.convs[i] = quantize_weights(node.conv);
      if (!bind_bias(qm.convs[i], qm.act[node.inputs[0]].scale)) {
        qm.warnings.push_back("bias clamped to int32 at " + node.name);
      }
    }
  }
  return qm;
}

inline QuantizedModel calibrate(const Model& model, const Tensor4& batch, const CalibrationConfig& cfg = {}) {
  std::vector<Tensor4> imgs;
  for (std::size_t i = 0; i < batch.n(); ++i) imgs.push_back(batch.slice_batch(i, 1));
  return calibrate(model, std::span<const Tensor4>(imgs), cfg);
}

namespace detail {

inline QTensor requantize(const Tensor4& real, const QuantParams& p) { return quantize_tensor(real, p); }

inline QTensor q_max_pool(const QTensor& x, const GraphNode& n) {
  return {pool2d(x.payload, PoolKind::max, n.window, n.stride, n.padding), x.params};
}

// Averages in the centered integer domain (padding excluded from the divisor).
inline QTensor q_avg_pool(const QTensor& x, const GraphNode& n, const QuantParams& out) {
  const Shape4 s = x.shape();
  QTensor y{QPayload(n.shape), out};
  const auto H = static_cast<std::ptrdiff_t>(s.h), W = static_cast<std::ptrdiff_t>(s.w);
  const auto k = static_cast<std::ptrdiff_t>(n.window), p = static_cast<std::ptrdiff_t>(n.padding);
  const auto st = static_cast<std::ptrdiff_t>(n.stride);
  for (std::size_t b = 0; b < s.n; ++b) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const std::int8_t* in = x.payload.plane(b, c);
      std::int8_t* o = y.payload.plane(b, c);
      for (std::size_t oy = 0; oy < n.shape.h; ++oy) {
        for (std::size_t ox = 0; ox < n.shape.w; ++ox) {
          std::int32_t sum = 0, cnt = 0;
          const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(oy) * st - p;
          const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(ox) * st - p;
          for (std::ptrdiff_t yy = std::max<std::ptrdiff_t>(0, y0); yy < std::min(H, y0 + k); ++yy) {
            for (std::ptrdiff_t xx = std::max<std::ptrdiff_t>(0, x0); xx < std::min(W, x0 + k); ++xx) {
              sum += in[yy * W + xx] - x.params.zero_point;
              ++cnt;
            }
          }
          const double real = static_cast<double>(sum) * x.params.scale / static_cast<double>(cnt);
          o[oy * n.shape.w + ox] = quantize_value(real, out);
        }
      }
    }
  }
  return y;
}

inline QTensor q_resize(const QTensor& x, const GraphNode& n, const QuantParams& out) {
  Tensor4 centered(x.shape());
  for (std::size_t i = 0; i < centered.size(); ++i) {
    centered[i] = static_cast<double>(x.payload[i] - x.params.zero_point);
  }
  Tensor4 r = bilinear_resize(centered, n.shape.h, n.shape.w);
  for (double& v : r.data()) v *= x.params.scale;
  return requantize(r, out);
}

inline QTensor q_add_relu(const QTensor& a, const QTensor& b, const QuantParams& out) {
  QTensor y{QPayload(a.shape()), out};
  for (std::size_t i = 0; i < a.payload.size(); ++i) {
    const double v = dequantize_value(a.payload[i], a.params) + dequantize_value(b.payload[i], b.params);
    y.payload[i] = quantize_value(v > 0.0 ? v : 0.0, out);
  }
  return y;
}

inline QTensor q_concat(const QTensor& a, const QTensor& b, const QuantParams& out) {
  auto rq = [&](const QTensor& t) {
    if (t.params == out) return t.payload;
    return requantize(dequantize(t), out).payload;
  };
  return {concat_channels(rq(a), rq(b)), out};
}

}  // namespace detail

/// Executes the INT8 graph on one sample and returns dequantized logits.
inline Tensor4 quantized_logits(const QuantizedModel& qm, const Tensor4& x) {
  if (!qm.calibrated()) detail::contract_fail("quantized model is not calibrated");
  if (x.shape() != qm.plan.input_shape()) {
    detail::contract_fail("quantized graph planned for " + qm.plan.input_shape().str() + ", got " + x.shape().str());
  }
  std::vector<QTensor> vals(qm.plan.size());
  for (std::size_t i = 0; i < qm.plan.size(); ++i) {
    const auto& n = qm.plan.nodes[i];
    auto in = [&](std::size_t k) -> const QTensor& { return vals[n.inputs[k]]; };
    switch (n.op) {
      case OpKind::input: vals[i] = quantize_tensor(x, qm.act[i]); break;
      case OpKind::conv: vals[i] = qconv2d(in(0), qm.convs[i], qm.act[i], n.act); break;
      case OpKind::max_pool: vals[i] = detail::q_max_pool(in(0), n); break;
      case OpKind::avg_pool: vals[i] = detail::q_avg_pool(in(0), n, qm.act[i]); break;
      case OpKind::add_relu: vals[i] = detail::q_add_relu(in(0), in(1), qm.act[i]); break;
      case OpKind::resize: vals[i] = detail::q_resize(in(0), n, qm.act[i]); break;
      case OpKind::concat: vals[i] = detail::q_concat(in(0), in(1), qm.act[i]); break;
    }
    if (vals[i].shape() != n.shape) {
      throw NumericError("quantized node " + n.name + " produced " + vals[i].shape().str());
    }
    // Free inputs whose last reader just ran.
    for (std::size_t j : n.inputs) {
      bool needed = j == qm.plan.output;
      for (std::size_t m = i + 1; m < qm.plan.size() && !needed; ++m)
        for (std::size_t r : qm.plan.nodes[m].inputs) needed = needed || r == j;
      if (!needed) vals[j] = {};
    }
  }
  return dequantize(vals[qm.plan.output]);
}

/// Patch anomaly probabilities (n,1,G,G) through the INT8 path; the final
/// sigmoid runs on the host.
inline Tensor4 quantized_forward(const QuantizedModel& qm, const Tensor4& images, std::size_t threads = 1) {
  std::vector<Tensor4> parts(images.n());
  parallel_for(images.n(), threads,
               [&](std::size_t i) { parts[i] = sigmoid(quantized_logits(qm, images.slice_batch(i, 1))); });
  return stack_batch<double>(parts);
}

// ---------------------------------------------------------------------------
// Memory accounting

struct MemoryReport {
  std::size_t weight_bytes = 0;
  std::size_t metadata_bytes = 0;  // included in weight_bytes
  std::size_t peak_activation_bytes = 0;
  std::size_t total_bytes = 0;
  std::size_t budget_bytes = 8u << 20;

  bool pass() const { return total_bytes <= budget_bytes; }
};

/// Weights: one byte per int8 weight plus int32 biases and per-channel
/// scale/zero-point pairs. Metadata: 8 bytes per activation tensor. Peak
/// activation: largest set of int8 tensors live at once in node order.
inline MemoryReport memory_report(const QuantizedModel& qm, std::size_t budget = 8u << 20) {
  if (!qm.calibrated()) detail::contract_fail("memory_report needs a calibrated model");
  MemoryReport r;
  r.budget_bytes = budget;
  std::size_t payload = 0;
  for (std::size_t i = 0; i < qm.plan.size(); ++i) {
    r.metadata_bytes += 8;
    if (qm.plan.nodes[i].op != OpKind::conv) continue;
    const auto& c = qm.convs[i];
    payload += c.weights.size() + 4 * c.bias.size();
    r.metadata_bytes += 8 * c.out_ch;
  }
  r.weight_bytes = payload + r.metadata_bytes;
  r.peak_activation_bytes = peak_live_elements(qm.plan);
  r.total_bytes = r.weight_bytes + r.peak_activation_bytes;
  return r;
}

// ---------------------------------------------------------------------------
// Serialization

inline TgwFile quantized_to_tgw(const QuantizedModel& qm) {
  if (!qm.calibrated()) detail::contract_fail("cannot save an uncalibrated model");
  TgwFile f;
  f.add_text("meta.config", qm.config.to_text());
  const Shape4 s = qm.plan.input_shape();
  const std::vector<std::uint32_t> shape{static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c),
                                         static_cast<std::uint32_t>(s.h), static_cast<std::uint32_t>(s.w)};
  f.add_u32("meta.input_shape", shape);
  for (std::size_t i = 0; i < qm.plan.size(); ++i) {
    const auto& n = qm.plan.nodes[i];
    const std::vector<double> sc{qm.act[i].scale};
    const std::vector<std::int32_t> zp{qm.act[i].zero_point};
    f.add_f32("act." + n.name + ".scale", {1}, sc);
    f.add_i32("act." + n.name + ".zero_point", {1}, zp);
    if (n.op != OpKind::conv) continue;
    const auto& c = qm.convs[i];
    const auto u = [](std::size_t v) { return static_cast<std::uint32_t>(v); };
    f.add_i8(n.name + ".weight", {u(c.out_ch), u(c.in_ch), u(c.k), u(c.k)}, c.weights);
    f.add_f32(n.name + ".weight.scale", {u(c.out_ch)}, c.weight_scales);
    const std::vector<std::int32_t> wzp(c.out_ch, 0);
    f.add_i32(n.name + ".weight.zero_point", {u(c.out_ch)}, wzp);
    if (!c.bias.empty()) f.add_i32(n.name + ".bias", {u(c.out_ch)}, c.bias);
  }
  return f;
}

inline QuantizedModel quantized_from_tgw(const TgwFile& f) {
  QuantizedModel qm;
  qm.config = ModelConfig::from_text(f.get("meta.config").to_text());
  const auto s = f.get("meta.input_shape").to_u32();
  detail::require(s.size() == 4, "meta.input_shape must hold four extents");
  qm.plan = build_plan(qm.config, Shape4{s[0], s[1], s[2], s[3]});
  qm.act.resize(qm.plan.size());
  qm.convs.resize(qm.plan.size());
  for (std::size_t i = 0; i < qm.plan.size(); ++i) {
    const auto& n = qm.plan.nodes[i];
    qm.act[i] = {f.get("act." + n.name + ".scale").to_f64().at(0),
                 f.get("act." + n.name + ".zero_point").to_i32().at(0)};
    qm.act[i].validate();
    if (n.op != OpKind::conv) continue;
    QuantizedConv c{n.conv.out_ch, n.conv.in_ch, n.conv.kh, n.conv.stride, n.conv.padding, {}, {}, {}, {}};
    const auto& w = f.get(n.name + ".weight");
    w.require_dtype(DType::i8);
    c.weights = w.to_i8();
    if (c.weights.size() != c.weight_count()) {
      throw TgwError(TgwErrc::shape_mismatch, "quantized weight " + n.name + " has the wrong length");
    }
    c.weight_scales = f.get(n.name + ".weight.scale").to_f64();
    detail::require(c.weight_scales.size() == c.out_ch, "weight scale count mismatch at " + n.name);
    if (n.conv.has_bias()) {
      c.bias = f.get(n.name + ".bias").to_i32();
      detail::require(c.bias.size() == c.out_ch, "bias length mismatch at " + n.name);
    }
    qm.convs[i] = std::move(c);
  }
  return qm;
}

inline void save_quantized(const std::filesystem::path& p, const QuantizedModel& qm) { quantized_to_tgw(qm).write(p); }
inline QuantizedModel load_quantized(const std::filesystem::path& p) { return quantized_from_tgw(TgwFile::read(p)); }

}  // namespace tinyglass
