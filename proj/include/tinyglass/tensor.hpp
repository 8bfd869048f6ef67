// SPDX-License-Identifier: Apache-2.0
//
// Dense rank-4 NCHW tensors and the fixed operator set used by the pipeline.
// Every operator computes its output shape up front, validates it, and never
// reshapes an existing value.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "tinyglass/error.hpp"

namespace tinyglass {

struct Shape4 {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  constexpr std::size_t size() const { return n * c * h * w; }
  constexpr std::size_t plane() const { return h * w; }
  friend constexpr bool operator==(const Shape4&, const Shape4&) = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
};

template <typename T>
class BasicTensor4 {
 public:
  using value_type = T;

  BasicTensor4() = default;

  explicit BasicTensor4(Shape4 shape, T fill = T{}) : shape_(shape), data_(shape.size(), fill) {}

  BasicTensor4(Shape4 shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    detail::require(data_.size() == shape_.size(),
                    "tensor data length " + std::to_string(data_.size()) +
                        " does not match shape " + shape_.str());
  }

  BasicTensor4(std::size_t n, std::size_t c, std::size_t h, std::size_t w, T fill = T{})
      : BasicTensor4(Shape4{n, c, h, w}, fill) {}

  const Shape4& shape() const { return shape_; }
  std::size_t n() const { return shape_.n; }
  std::size_t c() const { return shape_.c; }
  std::size_t h() const { return shape_.h; }
  std::size_t w() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  const std::vector<T>& values() const { return data_; }

  T* plane(std::size_t n, std::size_t c) { return data_.data() + (n * shape_.c + c) * shape_.plane(); }
  const T* plane(std::size_t n, std::size_t c) const {
    return data_.data() + (n * shape_.c + c) * shape_.plane();
  }

  std::size_t index(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return ((n * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }
  T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) { return data_[index(n, c, y, x)]; }
  const T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[index(n, c, y, x)];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Copy of samples [first, first+count) along the batch axis.
  BasicTensor4 slice_batch(std::size_t first, std::size_t count) const {
    detail::require(first + count <= shape_.n, "batch slice out of range for " + shape_.str());
    const std::size_t per = shape_.c * shape_.plane();
    Shape4 s = shape_;
    s.n = count;
    return BasicTensor4(s, std::vector<T>(data_.begin() + static_cast<std::ptrdiff_t>(first * per),
                                          data_.begin() + static_cast<std::ptrdiff_t>((first + count) * per)));
  }

  friend bool operator==(const BasicTensor4&, const BasicTensor4&) = default;

 private:
  Shape4 shape_{};
  std::vector<T> data_;
};

using Tensor4 = BasicTensor4<double>;

/// Stacks tensors of equal (c,h,w) along the batch axis.
template <typename T>
BasicTensor4<T> stack_batch(std::span<const BasicTensor4<T>> parts) {
  detail::require(!parts.empty(), "stack_batch needs at least one tensor");
  Shape4 s = parts.front().shape();
  s.n = 0;
  std::vector<T> data;
  for (const auto& p : parts) {
    detail::require(p.c() == s.c && p.h() == s.h && p.w() == s.w,
                    "stack_batch shape mismatch: " + parts.front().shape().str() + " vs " + p.shape().str());
    s.n += p.n();
    data.insert(data.end(), p.data().begin(), p.data().end());
  }
  return BasicTensor4<T>(s, std::move(data));
}

template <typename T>
BasicTensor4<T> stack_batch(std::initializer_list<BasicTensor4<T>> parts) {
  std::vector<BasicTensor4<T>> v(parts);
  return stack_batch<T>(std::span<const BasicTensor4<T>>(v));
}

template <typename T>
void check_finite(const BasicTensor4<T>& t, const char* op) {
  if constexpr (std::is_floating_point_v<T>) {
    for (T v : t.data()) {
      if (!std::isfinite(v)) throw NumericError(std::string(op) + " produced a non-finite value");
    }
  }
}

// ---------------------------------------------------------------------------
// Convolution

struct ConvSpec {
  std::size_t out_ch = 0;
  std::size_t in_ch = 0;
  std::size_t kh = 1;
  std::size_t kw = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::vector<double> weights;  // out_ch * in_ch * kh * kw, OIHW
  std::vector<double> bias;     // empty or out_ch

  std::size_t weight_count() const { return out_ch * in_ch * kh * kw; }
  bool has_bias() const { return !bias.empty(); }
  std::size_t param_count() const { return weight_count() + bias.size(); }

  double& weight(std::size_t o, std::size_t i, std::size_t y, std::size_t x) {
    return weights[((o * in_ch + i) * kh + y) * kw + x];
  }
  double weight(std::size_t o, std::size_t i, std::size_t y, std::size_t x) const {
    return weights[((o * in_ch + i) * kh + y) * kw + x];
  }

  void validate() const {
    detail::require(stride > 0, "conv stride must be positive");
    detail::require(out_ch > 0 && in_ch > 0 && kh > 0 && kw > 0, "conv extents must be positive");
    detail::require(weights.size() == weight_count(),
                    "conv weight length " + std::to_string(weights.size()) + " != " +
                        std::to_string(weight_count()));
    detail::require(bias.empty() || bias.size() == out_ch, "conv bias length must equal out_ch");
  }

  static ConvSpec zeros(std::size_t out_ch, std::size_t in_ch, std::size_t kh, std::size_t kw,
                        std::size_t stride = 1, std::size_t padding = 0, bool with_bias = false) {
    ConvSpec s{out_ch, in_ch, kh, kw, stride, padding, {}, {}};
    s.weights.assign(s.weight_count(), 0.0);
    if (with_bias) s.bias.assign(out_ch, 0.0);
    return s;
  }
};

/// Output extent of a strided window; floor convention, must be positive.
inline std::size_t window_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  detail::require(stride > 0, "window stride must be positive");
  const std::size_t padded = in + 2 * pad;
  if (padded < k) {
    detail::contract_fail("window " + std::to_string(k) + " larger than padded extent " +
                          std::to_string(padded));
  }
  return (padded - k) / stride + 1;
}

inline Shape4 conv_output_shape(const Shape4& in, const ConvSpec& spec) {
  if (in.c != spec.in_ch) {
    detail::contract_fail("conv2d channel mismatch: input " + in.str() + " vs weights (" +
                          std::to_string(spec.out_ch) + "," + std::to_string(spec.in_ch) + "," +
                          std::to_string(spec.kh) + "," + std::to_string(spec.kw) + ")");
  }
  return {in.n, spec.out_ch, window_extent(in.h, spec.kh, spec.stride, spec.padding),
          window_extent(in.w, spec.kw, spec.stride, spec.padding)};
}

namespace detail {

// Range of output positions o for which o*stride + k - pad lands inside [0, in).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t in, std::size_t k,
                                                       std::size_t stride, std::size_t pad) {
  const auto s = static_cast<std::ptrdiff_t>(stride);
  const auto off = static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(pad);
  std::ptrdiff_t lo = 0;
  if (off < 0) lo = (-off + s - 1) / s;
  std::ptrdiff_t hi_excl = 0;
  const std::ptrdiff_t last = static_cast<std::ptrdiff_t>(in) - 1 - off;
  if (last >= 0) hi_excl = last / s + 1;
  hi_excl = std::min<std::ptrdiff_t>(hi_excl, static_cast<std::ptrdiff_t>(out));
  if (hi_excl <= lo) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi_excl)};
}

}  // namespace detail

/// Cross-correlation with symmetric zero padding.
template <typename T>
BasicTensor4<T> conv2d(const BasicTensor4<T>& x, const ConvSpec& spec) {
  spec.validate();
  const Shape4 os = conv_output_shape(x.shape(), spec);
  BasicTensor4<T> out(os);
  const std::size_t stride = spec.stride;
  const std::size_t pad = spec.padding;
  std::vector<double> acc(os.plane());

  for (std::size_t n = 0; n < os.n; ++n) {
    for (std::size_t oc = 0; oc < os.c; ++oc) {
      std::fill(acc.begin(), acc.end(), spec.has_bias() ? spec.bias[oc] : 0.0);
      for (std::size_t ic = 0; ic < spec.in_ch; ++ic) {
        const T* in = x.plane(n, ic);
        for (std::size_t ky = 0; ky < spec.kh; ++ky) {
          const auto [oy0, oy1] = detail::valid_range(os.h, x.h(), ky, stride, pad);
          for (std::size_t kx = 0; kx < spec.kw; ++kx) {
            const double wv = spec.weight(oc, ic, ky, kx);
            if (wv == 0.0) continue;
            const auto [ox0, ox1] = detail::valid_range(os.w, x.w(), kx, stride, pad);
            const auto col_off = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(pad);
            for (std::size_t oy = oy0; oy < oy1; ++oy) {
              const T* row = in + (oy * stride + ky - pad) * x.w();
              double* dst = acc.data() + oy * os.w;
              if (stride == 1) {
                const T* src = row + static_cast<std::ptrdiff_t>(ox0) + col_off;
                double* d = dst + ox0;
                for (std::size_t i = 0, e = ox1 - ox0; i < e; ++i) d[i] += wv * static_cast<double>(src[i]);
              } else {
                for (std::size_t ox = ox0; ox < ox1; ++ox) {
                  dst[ox] += wv * static_cast<double>(row[static_cast<std::ptrdiff_t>(ox * stride) + col_off]);
                }
              }
            }
          }
        }
      }
      T* o = out.plane(n, oc);
      for (std::size_t i = 0; i < acc.size(); ++i) o[i] = static_cast<T>(acc[i]);
    }
  }
  check_finite(out, "conv2d");
  return out;
}

// ---------------------------------------------------------------------------
// Activations

struct Activation {
  enum class Kind { identity, relu, leaky_relu };
  Kind kind = Kind::identity;
  double slope = 0.0;

  static Activation none() { return {}; }
  static Activation relu() { return {Kind::relu, 0.0}; }
  static Activation leaky_relu(double slope) {
    detail::require(slope >= 0.0 && slope < 1.0, "leaky_relu slope must lie in [0,1)");
    return {Kind::leaky_relu, slope};
  }

  double operator()(double v) const {
    switch (kind) {
      case Kind::relu:
        return v > 0.0 ? v : 0.0;
      case Kind::leaky_relu:
        return v < 0.0 ? slope * v : v;
      case Kind::identity:
        break;
    }
    return v;
  }

  /// Derivative at v (subgradient 1 at the kink for the positive branch).
  double derivative(double v) const {
    switch (kind) {
      case Kind::relu:
        return v > 0.0 ? 1.0 : 0.0;
      case Kind::leaky_relu:
        return v < 0.0 ? slope : 1.0;
      case Kind::identity:
        break;
    }
    return 1.0;
  }

  friend bool operator==(const Activation&, const Activation&) = default;
};

template <typename T>
BasicTensor4<T> activation(const BasicTensor4<T>& x, const Activation& act) {
  BasicTensor4<T> out(x.shape());
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<T>(act(static_cast<double>(src[i])));
  check_finite(out, "activation");
  return out;
}

template <typename T>
void activation_inplace(BasicTensor4<T>& x, const Activation& act) {
  if (act.kind == Activation::Kind::identity) return;
  for (T& v : x.data()) v = static_cast<T>(act(static_cast<double>(v)));
}

// ---------------------------------------------------------------------------
// Pooling

enum class PoolKind { max, avg };

/// Window reduction per channel. Average pooling excludes padded cells from
/// the divisor; max pooling ignores them.
template <typename T>
BasicTensor4<T> pool2d(const BasicTensor4<T>& x, PoolKind kind, std::size_t k, std::size_t stride,
                       std::size_t padding) {
  detail::require(k > 0, "pool window must be positive");
  const Shape4 os{x.n(), x.c(), window_extent(x.h(), k, stride, padding),
                  window_extent(x.w(), k, stride, padding)};
  BasicTensor4<T> out(os);
  const auto H = static_cast<std::ptrdiff_t>(x.h());
  const auto W = static_cast<std::ptrdiff_t>(x.w());
  for (std::size_t n = 0; n < os.n; ++n) {
    for (std::size_t c = 0; c < os.c; ++c) {
      const T* in = x.plane(n, c);
      T* o = out.plane(n, c);
      for (std::size_t oy = 0; oy < os.h; ++oy) {
        const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(oy * stride) - static_cast<std::ptrdiff_t>(padding);
        const std::ptrdiff_t ya = std::max<std::ptrdiff_t>(y0, 0);
        const std::ptrdiff_t yb = std::min<std::ptrdiff_t>(y0 + static_cast<std::ptrdiff_t>(k), H);
        for (std::size_t ox = 0; ox < os.w; ++ox) {
          const std::ptrdiff_t x0 =
              static_cast<std::ptrdiff_t>(ox * stride) - static_cast<std::ptrdiff_t>(padding);
          const std::ptrdiff_t xa = std::max<std::ptrdiff_t>(x0, 0);
          const std::ptrdiff_t xb = std::min<std::ptrdiff_t>(x0 + static_cast<std::ptrdiff_t>(k), W);
          if (kind == PoolKind::max) {
            double m = -std::numeric_limits<double>::infinity();
            for (std::ptrdiff_t yy = ya; yy < yb; ++yy)
              for (std::ptrdiff_t xx = xa; xx < xb; ++xx) m = std::max(m, static_cast<double>(in[yy * W + xx]));
            o[oy * os.w + ox] = static_cast<T>(m);
          } else {
            double s = 0.0;
            for (std::ptrdiff_t yy = ya; yy < yb; ++yy)
              for (std::ptrdiff_t xx = xa; xx < xb; ++xx) s += static_cast<double>(in[yy * W + xx]);
            const auto count = static_cast<double>((yb - ya) * (xb - xa));
            o[oy * os.w + ox] = static_cast<T>(s / count);
          }
        }
      }
    }
  }
  check_finite(out, "pool2d");
  return out;
}

// ---------------------------------------------------------------------------
// Bilinear resize (half-pixel centers, edge clamped)

namespace detail {

struct LerpTap {
  std::size_t i0, i1;
  double l1;  // weight of i1; weight of i0 is 1 - l1
};

inline std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    auto i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    const double l1 = i1 == i0 ? 0.0 : src - static_cast<double>(i0);
    taps[d] = {i0, i1, l1};
  }
  return taps;
}

}  // namespace detail

template <typename T>
BasicTensor4<T> bilinear_resize(const BasicTensor4<T>& x, std::size_t out_h, std::size_t out_w) {
  detail::require(out_h > 0 && out_w > 0, "bilinear_resize target extents must be positive");
  detail::require(x.h() > 0 && x.w() > 0, "bilinear_resize source is empty: " + x.shape().str());
  if (out_h == x.h() && out_w == x.w()) return x;
  const auto ty = detail::lerp_taps(x.h(), out_h);
  const auto tx = detail::lerp_taps(x.w(), out_w);
  BasicTensor4<T> out(Shape4{x.n(), x.c(), out_h, out_w});
  for (std::size_t n = 0; n < x.n(); ++n) {
    for (std::size_t c = 0; c < x.c(); ++c) {
      const T* in = x.plane(n, c);
      T* o = out.plane(n, c);
      for (std::size_t y = 0; y < out_h; ++y) {
        const auto& a = ty[y];
        const T* r0 = in + a.i0 * x.w();
        const T* r1 = in + a.i1 * x.w();
        for (std::size_t xx = 0; xx < out_w; ++xx) {
          const auto& b = tx[xx];
          const double top = (1.0 - b.l1) * static_cast<double>(r0[b.i0]) + b.l1 * static_cast<double>(r0[b.i1]);
          const double bot = (1.0 - b.l1) * static_cast<double>(r1[b.i0]) + b.l1 * static_cast<double>(r1[b.i1]);
          o[y * out_w + xx] = static_cast<T>((1.0 - a.l1) * top + a.l1 * bot);
        }
      }
    }
  }
  check_finite(out, "bilinear_resize");
  return out;
}

// ---------------------------------------------------------------------------
// Channel concat, elementwise helpers

template <typename T>
BasicTensor4<T> concat_channels(const BasicTensor4<T>& a, const BasicTensor4<T>& b) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w()) {
    if (a.c() != 0 && b.c() != 0) {
      detail::contract_fail("concat_channels mismatch: " + a.shape().str() + " vs " + b.shape().str());
    }
  }
  if (b.c() == 0) return a;
  if (a.c() == 0) return b;
  BasicTensor4<T> out(Shape4{a.n(), a.c() + b.c(), a.h(), a.w()});
  const std::size_t pa = a.c() * a.h() * a.w();
  const std::size_t pb = b.c() * b.h() * b.w();
  for (std::size_t n = 0; n < a.n(); ++n) {
    std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(n * pa), pa,
                out.data().begin() + static_cast<std::ptrdiff_t>(n * (pa + pb)));
    std::copy_n(b.data().begin() + static_cast<std::ptrdiff_t>(n * pb), pb,
                out.data().begin() + static_cast<std::ptrdiff_t>(n * (pa + pb) + pa));
  }
  return out;
}

template <typename T>
BasicTensor4<T> add(const BasicTensor4<T>& a, const BasicTensor4<T>& b) {
  detail::require(a.shape() == b.shape(), "add shape mismatch: " + a.shape().str() + " vs " + b.shape().str());
  BasicTensor4<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  check_finite(out, "add");
  return out;
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// log(1 + exp(z)) without overflow.
inline double softplus(double z) {
  if (z > 0.0) return z + std::log1p(std::exp(-z));
  return std::log1p(std::exp(z));
}

inline Tensor4 sigmoid(const Tensor4& x) {
  Tensor4 out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = sigmoid(x[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Batch-norm folding

/// Returns conv' with conv'(x) == batchnorm(conv(x)) at inference.
inline ConvSpec fold_batchnorm(const ConvSpec& conv, std::span<const double> gamma, std::span<const double> beta,
                               std::span<const double> mean, std::span<const double> var, double eps) {
  conv.validate();
  const std::size_t oc = conv.out_ch;
  detail::require(gamma.size() == oc && beta.size() == oc && mean.size() == oc && var.size() == oc,
                  "batchnorm parameter length must equal out_ch " + std::to_string(oc));
  ConvSpec out = conv;
  out.bias.assign(oc, 0.0);
  const std::size_t per = conv.in_ch * conv.kh * conv.kw;
  for (std::size_t o = 0; o < oc; ++o) {
    if (!(var[o] >= 0.0)) detail::contract_fail("batchnorm variance must be non-negative (channel " +
                                                std::to_string(o) + ")");
    const double denom = std::sqrt(var[o] + eps);
    if (!(denom > 0.0)) throw NumericError("batchnorm fold: var + eps is zero on channel " + std::to_string(o));
    const double k = gamma[o] / denom;
    for (std::size_t i = 0; i < per; ++i) out.weights[o * per + i] = conv.weights[o * per + i] * k;
    const double b = conv.has_bias() ? conv.bias[o] : 0.0;
    out.bias[o] = (b - mean[o]) * k + beta[o];
  }
  return out;
}

}  // namespace tinyglass
