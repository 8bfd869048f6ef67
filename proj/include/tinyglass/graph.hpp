// SPDX-License-Identifier: Apache-2.0
//
// Static inference graph. Every node's output shape is resolved when the plan
// is built; executors never derive shapes from data.
#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "tinyglass/error.hpp"
#include "tinyglass/model.hpp"
#include "tinyglass/tensor.hpp"

namespace tinyglass {

enum class OpKind { input, conv, max_pool, add_relu, avg_pool, resize, concat };
enum class Stage { input, backbone, patchmaker, adaptor, discriminator };

inline const char* to_string(OpKind k) {
  switch (k) {
    case OpKind::input: return "input";
    case OpKind::conv: return "conv";
    case OpKind::max_pool: return "max_pool";
    case OpKind::add_relu: return "add_relu";
    case OpKind::avg_pool: return "avg_pool";
    case OpKind::resize: return "resize";
    case OpKind::concat: return "concat";
  }
  return "?";
}

inline const char* to_string(Stage s) {
  switch (s) {
    case Stage::input: return "input";
    case Stage::backbone: return "backbone";
    case Stage::patchmaker: return "patchmaker";
    case Stage::adaptor: return "adaptor";
    case Stage::discriminator: return "discriminator";
  }
  return "?";
}

struct GraphNode {
  std::string name;
  OpKind op = OpKind::input;
  Stage stage = Stage::input;
  std::vector<std::size_t> inputs;
  Shape4 shape;
  ConvSpec conv;  // conv nodes; weights empty in a structure-only plan
  Activation act;
  std::size_t window = 0, stride = 1, padding = 0;  // pooling nodes
};

struct GraphPlan {
  std::vector<GraphNode> nodes;
  std::size_t output = 0;
  bool bound = false;  // conv weights present

  const GraphNode& operator[](std::size_t i) const { return nodes.at(i); }
  std::size_t size() const { return nodes.size(); }
  const Shape4& input_shape() const { return nodes.front().shape; }
  const Shape4& output_shape() const { return nodes.at(output).shape; }

  std::size_t find(const std::string& name) const {
    for (std::size_t i = 0; i < nodes.size(); ++i)
      if (nodes[i].name == name) return i;
    detail::contract_fail("graph has no node named " + name);
  }

  /// Re-derives every shape from the inputs and rejects anything that does
  /// not match what was recorded at build time.
  void validate() const {
    detail::require(!nodes.empty() && nodes.front().op == OpKind::input, "graph must start with its input");
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const auto& n = nodes[i];
      for (std::size_t j : n.inputs) {
        detail::require(j < i, "graph node " + n.name + " consumes a later node");
      }
      const Shape4 s = derive_shape(n);
      if (s != n.shape) {
        detail::contract_fail("graph node " + n.name + " records " + n.shape.str() + " but derives " + s.str());
      }
      if (bound && n.op == OpKind::conv) n.conv.validate();
    }
    detail::require(output < nodes.size(), "graph output out of range");
  }

 private:
  Shape4 derive_shape(const GraphNode& n) const {
    auto in = [&](std::size_t k) { return nodes.at(n.inputs.at(k)).shape; };
    switch (n.op) {
      case OpKind::input:
        return n.shape;
      case OpKind::conv:
        return conv_output_shape(in(0), n.conv);
      case OpKind::max_pool:
      case OpKind::avg_pool: {
        const Shape4 s = in(0);
        return {s.n, s.c, window_extent(s.h, n.window, n.stride, n.padding),
                window_extent(s.w, n.window, n.stride, n.padding)};
      }
      case OpKind::add_relu:
        detail::require(in(0) == in(1), "add_relu operands differ at " + n.name);
        return in(0);
      case OpKind::resize:
        return {in(0).n, in(0).c, n.shape.h, n.shape.w};
      case OpKind::concat: {
        const Shape4 a = in(0), b = in(1);
        detail::require(a.n == b.n && a.h == b.h && a.w == b.w, "concat operands differ at " + n.name);
        return {a.n, a.c + b.c, a.h, a.w};
      }
    }
    return n.shape;
  }
};

namespace detail {

class PlanBuilder {
 public:
  explicit PlanBuilder(const Shape4& input) {
    GraphNode n;
    n.name = "input";
    n.shape = input;
    plan_.nodes.push_back(std::move(n));
  }

  std::size_t conv(std::string name, Stage stage, std::size_t in, ConvSpec spec, Activation act) {
    GraphNode n;
    n.name = std::move(name);
    n.op = OpKind::conv;
    n.stage = stage;
    n.inputs = {in};
    n.shape = conv_output_shape(plan_.nodes[in].shape, spec);
    n.conv = std::move(spec);
    n.act = act;
    return push(std::move(n));
  }

  std::size_t pool(std::string name, Stage stage, OpKind op, std::size_t in, std::size_t k, std::size_t s,
                   std::size_t p) {
    const Shape4 is = plan_.nodes[in].shape;
    GraphNode n;
    n.name = std::move(name);
    n.op = op;
    n.stage = stage;
    n.inputs = {in};
    n.shape = {is.n, is.c, window_extent(is.h, k, s, p), window_extent(is.w, k, s, p)};
    n.window = k;
    n.stride = s;
    n.padding = p;
    return push(std::move(n));
  }

  std::size_t add_relu(std::string name, std::size_t a, std::size_t b) {
    GraphNode n;
    n.name = std::move(name);
    n.op = OpKind::add_relu;
    n.stage = Stage::backbone;
    n.inputs = {a, b};
    n.shape = plan_.nodes[a].shape;
    return push(std::move(n));
  }

  std::size_t resize(std::string name, std::size_t in, std::size_t h, std::size_t w) {
    const Shape4 is = plan_.nodes[in].shape;
    GraphNode n;
    n.name = std::move(name);
    n.op = OpKind::resize;
    n.stage = Stage::patchmaker;
    n.inputs = {in};
    n.shape = {is.n, is.c, h, w};
    return push(std::move(n));
  }

  std::size_t concat(std::string name, std::size_t a, std::size_t b) {
    const Shape4 sa = plan_.nodes[a].shape;
    GraphNode n;
    n.name = std::move(name);
    n.op = OpKind::concat;
    n.stage = Stage::patchmaker;
    n.inputs = {a, b};
    n.shape = {sa.n, sa.c + plan_.nodes[b].shape.c, sa.h, sa.w};
    return push(std::move(n));
  }

  const Shape4& shape(std::size_t i) const { return plan_.nodes[i].shape; }

  GraphPlan finish(std::size_t output, bool bound) {
    plan_.output = output;
    plan_.bound = bound;
    plan_.validate();
    return std::move(plan_);
  }

 private:
  std::size_t push(GraphNode n) {
    plan_.nodes.push_back(std::move(n));
    return plan_.nodes.size() - 1;
  }
  GraphPlan plan_;
};

inline ConvSpec shape_only(std::size_t out, std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                           bool bias) {
  ConvSpec s{out, in, k, k, stride, pad, {}, {}};
  if (bias) s.bias.assign(out, 0.0);
  return s;
}

// Shared by the bound and structure-only builders. `conv_at(name, layout)`
// supplies each conv in layout order.
template <typename ConvSource>
GraphPlan build_plan_impl(const ModelConfig& cfg, const Shape4& input, ConvSource&& conv_at,
                          const std::optional<ConvSpec>& adaptor, const ConvSpec& disc_a, const ConvSpec& disc_b,
                          bool bound) {
  cfg.embedding.validate();
  const auto [s2, s3] = feature_shapes(cfg.backbone, input);
  PlanBuilder b(input);
  const Activation relu = Activation::relu();

  std::size_t h = b.conv("conv1", Stage::backbone, 0, conv_at("conv1"), relu);
  h = b.pool("maxpool", Stage::backbone, OpKind::max_pool, h, 3, 2, 1);
  std::size_t f2 = 0;
  std::size_t in_ch = cfg.backbone.stem_channels;
  for (std::size_t s = 0; s < 3; ++s) {
    const std::size_t ch = cfg.backbone.stage_channels[s];
    for (std::size_t blk = 0; blk < 2; ++blk) {
      const std::string p = "layer" + std::to_string(s + 1) + "." + std::to_string(blk) + ".";
      const std::size_t stride = (s > 0 && blk == 0) ? 2 : 1;
      const std::size_t c1 = b.conv(p + "conv1", Stage::backbone, h, conv_at(p + "conv1"), relu);
      const std::size_t c2 = b.conv(p + "conv2", Stage::backbone, c1, conv_at(p + "conv2"), Activation::none());
      std::size_t id = h;
      if (blk == 0 && (stride != 1 || in_ch != ch)) {
        id = b.conv(p + "downsample.0", Stage::backbone, h, conv_at(p + "downsample.0"), Activation::none());
      }
      h = b.add_relu(p + "add", c2, id);
      in_ch = ch;
    }
    if (s == 1) f2 = h;
  }
  const std::size_t f3 = h;
  require(b.shape(f2) == s2 && b.shape(f3) == s3, "graph feature shapes disagree with the backbone plan");

  const std::size_t k = cfg.embedding.patch_size;
  std::size_t a2 = f2, a3 = f3;
  if (k > 1) {
    a2 = b.pool("agg2", Stage::patchmaker, OpKind::avg_pool, f2, k, 1, (k - 1) / 2);
    a3 = b.pool("agg3", Stage::patchmaker, OpKind::avg_pool, f3, k, 1, (k - 1) / 2);
  }
  const Shape4 g = cfg.embedding.grid == CommonGrid::level3 ? s3 : s2;
  if (b.shape(a2).h != g.h || b.shape(a2).w != g.w) a2 = b.resize("resize2", a2, g.h, g.w);
  if (b.shape(a3).h != g.h || b.shape(a3).w != g.w) a3 = b.resize("resize3", a3, g.h, g.w);
  std::size_t e = b.concat("concat", a2, a3);
  if (cfg.embedding.adaptor == AdaptorKind::linear) {
    require(adaptor.has_value(), "linear adaptor configured but missing from the model");
    e = b.conv("adaptor", Stage::adaptor, e, *adaptor, Activation::none());
  }
  const std::size_t za = b.conv("disc.conv_a", Stage::discriminator, e, disc_a, Activation::leaky_relu(cfg.slope));
  const std::size_t zb = b.conv("disc.conv_b", Stage::discriminator, za, disc_b, Activation::none());
  return b.finish(zb, bound);
}

}  // namespace detail

/// Structure-only plan: shapes and conv geometry, no weights.
inline GraphPlan build_plan(const ModelConfig& cfg, const Shape4& input) {
  const auto layout = backbone_layout(cfg.backbone);
  auto conv_at = [&](const std::string& name) {
    for (const auto& l : layout)
      if (l.name == name) return detail::shape_only(l.out_ch, l.in_ch, l.k, l.stride, l.padding, true);
    detail::contract_fail("no backbone layer " + name);
  };
  const std::size_t d = cfg.embedding_channels();
  std::optional<ConvSpec> adaptor;
  if (cfg.embedding.adaptor == AdaptorKind::linear) adaptor = detail::shape_only(d, d, 1, 1, 0, false);
  return detail::build_plan_impl(cfg, input, conv_at, adaptor, detail::shape_only(cfg.hidden, d, 1, 1, 0, true),
                                 detail::shape_only(1, cfg.hidden, 1, 1, 0, true), false);
}

/// Plan carrying the model's weights, ready to execute.
inline GraphPlan build_plan(const Model& m, const Shape4& input) {
  std::vector<std::pair<std::string, const ConvSpec*>> convs;
  m.backbone.for_each_conv([&](const std::string& name, const ConvSpec& c) { convs.emplace_back(name, &c); });
  auto conv_at = [&](const std::string& name) {
    for (const auto& [n, c] : convs)
      if (n == name) return *c;
    detail::contract_fail("no backbone layer " + name);
  };
  std::optional<ConvSpec> adaptor;
  if (m.head.adaptor) adaptor = m.head.adaptor->as_conv();
  return detail::build_plan_impl(m.config(), input, conv_at, adaptor, m.head.disc.conv_a(), m.head.disc.conv_b(),
                                 true);
}

/// Called after each node executes with its float output.
using GraphObserver = std::function<void(std::size_t node, const Tensor4& value)>;

/// Float reference executor. Returns the output node (logits).
inline Tensor4 run_graph(const GraphPlan& plan, const Tensor4& x, const GraphObserver& observe = {}) {
  detail::require(plan.bound, "run_graph needs a plan with weights");
  if (x.shape() != plan.input_shape()) {
    detail::contract_fail("graph planned for " + plan.input_shape().str() + ", got " + x.shape().str());
  }
  std::vector<Tensor4> vals(plan.size());
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const auto& n = plan.nodes[i];
    auto in = [&](std::size_t k) -> const Tensor4& { return vals[n.inputs[k]]; };
    switch (n.op) {
      case OpKind::input:
        vals[i] = x;
        break;
      case OpKind::conv:
        vals[i] = conv2d(in(0), n.conv);
        activation_inplace(vals[i], n.act);
        break;
      case OpKind::max_pool:
        vals[i] = pool2d(in(0), PoolKind::max, n.window, n.stride, n.padding);
        break;
      case OpKind::avg_pool:
        vals[i] = pool2d(in(0), PoolKind::avg, n.window, n.stride, n.padding);
        break;
      case OpKind::add_relu: {
        vals[i] = add(in(0), in(1));
        activation_inplace(vals[i], Activation::relu());
        break;
      }
      case OpKind::resize:
        vals[i] = bilinear_resize(in(0), n.shape.h, n.shape.w);
        break;
      case OpKind::concat:
        vals[i] = concat_channels(in(0), in(1));
        break;
    }
    if (vals[i].shape() != n.shape) {
      throw NumericError("graph node " + n.name + " produced " + vals[i].shape().str() + ", planned " +
                         n.shape.str());
    }
    if (observe) observe(i, vals[i]);
  }
  return vals[plan.output];
}

/// Index of the last node reading each node's output (itself if unread).
inline std::vector<std::size_t> last_use(const GraphPlan& plan) {
  std::vector<std::size_t> last(plan.size());
  for (std::size_t i = 0; i < plan.size(); ++i) last[i] = i;
  for (std::size_t i = 0; i < plan.size(); ++i)
    for (std::size_t j : plan.nodes[i].inputs) last[j] = std::max(last[j], i);
  last[plan.output] = plan.size();
  return last;
}

/// Largest total element count held simultaneously while executing the plan
/// in node order; a node's inputs and output are live together.
inline std::size_t peak_live_elements(const GraphPlan& plan) {
  const auto last = last_use(plan);
  std::size_t peak = 0;
  for (std::size_t step = 0; step < plan.size(); ++step) {
    std::size_t live = 0;
    for (std::size_t t = 0; t <= step; ++t)
      if (last[t] >= step) live += plan.nodes[t].shape.size();
    peak = std::max(peak, live);
  }
  return peak;
}

}  // namespace tinyglass
