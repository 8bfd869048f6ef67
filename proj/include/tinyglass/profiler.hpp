// SPDX-License-Identifier: Apache-2.0
//
// Analytic complexity accounting over the static graph. One MAC is one
// multiply-accumulate. Only convolutions carry MACs; pooling, resize and the
// residual adds are tallied as element operations.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "tinyglass/backbone.hpp"
#include "tinyglass/error.hpp"
#include "tinyglass/graph.hpp"
#include "tinyglass/model.hpp"

namespace tinyglass {

struct LayerRow {
  std::string name;
  Stage stage = Stage::backbone;
  OpKind op = OpKind::conv;
  Shape4 output;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
  std::uint64_t element_ops = 0;
};

struct StageTotals {
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
  std::uint64_t element_ops = 0;
};

inline constexpr std::array<Stage, 4> kProfiledStages{Stage::backbone, Stage::patchmaker, Stage::adaptor,
                                                      Stage::discriminator};

struct ComplexityReport {
  Shape4 input;
  std::vector<LayerRow> rows;
  std::uint64_t batchnorm_params = 0;  // folded into backbone convs, listed separately

  StageTotals stage(Stage s) const {
    StageTotals t;
    for (const auto& r : rows) {
      if (r.stage != s) continue;
      t.params += r.params;
      t.macs += r.macs;
      t.element_ops += r.element_ops;
    }
    return t;
  }

  StageTotals total() const {
    StageTotals t;
    for (const auto& r : rows) {
      t.params += r.params;
      t.macs += r.macs;
      t.element_ops += r.element_ops;
    }
    return t;
  }
};

/// Per-layer table for a model architecture at a given input shape.
/// Backbone conv rows count stored conv weights; the folded batch-norm
/// affine parameters are reported in batchnorm_params.
inline ComplexityReport count(const ModelConfig& cfg, const Shape4& input) {
  const GraphPlan plan = build_plan(cfg, input);
  ComplexityReport r;
  r.input = input;
  r.batchnorm_params = backbone_param_count(cfg.backbone).batchnorm;
  for (std::size_t i = 1; i < plan.size(); ++i) {
    const auto& n = plan.nodes[i];
    LayerRow row{n.name, n.stage, n.op, n.shape, 0, 0, 0};
    const std::uint64_t out = n.shape.size();
    switch (n.op) {
      case OpKind::conv: {
        const std::uint64_t per = n.conv.in_ch * n.conv.kh * n.conv.kw;
        row.macs = out * per;
        row.params = n.conv.weight_count();
        // Backbone biases only exist after folding; the head's are real parameters.
        if (n.stage != Stage::backbone) row.params += n.conv.bias.size();
        break;
      }
      case OpKind::max_pool:
      case OpKind::avg_pool:
        row.element_ops = out * n.window * n.window;
        break;
      case OpKind::resize:
        row.element_ops = out * 4;
        break;
      case OpKind::add_relu:
        row.element_ops = out;
        break;
      case OpKind::input:
      case OpKind::concat:
        break;
    }
    r.rows.push_back(std::move(row));
  }
  return r;
}

inline ComplexityReport count(const Model& m, const Shape4& input) { return count(m.config(), input); }

// ---------------------------------------------------------------------------
// Derived figures

struct EfficiencyReport {
  double macs = 0.0;
  double latency_s = 0.0;
  double fps = 0.0;
  double gmac_per_s = 0.0;
  double energy_j = 0.0;
  double gmac_per_j = 0.0;
};

inline EfficiencyReport efficiency(double macs, double latency_s, double energy_j) {
  detail::require(latency_s > 0.0 && std::isfinite(latency_s), "latency must be positive");
  detail::require(energy_j > 0.0 && std::isfinite(energy_j), "energy must be positive");
  detail::require(macs >= 0.0 && std::isfinite(macs), "MAC count must be non-negative");
  return {macs, latency_s, 1.0 / latency_s, macs / latency_s / 1e9, energy_j, macs / energy_j / 1e9};
}

inline EfficiencyReport efficiency(const ComplexityReport& r, double latency_s, double energy_j) {
  return efficiency(static_cast<double>(r.total().macs), latency_s, energy_j);
}

inline double compression_ratio(double params, double reference) {
  detail::require(params > 0.0 && reference > 0.0, "compression_ratio needs positive counts");
  return reference / params;
}

/// Rounds to a fixed number of significant figures for reporting.
inline double round_sig(double v, int digits) {
  if (v == 0.0 || !std::isfinite(v)) return v;
  const double mag = std::pow(10.0, digits - 1 - static_cast<int>(std::floor(std::log10(std::abs(v)))));
  return std::round(v * mag) / mag;
}

inline double round_to(double v, int decimals) {
  const double m = std::pow(10.0, decimals);
  return std::round(v * m) / m;
}

// ---------------------------------------------------------------------------
// Output

/// Reference value for the PatchMaker stage against which our aggregation
/// cost is annotated; the dense-op accounting here cannot reach it.
inline constexpr double kPatchMakerReferenceGmac = 0.016;

inline std::string report_text(const ComplexityReport& r) {
  std::ostringstream o;
  o << "input " << r.input.str() << "\n";
  o << std::left << std::setw(24) << "layer" << std::setw(14) << "stage" << std::setw(10) << "op" << std::right
    << std::setw(18) << "output" << std::setw(12) << "params" << std::setw(16) << "macs" << std::setw(14)
    << "elem_ops" << "\n";
  for (const auto& row : r.rows) {
    o << std::left << std::setw(24) << row.name << std::setw(14) << to_string(row.stage) << std::setw(10)
      << to_string(row.op) << std::right << std::setw(18) << row.output.str() << std::setw(12) << row.params
      << std::setw(16) << row.macs << std::setw(14) << row.element_ops << "\n";
  }
  o << "\n";
  for (Stage s : kProfiledStages) {
    const auto t = r.stage(s);
    o << std::left << std::setw(14) << to_string(s) << std::right << " params " << std::setw(10) << t.params
      << "  macs " << std::setw(13) << t.macs << " (" << std::fixed << std::setprecision(3)
      << static_cast<double>(t.macs) / 1e9 << " G)" << "  elem_ops " << t.element_ops << "\n";
    o.unsetf(std::ios::fixed);
  }
  const auto t = r.total();
  o << std::left << std::setw(14) << "total" << std::right << " params " << std::setw(10) << t.params << "  macs "
    << std::setw(13) << t.macs << " (" << std::fixed << std::setprecision(3) << static_cast<double>(t.macs) / 1e9
    << " G)\n";
  o << "batchnorm params (folded) " << r.batchnorm_params << "\n";
  const auto pm = r.stage(Stage::patchmaker);
  o << "note: patchmaker mean aggregation and resize cost " << std::setprecision(4)
    << static_cast<double>(pm.element_ops) / 1e9 << " G element ops and 0 MACs; reference figure "
    << kPatchMakerReferenceGmac << " G is not reproduced by this accounting\n";
  return o.str();
}

inline std::string report_csv(const ComplexityReport& r) {
  std::ostringstream o;
  o << "name,stage,op,n,c,h,w,params,macs,element_ops\n";
  for (const auto& row : r.rows) {
    o << row.name << "," << to_string(row.stage) << "," << to_string(row.op) << "," << row.output.n << ","
      << row.output.c << "," << row.output.h << "," << row.output.w << "," << row.params << "," << row.macs << ","
      << row.element_ops << "\n";
  }
  for (Stage s : kProfiledStages) {
    const auto t = r.stage(s);
    o << "subtotal," << to_string(s) << ",,,,,," << t.params << "," << t.macs << "," << t.element_ops << "\n";
  }
  const auto t = r.total();
  o << "total,,,,,,," << t.params << "," << t.macs << "," << t.element_ops << "\n";
  return o.str();
}

}  // namespace tinyglass
