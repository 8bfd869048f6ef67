// SPDX-License-Identifier: Apache-2.0
//
// PatchMaker + feature adaptor: aggregates each backbone level over a local
// neighborhood, brings both levels to a common grid, concatenates them, and
// optionally applies a bias-free linear projection as a 1x1 convolution.
#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "tinyglass/backbone.hpp"
#include "tinyglass/error.hpp"
#include "tinyglass/rng.hpp"
#include "tinyglass/tensor.hpp"

namespace tinyglass {

enum class CommonGrid { level3, level2 };
enum class AdaptorKind { none, linear };

struct EmbeddingConfig {
  std::size_t patch_size = 3;
  CommonGrid grid = CommonGrid::level3;
  AdaptorKind adaptor = AdaptorKind::linear;

  void validate() const {
    detail::require(patch_size % 2 == 1, "patch_size must be odd, got " + std::to_string(patch_size));
  }

  friend bool operator==(const EmbeddingConfig&, const EmbeddingConfig&) = default;
};

/// Square projection matrix stored (out, in) row-major.
struct Adaptor {
  std::size_t dim = 0;
  std::vector<double> matrix;

  static Adaptor identity(std::size_t dim) {
    Adaptor a{dim, std::vector<double>(dim * dim, 0.0)};
    for (std::size_t i = 0; i < dim; ++i) a.matrix[i * dim + i] = 1.0;
    return a;
  }

  std::size_t param_count() const { return matrix.size(); }

  ConvSpec as_conv() const {
    ConvSpec s{dim, dim, 1, 1, 1, 0, matrix, {}};
    s.validate();
    return s;
  }

  friend bool operator==(const Adaptor&, const Adaptor&) = default;
};

inline std::size_t grid_extent(const EmbeddingConfig& cfg, std::size_t input_extent) {
  return cfg.grid == CommonGrid::level3 ? input_extent / 16 : input_extent / 8;
}

/// Shape of the patch grid produced for a given backbone input shape.
inline Shape4 patch_grid_shape(const BackboneConfig& bb, const EmbeddingConfig& cfg, const Shape4& input) {
  const auto [s2, s3] = feature_shapes(bb, input);
  const Shape4& g = cfg.grid == CommonGrid::level3 ? s3 : s2;
  return {input.n, bb.embedding_channels(), g.h, g.w};
}

/// Mean over the patch_size x patch_size neighborhood (stride 1, same size).
inline Tensor4 neighborhood_aggregate(const Tensor4& f, std::size_t patch_size) {
  if (patch_size % 2 == 0) detail::contract_fail("patch_size must be odd, got " + std::to_string(patch_size));
  if (patch_size == 1) return f;
  return pool2d(f, PoolKind::avg, patch_size, 1, (patch_size - 1) / 2);
}

/// Concatenated aggregated features before the adaptor, (n, c2+c3, G, G).
inline Tensor4 embed_raw(const FeaturePair& f, const EmbeddingConfig& cfg) {
  cfg.validate();
  if (f.f2.n() != f.f3.n()) {
    detail::contract_fail("feature batch mismatch: " + f.f2.shape().str() + " vs " + f.f3.shape().str());
  }
  const Tensor4& target = cfg.grid == CommonGrid::level3 ? f.f3 : f.f2;
  const std::size_t gh = target.h();
  const std::size_t gw = target.w();
  Tensor4 a2 = bilinear_resize(neighborhood_aggregate(f.f2, cfg.patch_size), gh, gw);
  Tensor4 a3 = bilinear_resize(neighborhood_aggregate(f.f3, cfg.patch_size), gh, gw);
  return concat_channels(a2, a3);
}

inline Tensor4 apply_adaptor(const Tensor4& raw, const Adaptor& adaptor) {
  if (adaptor.dim != raw.c() || adaptor.matrix.size() != adaptor.dim * adaptor.dim) {
    detail::contract_fail("adaptor is " + std::to_string(adaptor.dim) + "x" + std::to_string(adaptor.dim) +
                          " but embedding has " + std::to_string(raw.c()) + " channels");
  }
  return conv2d(raw, adaptor.as_conv());
}

/// Full embedding. `adaptor` must be given iff cfg.adaptor is linear.
inline Tensor4 embed(const FeaturePair& f, const EmbeddingConfig& cfg, const Adaptor* adaptor) {
  if ((cfg.adaptor == AdaptorKind::linear) != (adaptor != nullptr)) {
    detail::contract_fail(cfg.adaptor == AdaptorKind::linear ? "linear adaptor configured but no weights given"
                                                             : "adaptor weights given but adaptor=none");
  }
  Tensor4 raw = embed_raw(f, cfg);
  return adaptor ? apply_adaptor(raw, *adaptor) : raw;
}

}  // namespace tinyglass
