// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "tinyglass/backbone.hpp"
#include "tinyglass/embedder.hpp"
#include "tinyglass/head.hpp"
#include "tinyglass/parallel.hpp"
#include "tinyglass/tensor.hpp"

namespace tinyglass {

/// Architecture description; everything needed to lay out static shapes.
struct ModelConfig {
  BackboneConfig backbone;
  EmbeddingConfig embedding;
  std::size_t hidden = 175;
  double slope = 0.2;

  std::size_t embedding_channels() const { return backbone.embedding_channels(); }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;

  std::string to_text() const {
    std::ostringstream o;
    o << "backbone.stem=" << backbone.stem_channels << "\n";
    o << "backbone.stages=" << backbone.stage_channels[0] << "," << backbone.stage_channels[1] << ","
      << backbone.stage_channels[2] << "\n";
    o << "embedding.patch_size=" << embedding.patch_size << "\n";
    o << "embedding.grid=" << (embedding.grid == CommonGrid::level3 ? "level3" : "level2") << "\n";
    o << "embedding.adaptor=" << (embedding.adaptor == AdaptorKind::linear ? "linear" : "none") << "\n";
    o << "head.hidden=" << hidden << "\n";
    o << "head.slope=" << slope << "\n";
    return o.str();
  }

  static ModelConfig from_text(const std::string& text) {
    ModelConfig c;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto eq = line.find('=');
      detail::require(eq != std::string::npos, "malformed model config line: " + line);
      const std::string k = line.substr(0, eq);
      const std::string v = line.substr(eq + 1);
      if (k == "backbone.stem") {
        c.backbone.stem_channels = std::stoul(v);
      } else if (k == "backbone.stages") {
        std::istringstream vs(v);
        std::string part;
        for (std::size_t i = 0; i < 3; ++i) {
          detail::require(static_cast<bool>(std::getline(vs, part, ',')), "backbone.stages needs three values");
          c.backbone.stage_channels[i] = std::stoul(part);
        }
      } else if (k == "embedding.patch_size") {
        c.embedding.patch_size = std::stoul(v);
      } else if (k == "embedding.grid") {
        c.embedding.grid = v == "level2" ? CommonGrid::level2 : CommonGrid::level3;
      } else if (k == "embedding.adaptor") {
        c.embedding.adaptor = v == "none" ? AdaptorKind::none : AdaptorKind::linear;
      } else if (k == "head.hidden") {
        c.hidden = std::stoul(v);
      } else if (k == "head.slope") {
        c.slope = std::stod(v);
      } else {
        detail::contract_fail("unknown model config key: " + k);
      }
    }
    return c;
  }
};

struct Model {
  BackboneWeights backbone;
  EmbeddingConfig embedding;
  HeadParams head;

  ModelConfig config() const {
    return {backbone.config, embedding, head.disc.hidden, head.disc.slope};
  }
};

/// Fresh head for a given architecture: identity adaptor, Xavier discriminator.
inline HeadParams make_head(const ModelConfig& cfg, std::uint64_t seed) {
  HeadParams h;
  const std::size_t d = cfg.embedding_channels();
  if (cfg.embedding.adaptor == AdaptorKind::linear) h.adaptor = Adaptor::identity(d);
  h.disc = DiscriminatorWeights::init(d, cfg.hidden, seed, cfg.slope);
  return h;
}

inline Model make_model(const ModelConfig& cfg, std::uint64_t seed, double backbone_scale = 1.0) {
  return {backbone_random_init(seed, backbone_scale, cfg.backbone), cfg.embedding, make_head(cfg, seed)};
}

/// Pre-adaptor patch features for a batch of preprocessed images. Images
/// are processed one at a time (optionally on several threads); results are
/// identical to a single batched call.
inline Tensor4 raw_features(const BackboneWeights& backbone, const EmbeddingConfig& cfg, const Tensor4& images,
                            std::size_t threads = 1) {
  std::vector<Tensor4> parts(images.n());
  parallel_for(images.n(), threads, [&](std::size_t i) {
    parts[i] = embed_raw(extract_features(backbone, images.slice_batch(i, 1)), cfg);
  });
  return stack_batch<double>(parts);
}

inline Tensor4 model_logits(const Model& m, const Tensor4& images, std::size_t threads = 1) {
  return disc_forward(m.head.disc, m.head.project(raw_features(m.backbone, m.embedding, images, threads)));
}

/// Patch anomaly probabilities (n,1,G,G).
inline Tensor4 model_heatmap(const Model& m, const Tensor4& images, std::size_t threads = 1) {
  return sigmoid(model_logits(m, images, threads));
}

}  // namespace tinyglass
