// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tinyglass/error.hpp"
#include "tinyglass/tensor.hpp"

namespace tinyglass {

enum class Label { normal = 0, anomalous = 1 };

/// One image with its label. Images are (1,3,H,W) in [0,1]; masks are
/// (1,1,H,W) binary and only ever attached to anomalous samples.
struct Sample {
  Tensor4 image;
  Label label = Label::normal;
  std::optional<Tensor4> mask;
  std::string source;    // file path or "synth:<seed>:<index>"
  std::string category;
  std::string defect;    // "good" for normal samples

  bool anomalous() const { return label == Label::anomalous; }

  void validate() const {
    detail::require(image.n() == 1 && image.c() == 3, "sample image must be (1,3,H,W), got " + image.shape().str());
    if (mask) {
      detail::require(anomalous(), "mask attached to a normal sample: " + source);
      detail::require(mask->shape() == Shape4{1, 1, image.h(), image.w()},
                      "mask " + mask->shape().str() + " does not match image " + image.shape().str());
      for (double v : mask->data()) detail::require(v == 0.0 || v == 1.0, "mask values must be binary: " + source);
    }
  }
};

using SampleList = std::vector<Sample>;

inline std::size_t count_anomalous(const SampleList& s) {
  std::size_t k = 0;
  for (const auto& x : s) k += x.anomalous() ? 1 : 0;
  return k;
}

}  // namespace tinyglass
