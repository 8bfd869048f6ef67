// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "oracles.hpp"
#include "tinyglass/graph.hpp"
#include "tinyglass/model.hpp"

using namespace tinyglass;

namespace {

Model tiny_model(AdaptorKind a, CommonGrid g) {
  ModelConfig mc;
  mc.backbone = BackboneConfig::tiny();
  mc.embedding.adaptor = a;
  mc.embedding.grid = g;
  mc.hidden = 12;
  Model m = make_model(mc, 3);
  if (m.head.adaptor) {
    const Tensor4 r = oracle::random_tensor({1, 1, 96, 96}, 4, -0.05, 0.05);
    for (std::size_t i = 0; i < r.size(); ++i) m.head.adaptor->matrix[i] += r[i];
  }
  return m;
}

}  // namespace

TEST(Graph, RunMatchesModelLogits) {
  for (AdaptorKind a : {AdaptorKind::linear, AdaptorKind::none})
    for (CommonGrid g : {CommonGrid::level3, CommonGrid::level2}) {
      const Model m = tiny_model(a, g);
      const Tensor4 x = oracle::random_tensor({1, 3, 64, 64}, 5);
      const GraphPlan p = build_plan(m, x.shape());
      const Tensor4 got = run_graph(p, x);
      const Tensor4 want = model_logits(m, x);
      ASSERT_EQ(got.shape(), want.shape());
      for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
    }
}

TEST(Graph, StructureOnlyPlanMatchesBoundShapes) {
  const Model m = tiny_model(AdaptorKind::linear, CommonGrid::level3);
  const GraphPlan a = build_plan(m.config(), Shape4{1, 3, 128, 128});
  const GraphPlan b = build_plan(m, Shape4{1, 3, 128, 128});
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_EQ(a[i].shape, b[i].shape);
  }
  EXPECT_FALSE(a.bound);
  EXPECT_THROW(run_graph(a, Tensor4(Shape4{1, 3, 128, 128})), ContractError);
  EXPECT_EQ(b.output_shape(), (Shape4{1, 1, 8, 8}));
}

TEST(Graph, ValidateCatchesTamperedShape) {
  GraphPlan p = build_plan(ModelConfig{}, Shape4{1, 3, 64, 64});
  EXPECT_NO_THROW(p.validate());
  p.nodes[p.find("layer2.0.conv1")].shape.h += 1;
  EXPECT_THROW(p.validate(), ContractError);
}

TEST(Graph, WrongInputShapeIsContractError) {
  const Model m = tiny_model(AdaptorKind::linear, CommonGrid::level3);
  const GraphPlan p = build_plan(m, Shape4{1, 3, 64, 64});
  EXPECT_THROW(run_graph(p, Tensor4(Shape4{1, 3, 96, 96})), ContractError);
}

TEST(Graph, LastUseAndPeak) {
  const GraphPlan p = build_plan(ModelConfig{}, Shape4{1, 3, 256, 256});
  const auto last = last_use(p);
  for (std::size_t i = 0; i < p.size(); ++i)
    for (std::size_t j : p[i].inputs) EXPECT_GE(last[j], i);
  EXPECT_EQ(last[p.output], p.size());
  // Peak must at least hold the stem conv's input and output together.
  EXPECT_GE(peak_live_elements(p), p[0].shape.size() + p[1].shape.size());
  // A brute-force recount of the same liveness rule.
  std::size_t peak = 0;
  for (std::size_t s = 0; s < p.size(); ++s) {
    std::size_t live = 0;
    for (std::size_t t = 0; t <= s; ++t) {
      std::size_t lu = t == p.output ? p.size() : t;
      for (std::size_t k = t + 1; k < p.size(); ++k)
        for (std::size_t j : p[k].inputs)
          if (j == t) lu = std::max(lu, k);
      if (lu >= s) live += p[t].shape.size();
    }
    peak = std::max(peak, live);
  }
  EXPECT_EQ(peak_live_elements(p), peak);
}
