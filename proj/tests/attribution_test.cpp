// Copyright 2026 The clever-prune Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#include <gtest/gtest.h>

#include <sstream>

#include "clever_prune/attribution.hpp"
#include "test_support.hpp"

namespace cp = clever_prune;
using cp::Model;
using cp::Tensor;

namespace {

Model linear_model(const Tensor& w) {
  Model m;
  m.input_shape = {w.extent(1)};
  m.class_count = w.extent(0);
  m.layers.emplace_back(cp::Dense{w, Tensor({w.extent(0)})});
  return m;
}

double total(const Tensor& t) {
  double s = 0;
  for (double v : t.values()) s += v;
  return s;
}

}  // namespace

TEST(GradientXInput, LinearModelIsWeightTimesInput) {
  const Tensor w = Tensor::matrix({{0.5, -2.0, 3.0}, {1, 1, 1}});
  const Tensor x = Tensor::vector({2.0, 0.25, -1.0});
  const Tensor r = cp::gradient_x_input(linear_model(w), x, 0, cp::kInputSite);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(r[i], w(0, i) * x[i]);
}

TEST(GradientXInput, BiasFreeReluNetIsComplete) {
  cp::SeededRng rng(1);
  for (int trial = 0; trial < 5; ++trial) {
    const Model m = cp::testing::small_cnn(rng, /*with_bias=*/false);
    const Tensor x = cp::testing::random_tensor(m.input_shape, rng);
    const Tensor y = cp::forward(m, x);
    for (std::size_t t = 0; t < m.class_count; ++t)
      EXPECT_NEAR(total(cp::gradient_x_input(m, x, t, cp::kInputSite)), y[t], 1e-6);
  }
}

TEST(GradientXInput, ZeroInputGivesZeroRelevance) {
  cp::SeededRng rng(2);
  const Model m = cp::make_mlp({4, 5, 3}, rng);
  const Tensor r = cp::gradient_x_input(m, Tensor({4}), 1, cp::kInputSite);
  for (double v : r.values()) EXPECT_EQ(v, 0.0);
}

TEST(GradientXInput, InvalidSiteAndTarget) {
  cp::SeededRng rng(3);
  const Model m = cp::make_mlp({4, 5, 3}, rng);
  EXPECT_THROW(cp::gradient_x_input(m, Tensor({4}), 0, 17), cp::Error);
  EXPECT_THROW(cp::gradient_x_input(m, Tensor({4}), 3, cp::kInputSite), cp::DomainError);
}

TEST(IntegratedGradients, EqualsGradientXInputOnLinearModel) {
  cp::SeededRng rng(4);
  const Model m = linear_model(cp::testing::random_tensor({2, 5}, rng));
  const Tensor x = cp::testing::random_tensor({5}, rng);
  const Tensor gi = cp::gradient_x_input(m, x, 1, cp::kInputSite);
  for (std::size_t steps : {1u, 3u, 64u}) {
    const Tensor ig = cp::integrated_gradients(m, x, 1, cp::kInputSite, steps);
    EXPECT_LE(cp::max_abs_diff(ig, gi), 1e-15);
  }
}

TEST(IntegratedGradients, CompletenessAt512Steps) {
  cp::SeededRng rng(5);
  const Model m = cp::testing::small_cnn(rng);
  const Tensor x = cp::testing::random_tensor(m.input_shape, rng);
  const double y0 = cp::forward(m, Tensor(m.input_shape))[0];
  const double y = cp::forward(m, x)[0];
  const double sum = total(cp::integrated_gradients(m, x, 0, cp::kInputSite, 512));
  EXPECT_LE(std::abs(sum - (y - y0)), 1e-2 * std::max(1e-12, std::abs(y - y0)));
}

TEST(IntegratedGradients, ErrorShrinksWithMoreSteps) {
  cp::SeededRng rng(6);
  const Model m = cp::make_mlp({6, 10, 10, 3}, rng);
  const Tensor x = cp::testing::random_tensor({6}, rng, -3, 3);
  const double target = cp::forward(m, x)[2] - cp::forward(m, Tensor({6}))[2];
  const double coarse = std::abs(total(cp::integrated_gradients(m, x, 2, cp::kInputSite, 4)) - target);
  const double fine = std::abs(total(cp::integrated_gradients(m, x, 2, cp::kInputSite, 256)) - target);
  EXPECT_LE(fine, coarse + 1e-12);
}

TEST(IntegratedGradients, SingleStepIsMidpointGradient) {
  cp::SeededRng rng(7);
  const Model m = cp::make_mlp({4, 6, 2}, rng);
  const Tensor x = cp::testing::random_tensor({4}, rng);
  const Tensor ig = cp::integrated_gradients(m, x, 0, cp::kInputSite, 1);
  const cp::Gradients g = cp::gradients(m, 0.5 * x, cp::OutputLogit{0});
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(ig[i], x[i] * g.wrt_input[i], 1e-15);
}

TEST(Lrp, SingleLinearLayerLrp0) {
  const Tensor w = Tensor::matrix({{1.5, -0.5, 2.0}});
  const Tensor x = Tensor::vector({1.0, 2.0, 0.5});
  const cp::RelevanceMap map = cp::lrp(linear_model(w), x, 0, cp::Lrp{});
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(map.input[i], x[i] * w(0, i), 1e-15);
}

TEST(Lrp, ConservedAcrossLayersWithoutBias) {
  cp::SeededRng rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    const Model m = cp::testing::small_cnn(rng, false);
    const Tensor x = cp::testing::random_tensor(m.input_shape, rng, 0, 1);
    const cp::RelevanceMap map = cp::lrp(m, x, 1, cp::Lrp{});
    const double y = cp::forward(m, x)[1];
    EXPECT_NEAR(total(map.input), y, 1e-9);
    for (std::size_t l = 0; l < m.layers.size(); ++l) EXPECT_NEAR(total(map.layers[l]), y, 1e-9) << l;
  }
}

TEST(Lrp, GammaSuppressesNegativeMessages) {
  const Model m = linear_model(Tensor::matrix({{1.0, -0.5}}));
  const Tensor x = Tensor::vector({1.0, 1.0});
  double previous = std::numeric_limits<double>::infinity();
  for (double gamma : {0.0, 0.25, 1.0, 4.0, 16.0}) {
    const Tensor r = cp::lrp(m, x, 0, cp::Lrp{gamma, 0.0}).input;
    const double share = std::abs(r[1]) / std::abs(r[0]);
    EXPECT_LT(share, previous);
    previous = share;
  }
}

TEST(Lrp, ZeroDenominatorNeedsEpsilon) {
  const Model m = linear_model(Tensor::matrix({{1.0, -1.0}}));
  Model biased = m;
  std::get<cp::Dense>(biased.layers[0]).bias[0] = 1.0;
  const Tensor x = Tensor::vector({1.0, 1.0});
  try {
    cp::lrp(biased, x, 0, cp::Lrp{});
    FAIL();
  } catch (const cp::NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("epsilon"), std::string::npos) << e.what();
  }
  EXPECT_NO_THROW(cp::lrp(biased, x, 0, cp::Lrp{0.0, 1e-6}));
}

TEST(Lrp, EqualsGradientXInputForLrp0OnBiasFreeNets) {
  cp::SeededRng rng(9);
  for (int trial = 0; trial < 5; ++trial) {
    const Model m = cp::testing::small_cnn(rng, false);
    const Tensor x = cp::testing::random_tensor(m.input_shape, rng);
    const cp::RelevanceMap map = cp::lrp(m, x, 0, cp::Lrp{});
    EXPECT_LE(cp::max_abs_diff(map.input, cp::gradient_x_input(m, x, 0, cp::kInputSite)), 1e-6);
    for (std::size_t site : m.refinable_sites)
      EXPECT_LE(cp::max_abs_diff(map.at(site), cp::gradient_x_input(m, x, 0, site)), 1e-6);
  }
}

TEST(MessageFactors, GradientOnOutputLayerIsOneHot) {
  cp::SeededRng rng(10);
  const Model m = cp::make_mlp({4, 6, 3}, rng);
  const cp::MessageFactors mf =
      cp::message_factors(m, cp::testing::random_tensor({4}, rng), 2, 1, cp::GradientXInput{});
  EXPECT_EQ(mf.consumer, 2u);
  EXPECT_EQ(mf.d, Tensor::vector({0, 0, 1}));
}

TEST(MessageFactors, EdgesSumToUnitRelevance) {
  cp::SeededRng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    const Model m = cp::testing::small_cnn(rng);
    const Tensor x = cp::testing::random_tensor(m.input_shape, rng, 0, 1);
    for (std::size_t site : {std::size_t{4}, std::size_t{7}}) {
      for (const cp::AttributionMethod& method :
           {cp::AttributionMethod{cp::GradientXInput{}}, cp::AttributionMethod{cp::Lrp{0.25, 1e-9}}}) {
        const cp::MessageFactors mf = cp::message_factors(m, x, 1, site, method);
        const Tensor edges = mf.edges();
        const Tensor direct = cp::attribute(m, x, 1, site, method);
        for (std::size_t i = 0; i < mf.inputs(); ++i) {
          double s = 0;
          for (std::size_t j = 0; j < mf.outputs(); ++j) s += edges(i, j);
          EXPECT_NEAR(s, direct[i], 1e-9);
          EXPECT_NEAR(mf.unit_relevance()[i], direct[i], 1e-9);
        }
      }
    }
  }
}

TEST(MessageFactors, ZeroActivationsGiveZeroEdges) {
  Model m;
  m.input_shape = {2};
  m.class_count = 2;
  m.layers.emplace_back(cp::Dense{Tensor({3, 2}), Tensor::filled({3}, -1.0)});
  m.layers.emplace_back(cp::ReLU{});
  m.layers.emplace_back(cp::Dense{Tensor::filled({2, 3}, 0.7), Tensor({2})});
  m.refinable_sites = {1};
  for (const cp::AttributionMethod& method :
       {cp::AttributionMethod{cp::GradientXInput{}}, cp::AttributionMethod{cp::IntegratedGradients{8}},
        cp::AttributionMethod{cp::Lrp{0.0, 1e-3}}}) {
    const Tensor e = cp::message_factors(m, Tensor::vector({1, 2}), 0, 1, method).edges();
    for (double v : e.values()) EXPECT_EQ(v, 0.0);
  }
}

TEST(MessageFactors, RequiresDenseConsumer) {
  cp::SeededRng rng(12);
  const Model m = cp::testing::small_cnn(rng);
  EXPECT_THROW(cp::message_factors(m, cp::testing::random_tensor(m.input_shape, rng), 0, 1,
                                   cp::GradientXInput{}),
               cp::PreconditionError);
}

TEST(Attribution, UnitScaleDoesNotChangeAnyMethod) {
  cp::SeededRng rng(13);
  const Model m = cp::testing::small_cnn(rng);
  Model s = m;
  s.layers.insert(s.layers.begin() + 8, cp::Scale{Tensor::filled({5}, 1.0)});
  const Tensor x = cp::testing::random_tensor(m.input_shape, rng, 0, 1);
  for (const cp::AttributionMethod& method :
       {cp::AttributionMethod{cp::GradientXInput{}}, cp::AttributionMethod{cp::IntegratedGradients{16}},
        cp::AttributionMethod{cp::Lrp{0.1, 1e-9}}}) {
    EXPECT_LE(cp::max_abs_diff(cp::attribute(m, x, 2, cp::kInputSite, method),
                               cp::attribute(s, x, 2, cp::kInputSite, method)),
              1e-9);
  }
}

TEST(Attribution, RelevanceCsvHasHeaderAndRows) {
  const Model m = linear_model(Tensor::matrix({{1.0, 2.0}}));
  std::ostringstream os;
  cp::write_relevance_csv(os, cp::lrp(m, Tensor::vector({1.0, 1.0}), 0, cp::Lrp{}));
  const std::string csv = os.str();
  EXPECT_EQ(csv.rfind("layer,unit,R\n", 0), 0u);
  EXPECT_NE(csv.find("input,0,1\n"), std::string::npos) << csv;
  EXPECT_NE(csv.find("input,1,2\n"), std::string::npos) << csv;
}

TEST(GradientXInput, LogitLayerSiteIsTargetLogit) {
  cp::SeededRng rng(40);
  const Model m = cp::testing::small_cnn(rng);
  const Tensor x = cp::testing::random_tensor(m.input_shape, rng);
  const Tensor logits = cp::forward(m, x);
  const std::size_t last = m.layers.size() - 1;
  for (const cp::AttributionMethod& method :
       std::vector<cp::AttributionMethod>{cp::GradientXInput{}, cp::IntegratedGradients{8}}) {
    const Tensor r = cp::attribute(m, x, 2, last, method);
    for (std::size_t j = 0; j < r.size(); ++j) EXPECT_NEAR(r[j], j == 2 ? logits[2] : 0.0, 1e-12);
  }
}
