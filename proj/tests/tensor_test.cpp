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

#include <cstring>

#include "clever_prune/tensor.hpp"
#include "clever_prune/rng.hpp"
#include "test_support.hpp"

namespace cp = clever_prune;
using cp::Tensor;

TEST(Matmul, IdentityLeavesOperandUnchanged) {
  const Tensor b = Tensor::matrix({{1, 2}, {3, 4}});
  EXPECT_EQ(cp::matmul(Tensor::identity(2), b), b);
}

TEST(Matmul, MatchesTripleLoop) {
  const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  const Tensor b = Tensor::matrix({{5, 6}, {7, 8}});
  EXPECT_EQ(cp::matmul(a, b), Tensor::matrix({{19, 22}, {43, 50}}));

  cp::SeededRng rng(3);
  const Tensor x = cp::testing::random_tensor({4, 5}, rng);
  const Tensor y = cp::testing::random_tensor({5, 3}, rng);
  const Tensor z = cp::matmul(x, y);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0;
      for (std::size_t p = 0; p < 5; ++p) s += x(i, p) * y(p, j);
      EXPECT_DOUBLE_EQ(z(i, j), s);
    }
}

TEST(Matmul, ZeroAnnihilates) {
  cp::SeededRng rng(1);
  const Tensor z = cp::matmul(Tensor::zeros({2, 2}), cp::testing::random_tensor({2, 2}, rng));
  for (double v : z.values()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    cp::matmul(Tensor({2, 3}), Tensor({2, 3}));
    FAIL();
  } catch (const cp::DimensionError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("[2x3]"), std::string::npos) << what;
  }
}

TEST(Matmul, Associative) {
  cp::SeededRng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor a = cp::testing::random_tensor({3, 4}, rng);
    const Tensor b = cp::testing::random_tensor({4, 2}, rng);
    const Tensor c = cp::testing::random_tensor({2, 5}, rng);
    const Tensor l = cp::matmul(cp::matmul(a, b), c);
    const Tensor r = cp::matmul(a, cp::matmul(b, c));
    for (std::size_t i = 0; i < l.size(); ++i)
      EXPECT_LE(std::abs(l[i] - r[i]), 1e-9 * std::max(1.0, std::abs(l[i])));
  }
}

TEST(Tensor, RejectsZeroExtentAndMismatchedData) {
  EXPECT_THROW(Tensor({2, 0}), cp::DimensionError);
  EXPECT_THROW(Tensor({2, 2}, {1.0, 2.0}), cp::DimensionError);
}

TEST(Conv2d, UnitKernelIsIdentity) {
  cp::SeededRng rng(5);
  const Tensor x = cp::testing::random_tensor({1, 4, 4}, rng);
  const Tensor y = cp::conv2d(x, Tensor::filled({1, 1, 1, 1}, 1.0), Tensor({1}), 1, 0);
  EXPECT_EQ(y, x);
}

TEST(Conv2d, MatchesNaiveLoops) {
  cp::SeededRng rng(6);
  const Tensor x = cp::testing::random_tensor({1, 4, 4}, rng);
  const Tensor k = cp::testing::random_tensor({1, 1, 3, 3}, rng);
  const Tensor y = cp::conv2d(x, k, Tensor({1}), 1, 0);
  ASSERT_EQ(y.shape(), (cp::Shape{1, 2, 2}));
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 2; ++c) {
      double s = 0;
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) s += x(0, r + i, c + j) * k[i * 3 + j];
      EXPECT_NEAR(y(0, r, c), s, 1e-15);
    }
}

TEST(Conv2d, ZeroKernelGivesZeros) {
  cp::SeededRng rng(7);
  const Tensor y = cp::conv2d(cp::testing::random_tensor({2, 5, 5}, rng), Tensor({3, 2, 3, 3}),
                              Tensor({3}), 1, 1);
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, EqualsMatmulOnUnrolledInput) {
  cp::SeededRng rng(8);
  const std::size_t C = 2, H = 5, W = 6, F = 3, K = 3, stride = 2, pad = 1;
  const Tensor x = cp::testing::random_tensor({C, H, W}, rng);
  const Tensor k = cp::testing::random_tensor({F, C, K, K}, rng);
  const Tensor b = cp::testing::random_tensor({F}, rng);
  const Tensor y = cp::conv2d(x, k, b, stride, pad);
  const std::size_t oh = (H + 2 * pad - K) / stride + 1, ow = (W + 2 * pad - K) / stride + 1;
  ASSERT_EQ(y.shape(), (cp::Shape{F, oh, ow}));

  // im2col: one column per output position.
  Tensor cols({C * K * K, oh * ow});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < K; ++i)
      for (std::size_t j = 0; j < K; ++j)
        for (std::size_t r = 0; r < oh; ++r)
          for (std::size_t q = 0; q < ow; ++q) {
            const long rr = long(r * stride + i) - long(pad), cc = long(q * stride + j) - long(pad);
            const bool inside = rr >= 0 && cc >= 0 && rr < long(H) && cc < long(W);
            cols((c * K + i) * K + j, r * ow + q) = inside ? x(c, rr, cc) : 0.0;
          }
  const Tensor out = cp::matmul(k.reshaped({F, C * K * K}), cols);
  for (std::size_t f = 0; f < F; ++f)
    for (std::size_t p = 0; p < oh * ow; ++p)
      EXPECT_NEAR(y[f * oh * ow + p], out(f, p) + b[f], 1e-9);
}

TEST(Conv2d, KernelLargerThanPaddedInputFails) {
  EXPECT_THROW(cp::conv2d(Tensor({1, 2, 2}), Tensor({1, 1, 5, 5}), Tensor({1}), 1, 1),
               cp::DimensionError);
}

TEST(Elementwise, ReluClampsNegatives) {
  EXPECT_EQ(cp::relu(Tensor::vector({-1, 0, 2})), Tensor::vector({0, 0, 2}));
}

TEST(Elementwise, SoftmaxOfEqualLogitsIsUniform) {
  const auto p = cp::softmax(Tensor::vector({0, 0}).values());
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(Elementwise, SoftmaxIsProbabilityVector) {
  cp::SeededRng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor z = cp::testing::random_tensor({7}, rng, -30, 30);
    const auto p = cp::softmax(z.values());
    double s = 0;
    for (double v : p) {
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Elementwise, Norms) {
  const Tensor v = Tensor::vector({3, -4});
  EXPECT_EQ(cp::l1_norm(v.values()), 7.0);
  EXPECT_EQ(cp::l2_norm(v.values()), 5.0);
}

TEST(Elementwise, EmptyReductionIsDomainError) {
  std::vector<double> empty;
  EXPECT_THROW(cp::sum(empty), cp::DomainError);
  EXPECT_THROW(cp::l2_norm(empty), cp::DomainError);
  EXPECT_THROW(cp::softmax(empty), cp::DomainError);
}

TEST(SeededRng, StreamIsReproducible) {
  cp::SeededRng a(42), b(42);
  std::vector<std::uint64_t> xa, xb;
  for (int i = 0; i < 1000; ++i) {
    xa.push_back(a.next_u64());
    xb.push_back(b.next_u64());
  }
  EXPECT_EQ(std::memcmp(xa.data(), xb.data(), xa.size() * 8), 0);
}

TEST(SeededRng, MatchesSplitMix64ReferenceValues) {
  // First outputs of the reference generator seeded with 0.
  cp::SeededRng rng(0);
  EXPECT_EQ(rng.next_u64(), 0xE220A8397B1DCDAFULL);
  EXPECT_EQ(rng.next_u64(), 0x6E789E6AA1B965F4ULL);
  EXPECT_EQ(rng.next_u64(), 0x06C45D188009454FULL);
}

TEST(SeededRng, BelowStaysInRangeAndPermutationIsComplete) {
  cp::SeededRng rng(4);
  for (int i = 0; i < 1000; ++i) EXPECT_LT(rng.below(7), 7u);
  auto p = rng.permutation(50);
  std::sort(p.begin(), p.end());
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(p[i], i);
  EXPECT_THROW(rng.below(0), cp::DomainError);
}

TEST(SeededRng, UniformAndNormalMoments) {
  cp::SeededRng rng(12);
  double su = 0, sn = 0, sn2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    su += u;
    const double z = rng.normal();
    sn += z;
    sn2 += z * z;
  }
  EXPECT_NEAR(su / n, 0.5, 5e-3);
  EXPECT_NEAR(sn / n, 0.0, 1e-2);
  EXPECT_NEAR(sn2 / n, 1.0, 1e-2);
}
