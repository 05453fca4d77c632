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
#include <filesystem>

#include "clever_prune/model_io.hpp"
#include "test_support.hpp"

namespace cp = clever_prune;
using cp::Model;
using cp::Tensor;

namespace {

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("clever_prune_io_" + name);
}

}  // namespace

TEST(ModelIo, RoundTripIsBitExact) {
  cp::SeededRng rng(1);
  Model m = cp::make_mlp({5, 7, 6, 3}, rng);
  // Values that do not survive a decimal round trip.
  std::get<cp::Dense>(m.layers[0]).weight[0] = 0.1 + 0.2;
  std::get<cp::Dense>(m.layers[0]).weight[1] = -0.0;
  std::get<cp::Dense>(m.layers[0]).weight[2] = 5e-324;
  const auto path = temp_path("mlp.bin");
  cp::save(m, path);
  const Model back = cp::load(path);
  EXPECT_EQ(back, m);
  const Tensor& w0 = std::get<cp::Dense>(m.layers[0]).weight;
  const Tensor& w1 = std::get<cp::Dense>(back.layers[0]).weight;
  EXPECT_TRUE(bitwise_equal(w0, w1));
  EXPECT_TRUE(std::signbit(w1[1]));
  std::filesystem::remove(path);
}

TEST(ModelIo, RefinementLayersRoundTrip) {
  cp::SeededRng rng(2);
  Model m = cp::testing::small_cnn(rng);
  m.layers.insert(m.layers.begin() + 2, cp::Scale{cp::testing::random_tensor({3}, rng, 0, 1)});
  cp::PcaBasis basis{cp::testing::random_tensor({5, 5}, rng), cp::testing::random_tensor({5}, rng),
                     cp::testing::random_tensor({5}, rng, 0, 1)};
  m.layers.insert(m.layers.begin() + 9, cp::PcaScale(basis, cp::testing::random_tensor({5}, rng, 0, 1)));
  m.refinable_sites = {1, 5, 8};
  const Model back = cp::deserialize_model(cp::serialize(m));
  EXPECT_EQ(back, m);
  const auto& p = std::get<cp::PcaScale>(back.layers[9]);
  EXPECT_TRUE(bitwise_equal(p.basis().components, basis.components));
  EXPECT_TRUE(bitwise_equal(p.basis().mean, basis.mean));
  EXPECT_TRUE(bitwise_equal(p.basis().eigenvalues, basis.eigenvalues));
  for (const Tensor& x : cp::testing::random_inputs(m, 3, rng))
    EXPECT_EQ(cp::forward(m, x), cp::forward(back, x));
}

TEST(ModelIo, SerializationIsDeterministic) {
  cp::SeededRng a(3), b(3);
  EXPECT_EQ(cp::serialize(cp::testing::small_cnn(a)), cp::serialize(cp::testing::small_cnn(b)));
}

TEST(ModelIo, HeaderLayout) {
  cp::SeededRng rng(4);
  const auto bytes = cp::serialize(cp::make_mlp({2, 3, 2}, rng));
  ASSERT_GE(bytes.size(), 12u);
  EXPECT_EQ(std::memcmp(bytes.data(), "EGEM", 4), 0);
  std::uint32_t version = 0, count = 0;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&count, bytes.data() + 8, 4);
  EXPECT_EQ(version, 1u);
  EXPECT_EQ(count, 3u);
}

TEST(ModelIo, WrongMagicIsFormatError) {
  cp::SeededRng rng(5);
  auto bytes = cp::serialize(cp::make_mlp({2, 2}, rng));
  bytes[0] = 'X';
  try {
    cp::deserialize_model(bytes);
    FAIL();
  } catch (const cp::FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
}

TEST(ModelIo, WrongVersionIsFormatError) {
  cp::SeededRng rng(6);
  auto bytes = cp::serialize(cp::make_mlp({2, 2}, rng));
  bytes[4] = 9;
  try {
    cp::deserialize_model(bytes);
    FAIL();
  } catch (const cp::FormatError& e) {
    EXPECT_EQ(e.offset(), 4u);
  }
}

TEST(ModelIo, TruncationReportsOffset) {
  cp::SeededRng rng(7);
  const auto bytes = cp::serialize(cp::make_mlp({3, 4, 2}, rng));
  for (std::size_t cut : {std::size_t{2}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    try {
      cp::deserialize_model(part);
      FAIL() << "cut at " << cut;
    } catch (const cp::FormatError& e) {
      EXPECT_LE(e.offset(), cut);
      EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos);
    }
  }
}

TEST(ModelIo, TrailingBytesRejected) {
  cp::SeededRng rng(8);
  auto bytes = cp::serialize(cp::make_mlp({2, 2}, rng));
  bytes.push_back(0);
  EXPECT_THROW(cp::deserialize_model(bytes), cp::FormatError);
}

TEST(ModelIo, TensorListRoundTrip) {
  cp::SeededRng rng(9);
  std::vector<Tensor> ts{cp::testing::random_tensor({1, 4, 4}, rng),
                         cp::testing::random_tensor({3}, rng)};
  const auto back = cp::deserialize_tensors(cp::serialize_tensors(ts));
  ASSERT_EQ(back.size(), 2u);
  EXPECT_TRUE(bitwise_equal(back[0], ts[0]));
  EXPECT_TRUE(bitwise_equal(back[1], ts[1]));
}
