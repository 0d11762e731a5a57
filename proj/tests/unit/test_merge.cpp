/* Copyright 2026 The Xpert Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#include "xpert/merge.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <random>

#include "support/test_util.hpp"
#include "xpert/snapshot.hpp"

namespace xpert {
namespace {

using testutil::code_of;

TensorSnapshot snap(std::map<std::string, std::vector<float>> flat) {
  std::map<std::string, Tensor> t;
  for (auto& [name, data] : flat) {
    const auto n = static_cast<std::int64_t>(data.size());
    t.emplace(name, Tensor{{n}, std::move(data)});
  }
  return TensorSnapshot(std::move(t));
}

bool same_bits(const TensorSnapshot& a, const TensorSnapshot& b) {
  if (a.tensors().size() != b.tensors().size()) return false;
  for (const auto& [name, t] : a.tensors()) {
    if (!b.contains(name)) return false;
    const auto& u = b.at(name);
    if (t.shape != u.shape || t.data.size() != u.data.size()) return false;
    if (std::memcmp(t.data.data(), u.data.data(), t.data.size() * sizeof(float)) != 0) return false;
  }
  return true;
}

TEST(Snapshot, RoundTripThroughFile) {
  testutil::TempDir dir;
  std::mt19937_64 rng(1);
  const auto s = testutil::random_snapshot(rng, 5000);
  write_snapshot(s, dir / "a.snap");
  const auto back = read_snapshot(dir / "a.snap");
  EXPECT_TRUE(same_bits(s, back));
  EXPECT_EQ(s.fingerprint(), back.fingerprint());
  EXPECT_TRUE(s == back);
}

TEST(Snapshot, EmptyMapIsValid) {
  const TensorSnapshot empty;
  const auto back = decode_snapshot(encode_snapshot(empty));
  EXPECT_TRUE(back.tensors().empty());
  EXPECT_EQ(back.parameter_count(), 0u);
}

TEST(Snapshot, FlippedPayloadByteFailsChecksum) {
  const auto s = snap({{"w", {1.0f, 2.0f, 3.0f}}});
  auto bytes = encode_snapshot(s);
  bytes[bytes.size() - 9] ^= 0x01;  // last payload byte
  EXPECT_EQ(code_of([&] { decode_snapshot(bytes); }), ErrorCode::kChecksum);
}

TEST(Snapshot, FormatErrors) {
  const auto bytes = encode_snapshot(snap({{"w", {1.0f}}}));
  auto bad_magic = bytes;
  bad_magic[0] = 'Y';
  EXPECT_EQ(code_of([&] { decode_snapshot(bad_magic); }), ErrorCode::kFormat);
  EXPECT_EQ(code_of([&] { decode_snapshot(bytes.substr(0, bytes.size() - 3)); }), ErrorCode::kFormat);
  EXPECT_EQ(code_of([&] { decode_snapshot(bytes.substr(0, 12)); }), ErrorCode::kFormat);
}

TEST(Snapshot, LayoutStartsWithMagicAndVersion) {
  const auto bytes = encode_snapshot(snap({{"w", {1.0f}}}));
  ASSERT_GE(bytes.size(), 18u);
  EXPECT_EQ(std::memcmp(bytes.data(), "XPERTSNAP\0", 10), 0);
  std::uint32_t version = 0;
  std::memcpy(&version, bytes.data() + 10, 4);
  EXPECT_EQ(version, 1u);
}

TEST(Snapshot, ConstructorValidates) {
  EXPECT_EQ(code_of([] { TensorSnapshot({{"w", Tensor{{2}, {1.0f}}}}); }), ErrorCode::kInvalidArgument);
  EXPECT_EQ(code_of([] { TensorSnapshot({{"w", Tensor{{1}, {std::nanf("")}}}}); }), ErrorCode::kNonFinite);
}

TEST(Snapshot, FingerprintDependsOnValues) {
  EXPECT_NE(snap({{"w", {1.0f}}}).fingerprint(), snap({{"w", {2.0f}}}).fingerprint());
  EXPECT_NE(snap({{"w", {1.0f}}}).fingerprint(), snap({{"v", {1.0f}}}).fingerprint());
}

TEST(TaskVector, IdenticalModelGivesZero) {
  std::mt19937_64 rng(2);
  const auto base = testutil::random_snapshot(rng, 1000);
  const auto tv = task_vector(base, base, "m");
  for (const auto& [name, d] : tv.deltas) {
    for (double x : d) EXPECT_EQ(x, 0.0);
  }
  EXPECT_EQ(tv.base_fingerprint, base.fingerprint());
}

TEST(TaskVector, ZeroBaseGivesModel) {
  const auto base = snap({{"w", {0, 0, 0}}});
  const auto model = snap({{"w", {1.5f, -2.0f, 3.25f}}});
  const auto tv = task_vector(base, model);
  EXPECT_EQ(tv.deltas.at("w"), (std::vector<double>{1.5, -2.0, 3.25}));
}

TEST(TaskVector, MismatchesReportTensor) {
  const auto base = snap({{"w", {0, 0}}});
  EXPECT_EQ(code_of([&] { task_vector(base, snap({{"w", {0, 0, 0}}})); }), ErrorCode::kMismatch);
  EXPECT_EQ(code_of([&] { task_vector(base, snap({{"v", {0, 0}}})); }), ErrorCode::kMismatch);
  try {
    task_vector(base, snap({{"w", {0, 0, 0}}}));
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("'w'"), std::string::npos);
  }
}

TEST(Merge, AddBackIsBitExact) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 20; ++t) {
    const auto base = testutil::random_snapshot(rng, 20000);
    const auto model = testutil::random_snapshot(rng, 0, &base);
    const auto tv = task_vector(base, model, "m");
    const WeightedTaskVector w{&tv, 1.0};
    EXPECT_TRUE(same_bits(merge(base, std::span(&w, 1)), model));
  }
}

TEST(Merge, ExtremeMagnitudeGap) {
  const auto base = snap({{"w", {1.0f, 3e30f, 0.0f, -7e-30f}}});
  const auto model = snap({{"w", {1e-30f, 1.0f, 1e-40f, 5e25f}}});
  const auto tv = task_vector(base, model);
  const WeightedTaskVector w{&tv, 1.0};
  EXPECT_TRUE(same_bits(merge(base, std::span(&w, 1)), model));
}

TEST(Merge, UnitWeightsOnZeroBaseSum) {
  const auto base = snap({{"w", {0, 0}}});
  const auto a = snap({{"w", {1, 2}}});
  const auto b = snap({{"w", {10, 20}}});
  const auto ta = task_vector(base, a), tb = task_vector(base, b);
  const std::vector<WeightedTaskVector> w{{&ta, 1.0}, {&tb, 1.0}};
  EXPECT_EQ(merge(base, w).at("w").data, (std::vector<float>{11, 22}));
}

TEST(Merge, AdditiveInWeightedList) {
  std::mt19937_64 rng(4);
  const auto base = testutil::random_snapshot(rng, 3000);
  const auto a = testutil::random_snapshot(rng, 0, &base);
  const auto b = testutil::random_snapshot(rng, 0, &base);
  const auto ta = task_vector(base, a), tb = task_vector(base, b);
  const std::vector<WeightedTaskVector> both{{&ta, 0.3}, {&tb, 0.6}};
  const std::vector<WeightedTaskVector> first{{&ta, 0.3}};
  const auto merged = merge(base, both);
  const auto partial = merge(base, first);
  // Adding the second term to the first partial result agrees within f32 rounding.
  for (const auto& [name, t] : merged.tensors()) {
    const auto& p = partial.at(name).data;
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      const double expect = static_cast<double>(p[i]) + 0.6 * tb.deltas.at(name)[i];
      const double scale = std::max({std::abs(expect), std::abs(static_cast<double>(base.at(name).data[i])),
                                     std::abs(0.3 * ta.deltas.at(name)[i]), 1e-30});
      EXPECT_NEAR(t.data[i], expect, 4e-7 * scale);
    }
  }
}

TEST(Merge, Errors) {
  const auto base = snap({{"w", {0, 0}}});
  const auto other = snap({{"w", {1, 1}}});
  const auto tv = task_vector(other, snap({{"w", {2, 2}}}));
  const WeightedTaskVector w{&tv, 1.0};
  EXPECT_EQ(code_of([&] { merge(base, std::span(&w, 1)); }), ErrorCode::kMismatch);
  EXPECT_EQ(code_of([&] { merge(base, {}); }), ErrorCode::kInvalidArgument);
  const auto good = task_vector(base, other);
  const WeightedTaskVector nan{&good, std::nan("")};
  EXPECT_EQ(code_of([&] { merge(base, std::span(&nan, 1)); }), ErrorCode::kNonFinite);
}

TEST(MergedExplanation, SingletonUnchanged) {
  const std::map<std::string, Coordinate> z{{"a", {"fp", {{0, 2.0}, {3, -1.0}}}}};
  const std::vector<MergeMember> m{{"a", 1.0}};
  const auto c = merged_explanation(m, z);
  EXPECT_EQ(c.entries, z.at("a").entries);
  EXPECT_EQ(c.basis_fingerprint, "fp");
}

TEST(MergedExplanation, DisjointSupportIsUnion) {
  const std::map<std::string, Coordinate> z{{"a", {"fp", {{0, 2.0}}}}, {"b", {"fp", {{1, 4.0}}}}};
  const std::vector<MergeMember> m{{"a", 0.5}, {"b", 0.25}};
  const auto c = merged_explanation(m, z);
  EXPECT_EQ(c.entries, (std::map<std::size_t, double>{{0, 1.0}, {1, 1.0}}));
}

TEST(MergedExplanation, LinearInAlpha) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n;
  for (int t = 0; t < 200; ++t) {
    std::map<std::string, Coordinate> z;
    for (const char* id : {"a", "b"}) {
      Coordinate c{"fp", {}};
      for (std::size_t i = 0; i < 6; ++i) c.entries[i] = n(rng);
      z[id] = c;
    }
    const double a1 = std::abs(n(rng)), a2 = std::abs(n(rng)), s = std::abs(n(rng));
    const std::vector<MergeMember> m1{{"a", a1}, {"b", a2}};
    const std::vector<MergeMember> ms{{"a", s * a1}, {"b", s * a2}};
    const std::vector<MergeMember> only_a{{"a", a1}};
    const std::vector<MergeMember> only_b{{"b", a2}};
    const auto c1 = merged_explanation(m1, z), cs = merged_explanation(ms, z);
    const auto ca = merged_explanation(only_a, z), cb = merged_explanation(only_b, z);
    for (std::size_t i = 0; i < 6; ++i) {
      EXPECT_NEAR(cs.at(i), s * c1.at(i), 1e-12 * (1 + std::abs(s * c1.at(i))));
      EXPECT_NEAR(c1.at(i), ca.at(i) + cb.at(i), 1e-12 * (1 + std::abs(c1.at(i))));
    }
  }
}

TEST(MergedExplanation, Errors) {
  const std::map<std::string, Coordinate> z{{"a", {"fp1", {{0, 1.0}}}}, {"b", {"fp2", {{0, 1.0}}}}};
  const std::vector<MergeMember> mixed{{"a", 1.0}, {"b", 1.0}};
  EXPECT_EQ(code_of([&] { merged_explanation(mixed, z); }), ErrorCode::kMismatch);
  const std::vector<MergeMember> missing{{"zz", 1.0}};
  EXPECT_EQ(code_of([&] { merged_explanation(missing, z); }), ErrorCode::kNotFound);
}

}  // namespace
}  // namespace xpert
