#include <gtest/gtest.h>

#include <set>
#include <vector>

#include "test_util.hpp"

using namespace fbsde;
using namespace fbsde::testing;

// Published Philox4x32-10 known-answer vectors.
TEST(Philox, KnownAnswers) {
  {
    const Philox4x32 g(0);
    const auto r = g({0, 0, 0, 0});
    EXPECT_EQ(r, (Philox4x32::Counter{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
  }
  {
    const Philox4x32 g(0xffffffffffffffffull);
    const auto r = g({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu});
    EXPECT_EQ(r, (Philox4x32::Counter{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
  }
  {
    const Philox4x32 g(0x299f31d0a4093822ull);
    const auto r = g({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u});
    EXPECT_EQ(r, (Philox4x32::Counter{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
  }
}

TEST(CounterRng, PureFunctionOfAddress) {
  const CounterRng a(42), b(42), c(43);
  EXPECT_EQ(a.normal(Stream::Signal, 7, 100), b.normal(Stream::Signal, 7, 100));
  EXPECT_NE(a.normal(Stream::Signal, 7, 100), c.normal(Stream::Signal, 7, 100));
  EXPECT_NE(a.normal(Stream::Signal, 7, 100), a.normal(Stream::Truth, 7, 100));
  EXPECT_NE(a.normal(Stream::Signal, 7, 100), a.normal(Stream::Signal, 8, 100));
  EXPECT_NE(a.normal(Stream::Signal, 7, 100), a.normal(Stream::Signal, 7, 101));
}

TEST(CounterRng, UniformsInOpenInterval) {
  EXPECT_GT(to_unit(0, 0), 0.0);
  EXPECT_LT(to_unit(0xffffffffu, 0xffffffffu), 1.0);
  const CounterRng rng(1);
  for (std::uint64_t i = 0; i < 1000; ++i) {
    const auto [u, v] = rng.uniforms(Stream::Prior, i, 0);
    EXPECT_GT(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(CounterRng, NormalMoments) {
  const CounterRng rng(2024);
  const std::size_t n = 200000;
  std::vector<double> z(n), zz(n), z4(n), lag(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    z[i] = rng.normal(Stream::Brownian, i % 97, i / 97);
    zz[i] = z[i] * z[i];
    z4[i] = zz[i] * zz[i];
  }
  for (std::size_t i = 0; i + 1 < n; ++i) lag[i] = z[i] * z[i + 1];
  const Stats m = stats(z), v = stats(zz), k = stats(z4), c = stats(lag);
  EXPECT_LT(std::abs(m.mean), 4.0 * m.se);
  EXPECT_LT(std::abs(v.mean - 1.0), 4.0 * v.se);
  EXPECT_LT(std::abs(k.mean - 3.0), 4.0 * k.se);
  EXPECT_LT(std::abs(c.mean), 4.0 * c.se);
}

TEST(CounterRng, NormalPairsUseBothHalves) {
  const CounterRng rng(5);
  const auto [a, b] = rng.normals(Stream::Signal, 3, 10);
  EXPECT_EQ(rng.normal(Stream::Signal, 3, 20), a);
  EXPECT_EQ(rng.normal(Stream::Signal, 3, 21), b);
}

TEST(Seeds, DerivedSeedsDistinct) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t s = 0; s < 20; ++s)
    for (std::uint64_t i = 0; i < 50; ++i) seen.insert(derive_seed(s, i));
  EXPECT_EQ(seen.size(), 1000u);
}

TEST(Parallel, ChunksCoverEveryIndexOnce) {
  for (std::size_t workers : {1u, 2u, 3u, 8u}) {
    std::vector<int> hits(10007, 0);
    parallel_chunks(hits.size(), workers, [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) ++hits[i];
    });
    for (int h : hits) ASSERT_EQ(h, 1);
  }
}

TEST(Parallel, PairwiseSumIsAccurate) {
  const std::size_t n = 1 << 20;
  const double s = pairwise_sum(0, n, [](std::size_t) { return 0.1; });
  EXPECT_NEAR(s, 0.1 * static_cast<double>(n), 1e-9);
  EXPECT_EQ(pairwise_sum(0, 0, [](std::size_t) { return 1.0; }), 0.0);
}
