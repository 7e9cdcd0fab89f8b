#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "actsparse/scoring.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace actsparse;

TEST_CASE("scores: spec examples") {
  const std::vector<float> g1{2, 1};
  CHECK(compute_scores(Vec32{1, -2}, SparsityState::make(g1, 1.0, 1.0)) == Vec32{2, 2});

  const std::vector<float> g2{4, 1};
  const Vec32 s = compute_scores(Vec32{0.5f, 2}, SparsityState::make(g2, 0.5, 1.0));
  CHECK(s[0] == doctest::Approx(1.0));
  CHECK(s[1] == doctest::Approx(2.0));

  std::mt19937_64 rng(1);
  const Vec32 x = testsupport::random_vector(20, rng);
  Vec32 g = testsupport::random_vector(20, rng);
  for (float& v : g) v = std::fabs(v);
  const Vec32 s0 = compute_scores(x, SparsityState::make(g, 0.0, 1.0));
  for (std::size_t i = 0; i < 20; ++i) CHECK(s0[i] == std::fabs(x[i]));
}

TEST_CASE("scores: zero column norms are floored") {
  const std::vector<float> g{0.0f, 1.0f};
  const auto st = SparsityState::make(g, 1.0, 1.0);
  CHECK(st.col_norm_pow[0] == doctest::Approx(kColumnNormFloor));
  const auto st0 = SparsityState::make(g, 0.0, 1.0);
  CHECK(st0.col_norm_pow[0] == 1.0f);
}

TEST_CASE("state validation") {
  const std::vector<float> g{1, 2};
  CHECK_THROWS_AS(SparsityState::make(g, -0.5, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(SparsityState::make(g, 0.5, 1.5), std::invalid_argument);
  CHECK_THROWS_AS(compute_scores(Vec32{1, 2, 3}, SparsityState::make(g, 0.0, 1.0)), std::invalid_argument);
}

TEST_CASE("masks: spec examples") {
  const Vec32 s{1, 2, 3};
  const ChannelMask m = build_mask(s, 2.0f);
  CHECK_FALSE(m.test(0));
  CHECK(m.test(1));
  CHECK(m.test(2));
  CHECK(build_mask(s, kKeepAllThreshold).kept_count() == 3);
  CHECK(build_mask(s, kKeepNoneThreshold).kept_count() == 0);
}

TEST_CASE("fused selection equals score then mask (property)") {
  std::mt19937_64 rng(2);
  ChannelMask fused;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 90;
    const Vec32 x = testsupport::random_vector(n, rng);
    Vec32 g = testsupport::random_vector(n, rng, 2.0);
    for (float& v : g) v = std::fabs(v);
    auto st = SparsityState::make(g, static_cast<double>(rng() % 31) * 0.05, 0.5);
    const Vec32 s = compute_scores(x, st);
    st.threshold = s[rng() % n];
    const ChannelMask ref = build_mask(s, st.threshold);
    select_channels(x, st, fused);
    REQUIRE(fused.size() == n);
    CHECK(fused.kept_count() == ref.kept_count());
    for (std::size_t i = 0; i < n; ++i) CHECK(fused.test(i) == ref.test(i));
  }
}

TEST_CASE("calibration: spec examples") {
  const std::vector<float> pool{1, 2, 3, 4};
  CHECK(calibrate_threshold(pool, 0.5) == 3.0f);
  CHECK(calibrate_threshold(pool, 1.0) == kKeepAllThreshold);

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(0.0f, 100.0f);
  std::vector<float> big(10000);
  for (float& v : big) v = u(rng);
  const float tau = calibrate_threshold(big, 0.6);
  const auto kept = std::count_if(big.begin(), big.end(), [&](float v) { return v >= tau; });
  CHECK(static_cast<double>(kept) / 10000.0 >= 0.5999);
  CHECK(static_cast<double>(kept) / 10000.0 <= 0.6001);
}

TEST_CASE("append_scores pools rows in order") {
  const std::vector<float> g{1, 4};
  const auto st = SparsityState::make(g, 0.5, 1.0);
  std::vector<float> pool{9.0f};
  append_scores(Vec32{-1, 1}, st, pool);
  append_scores(Vec32{3, 0}, st, pool);
  CHECK(pool == std::vector<float>{9, 1, 2, 3, 0});
}

TEST_CASE("sparse projection") {
  std::mt19937_64 rng(4);
  const Mat32 w = testsupport::random_matrix(24, 32, rng);
  const GatherMatrix packed(w);
  const Vec32 g = column_l2_norms(w);

  SUBCASE("keep-all equals dense") {
    const auto st = SparsityState::make(g, 0.7, 1.0);
    const Vec32 x = testsupport::random_vector(32, rng);
    MacCounter a, b;
    CHECK(apply_sparse_projection(x, packed, st, a) == dense_matvec(x, packed, b));
    CHECK(a.executed_macs == a.dense_macs);
  }

  SUBCASE("masks adapt to the token") {
    auto st = SparsityState::make(g, 0.5, 0.5);
    std::vector<float> pool;
    for (int i = 0; i < 64; ++i) append_scores(testsupport::random_vector(32, rng), st, pool);
    st.threshold = calibrate_threshold(pool, 0.5);
    ChannelMask m1, m2;
    select_channels(testsupport::random_vector(32, rng), st, m1);
    select_channels(testsupport::random_vector(32, rng), st, m2);
    bool differ = false;
    for (std::size_t i = 0; i < 32; ++i) differ |= m1.test(i) != m2.test(i);
    CHECK(differ);
  }

  SUBCASE("fixed state equals the masked dense oracle") {
    auto st = SparsityState::make(g, 1.0, 0.5);
    const Vec32 x = testsupport::random_vector(32, rng);
    const Vec32 s = compute_scores(x, st);
    st.threshold = calibrate_threshold(s, 0.5);
    Vec32 ref(24);
    std::size_t kept = 0;
    for (std::size_t c = 0; c < 32; ++c) kept += std::fabs(x[c]) * st.col_norm_pow[c] >= st.threshold;
    for (std::size_t r = 0; r < 24; ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < 32; ++c) {
        if (std::fabs(x[c]) * st.col_norm_pow[c] >= st.threshold) acc += static_cast<double>(w(r, c)) * x[c];
      }
      ref[r] = static_cast<float>(acc);
    }
    MacCounter macs;
    CHECK(testsupport::max_abs_diff(apply_sparse_projection(x, packed, st, macs), ref) <= 1e-5);
    CHECK(macs.executed_macs == 24 * kept);
    CHECK(kept == 16);
  }
}
