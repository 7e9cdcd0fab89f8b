#include <cmath>
#include <random>
#include <sstream>
#include <vector>

#include "actsparse/kernels.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace actsparse;

namespace {

Vec32 masked_dense_oracle(const Vec32& x, const Mat32& w, const std::vector<bool>& keep) {
  Vec32 y(w.rows);
  for (std::size_t r = 0; r < w.rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < w.cols; ++c) {
      if (keep[c]) acc += static_cast<double>(w(r, c)) * x[c];
    }
    y[r] = static_cast<float>(acc);
  }
  return y;
}

std::vector<bool> random_bits(std::size_t n, double p, std::mt19937_64& rng) {
  std::bernoulli_distribution b(p);
  std::vector<bool> bits(n);
  for (std::size_t i = 0; i < n; ++i) bits[i] = b(rng);
  return bits;
}

}  // namespace

TEST_CASE("dense matvec: hand cases") {
  MacCounter macs;
  Mat32 eye(2, 2, {1, 0, 0, 1});
  CHECK(dense_matvec(Vec32{1, 2}, eye, macs) == Vec32{1, 2});
  const Mat32 w(2, 2, {1, 2, 3, 4});
  CHECK(dense_matvec(Vec32{1, 1}, w, macs) == Vec32{3, 7});
  CHECK(dense_matvec(Vec32{1, 1}, GatherMatrix(w), macs) == Vec32{3, 7});
  CHECK(macs.dense_macs == 12);
  CHECK(macs.executed_macs == 12);
}

TEST_CASE("dense matvec matches the double loop, both layouts") {
  std::mt19937_64 rng(1);
  const Mat32 w = testsupport::random_matrix(16, 8, rng);
  const Vec32 x = testsupport::random_vector(8, rng);
  const Vec32 ref = masked_dense_oracle(x, w, std::vector<bool>(8, true));
  MacCounter macs;
  CHECK(testsupport::max_abs_diff(dense_matvec(x, w, macs), ref) <= 1e-5);
  CHECK(testsupport::max_abs_diff(dense_matvec(x, GatherMatrix(w), macs), ref) <= 1e-5);
}

TEST_CASE("shape errors") {
  MacCounter macs;
  const Mat32 w(3, 4);
  CHECK_THROWS_AS(dense_matvec(Vec32(3), w, macs), std::invalid_argument);
  CHECK_THROWS_AS(sparse_matvec(Vec32(4), w, ChannelMask::all(3), macs), std::invalid_argument);
  Vec32 y(2);
  CHECK_THROWS_AS(sparse_matvec_into(Vec32(4), GatherMatrix(w), ChannelMask::all(4), y, macs),
                  std::invalid_argument);
  CHECK_THROWS(ChannelMask::all(3) & ChannelMask::all(4));
}

TEST_CASE("sparse matvec: keep-all equals dense bitwise, keep-none is zero") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t r = 1 + rng() % 40, c = 1 + rng() % 70;
    const Mat32 w = testsupport::random_matrix(r, c, rng);
    const GatherMatrix g(w);
    const Vec32 x = testsupport::random_vector(c, rng);
    MacCounter dm, sm;
    const Vec32 dense = dense_matvec(x, g, dm);
    CHECK(sparse_matvec(x, g, ChannelMask::all(c), sm) == dense);
    CHECK(sparse_matvec(x, w, ChannelMask::all(c), sm) == dense_matvec(x, w, dm));

    MacCounter none;
    const Vec32 z = sparse_matvec(x, g, ChannelMask::none(c), none);
    CHECK(z == Vec32(r, 0.0f));
    CHECK(none.executed_macs == 0);
    CHECK(none.dense_macs == r * c);
  }
}

TEST_CASE("sparse matvec equals the masked dense oracle (property)") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t r = 1 + rng() % 64, c = 1 + rng() % 64;
    const Mat32 w = testsupport::random_matrix(r, c, rng);
    const Vec32 x = testsupport::random_vector(c, rng);
    const double p = static_cast<double>(rng() % 101) / 100.0;
    const auto bits = random_bits(c, p, rng);
    const ChannelMask mask(bits);
    const Vec32 ref = masked_dense_oracle(x, w, bits);

    MacCounter a, b;
    const Vec32 y1 = sparse_matvec(x, w, mask, a);
    const Vec32 y2 = sparse_matvec(x, GatherMatrix(w), mask, b);
    CHECK(testsupport::max_abs_diff(y1, ref) <= 1e-5);
    CHECK(testsupport::max_abs_diff(y2, ref) <= 1e-5);
    CHECK(a.executed_macs == r * mask.kept_count());
    CHECK(b.executed_macs == r * mask.kept_count());
    CHECK(a.dense_macs == r * c);
  }
}

TEST_CASE("sparse matvec ignores values in dropped channels") {
  std::mt19937_64 rng(4);
  const Mat32 w = testsupport::random_matrix(9, 12, rng);
  Vec32 x = testsupport::random_vector(12, rng);
  const auto bits = random_bits(12, 0.5, rng);
  MacCounter macs;
  const Vec32 before = sparse_matvec(x, GatherMatrix(w), ChannelMask(bits), macs);
  for (std::size_t i = 0; i < 12; ++i) {
    if (!bits[i]) x[i] = 1e30f;
  }
  CHECK(sparse_matvec(x, GatherMatrix(w), ChannelMask(bits), macs) == before);
}

TEST_CASE("channel mask bookkeeping") {
  const ChannelMask m(std::vector<bool>{true, false, true, true, false});
  CHECK(m.size() == 5);
  CHECK(m.kept_count() == 3);
  CHECK(m.test(0));
  CHECK_FALSE(m.test(1));
  const std::vector<std::uint32_t> kept(m.kept_indices().begin(), m.kept_indices().end());
  CHECK(kept == std::vector<std::uint32_t>{0, 2, 3});

  const ChannelMask o(std::vector<bool>{false, false, true, true, true});
  const ChannelMask both = m & o;
  CHECK(both.kept_count() == 2);
  CHECK(both.test(2));
  CHECK(both.test(3));

  ChannelMask r;
  r.rebuild(6, [](std::size_t i) { return i % 2 == 1; });
  CHECK(r.kept_count() == 3);
  CHECK(r.kept_indices()[2] == 5);
  r.rebuild(2, [](std::size_t) { return false; });
  CHECK(r.size() == 2);
  CHECK(r.kept_count() == 0);
}

TEST_CASE("mac ratio") {
  CHECK(mac_ratio(MacCounter{4096ull * 4096, 4096ull * 2048}) == doctest::Approx(0.5));
  CHECK(mac_ratio(MacCounter{100, 100}) == 1.0);
  CHECK_THROWS(mac_ratio(MacCounter{}));

  MacCounter sum;
  sum += MacCounter{10, 4};
  sum += MacCounter{6, 6};
  CHECK(sum.dense_macs == 16);
  CHECK(sum.executed_macs == 10);
}

TEST_CASE("bench matvec: shape and csv") {
  const std::vector<double> grid{0.0, 0.5, 0.99};
  const auto pts = bench_matvec(64, 64, grid, 5);
  REQUIRE(pts.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(pts[i].sparsity == grid[i]);
    CHECK(pts[i].ns_per_op > 0.0);
  }
  std::ostringstream os;
  write_bench_csv(os, pts);
  CHECK(os.str().rfind("sparsity,ns_per_op,gmacs_per_s\n", 0) == 0);

  const std::vector<double> bad{1.0};
  CHECK_THROWS(bench_matvec(8, 8, bad, 1));
  CHECK_THROWS(bench_matvec(0, 8, grid, 1));
}
