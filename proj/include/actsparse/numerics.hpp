#pragma once

#include <cstddef>
#include <limits>
#include <span>
#include <vector>

namespace actsparse {

using Vec32 = std::vector<float>;

/// Dense row-major float matrix. Also used for activation batches
/// laid out as [tokens x width].
struct Mat32 {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> values;

  Mat32() = default;
  Mat32(std::size_t r, std::size_t c) : rows(r), cols(c), values(r * c, 0.0f) {}
  Mat32(std::size_t r, std::size_t c, std::vector<float> v);

  float& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  float operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }

  std::span<float> row(std::size_t r) { return {values.data() + r * cols, cols}; }
  std::span<const float> row(std::size_t r) const { return {values.data() + r * cols, cols}; }

  bool well_formed() const { return values.size() == rows * cols; }

  friend bool operator==(const Mat32&, const Mat32&) = default;
};

/// Probability vector over the vocabulary (non-negative, sums to one).
struct ProbDist {
  Vec32 probs;
};

// Threshold sentinels: keep_all is below every finite score, keep_none above.
inline constexpr float kKeepAllThreshold = -std::numeric_limits<float>::infinity();
inline constexpr float kKeepNoneThreshold = std::numeric_limits<float>::infinity();

/// Per-column Euclidean norms of a row-major matrix.
Vec32 column_l2_norms(const Mat32& w);

/// Threshold tau such that the k = round(keep_ratio * n) largest values satisfy
/// v >= tau (nearest rank, no interpolation). keep_ratio 0 yields +inf and a
/// keep count of n yields -inf. Ties at tau can make more than k values pass.
/// Throws std::invalid_argument on an empty population or a ratio outside [0,1].
float kth_largest_threshold(std::span<const float> values, double keep_ratio);

ProbDist softmax(std::span<const float> logits);

/// Natural-log log-softmax evaluated in double precision.
std::vector<double> log_softmax(std::span<const float> logits);

/// KL(p || q) in nats. q is floored at kKlFloor before the log; zero-mass
/// entries of p contribute nothing.
double kl_divergence(const ProbDist& p, const ProbDist& q);
inline constexpr double kKlFloor = 1e-10;

/// Mean squared difference.
double mse(std::span<const float> a, std::span<const float> b);

}  // namespace actsparse
