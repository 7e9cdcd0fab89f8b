#pragma once

#include <cstdint>
#include <span>

#include "actsparse/kernels.hpp"
#include "actsparse/numerics.hpp"

namespace actsparse {

// Column norms are floored here before exponentiation so zero columns never
// hit 0^0.
inline constexpr float kColumnNormFloor = 1e-4f;

/// Everything a projection needs to mask its input at inference time.
struct SparsityState {
  double alpha = 0.0;
  float threshold = kKeepAllThreshold;
  double keep_ratio = 1.0;
  Vec32 col_norm_pow;            // max(g_i, floor)^alpha per input channel
  std::uint64_t pool_size = 0;   // calibration population behind `threshold`

  /// State with cached weight factors for `col_norms` at `alpha`.
  static SparsityState make(std::span<const float> col_norms, double alpha, double keep_ratio,
                            float threshold = kKeepAllThreshold);

  /// Changes alpha and refreshes the cached factors.
  void set_alpha(std::span<const float> col_norms, double new_alpha);

  std::size_t width() const { return col_norm_pow.size(); }
};

/// s_i = |x_i| * col_norm_pow_i.
Vec32 compute_scores(std::span<const float> x, const SparsityState& state);

/// Appends the scores of one activation row to `pool`.
void append_scores(std::span<const float> x, const SparsityState& state, std::vector<float>& pool);

/// m_i = [s_i >= tau].
ChannelMask build_mask(std::span<const float> scores, float tau);

/// Fused score + threshold for the per-token hot path.
void select_channels(std::span<const float> x, const SparsityState& state, ChannelMask& mask);

/// Single layer threshold from a pooled score population (nearest-rank quantile).
float calibrate_threshold(std::span<const float> score_pool, double keep_ratio);

/// Score, mask and gather-multiply one activation row.
Vec32 apply_sparse_projection(std::span<const float> x, const GatherMatrix& w,
                              const SparsityState& state, MacCounter& macs);

}  // namespace actsparse
