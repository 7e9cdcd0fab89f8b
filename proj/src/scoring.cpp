#include "actsparse/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace actsparse {

namespace {

void check_width(std::size_t x_len, const SparsityState& state, const char* what) {
  if (x_len != state.col_norm_pow.size()) {
    throw std::invalid_argument(std::string(what) + ": activation width " + std::to_string(x_len) +
                                " but state covers " + std::to_string(state.col_norm_pow.size()) +
                                " channels");
  }
}

}  // namespace

SparsityState SparsityState::make(std::span<const float> col_norms, double alpha, double keep_ratio,
                                  float threshold) {
  if (!(keep_ratio >= 0.0 && keep_ratio <= 1.0)) {
    throw std::invalid_argument("SparsityState: keep ratio " + std::to_string(keep_ratio) +
                                " outside [0, 1]");
  }
  SparsityState s;
  s.keep_ratio = keep_ratio;
  s.threshold = threshold;
  s.set_alpha(col_norms, alpha);
  return s;
}

void SparsityState::set_alpha(std::span<const float> col_norms, double new_alpha) {
  if (!(new_alpha >= 0.0) || !std::isfinite(new_alpha)) {
    throw std::invalid_argument("SparsityState: alpha must be finite and non-negative");
  }
  alpha = new_alpha;
  col_norm_pow.resize(col_norms.size());
  for (std::size_t i = 0; i < col_norms.size(); ++i) {
    const double g = std::max(col_norms[i], kColumnNormFloor);
    col_norm_pow[i] = static_cast<float>(std::pow(g, alpha));
  }
}

Vec32 compute_scores(std::span<const float> x, const SparsityState& state) {
  check_width(x.size(), state, "compute_scores");
  Vec32 s(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) s[i] = std::fabs(x[i]) * state.col_norm_pow[i];
  return s;
}

void append_scores(std::span<const float> x, const SparsityState& state, std::vector<float>& pool) {
  check_width(x.size(), state, "append_scores");
  const float* g = state.col_norm_pow.data();
  const std::size_t start = pool.size();
  pool.resize(start + x.size());
  float* out = pool.data() + start;
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::fabs(x[i]) * g[i];
}

ChannelMask build_mask(std::span<const float> scores, float tau) {
  ChannelMask m;
  m.reset(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] >= tau) m.keep(static_cast<std::uint32_t>(i));
  }
  return m;
}

void select_channels(std::span<const float> x, const SparsityState& state, ChannelMask& mask) {
  check_width(x.size(), state, "select_channels");
  const float tau = state.threshold;
  const float* g = state.col_norm_pow.data();
  const float* v = x.data();
  mask.rebuild(x.size(), [=](std::size_t i) { return std::fabs(v[i]) * g[i] >= tau; });
}

float calibrate_threshold(std::span<const float> score_pool, double keep_ratio) {
  return kth_largest_threshold(score_pool, keep_ratio);
}

Vec32 apply_sparse_projection(std::span<const float> x, const GatherMatrix& w,
                              const SparsityState& state, MacCounter& macs) {
  ChannelMask mask;
  select_channels(x, state, mask);
  return sparse_matvec(x, w, mask, macs);
}

}  // namespace actsparse
