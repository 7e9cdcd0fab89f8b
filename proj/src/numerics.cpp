#include "actsparse/numerics.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>

namespace actsparse {

Mat32::Mat32(std::size_t r, std::size_t c, std::vector<float> v)
    : rows(r), cols(c), values(std::move(v)) {
  if (values.size() != rows * cols) {
    throw std::invalid_argument("Mat32: " + std::to_string(values.size()) +
                                " values for a " + std::to_string(rows) + "x" +
                                std::to_string(cols) + " matrix");
  }
}

Vec32 column_l2_norms(const Mat32& w) {
  std::vector<double> acc(w.cols, 0.0);
  for (std::size_t r = 0; r < w.rows; ++r) {
    const auto row = w.row(r);
    for (std::size_t c = 0; c < w.cols; ++c) {
      const double v = row[c];
      acc[c] += v * v;
    }
  }
  Vec32 out(w.cols);
  std::transform(acc.begin(), acc.end(), out.begin(),
                 [](double s) { return static_cast<float>(std::sqrt(s)); });
  return out;
}

float kth_largest_threshold(std::span<const float> values, double keep_ratio) {
  if (values.empty()) throw std::invalid_argument("empty score population");
  if (!(keep_ratio >= 0.0 && keep_ratio <= 1.0)) {
    throw std::invalid_argument("keep ratio " + std::to_string(keep_ratio) +
                                " outside [0, 1]");
  }
  const std::size_t n = values.size();
  const auto k = static_cast<std::size_t>(std::llround(keep_ratio * static_cast<double>(n)));
  if (k == 0) return kKeepNoneThreshold;
  if (k >= n) return kKeepAllThreshold;

  // Radix select over order-preserving integer keys, 11/11/10 bits per pass.
  thread_local std::vector<std::uint32_t> keys, next;
  keys.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto b = std::bit_cast<std::uint32_t>(values[i]);
    keys[i] = (b & 0x80000000u) ? ~b : (b | 0x80000000u);
  }
  std::size_t rank = k;  // 1-based rank among the remaining keys, largest first
  std::uint32_t prefix = 0;
  constexpr int kShifts[3] = {21, 10, 0};
  constexpr int kWidths[3] = {11, 11, 10};
  for (int pass = 0; pass < 3; ++pass) {
    const int shift = kShifts[pass];
    const std::uint32_t mask = (1u << kWidths[pass]) - 1u;
    std::array<std::size_t, 2048> hist{};
    for (std::uint32_t key : keys) ++hist[(key >> shift) & mask];
    std::uint32_t bucket = mask;
    for (;; --bucket) {
      if (hist[bucket] >= rank) break;
      rank -= hist[bucket];
    }
    prefix |= bucket << shift;
    if (pass < 2) {
      next.clear();
      for (std::uint32_t key : keys) {
        if (((key >> shift) & mask) == bucket) next.push_back(key);
      }
      keys.swap(next);
    }
  }
  const std::uint32_t b = (prefix & 0x80000000u) ? (prefix & 0x7fffffffu) : ~prefix;
  return std::bit_cast<float>(b);
}

ProbDist softmax(std::span<const float> logits) {
  ProbDist out;
  out.probs.resize(logits.size());
  if (logits.empty()) return out;
  const float mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  std::vector<double> e(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    e[i] = std::exp(static_cast<double>(logits[i]) - mx);
    sum += e[i];
  }
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out.probs[i] = static_cast<float>(e[i] / sum);
  }
  return out;
}

std::vector<double> log_softmax(std::span<const float> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (float l : logits) sum += std::exp(static_cast<double>(l) - mx);
  const double lse = mx + std::log(sum);
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

double kl_divergence(const ProbDist& p, const ProbDist& q) {
  if (p.probs.size() != q.probs.size()) {
    throw std::invalid_argument("kl_divergence: length mismatch (" +
                                std::to_string(p.probs.size()) + " vs " +
                                std::to_string(q.probs.size()) + ")");
  }
  double kl = 0.0;
  for (std::size_t i = 0; i < p.probs.size(); ++i) {
    const double pi = p.probs[i];
    if (pi <= 0.0) continue;
    const double qi = std::max(static_cast<double>(q.probs[i]), kKlFloor);
    kl += pi * (std::log(pi) - std::log(qi));
  }
  return kl;
}

double mse(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("mse: length mismatch (" + std::to_string(a.size()) +
                                " vs " + std::to_string(b.size()) + ")");
  }
  if (a.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

}  // namespace actsparse
