#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "actsparse/numerics.hpp"

namespace actsparse {

/// Input-channel selection for one projection call. Holds both the bitmap and
/// the ascending list of kept channel indices that the gather kernel streams.
class ChannelMask {
 public:
  ChannelMask() = default;
  explicit ChannelMask(std::vector<bool> bits);

  static ChannelMask all(std::size_t n);
  static ChannelMask none(std::size_t n);

  std::size_t size() const { return size_; }
  std::size_t kept_count() const { return kept_.size(); }
  bool test(std::size_t i) const { return bits_[i] != 0; }
  std::span<const std::uint32_t> kept_indices() const { return kept_; }

  // Refills the mask in place; used on the per-token hot path.
  void reset(std::size_t n);
  void keep(std::uint32_t i) {
    bits_[i] = 1;
    kept_.push_back(i);
  }

  /// Rebuilds the mask keeping every i < n with keep(i) true.
  template <typename Pred>
  void rebuild(std::size_t n, Pred keep) {
    size_ = n;
    bits_.resize(n);
    kept_.resize(n);
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const bool k = keep(i);
      bits_[i] = k;
      kept_[count] = static_cast<std::uint32_t>(i);
      count += k;
    }
    kept_.resize(count);
  }

  ChannelMask operator&(const ChannelMask& other) const;

 private:
  std::size_t size_ = 0;
  std::vector<std::uint8_t> bits_;
  std::vector<std::uint32_t> kept_;
};

/// MACs a projection would have executed densely versus what actually ran.
struct MacCounter {
  std::uint64_t dense_macs = 0;
  std::uint64_t executed_macs = 0;

  MacCounter& operator+=(const MacCounter& o) {
    dense_macs += o.dense_macs;
    executed_macs += o.executed_macs;
    return *this;
  }
};

/// executed / dense. Throws when nothing was counted.
double mac_ratio(const MacCounter& counter);

/// Column-major copy of a weight matrix so the gather kernel reads only the
/// columns of kept channels.
class GatherMatrix {
 public:
  GatherMatrix() = default;
  explicit GatherMatrix(const Mat32& w);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  const float* column(std::size_t c) const { return columns_.data() + c * rows_; }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> columns_;
};

/// y = x W^T over the row-major matrix, one 64-bit accumulator per row.
Vec32 dense_matvec(std::span<const float> x, const Mat32& w, MacCounter& macs);

/// Same product computed by streaming every column of the packed matrix.
Vec32 dense_matvec(std::span<const float> x, const GatherMatrix& w, MacCounter& macs);

/// Row-wise gather over kept columns of a row-major matrix.
Vec32 sparse_matvec(std::span<const float> x, const Mat32& w, const ChannelMask& mask,
                    MacCounter& macs);

/// Column-streaming gather: only the kept columns of `w` are touched.
Vec32 sparse_matvec(std::span<const float> x, const GatherMatrix& w, const ChannelMask& mask,
                    MacCounter& macs);

/// Allocation-free form of the column-streaming kernel; `y` must have w.rows() entries.
void sparse_matvec_into(std::span<const float> x, const GatherMatrix& w,
                        const ChannelMask& mask, std::span<float> y, MacCounter& macs);

struct BenchPoint {
  double sparsity = 0.0;
  double ns_per_op = 0.0;
  double gmacs_per_s = 0.0;
};

/// Median wall-clock time of the gather kernel per grid sparsity. The same
/// random matrix and input are reused across points; each point draws a random
/// mask with exactly round((1 - s) * cols) kept channels.
std::vector<BenchPoint> bench_matvec(std::size_t rows, std::size_t cols,
                                     std::span<const double> sparsity_grid,
                                     std::size_t iterations = 100, std::uint64_t seed = 7);

void write_bench_csv(std::ostream& os, std::span<const BenchPoint> points);

}  // namespace actsparse
