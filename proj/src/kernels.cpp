#include "actsparse/kernels.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>
#include <ostream>
#include <random>
#include <stdexcept>

namespace actsparse {

namespace {

void check_shapes(std::size_t x_len, std::size_t rows, std::size_t cols, const char* what) {
  if (x_len != cols || rows == 0) {
    throw std::invalid_argument(std::string(what) + ": input length " + std::to_string(x_len) +
                                " does not match matrix " + std::to_string(rows) + "x" +
                                std::to_string(cols));
  }
}

void check_mask(std::size_t mask_len, std::size_t cols, const char* what) {
  if (mask_len != cols) {
    throw std::invalid_argument(std::string(what) + ": mask length " + std::to_string(mask_len) +
                                " does not match " + std::to_string(cols) + " columns");
  }
}

}  // namespace

ChannelMask::ChannelMask(std::vector<bool> bits) {
  reset(bits.size());
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (bits[i]) keep(static_cast<std::uint32_t>(i));
  }
}

ChannelMask ChannelMask::all(std::size_t n) {
  ChannelMask m;
  m.reset(n);
  for (std::size_t i = 0; i < n; ++i) m.keep(static_cast<std::uint32_t>(i));
  return m;
}

ChannelMask ChannelMask::none(std::size_t n) {
  ChannelMask m;
  m.reset(n);
  return m;
}

void ChannelMask::reset(std::size_t n) {
  size_ = n;
  bits_.assign(n, 0);
  kept_.clear();
  kept_.reserve(n);
}

ChannelMask ChannelMask::operator&(const ChannelMask& other) const {
  if (other.size_ != size_) throw std::invalid_argument("ChannelMask: size mismatch");
  ChannelMask out;
  out.reset(size_);
  for (std::uint32_t i : kept_) {
    if (other.bits_[i]) out.keep(i);
  }
  return out;
}

double mac_ratio(const MacCounter& counter) {
  if (counter.dense_macs == 0) throw std::invalid_argument("mac_ratio: no dense MACs counted");
  return static_cast<double>(counter.executed_macs) / static_cast<double>(counter.dense_macs);
}

GatherMatrix::GatherMatrix(const Mat32& w) : rows_(w.rows), cols_(w.cols), columns_(w.values.size()) {
  for (std::size_t r = 0; r < rows_; ++r) {
    for (std::size_t c = 0; c < cols_; ++c) columns_[c * rows_ + r] = w.values[r * cols_ + c];
  }
}

Vec32 dense_matvec(std::span<const float> x, const Mat32& w, MacCounter& macs) {
  check_shapes(x.size(), w.rows, w.cols, "dense_matvec");
  Vec32 y(w.rows);
  for (std::size_t r = 0; r < w.rows; ++r) {
    const auto row = w.row(r);
    double acc = 0.0;
    for (std::size_t i = 0; i < w.cols; ++i) acc += static_cast<double>(x[i]) * row[i];
    y[r] = static_cast<float>(acc);
  }
  const auto n = static_cast<std::uint64_t>(w.rows) * w.cols;
  macs.dense_macs += n;
  macs.executed_macs += n;
  return y;
}

Vec32 dense_matvec(std::span<const float> x, const GatherMatrix& w, MacCounter& macs) {
  check_shapes(x.size(), w.rows(), w.cols(), "dense_matvec");
  Vec32 y(w.rows());
  sparse_matvec_into(x, w, ChannelMask::all(w.cols()), y, macs);
  return y;
}

Vec32 sparse_matvec(std::span<const float> x, const Mat32& w, const ChannelMask& mask,
                    MacCounter& macs) {
  check_shapes(x.size(), w.rows, w.cols, "sparse_matvec");
  check_mask(mask.size(), w.cols, "sparse_matvec");
  const auto kept = mask.kept_indices();
  Vec32 y(w.rows);
  for (std::size_t r = 0; r < w.rows; ++r) {
    const auto row = w.row(r);
    double acc = 0.0;
    for (std::uint32_t i : kept) acc += static_cast<double>(x[i]) * row[i];
    y[r] = static_cast<float>(acc);
  }
  macs.dense_macs += static_cast<std::uint64_t>(w.rows) * w.cols;
  macs.executed_macs += static_cast<std::uint64_t>(w.rows) * kept.size();
  return y;
}

Vec32 sparse_matvec(std::span<const float> x, const GatherMatrix& w, const ChannelMask& mask,
                    MacCounter& macs) {
  Vec32 y(w.rows());
  sparse_matvec_into(x, w, mask, y, macs);
  return y;
}

void sparse_matvec_into(std::span<const float> x, const GatherMatrix& w, const ChannelMask& mask,
                        std::span<float> y, MacCounter& macs) {
  check_shapes(x.size(), w.rows(), w.cols(), "sparse_matvec");
  check_mask(mask.size(), w.cols(), "sparse_matvec");
  if (y.size() != w.rows()) throw std::invalid_argument("sparse_matvec: output length mismatch");

  const std::size_t rows = w.rows();
  thread_local std::vector<double> acc;
  acc.assign(rows, 0.0);
  double* a = acc.data();
  const auto kept = mask.kept_indices();
  std::size_t j = 0;
  // Several columns per sweep over the accumulators; per row the additions
  // still happen in kept-index order.
  for (; j + 8 <= kept.size(); j += 8) {
    const std::uint32_t* k = kept.data() + j;
    const double x0 = x[k[0]], x1 = x[k[1]], x2 = x[k[2]], x3 = x[k[3]];
    const double x4 = x[k[4]], x5 = x[k[5]], x6 = x[k[6]], x7 = x[k[7]];
    const float *c0 = w.column(k[0]), *c1 = w.column(k[1]), *c2 = w.column(k[2]), *c3 = w.column(k[3]);
    const float *c4 = w.column(k[4]), *c5 = w.column(k[5]), *c6 = w.column(k[6]), *c7 = w.column(k[7]);
    for (std::size_t r = 0; r < rows; ++r) {
      double s = a[r];
      s += x0 * c0[r];
      s += x1 * c1[r];
      s += x2 * c2[r];
      s += x3 * c3[r];
      s += x4 * c4[r];
      s += x5 * c5[r];
      s += x6 * c6[r];
      s += x7 * c7[r];
      a[r] = s;
    }
  }
  for (; j + 4 <= kept.size(); j += 4) {
    const double x0 = x[kept[j]], x1 = x[kept[j + 1]], x2 = x[kept[j + 2]], x3 = x[kept[j + 3]];
    const float* c0 = w.column(kept[j]);
    const float* c1 = w.column(kept[j + 1]);
    const float* c2 = w.column(kept[j + 2]);
    const float* c3 = w.column(kept[j + 3]);
    for (std::size_t r = 0; r < rows; ++r) {
      double s = a[r];
      s += x0 * c0[r];
      s += x1 * c1[r];
      s += x2 * c2[r];
      s += x3 * c3[r];
      a[r] = s;
    }
  }
  for (; j < kept.size(); ++j) {
    const double xi = x[kept[j]];
    const float* c = w.column(kept[j]);
    for (std::size_t r = 0; r < rows; ++r) a[r] += xi * c[r];
  }
  for (std::size_t r = 0; r < rows; ++r) y[r] = static_cast<float>(a[r]);

  macs.dense_macs += static_cast<std::uint64_t>(rows) * w.cols();
  macs.executed_macs += static_cast<std::uint64_t>(rows) * kept.size();
}

std::vector<BenchPoint> bench_matvec(std::size_t rows, std::size_t cols,
                                     std::span<const double> sparsity_grid,
                                     std::size_t iterations, std::uint64_t seed) {
  if (rows == 0 || cols == 0) throw std::invalid_argument("bench_matvec: empty shape");
  for (double s : sparsity_grid) {
    if (!(s >= 0.0 && s < 1.0)) {
      throw std::invalid_argument("bench_matvec: sparsity " + std::to_string(s) +
                                  " outside [0, 1)");
    }
  }
  iterations = std::max<std::size_t>(iterations, 1);

  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  Mat32 w(rows, cols);
  for (float& v : w.values) v = normal(rng);
  const GatherMatrix packed(w);
  w = Mat32();  // only the packed copy is needed
  Vec32 x(cols);
  for (float& v : x) v = normal(rng);
  Vec32 y(rows);

  std::vector<std::uint32_t> order(cols);
  std::iota(order.begin(), order.end(), 0u);

  std::vector<BenchPoint> out;
  for (double s : sparsity_grid) {
    std::shuffle(order.begin(), order.end(), rng);
    const auto kept = static_cast<std::size_t>(std::llround((1.0 - s) * static_cast<double>(cols)));
    std::vector<bool> bits(cols, false);
    for (std::size_t i = 0; i < kept; ++i) bits[order[i]] = true;
    const ChannelMask mask(std::move(bits));

    MacCounter macs;
    for (int warm = 0; warm < 3; ++warm) sparse_matvec_into(x, packed, mask, y, macs);

    std::vector<double> samples;
    samples.reserve(iterations);
    for (std::size_t it = 0; it < iterations; ++it) {
      const auto t0 = std::chrono::steady_clock::now();
      sparse_matvec_into(x, packed, mask, y, macs);
      const auto t1 = std::chrono::steady_clock::now();
      samples.push_back(std::chrono::duration<double, std::nano>(t1 - t0).count());
    }
    std::nth_element(samples.begin(), samples.begin() + samples.size() / 2, samples.end());
    const double median = samples[samples.size() / 2];
    const double executed = static_cast<double>(rows) * static_cast<double>(kept);
    out.push_back({s, median, median > 0.0 ? executed / median : 0.0});
  }
  return out;
}

void write_bench_csv(std::ostream& os, std::span<const BenchPoint> points) {
  os << "sparsity,ns_per_op,gmacs_per_s\n";
  for (const auto& p : points) os << p.sparsity << ',' << p.ns_per_op << ',' << p.gmacs_per_s << '\n';
}

}  // namespace actsparse
