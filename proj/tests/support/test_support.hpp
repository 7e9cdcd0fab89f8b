#pragma once

// Shared fixtures for the unit and acceptance tests: deterministic corpora,
// random tensors, and a loop-by-loop reference forward pass that shares no
// code with the library kernels.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "actsparse/data.hpp"
#include "actsparse/model.hpp"

namespace testsupport {

using actsparse::Block;
using actsparse::BlockStates;
using actsparse::Mat32;
using actsparse::Model;
using actsparse::ModelConfig;
using actsparse::TokenId;
using actsparse::Vec32;

/// Pseudo-English text built from a fixed syllable inventory.
std::string pseudo_text(std::size_t bytes, std::uint64_t seed);

class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path write(const std::string& name, const std::string& contents) const;

 private:
  std::filesystem::path path_;
};

Mat32 random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double scale = 1.0);
Vec32 random_vector(std::size_t n, std::mt19937_64& rng, double scale = 1.0);

/// Small model for fast tests.
ModelConfig tiny_config();

/// Calibration set of `n` sequences of `len` bytes drawn from pseudo text.
actsparse::CalibrationSet text_set(std::size_t n, std::size_t len, std::uint64_t seed);

// Reference forward: straightforward loops, double accumulation, masks from
// the |x| * max(g, 1e-4)^alpha >= tau rule written out inline.
Mat32 reference_block(const Block& block, const ModelConfig& config, const Mat32& x,
                      const BlockStates* states);
Mat32 reference_logits(const Model& model, const std::vector<TokenId>& tokens,
                       const std::vector<BlockStates>* states);

double max_abs_diff(const Mat32& a, const Mat32& b);
double max_abs_diff(const Vec32& a, const Vec32& b);

}  // namespace testsupport
