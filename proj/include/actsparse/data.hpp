#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "actsparse/model.hpp"

namespace actsparse {

/// Byte-level tokenizer: one token per byte.
std::vector<TokenId> tokenize(std::string_view text);

struct ManifestEntry {
  std::string path;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
};

struct CalibrationSet {
  std::vector<std::vector<TokenId>> sequences;
  std::vector<ManifestEntry> manifest;  // one entry per sequence, same order
  std::uint64_t seed = 0;
  std::vector<std::string> warnings;

  std::size_t token_count() const;

  /// The first `n` sequences (all of them when n is 0 or too large).
  CalibrationSet head(std::size_t n) const;
};

/// Cuts every file under `paths` (directories are walked recursively) into
/// non-overlapping windows of `seq_len` bytes and samples up to
/// `max_sequences` of them. Each input path receives a share of the quota
/// proportional to how many windows it holds. A file shorter than `seq_len`
/// contributes one short window.
CalibrationSet ingest_corpus(const std::vector<std::filesystem::path>& paths,
                             std::size_t max_sequences, std::size_t seq_len, std::uint64_t seed);

/// Dense activations at one block's entry and exit, one matrix per sequence.
struct BlockCalibCache {
  BlockBatch::Inputs inputs;
  std::vector<Mat32> dense_outputs;

  std::size_t token_count() const;
};

struct CalibrationCapture {
  std::vector<BlockCalibCache> blocks;
  std::vector<Mat32> dense_logits;  // per sequence [tokens x vocab]

  std::size_t sequence_count() const { return dense_logits.size(); }
};

/// One dense forward per sequence, caching every block's inputs and outputs
/// and the final logits.
CalibrationCapture capture_block_inputs(const Model& model, const CalibrationSet& calib);

}  // namespace actsparse
