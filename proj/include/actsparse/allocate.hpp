#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "actsparse/calibrate.hpp"
#include "actsparse/data.hpp"
#include "actsparse/model.hpp"

namespace actsparse {

struct EvoParams {
  std::size_t generations = 400;
  std::size_t offspring = 64;
  double step = 0.005;
  double mutable_fraction = 0.10;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Per-block sparsities kept on the lattice target + k * step so the budget
/// constraint can be checked in exact integer arithmetic.
struct BlockAllocation {
  double target = 0.0;
  double step = 0.005;
  std::vector<std::int64_t> offsets;  // k per block
  std::size_t generation = 0;

  static BlockAllocation uniform(std::size_t n_blocks, double target, double step);

  double sparsity(std::size_t b) const { return target + static_cast<double>(offsets[b]) * step; }
  std::vector<double> sparsities() const;
  std::size_t size() const { return offsets.size(); }
};

double weighted_average(std::span<const double> values, std::span<const std::uint64_t> weights);

/// Number of increments one mutation applies: floor(n * fraction), at least 1.
std::size_t mutation_count(std::size_t n_blocks, double mutable_fraction);

/// Adds `step` to randomly chosen blocks (with replacement), then removes
/// `step` from random blocks while the weighted average is above the target.
/// Draws that would leave [0, 1], or drop the average more than step / 2 below
/// the target while another block could move instead, are redrawn.
BlockAllocation mutate_candidate(const BlockAllocation& parent,
                                 std::span<const std::uint64_t> weights, const EvoParams& params,
                                 std::mt19937_64& rng);

/// Token-averaged KL(dense || sparse) over a calibration set, with every
/// layer of block b keeping 1 - p_b of its channels at alpha 0. Thresholds are
/// re-derived block by block on the sparse activations.
class AllocationObjective {
 public:
  AllocationObjective(const Model& model, const CalibrationCapture& capture);

  /// Per-block activations from one evaluation, reusable as a prefix cache.
  struct Run {
    std::vector<double> sparsity;
    std::vector<BlockBatch::Inputs> block_inputs;
    double loss = 0.0;
  };

  /// Evaluates `sparsity`, reusing blocks of `reuse` up to the first block
  /// whose sparsity differs.
  Run run(const std::vector<double>& sparsity, const Run* reuse = nullptr) const;
  double evaluate(const std::vector<double>& sparsity) const { return run(sparsity).loss; }

  std::size_t block_count() const { return model_->blocks.size(); }

 private:
  double loss_of(const std::vector<Mat32>& hidden) const;

  const Model* model_;
  BlockBatch::Inputs embeddings_;
  std::vector<std::vector<double>> dense_logp_;  // per sequence, [tokens x vocab]
};

struct GenerationRecord {
  std::size_t generation = 0;
  double incumbent_loss = 0.0;
  std::vector<double> candidate_averages;
  std::vector<double> candidate_losses;
};

struct EvoResult {
  BlockAllocation best;
  double best_loss = 0.0;
  double uniform_loss = 0.0;
  std::vector<GenerationRecord> trace;
};

/// Mutation-only evolution from the uniform allocation. Each generation's best
/// offspring becomes the next parent; the best allocation seen so far is the
/// incumbent and the result, so the incumbent loss never increases.
EvoResult block_level_allocation(const AllocationObjective& objective,
                                 std::span<const std::uint64_t> weights, double target,
                                 const EvoParams& params);

struct GreedyStep {
  std::size_t step = 0;
  LayerKind chosen{};
  double increment = 0.0;
  double error = 0.0;
  std::vector<std::pair<LayerKind, double>> trials;
};

struct LayerAllocation {
  double budget = 0.0;
  LayerRatios sparsity{};
  double effective = 0.0;
  double final_error = 0.0;
  std::vector<GreedyStep> trace;
};

/// Parameter-weighted mean sparsity over `layers`.
double effective_sparsity(const Block& block, const LayerRatios& sparsity,
                          std::span<const LayerKind> layers);

/// Greedy split of a block budget across `layers` (all seven by default):
/// each step adds `delta` to the layer whose increment gives the smallest
/// block reconstruction error at alpha 0, until the effective sparsity reaches
/// the budget. The last increment is cut so the budget is met exactly.
/// Layers outside `layers` stay dense.
LayerAllocation intra_block_allocation(const Block& block, const ModelConfig& config,
                                       const BlockCalibCache& cache, double budget, double delta,
                                       std::span<const LayerKind> layers = kAllLayers);

}  // namespace actsparse
