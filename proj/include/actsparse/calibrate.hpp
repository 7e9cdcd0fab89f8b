#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "actsparse/data.hpp"
#include "actsparse/model.hpp"

namespace actsparse {

struct AlphaGrid {
  double lo = 0.0;
  double hi = 1.5;
  double step = 0.05;

  void validate() const;

  /// lo, lo + step, ... up to and including hi (to 1e-9); 31 values at the defaults.
  std::vector<double> candidates() const;

  /// "lo:hi:step".
  static AlphaGrid parse(std::string_view text);
  std::string to_string() const;
};

using LayerRatios = std::array<double, kLayersPerBlock>;

struct AlphaTrial {
  std::size_t pass = 0;
  LayerKind layer{};
  double alpha = 0.0;
  double mse = 0.0;
};

struct AlphaSearchResult {
  LayerRatios alphas{};
  BlockStates states{};  // final states with thresholds from the last evaluation
  double final_mse = 0.0;
  double zero_alpha_mse = 0.0;
  std::size_t passes = 0;
  bool converged = false;
  std::vector<AlphaTrial> history;
};

/// Block output MSE against the cached dense outputs with per-layer keep
/// ratios and alphas. Every layer's threshold is re-derived, in forward order,
/// from the scores of the inputs it sees with the upstream layers already
/// sparse.
double block_mse(const Block& block, const ModelConfig& config, const BlockCalibCache& cache,
                 const LayerRatios& keep_ratios, const LayerRatios& alphas);

/// Coordinate descent over the seven layers in forward order. Each layer scans
/// the whole grid with the other layers held at their current alphas and keeps
/// the candidate with the lowest block MSE (ties go to the smaller alpha).
/// Passes repeat until one changes nothing or `max_passes` is reached.
AlphaSearchResult search_alpha_block(const Block& block, const ModelConfig& config,
                                     const BlockCalibCache& cache, const LayerRatios& keep_ratios,
                                     const AlphaGrid& grid, std::size_t max_passes = 8);

/// Per-block keep ratios and alphas for a whole model.
struct LayerSettings {
  std::vector<LayerRatios> keep_ratios;
  std::vector<LayerRatios> alphas;
};

/// Final thresholds from a sparse forward over the calibration inputs: block by
/// block, each layer pools the scores of the activations it receives and takes
/// the nearest-rank quantile at its keep ratio.
ModelStates fix_thresholds(const Model& model, const CalibrationCapture& capture,
                           const LayerSettings& settings);

}  // namespace actsparse
