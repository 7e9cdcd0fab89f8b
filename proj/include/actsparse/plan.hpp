#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "actsparse/allocate.hpp"
#include "actsparse/calibrate.hpp"
#include "actsparse/data.hpp"
#include "actsparse/model.hpp"

namespace actsparse {

inline constexpr std::string_view kToolVersion = "0.1.0";

struct LayerPlan {
  double sparsity = 0.0;
  double alpha = 0.0;
  float threshold = kKeepAllThreshold;
  std::uint64_t pool_size = 0;
};

struct PlanProvenance {
  std::uint64_t seed = 0;
  std::string tool_version{kToolVersion};
  std::string config_hash;
  EvoParams evo;
  AlphaGrid alpha_grid;
  double greedy_step = 0.05;
  std::size_t seq_len = 0;
  std::vector<ManifestEntry> calibration;
};

/// Everything needed to rebuild the sparse model from the dense weights.
struct SparsityPlan {
  double target = 0.0;
  ModelConfig config;
  std::vector<double> block_sparsity;
  std::vector<std::array<LayerPlan, kLayersPerBlock>> layers;
  PlanProvenance provenance;

  /// Parameter-weighted mean of the per-layer sparsities.
  double weighted_sparsity(const Model& model) const;

  /// Per-layer states for `model`; throws if the plan does not cover it.
  ModelStates to_states(const Model& model) const;

  std::string to_json() const;
  static SparsityPlan from_json(std::string_view text);

  void save(const std::filesystem::path& path) const;
  static SparsityPlan load(const std::filesystem::path& path);
};

/// Plan from final per-layer states (thresholds already fixed).
SparsityPlan make_plan(const Model& model, double target, const ModelStates& states,
                       const std::vector<double>& block_sparsity, PlanProvenance provenance);

/// Eight hex digits of CRC32 over `text`.
std::string config_hash(std::string_view text);

}  // namespace actsparse
