#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "actsparse/allocate.hpp"
#include "actsparse/calibrate.hpp"
#include "actsparse/data.hpp"
#include "actsparse/model.hpp"
#include "actsparse/plan.hpp"
#include "actsparse/report.hpp"

namespace actsparse {

/// Which prefill positions run sparse. Decode steps are always sparse.
enum class PrefillPolicy { first_half, second_half, all, none };

PrefillPolicy parse_prefill_policy(std::string_view name);
std::string_view prefill_policy_name(PrefillPolicy p);

/// Per-position sparse flags for a prompt of `length` tokens.
std::vector<std::uint8_t> prefill_flags(std::size_t length, PrefillPolicy policy);

/// Raised by run_pipeline; the message names the failing stage.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what);
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct PipelineOptions {
  double target = 0.5;
  std::uint64_t seed = 0;
  EvoParams evo;
  AlphaGrid grid;
  double greedy_step = 0.05;
  std::size_t evo_sequences = 8;     // leading calibration sequences scored by the coarse search
  std::size_t search_sequences = 0;  // leading sequences for greedy and alpha search; 0 = all
  std::size_t alpha_max_passes = 8;

  /// Canonical text of every option, hashed into reports.
  std::string describe(const ModelConfig& config) const;
};

struct PipelineResult {
  SparsityPlan plan;
  EvoResult evolution;
  std::vector<LayerAllocation> layer_allocations;
  std::vector<AlphaSearchResult> alpha_searches;
  ModelStates states;
};

/// Block allocation, then per-block layer allocation, then per-block alpha
/// search, then final thresholds.
PipelineResult run_pipeline(const Model& model, const CalibrationSet& calib,
                            const PipelineOptions& options);

/// Block weights for the coarse search (parameter counts).
std::vector<std::uint64_t> block_weights(const Model& model);

/// Uniform keep ratios at alpha 0, thresholds fixed on `capture`.
ModelStates activation_only_states(const Model& model, const CalibrationCapture& capture, double target);

// ---------------------------------------------------------------------------

struct EvalReport {
  std::size_t sequences = 0;
  std::size_t tokens = 0;
  double dense_ppl = 0.0;
  std::optional<double> sparse_ppl;
  std::optional<double> kl;
  double mac_ratio = 1.0;
  MacCounter macs;
  double dense_tokens_per_s = 0.0;
  std::optional<double> sparse_tokens_per_s;
};

/// Teacher-forced perplexity of the dense model and, with `states`, of the
/// sparse model plus the mean per-position KL(dense || sparse).
EvalReport run_eval(const Model& model, const ModelStates* states, const CalibrationSet& heldout,
                    PrefillPolicy policy);

struct SweepRow {
  std::size_t block = 0;
  double level = 0.0;
  double ppl = 0.0;
  double delta_ppl_pct = 0.0;
};

struct SweepResult {
  double dense_ppl = 0.0;
  std::vector<SweepRow> rows;

  /// Population variance of delta_ppl_pct across blocks at `level`.
  double variance_at(double level) const;
};

/// One block at a time at uniform sparsity `level` (alpha 0), every other
/// block dense; thresholds come from that block's calibration inputs.
SweepResult run_sweep(const Model& model, const CalibrationCapture& capture,
                      const CalibrationSet& heldout, const std::vector<double>& levels,
                      PrefillPolicy policy);

struct BenchReport {
  std::size_t generated = 0;
  double dense_tokens_per_s = 0.0;
  double sparse_tokens_per_s = 0.0;
  double mac_ratio = 1.0;
  std::vector<TokenId> dense_tokens;
  std::vector<TokenId> sparse_tokens;
};

/// Greedy decoding of `n_tokens` after `prompt`; median of `runs` timings.
BenchReport run_bench(const Model& model, const ModelStates& states, const std::vector<TokenId>& prompt,
                      std::size_t n_tokens, PrefillPolicy policy, std::size_t runs = 3);

struct AblationRow {
  std::string name;
  double kl = 0.0;
  double sparse_ppl = 0.0;
  double dense_ppl = 0.0;
  double mac_ratio = 0.0;
  double planned_sparsity = 0.0;
};

/// Activation only, then weight-aware scores, then block allocation, then
/// layer allocation; each row evaluated on `heldout`.
std::vector<AblationRow> run_ablate(const Model& model, const CalibrationSet& calib,
                                    const CalibrationSet& heldout, const PipelineOptions& options,
                                    PrefillPolicy policy);

// ---------------------------------------------------------------------------
// Report tables.

CsvTable alpha_table(const Provenance& prov, const PipelineResult& result);
CsvTable allocation_table(const Provenance& prov, const Model& model, const SparsityPlan& plan);
CsvTable greedy_trace_table(const Provenance& prov, const PipelineResult& result);
CsvTable evolution_table(const Provenance& prov, const EvoResult& evo);
CsvTable eval_table(const Provenance& prov, const EvalReport& report);
CsvTable sweep_table(const Provenance& prov, const SweepResult& sweep);
CsvTable bench_table(const Provenance& prov, const BenchReport& bench);
CsvTable ablation_table(const Provenance& prov, const std::vector<AblationRow>& rows);

}  // namespace actsparse
