#include "actsparse/allocate.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace actsparse {

void EvoParams::validate() const {
  if (offspring == 0) throw std::invalid_argument("evolution: offspring must be positive");
  if (!(step > 0.0) || step > 1.0) throw std::invalid_argument("evolution: step must be in (0, 1]");
  if (!(mutable_fraction > 0.0) || mutable_fraction > 1.0) {
    throw std::invalid_argument("evolution: mutable fraction must be in (0, 1]");
  }
}

BlockAllocation BlockAllocation::uniform(std::size_t n_blocks, double target, double step) {
  BlockAllocation a;
  a.target = target;
  a.step = step;
  a.offsets.assign(n_blocks, 0);
  return a;
}

std::vector<double> BlockAllocation::sparsities() const {
  std::vector<double> out(offsets.size());
  for (std::size_t b = 0; b < out.size(); ++b) out[b] = sparsity(b);
  return out;
}

double weighted_average(std::span<const double> values, std::span<const std::uint64_t> weights) {
  if (values.size() != weights.size() || values.empty()) {
    throw std::invalid_argument("weighted_average: size mismatch");
  }
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    num += values[i] * static_cast<double>(weights[i]);
    den += static_cast<double>(weights[i]);
  }
  if (den <= 0.0) throw std::invalid_argument("weighted_average: weights sum to zero");
  return num / den;
}

std::size_t mutation_count(std::size_t n_blocks, double mutable_fraction) {
  const auto n = static_cast<std::size_t>(std::floor(static_cast<double>(n_blocks) * mutable_fraction + 1e-9));
  return std::max<std::size_t>(n, 1);
}

namespace {

// Sign of sum_b w_b * k_b, i.e. of (weighted average - target), without rounding.
std::int64_t excess(const BlockAllocation& a, std::span<const std::uint64_t> w) {
  std::int64_t s = 0;
  for (std::size_t b = 0; b < a.offsets.size(); ++b) s += static_cast<std::int64_t>(w[b]) * a.offsets[b];
  return s;
}

bool movable(const BlockAllocation& a, std::size_t b, int dir) {
  const double p = a.target + static_cast<double>(a.offsets[b] + dir) * a.step;
  return p >= -1e-12 && p <= 1.0 + 1e-12;
}

// Uniform draw over the blocks that can move one step in `dir` and satisfy `ok`.
template <typename Pred>
std::size_t draw_block(const BlockAllocation& a, int dir, std::mt19937_64& rng, Pred ok) {
  std::uniform_int_distribution<std::size_t> pick(0, a.size() - 1);
  for (;;) {
    const std::size_t b = pick(rng);
    if (movable(a, b, dir) && ok(b)) return b;
  }
}

std::size_t draw_block(const BlockAllocation& a, int dir, std::mt19937_64& rng) {
  return draw_block(a, dir, rng, [](std::size_t) { return true; });
}

// A decrement that would leave the average more than half a step under the
// target is only taken when no other block can move.
std::size_t draw_decrement(const BlockAllocation& a, std::span<const std::uint64_t> w, std::mt19937_64& rng) {
  const std::int64_t e = excess(a, w);
  const auto total = static_cast<std::int64_t>(std::accumulate(w.begin(), w.end(), std::uint64_t{0}));
  auto lands = [&](std::size_t b) { return 2 * (e - static_cast<std::int64_t>(w[b])) >= -total; };
  for (std::size_t b = 0; b < a.size(); ++b) {
    if (movable(a, b, -1) && lands(b)) return draw_block(a, -1, rng, lands);
  }
  return draw_block(a, -1, rng);
}

}  // namespace

BlockAllocation mutate_candidate(const BlockAllocation& parent,
                                 std::span<const std::uint64_t> weights, const EvoParams& params,
                                 std::mt19937_64& rng) {
  if (weights.size() != parent.size() || parent.offsets.empty()) {
    throw std::invalid_argument("mutate: weights do not match the allocation");
  }
  BlockAllocation child = parent;
  auto can_move = [&](int dir) {
    for (std::size_t b = 0; b < child.size(); ++b) {
      if (movable(child, b, dir)) return true;
    }
    return false;
  };
  const std::size_t n = mutation_count(child.size(), params.mutable_fraction);
  for (std::size_t i = 0; i < n && can_move(+1); ++i) ++child.offsets[draw_block(child, +1, rng)];
  while (excess(child, weights) > 0 && can_move(-1)) --child.offsets[draw_decrement(child, weights, rng)];
  return child;
}

// ---------------------------------------------------------------------------

AllocationObjective::AllocationObjective(const Model& model, const CalibrationCapture& capture)
    : model_(&model) {
  if (capture.dense_logits.empty() || capture.blocks.size() != model.blocks.size()) {
    throw std::invalid_argument("allocation objective: empty calibration set");
  }
  embeddings_ = capture.blocks.front().inputs;
  for (const Mat32& logits : capture.dense_logits) {
    std::vector<double> lp;
    lp.reserve(logits.values.size());
    for (std::size_t t = 0; t < logits.rows; ++t) {
      const auto row = log_softmax(logits.row(t));
      lp.insert(lp.end(), row.begin(), row.end());
    }
    dense_logp_.push_back(std::move(lp));
  }
}

double AllocationObjective::loss_of(const std::vector<Mat32>& hidden) const {
  const double log_floor = std::log(kKlFloor);
  double total = 0.0;
  for (std::size_t s = 0; s < hidden.size(); ++s) {
    const Mat32 logits = compute_logits(*model_, hidden[s]);
    const std::size_t v = logits.cols;
    double seq = 0.0;
    for (std::size_t t = 0; t < logits.rows; ++t) {
      const auto lq = log_softmax(logits.row(t));
      const double* lp = dense_logp_[s].data() + t * v;
      double kl = 0.0;
      for (std::size_t i = 0; i < v; ++i) {
        const double p = std::exp(lp[i]);
        if (p > 0.0) kl += p * (lp[i] - std::max(lq[i], log_floor));
      }
      seq += kl;
    }
    total += seq / static_cast<double>(logits.rows);
  }
  return total / static_cast<double>(hidden.size());
}

AllocationObjective::Run AllocationObjective::run(const std::vector<double>& sparsity,
                                                  const Run* reuse) const {
  const std::size_t nb = model_->blocks.size();
  if (sparsity.size() != nb) throw std::invalid_argument("allocation objective: wrong block count");
  Run r;
  r.sparsity = sparsity;
  r.block_inputs.resize(nb + 1);
  r.block_inputs[0] = embeddings_;
  std::size_t from = 0;
  if (reuse != nullptr && reuse->block_inputs.size() == nb + 1) {
    while (from < nb && reuse->sparsity[from] == sparsity[from]) {
      r.block_inputs[from + 1] = reuse->block_inputs[from + 1];
      ++from;
    }
    if (from == nb) {
      r.loss = reuse->loss;
      return r;
    }
  }
  for (std::size_t b = from; b < nb; ++b) {
    const Block& blk = model_->blocks[b];
    BlockBatch batch(blk, model_->config, r.block_inputs[b]);
    if (sparsity[b] > 0.0) batch.set_states(uniform_states(blk, 1.0 - sparsity[b]), true);
    batch.run();
    r.block_inputs[b + 1] = std::make_shared<const std::vector<Mat32>>(batch.outputs());
  }
  r.loss = loss_of(*r.block_inputs[nb]);
  return r;
}

EvoResult block_level_allocation(const AllocationObjective& objective,
                                 std::span<const std::uint64_t> weights, double target,
                                 const EvoParams& params) {
  params.validate();
  if (!(target >= 0.0 && target <= 1.0)) throw std::invalid_argument("evolution: target outside [0, 1]");
  if (weights.size() != objective.block_count()) throw std::invalid_argument("evolution: weight count mismatch");

  EvoResult res;
  BlockAllocation parent = BlockAllocation::uniform(objective.block_count(), target, params.step);
  auto parent_run = objective.run(parent.sparsities());
  res.uniform_loss = parent_run.loss;
  res.best = parent;
  res.best_loss = parent_run.loss;

  std::mt19937_64 rng(params.seed);
  for (std::size_t g = 1; g <= params.generations; ++g) {
    GenerationRecord rec;
    rec.generation = g;
    std::optional<BlockAllocation> best;
    AllocationObjective::Run best_run;
    for (std::size_t o = 0; o < params.offspring; ++o) {
      BlockAllocation child = mutate_candidate(parent, weights, params, rng);
      child.generation = g;
      const auto p = child.sparsities();
      auto run = objective.run(p, &parent_run);
      rec.candidate_averages.push_back(weighted_average(p, weights));
      rec.candidate_losses.push_back(run.loss);
      if (!best || run.loss < best_run.loss) {
        best = std::move(child);
        best_run = std::move(run);
      }
    }
    parent = std::move(*best);
    parent_run = std::move(best_run);
    if (parent_run.loss < res.best_loss) {
      res.best = parent;
      res.best_loss = parent_run.loss;
    }
    rec.incumbent_loss = res.best_loss;
    res.trace.push_back(std::move(rec));
  }
  return res;
}

// ---------------------------------------------------------------------------

double effective_sparsity(const Block& block, const LayerRatios& sparsity,
                          std::span<const LayerKind> layers) {
  double num = 0.0, den = 0.0;
  for (LayerKind k : layers) {
    const auto w = static_cast<double>(block[k].params());
    num += w * sparsity[layer_index(k)];
    den += w;
  }
  return den > 0.0 ? num / den : 0.0;
}

LayerAllocation intra_block_allocation(const Block& block, const ModelConfig& config,
                                       const BlockCalibCache& cache, double budget, double delta,
                                       std::span<const LayerKind> layers) {
  if (!(budget >= 0.0 && budget <= 1.0)) throw std::invalid_argument("greedy: budget outside [0, 1]");
  if (!(delta > 0.0)) throw std::invalid_argument("greedy: step must be positive");
  if (layers.empty()) throw std::invalid_argument("greedy: no participating layers");
  if (!cache.inputs || cache.inputs->empty()) throw std::invalid_argument("greedy: empty calibration cache");

  LayerAllocation res;
  res.budget = budget;
  res.sparsity.fill(0.0);
  double total_w = 0.0;
  for (LayerKind k : layers) total_w += static_cast<double>(block[k].params());

  BlockBatch base(block, config, cache.inputs);
  base.set_states(uniform_states(block, 1.0), true);
  base.run();
  res.final_error = base.mse_against(cache.dense_outputs);

  constexpr double kTol = 1e-9;
  for (std::size_t step = 1; effective_sparsity(block, res.sparsity, layers) < budget - kTol; ++step) {
    const double eff = effective_sparsity(block, res.sparsity, layers);
    GreedyStep rec;
    rec.step = step;
    std::optional<BlockBatch> chosen;
    double best_inc = 0.0;
    for (LayerKind k : layers) {
      const auto i = layer_index(k);
      if (res.sparsity[i] >= 1.0 - kTol) continue;
      const double needed = (budget - eff) * total_w / static_cast<double>(block[k].params());
      const double inc = std::min({delta, 1.0 - res.sparsity[i], needed});
      BlockBatch trial = base;
      trial.state(k).keep_ratio = std::max(0.0, 1.0 - (res.sparsity[i] + inc));
      trial.run(k);
      const double err = trial.mse_against(cache.dense_outputs);
      rec.trials.push_back({k, err});
      if (!chosen || err < rec.error) {
        rec.error = err;
        rec.chosen = k;
        best_inc = inc;
        chosen = std::move(trial);
      }
    }
    if (!chosen) throw std::runtime_error("greedy: budget unreachable, every layer is saturated");
    res.sparsity[layer_index(rec.chosen)] += best_inc;
    rec.increment = best_inc;
    base = std::move(*chosen);
    res.final_error = rec.error;
    res.trace.push_back(std::move(rec));
  }
  res.effective = effective_sparsity(block, res.sparsity, layers);
  return res;
}

}  // namespace actsparse
