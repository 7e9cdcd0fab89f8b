#include "actsparse/calibrate.hpp"

#include <cmath>
#include <stdexcept>

#include "actsparse/io.hpp"

namespace actsparse {

void AlphaGrid::validate() const {
  if (!std::isfinite(lo) || !std::isfinite(hi) || !std::isfinite(step)) {
    throw std::invalid_argument("alpha grid: bounds must be finite");
  }
  if (lo < 0.0) throw std::invalid_argument("alpha grid: lo must be >= 0");
  if (lo > hi) throw std::invalid_argument("alpha grid: lo > hi");
  if (!(step > 0.0)) throw std::invalid_argument("alpha grid: step must be positive");
}

std::vector<double> AlphaGrid::candidates() const {
  validate();
  const auto n = static_cast<std::size_t>(std::floor((hi - lo) / step + 1e-9)) + 1;
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::round((lo + static_cast<double>(i) * step) * 1e9) / 1e9;
  }
  return out;
}

AlphaGrid AlphaGrid::parse(std::string_view text) {
  const auto a = text.find(':');
  const auto b = a == std::string_view::npos ? a : text.find(':', a + 1);
  if (b == std::string_view::npos) {
    throw std::invalid_argument("alpha grid must look like lo:hi:step, got '" + std::string(text) + "'");
  }
  AlphaGrid g;
  g.lo = parse_double(text.substr(0, a));
  g.hi = parse_double(text.substr(a + 1, b - a - 1));
  g.step = parse_double(text.substr(b + 1));
  g.validate();
  return g;
}

std::string AlphaGrid::to_string() const {
  return format_double(lo) + ":" + format_double(hi) + ":" + format_double(step);
}

namespace {

BlockStates make_states(const Block& block, const LayerRatios& keep, const LayerRatios& alphas) {
  BlockStates st;
  for (LayerKind k : kAllLayers) {
    const auto i = layer_index(k);
    st[i] = SparsityState::make(block[k].col_norms(), alphas[i], keep[i]);
  }
  return st;
}

void check_cache(const BlockCalibCache& cache) {
  if (!cache.inputs || cache.inputs->empty()) throw std::invalid_argument("alpha search: empty calibration cache");
  if (cache.dense_outputs.size() != cache.inputs->size()) {
    throw std::invalid_argument("alpha search: cache outputs do not match inputs");
  }
}

}  // namespace

double block_mse(const Block& block, const ModelConfig& config, const BlockCalibCache& cache,
                 const LayerRatios& keep_ratios, const LayerRatios& alphas) {
  check_cache(cache);
  BlockBatch batch(block, config, cache.inputs);
  batch.set_states(make_states(block, keep_ratios, alphas), true);
  batch.run();
  return batch.mse_against(cache.dense_outputs);
}

AlphaSearchResult search_alpha_block(const Block& block, const ModelConfig& config,
                                     const BlockCalibCache& cache, const LayerRatios& keep_ratios,
                                     const AlphaGrid& grid, std::size_t max_passes) {
  check_cache(cache);
  const auto cands = grid.candidates();
  AlphaSearchResult res;
  res.alphas.fill(0.0);

  BlockBatch batch(block, config, cache.inputs);
  batch.set_states(make_states(block, keep_ratios, res.alphas), true);
  batch.run();
  res.zero_alpha_mse = batch.mse_against(cache.dense_outputs);

  // The grid need not contain 0, so start from its first candidate.
  for (LayerKind k : kAllLayers) {
    res.alphas[layer_index(k)] = cands.front();
    batch.state(k).set_alpha(block[k].col_norms(), cands.front());
  }
  batch.run();
  double current = batch.mse_against(cache.dense_outputs);

  for (std::size_t pass = 1; pass <= std::max<std::size_t>(max_passes, 1); ++pass) {
    res.passes = pass;
    bool changed = false;
    for (LayerKind k : kAllLayers) {
      const auto i = layer_index(k);
      // Keep-all and keep-none masks do not depend on alpha.
      if (keep_ratios[i] >= 1.0 || keep_ratios[i] <= 0.0) continue;
      double best_alpha = cands.front();
      double best = 0.0;
      for (std::size_t c = 0; c < cands.size(); ++c) {
        batch.state(k).set_alpha(block[k].col_norms(), cands[c]);
        batch.run(k);
        const double err = batch.mse_against(cache.dense_outputs);
        res.history.push_back({pass, k, cands[c], err});
        if (c == 0 || err < best) {
          best = err;
          best_alpha = cands[c];
        }
      }
      if (best_alpha != res.alphas[i]) changed = true;
      res.alphas[i] = best_alpha;
      batch.state(k).set_alpha(block[k].col_norms(), best_alpha);
      batch.run(k);
      current = batch.mse_against(cache.dense_outputs);
    }
    if (!changed) {
      res.converged = true;
      break;
    }
  }
  res.final_mse = current;
  res.states = batch.states();
  return res;
}

ModelStates fix_thresholds(const Model& model, const CalibrationCapture& capture,
                           const LayerSettings& settings) {
  const std::size_t nb = model.blocks.size();
  if (capture.blocks.size() != nb || !capture.blocks.front().inputs) {
    throw std::invalid_argument("fix_thresholds: missing calibration activations");
  }
  if (settings.keep_ratios.size() != nb || settings.alphas.size() != nb) {
    throw std::invalid_argument("fix_thresholds: settings do not cover every block");
  }
  ModelStates out(nb);
  BlockBatch::Inputs x = capture.blocks.front().inputs;
  for (std::size_t b = 0; b < nb; ++b) {
    BlockBatch batch(model.blocks[b], model.config, x);
    batch.set_states(make_states(model.blocks[b], settings.keep_ratios[b], settings.alphas[b]), true);
    batch.run();
    out[b] = batch.states();
    x = std::make_shared<const std::vector<Mat32>>(batch.outputs());
  }
  return out;
}

}  // namespace actsparse
