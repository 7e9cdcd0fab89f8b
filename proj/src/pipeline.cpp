#include "actsparse/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "actsparse/io.hpp"

namespace actsparse {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

CalibrationCapture head(const CalibrationCapture& cap, std::size_t n) {
  if (n == 0 || n >= cap.sequence_count()) return cap;
  CalibrationCapture out;
  out.dense_logits.assign(cap.dense_logits.begin(), cap.dense_logits.begin() + static_cast<std::ptrdiff_t>(n));
  for (const auto& blk : cap.blocks) {
    BlockCalibCache c;
    c.inputs = std::make_shared<const std::vector<Mat32>>(blk.inputs->begin(),
                                                          blk.inputs->begin() + static_cast<std::ptrdiff_t>(n));
    c.dense_outputs.assign(blk.dense_outputs.begin(), blk.dense_outputs.begin() + static_cast<std::ptrdiff_t>(n));
    out.blocks.push_back(std::move(c));
  }
  return out;
}

template <typename F>
auto stage(const char* name, F&& f) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

LayerRatios uniform_ratios(double v) {
  LayerRatios r;
  r.fill(v);
  return r;
}

LayerRatios keep_from_sparsity(const LayerRatios& s) {
  LayerRatios r;
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = 1.0 - s[i];
  return r;
}

std::vector<AlphaSearchResult> search_alphas(const Model& model, const CalibrationCapture& cap,
                                             const std::vector<LayerRatios>& keep,
                                             const PipelineOptions& options) {
  std::vector<AlphaSearchResult> out;
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    out.push_back(search_alpha_block(model.blocks[b], model.config, cap.blocks[b], keep[b], options.grid,
                                     options.alpha_max_passes));
  }
  return out;
}

LayerSettings settings_from(const std::vector<LayerRatios>& keep, const std::vector<AlphaSearchResult>* alphas) {
  LayerSettings s;
  s.keep_ratios = keep;
  for (std::size_t b = 0; b < keep.size(); ++b) {
    s.alphas.push_back(alphas ? (*alphas)[b].alphas : uniform_ratios(0.0));
  }
  return s;
}

double nll_of(const Mat32& logits, std::span<const TokenId> tokens, std::size_t& count) {
  double nll = 0.0;
  for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
    nll -= log_softmax(logits.row(t))[tokens[t + 1]];
    ++count;
  }
  return nll;
}

std::string fmt(double v) { return format_double(v); }

}  // namespace

PrefillPolicy parse_prefill_policy(std::string_view name) {
  if (name == "first_half") return PrefillPolicy::first_half;
  if (name == "second_half") return PrefillPolicy::second_half;
  if (name == "all") return PrefillPolicy::all;
  if (name == "none") return PrefillPolicy::none;
  throw std::invalid_argument("unknown prefill policy '" + std::string(name) + "'");
}

std::string_view prefill_policy_name(PrefillPolicy p) {
  switch (p) {
    case PrefillPolicy::first_half: return "first_half";
    case PrefillPolicy::second_half: return "second_half";
    case PrefillPolicy::all: return "all";
    case PrefillPolicy::none: return "none";
  }
  return "?";
}

std::vector<std::uint8_t> prefill_flags(std::size_t length, PrefillPolicy policy) {
  std::vector<std::uint8_t> f(length, 0);
  const std::size_t half = length / 2;
  for (std::size_t t = 0; t < length; ++t) {
    switch (policy) {
      case PrefillPolicy::first_half: f[t] = t < half; break;
      case PrefillPolicy::second_half: f[t] = t >= half; break;
      case PrefillPolicy::all: f[t] = 1; break;
      case PrefillPolicy::none: f[t] = 0; break;
    }
  }
  return f;
}

StageError::StageError(std::string stage, const std::string& what)
    : std::runtime_error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}

std::string PipelineOptions::describe(const ModelConfig& config) const {
  std::ostringstream os;
  os << config.to_text() << "target=" << format_double(target) << "\nseed=" << seed
     << "\nevo_generations=" << evo.generations << "\nevo_offspring=" << evo.offspring
     << "\nevo_step=" << format_double(evo.step) << "\nevo_mutable_frac=" << format_double(evo.mutable_fraction)
     << "\nalpha_grid=" << grid.to_string() << "\ngreedy_step=" << format_double(greedy_step)
     << "\nevo_sequences=" << evo_sequences << "\nsearch_sequences=" << search_sequences
     << "\nalpha_max_passes=" << alpha_max_passes << '\n';
  return os.str();
}

std::vector<std::uint64_t> block_weights(const Model& model) {
  std::vector<std::uint64_t> w;
  for (const auto& b : model.blocks) w.push_back(b.params());
  return w;
}

ModelStates activation_only_states(const Model& model, const CalibrationCapture& capture, double target) {
  const std::vector<LayerRatios> keep(model.blocks.size(), uniform_ratios(1.0 - target));
  return fix_thresholds(model, capture, settings_from(keep, nullptr));
}

PipelineResult run_pipeline(const Model& model, const CalibrationSet& calib, const PipelineOptions& options) {
  if (!(options.target >= 0.0 && options.target < 1.0)) {
    throw StageError("setup", "target sparsity must be in [0, 1)");
  }
  const std::size_t nb = model.blocks.size();
  const auto capture = stage("capture", [&] { return capture_block_inputs(model, calib); });
  const auto evo_cap = head(capture, options.evo_sequences);
  const auto search_cap = head(capture, options.search_sequences);

  PipelineResult res;
  res.evolution = stage("block allocation", [&] {
    AllocationObjective objective(model, evo_cap);
    EvoParams p = options.evo;
    p.seed = options.seed;
    return block_level_allocation(objective, block_weights(model), options.target, p);
  });
  const auto block_sparsity = res.evolution.best.sparsities();

  res.layer_allocations = stage("layer allocation", [&] {
    std::vector<LayerAllocation> out;
    for (std::size_t b = 0; b < nb; ++b) {
      out.push_back(intra_block_allocation(model.blocks[b], model.config, search_cap.blocks[b],
                                           block_sparsity[b], options.greedy_step));
    }
    return out;
  });
  std::vector<LayerRatios> keep;
  for (const auto& la : res.layer_allocations) keep.push_back(keep_from_sparsity(la.sparsity));

  res.alpha_searches = stage("alpha search", [&] { return search_alphas(model, search_cap, keep, options); });

  res.states = stage("thresholds", [&] {
    return fix_thresholds(model, capture, settings_from(keep, &res.alpha_searches));
  });

  PlanProvenance prov;
  prov.seed = options.seed;
  prov.config_hash = config_hash(options.describe(model.config));
  prov.evo = options.evo;
  prov.evo.seed = options.seed;
  prov.alpha_grid = options.grid;
  prov.greedy_step = options.greedy_step;
  for (const auto& s : calib.sequences) prov.seq_len = std::max(prov.seq_len, s.size());
  prov.calibration = calib.manifest;
  res.plan = make_plan(model, options.target, res.states, block_sparsity, std::move(prov));
  for (std::size_t b = 0; b < nb; ++b) {
    for (LayerKind k : kAllLayers) {
      res.plan.layers[b][layer_index(k)].sparsity = res.layer_allocations[b].sparsity[layer_index(k)];
    }
  }
  return res;
}

// ---------------------------------------------------------------------------

EvalReport run_eval(const Model& model, const ModelStates* states, const CalibrationSet& heldout,
                    PrefillPolicy policy) {
  if (heldout.sequences.empty()) throw std::invalid_argument("eval: missing held-out data");
  EvalReport rep;
  rep.sequences = heldout.sequences.size();
  double dense_nll = 0.0, sparse_nll = 0.0, kl_sum = 0.0;
  std::size_t count = 0, sparse_count = 0, positions = 0;
  double dense_time = 0.0, sparse_time = 0.0;
  const double log_floor = std::log(kKlFloor);

  for (const auto& seq : heldout.sequences) {
    rep.tokens += seq.size();
    MacCounter dense_macs;
    auto t0 = Clock::now();
    const ForwardTrace dense = model_forward(model, seq, nullptr, dense_macs);
    dense_time += seconds_since(t0);
    dense_nll += nll_of(dense.logits, seq, count);
    if (states == nullptr) continue;

    const auto flags = prefill_flags(seq.size(), policy);
    t0 = Clock::now();
    const ForwardTrace sparse = model_forward(model, seq, states, rep.macs, flags);
    sparse_time += seconds_since(t0);
    sparse_nll += nll_of(sparse.logits, seq, sparse_count);
    for (std::size_t t = 0; t < seq.size(); ++t) {
      const auto lp = log_softmax(dense.logits.row(t));
      const auto lq = log_softmax(sparse.logits.row(t));
      double kl = 0.0;
      for (std::size_t i = 0; i < lp.size(); ++i) {
        const double p = std::exp(lp[i]);
        if (p > 0.0) kl += p * (lp[i] - std::max(lq[i], log_floor));
      }
      kl_sum += kl;
      ++positions;
    }
  }
  if (count == 0) throw std::invalid_argument("eval: held-out sequences need at least two tokens");
  rep.dense_ppl = std::exp(dense_nll / static_cast<double>(count));
  rep.dense_tokens_per_s = dense_time > 0.0 ? static_cast<double>(rep.tokens) / dense_time : 0.0;
  if (states != nullptr) {
    rep.sparse_ppl = std::exp(sparse_nll / static_cast<double>(sparse_count));
    rep.kl = kl_sum / static_cast<double>(positions);
    rep.mac_ratio = mac_ratio(rep.macs);
    rep.sparse_tokens_per_s = sparse_time > 0.0 ? static_cast<double>(rep.tokens) / sparse_time : 0.0;
  }
  return rep;
}

double SweepResult::variance_at(double level) const {
  std::vector<double> v;
  for (const auto& r : rows) {
    if (std::fabs(r.level - level) < 1e-12) v.push_back(r.delta_ppl_pct);
  }
  if (v.empty()) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  return var / static_cast<double>(v.size());
}

SweepResult run_sweep(const Model& model, const CalibrationCapture& capture, const CalibrationSet& heldout,
                      const std::vector<double>& levels, PrefillPolicy policy) {
  for (double s : levels) {
    if (!(s >= 0.0 && s < 1.0)) throw std::invalid_argument("sweep: levels must lie in [0, 1)");
  }
  SweepResult res;
  res.dense_ppl = run_eval(model, nullptr, heldout, policy).dense_ppl;
  ModelStates states;
  for (const auto& b : model.blocks) states.push_back(keep_all_states(b));
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    for (double s : levels) {
      BlockBatch batch(model.blocks[b], model.config, capture.blocks.at(b).inputs);
      batch.set_states(uniform_states(model.blocks[b], 1.0 - s), true);
      batch.run();
      ModelStates trial = states;
      trial[b] = batch.states();
      const double ppl = *run_eval(model, &trial, heldout, policy).sparse_ppl;
      res.rows.push_back({b, s, ppl, 100.0 * (ppl - res.dense_ppl) / res.dense_ppl});
    }
  }
  return res;
}

BenchReport run_bench(const Model& model, const ModelStates& states, const std::vector<TokenId>& prompt,
                      std::size_t n_tokens, PrefillPolicy policy, std::size_t runs) {
  if (prompt.empty()) throw std::invalid_argument("bench: empty prompt");
  if (n_tokens == 0) throw std::invalid_argument("bench: n_tokens must be positive");
  if (prompt.size() + n_tokens - 1 > model.config.max_seq) {
    throw std::invalid_argument("bench: prompt plus generated tokens exceed max_seq");
  }
  BenchReport rep;
  rep.generated = n_tokens;
  const auto flags = prefill_flags(prompt.size(), policy);
  auto decode = [&](const ModelStates* st, std::vector<TokenId>& out, MacCounter& macs) {
    DecodeSession sess(model, st);
    Vec32 logits;
    for (std::size_t i = 0; i < prompt.size(); ++i) logits = sess.step(prompt[i], flags[i] != 0);
    out.clear();
    for (std::size_t i = 0; i < n_tokens; ++i) {
      const auto tok = static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
      out.push_back(tok);
      if (i + 1 < n_tokens) logits = sess.step(tok, true);
    }
    macs = sess.macs();
  };
  auto median_tps = [&](const ModelStates* st, std::vector<TokenId>& out, MacCounter& macs) {
    std::vector<double> tps;
    for (std::size_t r = 0; r < std::max<std::size_t>(runs, 1); ++r) {
      const auto t0 = Clock::now();
      decode(st, out, macs);
      const double dt = seconds_since(t0);
      tps.push_back(dt > 0.0 ? static_cast<double>(n_tokens) / dt : 0.0);
    }
    std::sort(tps.begin(), tps.end());
    return tps[tps.size() / 2];
  };
  MacCounter dense_macs, sparse_macs;
  rep.dense_tokens_per_s = median_tps(nullptr, rep.dense_tokens, dense_macs);
  rep.sparse_tokens_per_s = median_tps(&states, rep.sparse_tokens, sparse_macs);
  rep.mac_ratio = mac_ratio(sparse_macs);
  return rep;
}

std::vector<AblationRow> run_ablate(const Model& model, const CalibrationSet& calib, const CalibrationSet& heldout,
                                    const PipelineOptions& options, PrefillPolicy policy) {
  const std::size_t nb = model.blocks.size();
  const auto capture = stage("capture", [&] { return capture_block_inputs(model, calib); });
  const auto search_cap = head(capture, options.search_sequences);
  const std::vector<LayerRatios> uniform_keep(nb, uniform_ratios(1.0 - options.target));

  std::vector<AblationRow> rows;
  auto add = [&](std::string name, const ModelStates& states, const std::vector<LayerRatios>& keep) {
    const EvalReport r = run_eval(model, &states, heldout, policy);
    double num = 0.0, den = 0.0;
    for (std::size_t b = 0; b < nb; ++b) {
      for (LayerKind k : kAllLayers) {
        const auto w = static_cast<double>(model.blocks[b][k].params());
        num += w * (1.0 - keep[b][layer_index(k)]);
        den += w;
      }
    }
    rows.push_back({std::move(name), *r.kl, *r.sparse_ppl, r.dense_ppl, r.mac_ratio, num / den});
  };

  add("activation_only", fix_thresholds(model, capture, settings_from(uniform_keep, nullptr)), uniform_keep);

  const auto uniform_alpha = stage("alpha search", [&] { return search_alphas(model, search_cap, uniform_keep, options); });
  add("weight_aware", fix_thresholds(model, capture, settings_from(uniform_keep, &uniform_alpha)), uniform_keep);

  const auto evo = stage("block allocation", [&] {
    AllocationObjective objective(model, head(capture, options.evo_sequences));
    EvoParams p = options.evo;
    p.seed = options.seed;
    return block_level_allocation(objective, block_weights(model), options.target, p);
  });
  std::vector<LayerRatios> coarse_keep;
  for (double s : evo.best.sparsities()) coarse_keep.push_back(uniform_ratios(1.0 - s));
  const auto coarse_alpha = stage("alpha search", [&] { return search_alphas(model, search_cap, coarse_keep, options); });
  add("coarse_search", fix_thresholds(model, capture, settings_from(coarse_keep, &coarse_alpha)), coarse_keep);

  std::vector<LayerRatios> fine_keep;
  stage("layer allocation", [&] {
    for (std::size_t b = 0; b < nb; ++b) {
      const auto la = intra_block_allocation(model.blocks[b], model.config, search_cap.blocks[b],
                                             evo.best.sparsity(b), options.greedy_step);
      fine_keep.push_back(keep_from_sparsity(la.sparsity));
    }
    return 0;
  });
  const auto fine_alpha = stage("alpha search", [&] { return search_alphas(model, search_cap, fine_keep, options); });
  add("fine_search", fix_thresholds(model, capture, settings_from(fine_keep, &fine_alpha)), fine_keep);
  return rows;
}

// ---------------------------------------------------------------------------

CsvTable alpha_table(const Provenance& prov, const PipelineResult& result) {
  CsvTable t(prov, {"block", "layer", "alpha", "block_mse"});
  for (std::size_t b = 0; b < result.alpha_searches.size(); ++b) {
    const auto& a = result.alpha_searches[b];
    for (LayerKind k : kAllLayers) {
      t.add_row({std::to_string(b), std::string(layer_name(k)), fmt(a.alphas[layer_index(k)]), fmt(a.final_mse)});
    }
  }
  return t;
}

CsvTable allocation_table(const Provenance& prov, const Model& model, const SparsityPlan& plan) {
  std::vector<std::string> header{"block", "block_sparsity", "attn_sparsity", "mlp_sparsity"};
  for (LayerKind k : kAllLayers) header.emplace_back(layer_name(k));
  CsvTable t(prov, header);
  for (std::size_t b = 0; b < plan.layers.size(); ++b) {
    double an = 0.0, ad = 0.0, mn = 0.0, md = 0.0;
    std::vector<std::string> row{std::to_string(b), fmt(plan.block_sparsity[b])};
    for (LayerKind k : kAllLayers) {
      const auto w = static_cast<double>(model.blocks[b][k].params());
      const double s = plan.layers[b][layer_index(k)].sparsity;
      (is_attention_layer(k) ? an : mn) += w * s;
      (is_attention_layer(k) ? ad : md) += w;
    }
    row.push_back(fmt(an / ad));
    row.push_back(fmt(mn / md));
    for (LayerKind k : kAllLayers) row.push_back(fmt(plan.layers[b][layer_index(k)].sparsity));
    t.add_row(std::move(row));
  }
  return t;
}

CsvTable greedy_trace_table(const Provenance& prov, const PipelineResult& result) {
  CsvTable t(prov, {"block", "step", "layer", "increment", "error"});
  for (std::size_t b = 0; b < result.layer_allocations.size(); ++b) {
    for (const auto& s : result.layer_allocations[b].trace) {
      t.add_row({std::to_string(b), std::to_string(s.step), std::string(layer_name(s.chosen)), fmt(s.increment),
                 fmt(s.error)});
    }
  }
  return t;
}

CsvTable evolution_table(const Provenance& prov, const EvoResult& evo) {
  CsvTable t(prov, {"generation", "incumbent_loss", "best_offspring_loss"});
  t.add_row({"0", fmt(evo.uniform_loss), ""});
  for (const auto& g : evo.trace) {
    const double best = g.candidate_losses.empty()
                            ? evo.uniform_loss
                            : *std::min_element(g.candidate_losses.begin(), g.candidate_losses.end());
    t.add_row({std::to_string(g.generation), fmt(g.incumbent_loss), fmt(best)});
  }
  return t;
}

CsvTable eval_table(const Provenance& prov, const EvalReport& r) {
  CsvTable t(prov, {"sequences", "tokens", "dense_ppl", "sparse_ppl", "kl", "mac_ratio", "dense_tokens_per_s",
                    "sparse_tokens_per_s"});
  auto opt = [](const std::optional<double>& v) { return v ? fmt(*v) : std::string(); };
  t.add_row({std::to_string(r.sequences), std::to_string(r.tokens), fmt(r.dense_ppl), opt(r.sparse_ppl), opt(r.kl),
             fmt(r.mac_ratio), fmt(r.dense_tokens_per_s), opt(r.sparse_tokens_per_s)});
  return t;
}

CsvTable sweep_table(const Provenance& prov, const SweepResult& sweep) {
  CsvTable t(prov, {"block", "level", "ppl", "dense_ppl", "delta_ppl_pct"});
  for (const auto& r : sweep.rows) {
    t.add_row({std::to_string(r.block), fmt(r.level), fmt(r.ppl), fmt(sweep.dense_ppl), fmt(r.delta_ppl_pct)});
  }
  return t;
}

CsvTable bench_table(const Provenance& prov, const BenchReport& bench) {
  CsvTable t(prov, {"mode", "tokens", "tokens_per_s", "mac_ratio"});
  t.add_row({"dense", std::to_string(bench.generated), fmt(bench.dense_tokens_per_s), "1"});
  t.add_row({"sparse", std::to_string(bench.generated), fmt(bench.sparse_tokens_per_s), fmt(bench.mac_ratio)});
  return t;
}

CsvTable ablation_table(const Provenance& prov, const std::vector<AblationRow>& rows) {
  CsvTable t(prov, {"row", "config", "planned_sparsity", "mac_ratio", "kl", "sparse_ppl", "dense_ppl"});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    t.add_row({std::to_string(i + 1), r.name, fmt(r.planned_sparsity), fmt(r.mac_ratio), fmt(r.kl), fmt(r.sparse_ppl),
               fmt(r.dense_ppl)});
  }
  return t;
}

}  // namespace actsparse
