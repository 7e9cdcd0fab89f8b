#include "actsparse/plan.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "json.hpp"

#include "actsparse/io.hpp"

namespace actsparse {

using json = nlohmann::ordered_json;

namespace {

constexpr std::string_view kFormat = "actsparse-plan 1";

json threshold_to_json(float t) {
  if (t == kKeepAllThreshold) return "-inf";
  if (t == kKeepNoneThreshold) return "inf";
  return static_cast<double>(t);
}

float threshold_from_json(const json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "-inf") return kKeepAllThreshold;
    if (s == "inf") return kKeepNoneThreshold;
    throw std::runtime_error("plan: bad threshold '" + s + "'");
  }
  return static_cast<float>(j.get<double>());
}

template <typename T>
T need(const json& j, const char* key) {
  if (!j.contains(key)) throw std::runtime_error(std::string("plan: missing field '") + key + "'");
  return j.at(key).get<T>();
}

}  // namespace

std::string config_hash(std::string_view text) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", crc32_of(text));
  return buf;
}

double SparsityPlan::weighted_sparsity(const Model& model) const {
  double num = 0.0, den = 0.0;
  for (std::size_t b = 0; b < layers.size() && b < model.blocks.size(); ++b) {
    for (LayerKind k : kAllLayers) {
      const auto w = static_cast<double>(model.blocks[b][k].params());
      num += w * layers[b][layer_index(k)].sparsity;
      den += w;
    }
  }
  return den > 0.0 ? num / den : 0.0;
}

ModelStates SparsityPlan::to_states(const Model& model) const {
  if (!(config == model.config)) throw std::invalid_argument("plan was made for a different model config");
  if (layers.size() != model.blocks.size()) {
    throw std::invalid_argument("plan covers " + std::to_string(layers.size()) + " blocks, model has " +
                                std::to_string(model.blocks.size()));
  }
  ModelStates out(layers.size());
  for (std::size_t b = 0; b < layers.size(); ++b) {
    for (LayerKind k : kAllLayers) {
      const LayerPlan& lp = layers[b][layer_index(k)];
      auto& st = out[b][layer_index(k)];
      st = SparsityState::make(model.blocks[b][k].col_norms(), lp.alpha, 1.0 - lp.sparsity, lp.threshold);
      st.pool_size = lp.pool_size;
    }
  }
  return out;
}

std::string SparsityPlan::to_json() const {
  json j;
  j["format"] = kFormat;
  j["target_sparsity"] = target;
  j["model"] = {{"n_blocks", config.n_blocks},     {"d_model", config.d_model},
                {"n_heads", config.n_heads},       {"d_ff", config.d_ff},
                {"vocab_size", config.vocab_size}, {"max_seq", config.max_seq},
                {"rms_eps", static_cast<double>(config.rms_eps)}};
  json blocks = json::array();
  for (std::size_t b = 0; b < layers.size(); ++b) {
    json ls = json::array();
    for (LayerKind k : kAllLayers) {
      const LayerPlan& lp = layers[b][layer_index(k)];
      ls.push_back({{"layer", layer_name(k)},
                    {"sparsity", lp.sparsity},
                    {"alpha", lp.alpha},
                    {"threshold", threshold_to_json(lp.threshold)},
                    {"pool_size", lp.pool_size}});
    }
    blocks.push_back({{"block", b}, {"sparsity", block_sparsity.at(b)}, {"layers", std::move(ls)}});
  }
  j["blocks"] = std::move(blocks);

  const auto& p = provenance;
  json manifest = json::array();
  for (const auto& m : p.calibration) {
    manifest.push_back({{"path", m.path}, {"offset", m.offset}, {"length", m.length}});
  }
  j["provenance"] = {
      {"tool_version", p.tool_version},
      {"seed", p.seed},
      {"config_hash", p.config_hash},
      {"evolution",
       {{"generations", p.evo.generations},
        {"offspring", p.evo.offspring},
        {"step", p.evo.step},
        {"mutable_fraction", p.evo.mutable_fraction}}},
      {"alpha_grid", {{"lo", p.alpha_grid.lo}, {"hi", p.alpha_grid.hi}, {"step", p.alpha_grid.step}}},
      {"greedy_step", p.greedy_step},
      {"seq_len", p.seq_len},
      {"calibration", std::move(manifest)}};
  return j.dump(2) + "\n";
}

SparsityPlan SparsityPlan::from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string("plan: ") + e.what());
  }
  if (need<std::string>(j, "format") != kFormat) throw std::runtime_error("plan: unsupported format");
  SparsityPlan plan;
  try {
    plan.target = need<double>(j, "target_sparsity");
    const json& m = j.at("model");
    plan.config.n_blocks = need<std::size_t>(m, "n_blocks");
    plan.config.d_model = need<std::size_t>(m, "d_model");
    plan.config.n_heads = need<std::size_t>(m, "n_heads");
    plan.config.d_ff = need<std::size_t>(m, "d_ff");
    plan.config.vocab_size = need<std::size_t>(m, "vocab_size");
    plan.config.max_seq = need<std::size_t>(m, "max_seq");
    plan.config.rms_eps = static_cast<float>(need<double>(m, "rms_eps"));
    for (const json& bj : j.at("blocks")) {
      if (need<std::size_t>(bj, "block") != plan.layers.size()) {
        throw std::runtime_error("plan: blocks out of order");
      }
      plan.block_sparsity.push_back(need<double>(bj, "sparsity"));
      std::array<LayerPlan, kLayersPerBlock> ls{};
      std::array<bool, kLayersPerBlock> seen{};
      for (const json& lj : bj.at("layers")) {
        const LayerKind k = parse_layer_name(need<std::string>(lj, "layer"));
        if (seen[layer_index(k)]) throw std::runtime_error("plan: duplicate layer " + std::string(layer_name(k)));
        seen[layer_index(k)] = true;
        LayerPlan& lp = ls[layer_index(k)];
        lp.sparsity = need<double>(lj, "sparsity");
        lp.alpha = need<double>(lj, "alpha");
        lp.threshold = threshold_from_json(lj.at("threshold"));
        lp.pool_size = need<std::uint64_t>(lj, "pool_size");
      }
      for (LayerKind k : kAllLayers) {
        if (!seen[layer_index(k)]) {
          throw std::runtime_error("plan: block " + std::to_string(plan.layers.size()) + " lacks layer " +
                                   std::string(layer_name(k)));
        }
      }
      plan.layers.push_back(ls);
    }
    const json& p = j.at("provenance");
    auto& pv = plan.provenance;
    pv.tool_version = need<std::string>(p, "tool_version");
    pv.seed = need<std::uint64_t>(p, "seed");
    pv.config_hash = need<std::string>(p, "config_hash");
    const json& e = p.at("evolution");
    pv.evo.generations = need<std::size_t>(e, "generations");
    pv.evo.offspring = need<std::size_t>(e, "offspring");
    pv.evo.step = need<double>(e, "step");
    pv.evo.mutable_fraction = need<double>(e, "mutable_fraction");
    pv.evo.seed = pv.seed;
    const json& g = p.at("alpha_grid");
    pv.alpha_grid = {need<double>(g, "lo"), need<double>(g, "hi"), need<double>(g, "step")};
    pv.greedy_step = need<double>(p, "greedy_step");
    pv.seq_len = need<std::size_t>(p, "seq_len");
    for (const json& mj : p.at("calibration")) {
      pv.calibration.push_back(
          {need<std::string>(mj, "path"), need<std::uint64_t>(mj, "offset"), need<std::uint64_t>(mj, "length")});
    }
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("plan: ") + e.what());
  }
  if (plan.layers.size() != plan.config.n_blocks) throw std::runtime_error("plan: block count disagrees with model");
  return plan;
}

void SparsityPlan::save(const std::filesystem::path& path) const { atomic_write_file(path, to_json()); }

SparsityPlan SparsityPlan::load(const std::filesystem::path& path) { return from_json(read_file(path)); }

SparsityPlan make_plan(const Model& model, double target, const ModelStates& states,
                       const std::vector<double>& block_sparsity, PlanProvenance provenance) {
  if (states.size() != model.blocks.size() || block_sparsity.size() != model.blocks.size()) {
    throw std::invalid_argument("make_plan: states do not cover every block");
  }
  SparsityPlan plan;
  plan.target = target;
  plan.config = model.config;
  plan.block_sparsity = block_sparsity;
  plan.provenance = std::move(provenance);
  for (const auto& bs : states) {
    std::array<LayerPlan, kLayersPerBlock> ls{};
    for (LayerKind k : kAllLayers) {
      const auto& st = bs[layer_index(k)];
      ls[layer_index(k)] = {1.0 - st.keep_ratio, st.alpha, st.threshold, st.pool_size};
    }
    plan.layers.push_back(ls);
  }
  return plan;
}

}  // namespace actsparse
