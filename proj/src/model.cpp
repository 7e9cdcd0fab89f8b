#include "actsparse/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>

namespace actsparse {

namespace {

inline float silu(float g) { return g / (1.0f + std::exp(-g)); }

// Layer shapes as (rows = out_features, cols = in_features).
std::pair<std::size_t, std::size_t> layer_shape(const ModelConfig& c, LayerKind k) {
  switch (k) {
    case LayerKind::gate_proj:
    case LayerKind::up_proj:
      return {c.d_ff, c.d_model};
    case LayerKind::down_proj:
      return {c.d_model, c.d_ff};
    default:
      return {c.d_model, c.d_model};
  }
}

void reshape(Mat32& m, std::size_t rows, std::size_t cols) {
  if (m.rows != rows || m.cols != cols) m = Mat32(rows, cols);
}

}  // namespace

void ModelConfig::validate() const {
  if (n_blocks < 1) throw std::invalid_argument("config: n_blocks must be >= 1");
  if (d_model < 1 || n_heads < 1 || d_ff < 1 || vocab_size < 1 || max_seq < 1) {
    throw std::invalid_argument("config: dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("config: d_model " + std::to_string(d_model) +
                                " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (!(rms_eps > 0.0f)) throw std::invalid_argument("config: rms_eps must be positive");
}

std::string_view layer_name(LayerKind k) {
  switch (k) {
    case LayerKind::q_proj: return "q_proj";
    case LayerKind::k_proj: return "k_proj";
    case LayerKind::v_proj: return "v_proj";
    case LayerKind::o_proj: return "o_proj";
    case LayerKind::gate_proj: return "gate_proj";
    case LayerKind::up_proj: return "up_proj";
    case LayerKind::down_proj: return "down_proj";
  }
  return "?";
}

LayerKind parse_layer_name(std::string_view name) {
  for (LayerKind k : kAllLayers) {
    if (layer_name(k) == name) return k;
  }
  throw std::invalid_argument("unknown layer '" + std::string(name) + "'");
}

bool is_attention_layer(LayerKind k) { return layer_index(k) <= layer_index(LayerKind::o_proj); }

Linear::Linear(Mat32 weight)
    : weight_(std::move(weight)), packed_(weight_), col_norms_(column_l2_norms(weight_)) {}

std::uint64_t Block::params() const {
  std::uint64_t n = 0;
  for (const auto& l : layers) n += l.params();
  return n;
}

BlockStates keep_all_states(const Block& block) { return uniform_states(block, 1.0, 0.0); }

BlockStates uniform_states(const Block& block, double keep_ratio, double alpha) {
  BlockStates out;
  for (LayerKind k : kAllLayers) {
    out[layer_index(k)] = SparsityState::make(block[k].col_norms(), alpha, keep_ratio);
  }
  return out;
}

void Model::validate() const {
  config.validate();
  const auto& c = config;
  auto expect = [](const std::string& name, std::size_t r, std::size_t cc, std::size_t er,
                   std::size_t ec) {
    if (r != er || cc != ec) {
      throw std::invalid_argument("tensor " + name + " has shape " + std::to_string(r) + "x" +
                                  std::to_string(cc) + ", config expects " + std::to_string(er) +
                                  "x" + std::to_string(ec));
    }
  };
  expect("embedding", embedding.rows, embedding.cols, c.vocab_size, c.d_model);
  expect("final_norm", 1, final_norm.size(), 1, c.d_model);
  expect("lm_head", lm_head.out_features(), lm_head.in_features(), c.vocab_size, c.d_model);
  if (blocks.size() != c.n_blocks) {
    throw std::invalid_argument("model has " + std::to_string(blocks.size()) +
                                " blocks, config expects " + std::to_string(c.n_blocks));
  }
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string prefix = "blocks." + std::to_string(b) + ".";
    expect(prefix + "attn_norm", 1, blocks[b].attn_norm.size(), 1, c.d_model);
    expect(prefix + "mlp_norm", 1, blocks[b].mlp_norm.size(), 1, c.d_model);
    for (LayerKind k : kAllLayers) {
      const auto [r, cc] = layer_shape(c, k);
      expect(prefix + std::string(layer_name(k)), blocks[b][k].out_features(),
             blocks[b][k].in_features(), r, cc);
    }
  }
}

Model init_toy_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto log_uniform = [&](double lo, double hi) {
    return std::exp(std::log(lo) + unit(rng) * (std::log(hi) - std::log(lo)));
  };

  Model m;
  m.config = config;
  m.embedding = Mat32(config.vocab_size, config.d_model);
  for (float& v : m.embedding.values) v = normal(rng);

  m.blocks.resize(config.n_blocks);
  for (auto& block : m.blocks) {
    const double gain = log_uniform(0.5, 2.0);
    block.attn_norm.assign(config.d_model, 1.0f);
    block.mlp_norm.assign(config.d_model, 1.0f);
    for (LayerKind k : kAllLayers) {
      const auto [rows, cols] = layer_shape(config, k);
      std::vector<double> scale(cols);
      double sq = 0.0;
      for (double& s : scale) {
        s = log_uniform(0.25, 4.0);
        sq += s * s;
      }
      // Unit expected row norm regardless of the column scales.
      double factor = 1.0 / std::sqrt(sq);
      if (k == LayerKind::o_proj || k == LayerKind::down_proj) factor *= gain;
      Mat32 w(rows, cols);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          w(r, c) = static_cast<float>(normal(rng) * scale[c] * factor);
        }
      }
      block[k] = Linear(std::move(w));
    }
  }

  m.final_norm.assign(config.d_model, 1.0f);
  Mat32 head(config.vocab_size, config.d_model);
  const float head_scale = 2.0f / std::sqrt(static_cast<float>(config.d_model));
  for (float& v : head.values) v = normal(rng) * head_scale;
  m.lm_head = Linear(std::move(head));
  return m;
}

// ---------------------------------------------------------------------------

void rms_norm_row(std::span<const float> x, std::span<const float> weight, float eps,
                  std::span<float> out) {
  double sq = 0.0;
  for (float v : x) sq += static_cast<double>(v) * v;
  const double inv = 1.0 / std::sqrt(sq / static_cast<double>(x.size()) + eps);
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = static_cast<float>(x[i] * inv) * weight[i];
  }
}

void attend_row(std::span<const float> q, const Mat32& keys, const Mat32& values, std::size_t t,
                std::size_t n_heads, std::span<float> out) {
  const std::size_t d = q.size();
  const std::size_t hd = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  thread_local std::vector<double> w, acc;
  w.resize(t + 1);
  acc.resize(hd);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * hd;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s <= t; ++s) {
      const float* k = keys.values.data() + s * d + off;
      // Four interleaved partial sums keep the reduction off one dependency chain.
      double p[4] = {0.0, 0.0, 0.0, 0.0};
      std::size_t i = 0;
      for (; i + 4 <= hd; i += 4) {
        for (std::size_t l = 0; l < 4; ++l) p[l] += static_cast<double>(q[off + i + l]) * k[i + l];
      }
      for (; i < hd; ++i) p[0] += static_cast<double>(q[off + i]) * k[i];
      w[s] = ((p[0] + p[1]) + (p[2] + p[3])) * scale;
      mx = std::max(mx, w[s]);
    }
    double sum = 0.0;
    for (std::size_t s = 0; s <= t; ++s) {
      w[s] = std::exp(w[s] - mx);
      sum += w[s];
    }
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t s = 0; s <= t; ++s) {
      const double p = w[s] / sum;
      const float* v = values.values.data() + s * d + off;
      for (std::size_t i = 0; i < hd; ++i) acc[i] += p * v[i];
    }
    for (std::size_t i = 0; i < hd; ++i) out[off + i] = static_cast<float>(acc[i]);
  }
}

void project_row(const Linear& linear, std::span<const float> x, const SparsityState* state,
                 ChannelMask& scratch, std::span<float> y, MacCounter& macs) {
  if (state != nullptr) {
    select_channels(x, *state, scratch);
  } else {
    scratch.reset(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) scratch.keep(static_cast<std::uint32_t>(i));
  }
  sparse_matvec_into(x, linear.packed(), scratch, y, macs);
}

// ---------------------------------------------------------------------------

BlockBatch::BlockBatch(const Block& block, const ModelConfig& config, Inputs inputs)
    : block_(&block), config_(&config), inputs_(std::move(inputs)) {
  if (!inputs_ || inputs_->empty()) throw std::invalid_argument("BlockBatch: no input sequences");
  for (const auto& x : *inputs_) {
    if (x.cols != config.d_model || x.rows == 0) {
      throw std::invalid_argument("BlockBatch: input width " + std::to_string(x.cols) +
                                  " does not match d_model " + std::to_string(config.d_model));
    }
  }
}

void BlockBatch::set_states(const BlockStates& states, bool recalibrate) {
  for (LayerKind k : kAllLayers) {
    const auto& s = states[layer_index(k)];
    if (s.width() != (*block_)[k].in_features()) {
      throw std::invalid_argument("missing or mis-sized sparsity state for layer " +
                                  std::string(layer_name(k)));
    }
  }
  states_ = states;
  sparse_ = true;
  recalibrate_ = recalibrate;
  computed_ = false;
}

void BlockBatch::set_dense() {
  sparse_ = false;
  recalibrate_ = false;
  computed_ = false;
}

void BlockBatch::set_token_policy(std::vector<std::vector<std::uint8_t>> sparse_tokens) {
  if (!sparse_tokens.empty()) {
    if (sparse_tokens.size() != inputs_->size()) {
      throw std::invalid_argument("token policy covers " + std::to_string(sparse_tokens.size()) +
                                  " sequences, batch has " + std::to_string(inputs_->size()));
    }
    for (std::size_t s = 0; s < sparse_tokens.size(); ++s) {
      if (!sparse_tokens[s].empty() && sparse_tokens[s].size() != (*inputs_)[s].rows) {
        throw std::invalid_argument("token policy length mismatch");
      }
    }
  }
  policy_ = std::move(sparse_tokens);
  computed_ = false;
}

void BlockBatch::recalibrate_layer(LayerKind k, Mat32 Stages::*input) {
  SparsityState& st = states_[layer_index(k)];
  std::uint64_t count = 0;
  for (std::size_t s = 0; s < seqs_.size(); ++s) {
    const Mat32& x = seqs_[s].*input;
    const bool all = policy_.empty() || policy_[s].empty();
    for (std::size_t t = 0; t < x.rows; ++t) {
      if (all || policy_[s][t]) count += x.cols;
    }
  }
  st.pool_size = count;
  if (count == 0 || st.keep_ratio >= 1.0) {
    st.threshold = kKeepAllThreshold;
    return;
  }
  if (st.keep_ratio <= 0.0) {
    st.threshold = kKeepNoneThreshold;
    return;
  }
  thread_local std::vector<float> pool;
  pool.clear();
  pool.reserve(count);
  for (std::size_t s = 0; s < seqs_.size(); ++s) {
    const Mat32& x = seqs_[s].*input;
    const bool all = policy_.empty() || policy_[s].empty();
    for (std::size_t t = 0; t < x.rows; ++t) {
      if (all || policy_[s][t]) append_scores(x.row(t), st, pool);
    }
  }
  st.threshold = calibrate_threshold(pool, st.keep_ratio);
}

void BlockBatch::project_layer(LayerKind k, Mat32 Stages::*input, Mat32 Stages::*output) {
  const Linear& lin = (*block_)[k];
  if (sparse_ && recalibrate_) recalibrate_layer(k, input);
  const SparsityState* state = sparse_ ? &states_[layer_index(k)] : nullptr;
  MacCounter macs;
  ChannelMask scratch;
  for (std::size_t s = 0; s < seqs_.size(); ++s) {
    const Mat32& x = seqs_[s].*input;
    Mat32& y = seqs_[s].*output;
    reshape(y, x.rows, lin.out_features());
    const bool all = policy_.empty() || policy_[s].empty();
    for (std::size_t t = 0; t < x.rows; ++t) {
      const SparsityState* use = (state != nullptr && (all || policy_[s][t])) ? state : nullptr;
      project_row(lin, x.row(t), use, scratch, y.row(t), macs);
    }
  }
  layer_macs_[layer_index(k)] = macs;
}

void BlockBatch::run(LayerKind from) {
  const int f = computed_ ? static_cast<int>(layer_index(from)) : -1;
  const auto& cfg = *config_;
  const Block& blk = *block_;

  if (f < 0) {
    seqs_.resize(inputs_->size());
    for (std::size_t s = 0; s < seqs_.size(); ++s) {
      const Mat32& x = (*inputs_)[s];
      reshape(seqs_[s].h1, x.rows, x.cols);
      for (std::size_t t = 0; t < x.rows; ++t) {
        rms_norm_row(x.row(t), blk.attn_norm, cfg.rms_eps, seqs_[s].h1.row(t));
      }
    }
  }
  if (f < 0 || f == 0) project_layer(LayerKind::q_proj, &Stages::h1, &Stages::q);
  if (f < 0 || f == 1) project_layer(LayerKind::k_proj, &Stages::h1, &Stages::k);
  if (f < 0 || f == 2) project_layer(LayerKind::v_proj, &Stages::h1, &Stages::v);
  if (f <= 2) {
    for (auto& st : seqs_) {
      reshape(st.attn, st.q.rows, cfg.d_model);
      for (std::size_t t = 0; t < st.q.rows; ++t) {
        attend_row(st.q.row(t), st.k, st.v, t, cfg.n_heads, st.attn.row(t));
      }
    }
  }
  if (f <= 3) {
    project_layer(LayerKind::o_proj, &Stages::attn, &Stages::o);
    for (std::size_t s = 0; s < seqs_.size(); ++s) {
      auto& st = seqs_[s];
      const Mat32& x = (*inputs_)[s];
      reshape(st.x1, x.rows, x.cols);
      reshape(st.h2, x.rows, x.cols);
      for (std::size_t i = 0; i < x.values.size(); ++i) st.x1.values[i] = x.values[i] + st.o.values[i];
      for (std::size_t t = 0; t < x.rows; ++t) {
        rms_norm_row(st.x1.row(t), blk.mlp_norm, cfg.rms_eps, st.h2.row(t));
      }
    }
  }
  if (f <= 3 || f == 4) project_layer(LayerKind::gate_proj, &Stages::h2, &Stages::gate);
  if (f <= 3 || f == 5) project_layer(LayerKind::up_proj, &Stages::h2, &Stages::up);
  if (f <= 5) {
    for (auto& st : seqs_) {
      reshape(st.hidden, st.gate.rows, st.gate.cols);
      for (std::size_t i = 0; i < st.gate.values.size(); ++i) {
        st.hidden.values[i] = silu(st.gate.values[i]) * st.up.values[i];
      }
    }
  }
  project_layer(LayerKind::down_proj, &Stages::hidden, &Stages::down);
  outputs_.resize(seqs_.size());
  for (std::size_t s = 0; s < seqs_.size(); ++s) {
    const auto& st = seqs_[s];
    Mat32& out = outputs_[s];
    reshape(out, st.x1.rows, st.x1.cols);
    for (std::size_t i = 0; i < out.values.size(); ++i) {
      out.values[i] = st.x1.values[i] + st.down.values[i];
    }
  }
  computed_ = true;
}

const std::vector<Mat32>& BlockBatch::outputs() const {
  if (!computed_) throw std::logic_error("BlockBatch: outputs requested before run()");
  return outputs_;
}

std::vector<const Mat32*> BlockBatch::layer_inputs(LayerKind k) const {
  Mat32 Stages::*member = nullptr;
  switch (k) {
    case LayerKind::q_proj:
    case LayerKind::k_proj:
    case LayerKind::v_proj: member = &Stages::h1; break;
    case LayerKind::o_proj: member = &Stages::attn; break;
    case LayerKind::gate_proj:
    case LayerKind::up_proj: member = &Stages::h2; break;
    case LayerKind::down_proj: member = &Stages::hidden; break;
  }
  std::vector<const Mat32*> out;
  for (const auto& st : seqs_) out.push_back(&(st.*member));
  return out;
}

double BlockBatch::mse_against(const std::vector<Mat32>& reference) const {
  if (reference.size() != seqs_.size()) throw std::invalid_argument("mse_against: batch size mismatch");
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t s = 0; s < seqs_.size(); ++s) {
    const auto& a = outputs_[s].values;
    const auto& b = reference[s].values;
    if (a.size() != b.size()) throw std::invalid_argument("mse_against: shape mismatch");
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double d = static_cast<double>(a[i]) - b[i];
      acc += d * d;
    }
    n += a.size();
  }
  return n == 0 ? 0.0 : acc / static_cast<double>(n);
}

MacCounter BlockBatch::macs() const {
  MacCounter total;
  for (const auto& m : layer_macs_) total += m;
  return total;
}

std::size_t BlockBatch::token_count() const {
  std::size_t n = 0;
  for (const auto& x : *inputs_) n += x.rows;
  return n;
}

// ---------------------------------------------------------------------------

Mat32 block_forward(const Block& block, const ModelConfig& config, const Mat32& x,
                    const BlockStates* states, MacCounter& macs,
                    std::span<const std::uint8_t> sparse_tokens) {
  BlockBatch batch(block, config, std::make_shared<const std::vector<Mat32>>(std::vector<Mat32>{x}));
  if (states != nullptr) {
    batch.set_states(*states, false);
    if (!sparse_tokens.empty()) {
      batch.set_token_policy({std::vector<std::uint8_t>(sparse_tokens.begin(), sparse_tokens.end())});
    }
  }
  batch.run();
  macs += batch.macs();
  return batch.outputs().front();
}

Mat32 embed(const Model& model, std::span<const TokenId> tokens) {
  Mat32 x(tokens.size(), model.config.d_model);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] >= model.config.vocab_size) {
      throw std::invalid_argument("token id " + std::to_string(tokens[t]) + " outside vocabulary");
    }
    const auto src = model.embedding.row(tokens[t]);
    std::copy(src.begin(), src.end(), x.row(t).begin());
  }
  return x;
}

Mat32 compute_logits(const Model& model, const Mat32& hidden) {
  Mat32 logits(hidden.rows, model.config.vocab_size);
  Vec32 normed(hidden.cols);
  ChannelMask scratch;
  MacCounter ignored;
  for (std::size_t t = 0; t < hidden.rows; ++t) {
    rms_norm_row(hidden.row(t), model.final_norm, model.config.rms_eps, normed);
    project_row(model.lm_head, normed, nullptr, scratch, logits.row(t), ignored);
  }
  return logits;
}

ForwardTrace model_forward(const Model& model, std::span<const TokenId> tokens,
                           const ModelStates* states, MacCounter& macs,
                           std::span<const std::uint8_t> sparse_tokens) {
  if (tokens.empty()) throw std::invalid_argument("model_forward: empty sequence");
  if (tokens.size() > model.config.max_seq) {
    throw std::invalid_argument("model_forward: sequence of " + std::to_string(tokens.size()) +
                                " tokens exceeds max_seq " + std::to_string(model.config.max_seq));
  }
  if (states != nullptr && states->size() != model.blocks.size()) {
    throw std::invalid_argument("model_forward: " + std::to_string(states->size()) +
                                " block states for " + std::to_string(model.blocks.size()) + " blocks");
  }
  if (!sparse_tokens.empty() && sparse_tokens.size() != tokens.size()) {
    throw std::invalid_argument("model_forward: token policy length mismatch");
  }
  ForwardTrace trace;
  Mat32 x = embed(model, tokens);
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    trace.block_inputs.push_back(x);
    x = block_forward(model.blocks[b], model.config, x, states ? &(*states)[b] : nullptr, macs,
                      sparse_tokens);
    trace.block_outputs.push_back(x);
  }
  trace.logits = compute_logits(model, x);
  return trace;
}

// ---------------------------------------------------------------------------

DecodeSession::DecodeSession(const Model& model, const ModelStates* states)
    : model_(&model), states_(states) {
  if (states != nullptr && states->size() != model.blocks.size()) {
    throw std::invalid_argument("DecodeSession: block state count mismatch");
  }
  const auto& c = model.config;
  keys_.assign(c.n_blocks, Mat32(c.max_seq, c.d_model));
  values_.assign(c.n_blocks, Mat32(c.max_seq, c.d_model));
}

Vec32 DecodeSession::step(TokenId token, bool sparse) {
  const auto& c = model_->config;
  if (pos_ >= c.max_seq) throw std::out_of_range("DecodeSession: context full");
  if (token >= c.vocab_size) throw std::invalid_argument("DecodeSession: token outside vocabulary");

  Vec32 x(model_->embedding.row(token).begin(), model_->embedding.row(token).end());
  Vec32 h(c.d_model), q(c.d_model), attn(c.d_model), o(c.d_model), x1(c.d_model), d(c.d_model);
  Vec32 gate(c.d_ff), up(c.d_ff), hidden(c.d_ff);

  for (std::size_t b = 0; b < model_->blocks.size(); ++b) {
    const Block& blk = model_->blocks[b];
    auto state = [&](LayerKind k) -> const SparsityState* {
      return (states_ != nullptr && sparse) ? &(*states_)[b][layer_index(k)] : nullptr;
    };
    rms_norm_row(x, blk.attn_norm, c.rms_eps, h);
    project_row(blk[LayerKind::q_proj], h, state(LayerKind::q_proj), scratch_, q, macs_);
    project_row(blk[LayerKind::k_proj], h, state(LayerKind::k_proj), scratch_, keys_[b].row(pos_), macs_);
    project_row(blk[LayerKind::v_proj], h, state(LayerKind::v_proj), scratch_, values_[b].row(pos_), macs_);
    attend_row(q, keys_[b], values_[b], pos_, c.n_heads, attn);
    project_row(blk[LayerKind::o_proj], attn, state(LayerKind::o_proj), scratch_, o, macs_);
    for (std::size_t i = 0; i < c.d_model; ++i) x1[i] = x[i] + o[i];
    rms_norm_row(x1, blk.mlp_norm, c.rms_eps, h);
    project_row(blk[LayerKind::gate_proj], h, state(LayerKind::gate_proj), scratch_, gate, macs_);
    project_row(blk[LayerKind::up_proj], h, state(LayerKind::up_proj), scratch_, up, macs_);
    for (std::size_t i = 0; i < c.d_ff; ++i) hidden[i] = silu(gate[i]) * up[i];
    project_row(blk[LayerKind::down_proj], hidden, state(LayerKind::down_proj), scratch_, d, macs_);
    for (std::size_t i = 0; i < c.d_model; ++i) x[i] = x1[i] + d[i];
  }
  ++pos_;

  Vec32 normed(c.d_model), logits(c.vocab_size);
  rms_norm_row(x, model_->final_norm, c.rms_eps, normed);
  MacCounter ignored;
  project_row(model_->lm_head, normed, nullptr, scratch_, logits, ignored);
  return logits;
}

}  // namespace actsparse
