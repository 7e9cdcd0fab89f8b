#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "actsparse/kernels.hpp"
#include "actsparse/numerics.hpp"
#include "actsparse/scoring.hpp"

namespace actsparse {

using TokenId = std::uint32_t;

struct ModelConfig {
  std::size_t n_blocks = 8;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t d_ff = 344;
  std::size_t vocab_size = 256;
  std::size_t max_seq = 256;
  float rms_eps = 1e-5f;

  std::size_t head_dim() const { return d_model / n_heads; }

  /// Throws std::invalid_argument naming the first violated constraint.
  void validate() const;

  /// key=value lines, one per field.
  std::string to_text() const;
  static ModelConfig from_text(std::string_view text);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// The seven projection sites of a block, in forward order.
enum class LayerKind : std::uint8_t { q_proj, k_proj, v_proj, o_proj, gate_proj, up_proj, down_proj };

inline constexpr std::size_t kLayersPerBlock = 7;
inline constexpr std::array<LayerKind, kLayersPerBlock> kAllLayers{
    LayerKind::q_proj,    LayerKind::k_proj,  LayerKind::v_proj,   LayerKind::o_proj,
    LayerKind::gate_proj, LayerKind::up_proj, LayerKind::down_proj};

constexpr std::size_t layer_index(LayerKind k) { return static_cast<std::size_t>(k); }
std::string_view layer_name(LayerKind k);
LayerKind parse_layer_name(std::string_view name);
bool is_attention_layer(LayerKind k);

/// A projection with its packed copy and precomputed input-channel norms.
class Linear {
 public:
  Linear() = default;
  explicit Linear(Mat32 weight);

  const Mat32& weight() const { return weight_; }
  const GatherMatrix& packed() const { return packed_; }
  std::span<const float> col_norms() const { return col_norms_; }
  std::size_t in_features() const { return weight_.cols; }
  std::size_t out_features() const { return weight_.rows; }
  std::uint64_t params() const { return static_cast<std::uint64_t>(weight_.rows) * weight_.cols; }

 private:
  Mat32 weight_;
  GatherMatrix packed_;
  Vec32 col_norms_;
};

struct Block {
  Vec32 attn_norm;
  Vec32 mlp_norm;
  std::array<Linear, kLayersPerBlock> layers;

  const Linear& operator[](LayerKind k) const { return layers[layer_index(k)]; }
  Linear& operator[](LayerKind k) { return layers[layer_index(k)]; }

  std::uint64_t params() const;
};

using BlockStates = std::array<SparsityState, kLayersPerBlock>;
using ModelStates = std::vector<BlockStates>;

/// Keep-all states (threshold -inf) carrying the block's column-norm factors at alpha 0.
BlockStates keep_all_states(const Block& block);

/// Uniform-ratio states at `alpha` with unset (keep-all) thresholds.
BlockStates uniform_states(const Block& block, double keep_ratio, double alpha = 0.0);

struct Model {
  ModelConfig config;
  Mat32 embedding;  // [vocab x d_model]
  std::vector<Block> blocks;
  Vec32 final_norm;
  Linear lm_head;  // [vocab x d_model]

  /// Shape check of every tensor against `config`.
  void validate() const;
};

/// Deterministic toy weights. Every projection column gets a log-uniform scale
/// in [0.25, 4] so column norms are deliberately heterogeneous, and each block's
/// output projections carry a log-uniform gain in [0.5, 2].
Model init_toy_model(const ModelConfig& config, std::uint64_t seed);

/// Writes `dir/config.txt` and `dir/weights.bin` (see docs/FORMATS.md).
void save_model(const Model& model, const std::filesystem::path& dir);
Model load_model(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Row-level building blocks shared by the batched and the decode paths.

void rms_norm_row(std::span<const float> x, std::span<const float> weight, float eps,
                  std::span<float> out);

/// Causal attention of query row `t` over key/value rows [0, t].
void attend_row(std::span<const float> q, const Mat32& keys, const Mat32& values, std::size_t t,
                std::size_t n_heads, std::span<float> out);

/// One projection of one row. `state == nullptr` runs dense.
void project_row(const Linear& linear, std::span<const float> x, const SparsityState* state,
                 ChannelMask& scratch, std::span<float> y, MacCounter& macs);

// ---------------------------------------------------------------------------

/// Layer-major forward of one block over a batch of independent sequences.
/// All intermediate activations are retained so a search can change one
/// layer's sparsity and re-run only what depends on it. Copies are cheap
/// enough to use as trial snapshots.
class BlockBatch {
 public:
  using Inputs = std::shared_ptr<const std::vector<Mat32>>;

  BlockBatch(const Block& block, const ModelConfig& config, Inputs inputs);

  /// Masks every projection with `states`. With `recalibrate`, each
  /// recomputed layer first re-derives its threshold from the pooled scores of
  /// the inputs it now sees, at its own alpha and keep ratio.
  void set_states(const BlockStates& states, bool recalibrate);
  void set_dense();

  /// Per-sequence token flags (1 = sparse); empty means every token is sparse.
  void set_token_policy(std::vector<std::vector<std::uint8_t>> sparse_tokens);

  SparsityState& state(LayerKind k) { return states_[layer_index(k)]; }
  const BlockStates& states() const { return states_; }
  bool sparse() const { return sparse_; }

  /// Recomputes `from` and everything downstream of it. The first call always
  /// computes the whole block.
  void run(LayerKind from = LayerKind::q_proj);

  const std::vector<Mat32>& outputs() const;
  const Inputs& inputs() const { return inputs_; }

  /// Inputs a layer saw in the last run, one matrix per sequence.
  std::vector<const Mat32*> layer_inputs(LayerKind k) const;

  /// Mean squared error of the outputs against per-sequence references.
  double mse_against(const std::vector<Mat32>& reference) const;

  /// Projection MACs of the current configuration.
  MacCounter macs() const;

  std::size_t token_count() const;

 private:
  struct Stages {
    Mat32 h1, q, k, v, attn, o, x1, h2, gate, up, hidden, down;
  };

  void project_layer(LayerKind k, Mat32 Stages::*input, Mat32 Stages::*output);
  void recalibrate_layer(LayerKind k, Mat32 Stages::*input);

  const Block* block_;
  const ModelConfig* config_;
  Inputs inputs_;
  std::vector<Stages> seqs_;
  std::vector<Mat32> outputs_;
  std::vector<std::vector<std::uint8_t>> policy_;
  BlockStates states_{};
  bool sparse_ = false;
  bool recalibrate_ = false;
  bool computed_ = false;
  std::array<MacCounter, kLayersPerBlock> layer_macs_{};
};

/// Dense or sparse forward of one block over one sequence [tokens x d_model].
Mat32 block_forward(const Block& block, const ModelConfig& config, const Mat32& x,
                    const BlockStates* states, MacCounter& macs,
                    std::span<const std::uint8_t> sparse_tokens = {});

struct ForwardTrace {
  std::vector<Mat32> block_inputs;   // [n_blocks] of [tokens x d_model]
  std::vector<Mat32> block_outputs;  // [n_blocks] of [tokens x d_model]
  Mat32 logits;                      // [tokens x vocab]
};

Mat32 embed(const Model& model, std::span<const TokenId> tokens);

/// Final norm + LM head over every row of the last block's output.
Mat32 compute_logits(const Model& model, const Mat32& hidden);

/// Causal forward over one sequence. `states` (one entry per block) masks the
/// projections of tokens flagged in `sparse_tokens` (all tokens when empty).
ForwardTrace model_forward(const Model& model, std::span<const TokenId> tokens,
                           const ModelStates* states, MacCounter& macs,
                           std::span<const std::uint8_t> sparse_tokens = {});

/// Token-at-a-time inference with a per-block KV cache.
class DecodeSession {
 public:
  DecodeSession(const Model& model, const ModelStates* states);

  /// Feeds one token and returns the logits predicting the next one.
  Vec32 step(TokenId token, bool sparse);

  std::size_t position() const { return pos_; }
  const MacCounter& macs() const { return macs_; }

 private:
  const Model* model_;
  const ModelStates* states_;
  std::vector<Mat32> keys_, values_;
  std::size_t pos_ = 0;
  MacCounter macs_;
  ChannelMask scratch_;
};

}  // namespace actsparse
