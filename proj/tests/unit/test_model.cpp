#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "actsparse/io.hpp"
#include "actsparse/model.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace actsparse;
using testsupport::max_abs_diff;
using testsupport::tiny_config;

namespace {

std::vector<TokenId> random_tokens(std::size_t n, std::mt19937_64& rng) {
  std::vector<TokenId> t(n);
  for (auto& v : t) v = static_cast<TokenId>(rng() % 256);
  return t;
}

// Uniform states at `alpha`; callers pick the thresholds.
ModelStates alpha_states(const Model& m, double keep, double alpha) {
  ModelStates st;
  for (const auto& b : m.blocks) st.push_back(uniform_states(b, keep, alpha));
  return st;
}

void set_thresholds(BlockStates& st, float tau) {
  for (auto& s : st) s.threshold = tau;
}

}  // namespace

TEST_CASE("config validation and text round trip") {
  ModelConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());
  CHECK(ModelConfig::from_text(c.to_text()) == c);

  ModelConfig bad = c;
  bad.n_heads = 3;
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("d_model"), std::invalid_argument);
  bad = c;
  bad.n_blocks = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  CHECK_THROWS(ModelConfig::from_text("n_blocks=2\n"));
  CHECK_THROWS(ModelConfig::from_text(c.to_text() + "bogus=1\n"));
}

TEST_CASE("layer names") {
  for (LayerKind k : kAllLayers) CHECK(parse_layer_name(layer_name(k)) == k);
  CHECK_THROWS(parse_layer_name("w_proj"));
  CHECK(is_attention_layer(LayerKind::o_proj));
  CHECK_FALSE(is_attention_layer(LayerKind::gate_proj));
}

TEST_CASE("toy init") {
  const ModelConfig c = tiny_config();
  const Model a = init_toy_model(c, 5), b = init_toy_model(c, 5), other = init_toy_model(c, 6);
  CHECK_NOTHROW(a.validate());
  CHECK(a.embedding == b.embedding);
  CHECK(a.blocks[1][LayerKind::down_proj].weight() == b.blocks[1][LayerKind::down_proj].weight());
  CHECK(a.lm_head.weight() == b.lm_head.weight());
  CHECK_FALSE(a.embedding == other.embedding);
  CHECK_FALSE(a.blocks[0][LayerKind::q_proj].weight() == other.blocks[0][LayerKind::q_proj].weight());

  // Column norms spread at least 4x in every layer, at the default size too.
  for (const Model& m : {a, init_toy_model(ModelConfig{}, 0)}) {
    for (const auto& blk : m.blocks) {
      for (LayerKind k : kAllLayers) {
        const auto g = blk[k].col_norms();
        const auto [lo, hi] = std::minmax_element(g.begin(), g.end());
        CHECK(*hi / *lo >= 4.0f);
      }
    }
  }
}

TEST_CASE("linear caches norms and packing") {
  std::mt19937_64 rng(1);
  const Mat32 w = testsupport::random_matrix(5, 7, rng);
  const Linear lin(w);
  CHECK(lin.in_features() == 7);
  CHECK(lin.out_features() == 5);
  CHECK(lin.params() == 35);
  const Vec32 g = column_l2_norms(w);
  CHECK(std::equal(g.begin(), g.end(), lin.col_norms().begin()));
  for (std::size_t c = 0; c < 7; ++c) {
    for (std::size_t r = 0; r < 5; ++r) CHECK(lin.packed().column(c)[r] == w(r, c));
  }
}

TEST_CASE("dense block and model forward match the reference") {
  const Model m = init_toy_model(tiny_config(), 3);
  std::mt19937_64 rng(2);
  const auto tokens = random_tokens(20, rng);

  MacCounter macs;
  const ForwardTrace tr = model_forward(m, tokens, nullptr, macs);
  CHECK(max_abs_diff(tr.logits, testsupport::reference_logits(m, tokens, nullptr)) <= 1e-4);
  REQUIRE(tr.block_inputs.size() == 2);
  CHECK(tr.block_inputs[0] == embed(m, tokens));
  CHECK(tr.block_inputs[1] == tr.block_outputs[0]);
  CHECK(tr.logits.rows == 20);
  CHECK(macs.executed_macs == macs.dense_macs);

  const Mat32 ref = testsupport::reference_block(m.blocks[0], m.config, tr.block_inputs[0], nullptr);
  CHECK(max_abs_diff(tr.block_outputs[0], ref) <= 1e-5);

  // Single token: deterministic and equal to the reference.
  const std::vector<TokenId> one{65};
  MacCounter m1, m2;
  const auto l1 = model_forward(m, one, nullptr, m1).logits;
  CHECK(l1 == model_forward(m, one, nullptr, m2).logits);
  CHECK(max_abs_diff(l1, testsupport::reference_logits(m, one, nullptr)) <= 1e-4);
}

TEST_CASE("sparse block matches the masked reference") {
  ModelConfig c = tiny_config();
  c.d_model = 8;
  c.d_ff = 20;
  const Model m = init_toy_model(c, 4);
  std::mt19937_64 rng(3);
  const auto tokens = random_tokens(12, rng);
  const Mat32 x = embed(m, tokens);

  for (double alpha : {0.0, 0.5, 1.2}) {
    BlockStates st = uniform_states(m.blocks[0], 0.5, alpha);
    set_thresholds(st, 0.5f);
    MacCounter macs;
    const Mat32 got = block_forward(m.blocks[0], m.config, x, &st, macs);
    const Mat32 ref = testsupport::reference_block(m.blocks[0], m.config, x, &st);
    CHECK(max_abs_diff(got, ref) <= 1e-5);
    CHECK(macs.executed_macs < macs.dense_macs);
  }
}

TEST_CASE("block forward: keep-all and keep-none") {
  const Model m = init_toy_model(tiny_config(), 5);
  std::mt19937_64 rng(4);
  const Mat32 x = embed(m, random_tokens(10, rng));
  MacCounter dm, sm, nm;
  const Mat32 dense = block_forward(m.blocks[0], m.config, x, nullptr, dm);

  const BlockStates all = keep_all_states(m.blocks[0]);
  CHECK(max_abs_diff(block_forward(m.blocks[0], m.config, x, &all, sm), dense) <= 1e-5);
  CHECK(sm.executed_macs == sm.dense_macs);

  BlockStates none = uniform_states(m.blocks[0], 0.0);
  for (auto& s : none) s.threshold = kKeepNoneThreshold;
  CHECK(block_forward(m.blocks[0], m.config, x, &none, nm) == x);
  CHECK(nm.executed_macs == 0);
}

TEST_CASE("model forward with keep-all states equals dense") {
  const Model m = init_toy_model(tiny_config(), 6);
  std::mt19937_64 rng(5);
  const auto tokens = random_tokens(30, rng);
  ModelStates st;
  for (const auto& b : m.blocks) st.push_back(keep_all_states(b));
  MacCounter a, b;
  CHECK(max_abs_diff(model_forward(m, tokens, &st, a).logits, model_forward(m, tokens, nullptr, b).logits) <= 1e-4);
}

TEST_CASE("model forward: sparse matches reference, token policy, errors") {
  const Model m = init_toy_model(tiny_config(), 7);
  std::mt19937_64 rng(6);
  const auto tokens = random_tokens(16, rng);
  ModelStates st = alpha_states(m, 0.5, 0.8);
  for (auto& b : st) set_thresholds(b, 0.6f);

  MacCounter macs;
  const Mat32 sparse = model_forward(m, tokens, &st, macs).logits;
  CHECK(max_abs_diff(sparse, testsupport::reference_logits(m, tokens, &st)) <= 1e-4);

  // Policy with every flag off is the dense forward.
  std::vector<std::uint8_t> off(tokens.size(), 0);
  MacCounter a, b;
  CHECK(model_forward(m, tokens, &st, a, off).logits == model_forward(m, tokens, nullptr, b).logits);
  CHECK(a.executed_macs == a.dense_macs);

  // Rows before the first sparse position are unaffected by later flags.
  std::vector<std::uint8_t> tail(tokens.size(), 0);
  for (std::size_t t = 8; t < tail.size(); ++t) tail[t] = 1;
  MacCounter c;
  const Mat32 mixed = model_forward(m, tokens, &st, c, tail).logits;
  const Mat32 dense = model_forward(m, tokens, nullptr, b).logits;
  for (std::size_t t = 0; t < 8; ++t) {
    for (std::size_t v = 0; v < mixed.cols; ++v) CHECK(mixed(t, v) == dense(t, v));
  }

  MacCounter e;
  CHECK_THROWS_AS(model_forward(m, std::vector<TokenId>{}, nullptr, e), std::invalid_argument);
  CHECK_THROWS_AS(model_forward(m, std::vector<TokenId>(65, 1), nullptr, e), std::invalid_argument);
  CHECK_THROWS_AS(model_forward(m, std::vector<TokenId>{300}, nullptr, e), std::invalid_argument);
  ModelStates short_states(1, keep_all_states(m.blocks[0]));
  CHECK_THROWS_AS(model_forward(m, tokens, &short_states, e), std::invalid_argument);
}

TEST_CASE("dense forward does not depend on batch partitioning") {
  const Model m = init_toy_model(tiny_config(), 8);
  std::mt19937_64 rng(7);
  const auto tokens = random_tokens(24, rng);
  MacCounter macs;
  const Mat32 full = model_forward(m, tokens, nullptr, macs).logits;

  // Token-at-a-time decoding reproduces every row of the batched forward.
  DecodeSession s(m, nullptr);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const Vec32 row = s.step(tokens[t], false);
    for (std::size_t v = 0; v < row.size(); ++v) CHECK(std::fabs(row[v] - full(t, v)) <= 1e-4);
  }
  CHECK(s.position() == tokens.size());

  // Prefixes see the same rows.
  const std::vector<TokenId> prefix(tokens.begin(), tokens.begin() + 10);
  const Mat32 part = model_forward(m, prefix, nullptr, macs).logits;
  for (std::size_t t = 0; t < 10; ++t) {
    for (std::size_t v = 0; v < part.cols; ++v) CHECK(part(t, v) == full(t, v));
  }
}

TEST_CASE("decode session: sparse steps match the batched sparse forward") {
  const Model m = init_toy_model(tiny_config(), 9);
  std::mt19937_64 rng(8);
  const auto tokens = random_tokens(12, rng);
  ModelStates st = alpha_states(m, 0.5, 0.4);
  for (auto& b : st) set_thresholds(b, 0.5f);
  MacCounter macs;
  const Mat32 full = model_forward(m, tokens, &st, macs).logits;
  DecodeSession s(m, &st);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const Vec32 row = s.step(tokens[t], true);
    for (std::size_t v = 0; v < row.size(); ++v) CHECK(std::fabs(row[v] - full(t, v)) <= 1e-4);
  }
  CHECK(s.macs().executed_macs < s.macs().dense_macs);

  DecodeSession full_ctx(m, nullptr);
  for (std::size_t t = 0; t < m.config.max_seq; ++t) full_ctx.step(1, false);
  CHECK_THROWS_AS(full_ctx.step(1, false), std::out_of_range);
}

TEST_CASE("uniform MAC ratio on sparsified layers is near the keep ratio") {
  const Model m = init_toy_model(ModelConfig{}, 0);
  const auto text = testsupport::pseudo_text(256, 1);
  std::vector<TokenId> tokens(text.begin(), text.end());
  // Per-block thresholds recalibrated on the same sequence's dense block inputs.
  ModelStates st;
  MacCounter dm;
  const ForwardTrace dense = model_forward(m, tokens, nullptr, dm);
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    auto bs = uniform_states(m.blocks[b], 0.5, 0.0);
    BlockBatch batch(m.blocks[b], m.config,
                     std::make_shared<const std::vector<Mat32>>(std::vector<Mat32>{dense.block_inputs[b]}));
    batch.set_states(bs, true);
    batch.run();
    st.push_back(batch.states());
  }
  MacCounter sm;
  model_forward(m, tokens, &st, sm);
  const double r = mac_ratio(sm);
  CHECK(r >= 0.45);
  CHECK(r <= 0.55);
}

TEST_CASE("block batch") {
  const Model m = init_toy_model(tiny_config(), 10);
  std::mt19937_64 rng(9);
  std::vector<Mat32> xs{embed(m, random_tokens(9, rng)), embed(m, random_tokens(14, rng))};
  auto inputs = std::make_shared<const std::vector<Mat32>>(xs);

  SUBCASE("dense run equals block_forward per sequence") {
    BlockBatch batch(m.blocks[0], m.config, inputs);
    batch.run();
    MacCounter macs;
    for (std::size_t s = 0; s < 2; ++s) {
      CHECK(max_abs_diff(batch.outputs()[s], block_forward(m.blocks[0], m.config, xs[s], nullptr, macs)) <= 1e-6);
    }
    CHECK(batch.token_count() == 23);
    CHECK(batch.mse_against(batch.outputs()) == 0.0);
  }

  SUBCASE("fixed states equal block_forward; partial reruns equal full reruns") {
    BlockStates st = uniform_states(m.blocks[0], 0.5, 0.6);
    for (auto& s : st) s.threshold = 0.7f;
    BlockBatch batch(m.blocks[0], m.config, inputs);
    batch.set_states(st, false);
    batch.run();
    MacCounter macs;
    for (std::size_t s = 0; s < 2; ++s) {
      CHECK(max_abs_diff(batch.outputs()[s], block_forward(m.blocks[0], m.config, xs[s], &st, macs)) <= 1e-6);
    }

    BlockBatch copy = batch;
    copy.state(LayerKind::gate_proj).threshold = 0.2f;
    copy.run(LayerKind::gate_proj);
    BlockBatch fresh(m.blocks[0], m.config, inputs);
    fresh.set_states(copy.states(), false);
    fresh.run();
    for (std::size_t s = 0; s < 2; ++s) CHECK(copy.outputs()[s] == fresh.outputs()[s]);
    // The snapshot left the original untouched.
    for (std::size_t s = 0; s < 2; ++s) {
      CHECK(max_abs_diff(batch.outputs()[s], block_forward(m.blocks[0], m.config, xs[s], &st, macs)) <= 1e-6);
    }
  }

  SUBCASE("recalibration hits the keep ratio on each layer's own inputs") {
    BlockBatch batch(m.blocks[0], m.config, inputs);
    batch.set_states(uniform_states(m.blocks[0], 0.25, 0.5), true);
    batch.run();
    for (LayerKind k : kAllLayers) {
      const auto& s = batch.states()[layer_index(k)];
      std::size_t kept = 0, total = 0;
      for (const Mat32* in : batch.layer_inputs(k)) {
        for (std::size_t t = 0; t < in->rows; ++t) {
          for (std::size_t i = 0; i < in->cols; ++i) {
            kept += std::fabs((*in)(t, i)) * s.col_norm_pow[i] >= s.threshold;
            ++total;
          }
        }
      }
      CHECK(s.pool_size == total);
      CHECK(std::fabs(static_cast<double>(kept) / static_cast<double>(total) - 0.25) <= 1.0 / static_cast<double>(total) + 1e-12);
    }
  }

  SUBCASE("errors") {
    BlockBatch batch(m.blocks[0], m.config, inputs);
    CHECK_THROWS_AS(batch.outputs(), std::logic_error);
    CHECK_THROWS(BlockBatch(m.blocks[0], m.config, std::make_shared<const std::vector<Mat32>>()));
    CHECK_THROWS(batch.set_token_policy({{1, 0}}));
  }
}

TEST_CASE("save and load") {
  const testsupport::TempDir dir("model-io");
  const Model m = init_toy_model(tiny_config(), 11);
  save_model(m, dir.path() / "m");
  const Model r = load_model(dir.path() / "m");
  CHECK(r.config == m.config);
  CHECK(r.embedding == m.embedding);
  CHECK(r.final_norm == m.final_norm);
  CHECK(r.lm_head.weight() == m.lm_head.weight());
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    CHECK(r.blocks[b].attn_norm == m.blocks[b].attn_norm);
    for (LayerKind k : kAllLayers) CHECK(r.blocks[b][k].weight() == m.blocks[b][k].weight());
  }

  const std::string weights = read_file(dir.path() / "m" / "weights.bin");

  SUBCASE("truncated payload") {
    dir.write("t/config.txt", read_file(dir.path() / "m" / "config.txt"));
    dir.write("t/weights.bin", weights.substr(0, weights.size() - 100));
    CHECK_THROWS_WITH(load_model(dir.path() / "t"), doctest::Contains("lm_head"));
  }

  SUBCASE("truncated manifest") {
    dir.write("t/config.txt", read_file(dir.path() / "m" / "config.txt"));
    dir.write("t/weights.bin", weights.substr(0, 40));
    CHECK_THROWS(load_model(dir.path() / "t"));
  }

  SUBCASE("manifest shape disagrees with config") {
    ModelConfig c = m.config;
    c.d_ff = 48;
    dir.write("t/config.txt", c.to_text());
    dir.write("t/weights.bin", weights);
    CHECK_THROWS_WITH(load_model(dir.path() / "t"), doctest::Contains("blocks.0."));
  }

  SUBCASE("corrupted payload") {
    std::string bad = weights;
    bad[bad.size() - 3] ^= 0x5a;
    dir.write("t/config.txt", read_file(dir.path() / "m" / "config.txt"));
    dir.write("t/weights.bin", bad);
    CHECK_THROWS_WITH(load_model(dir.path() / "t"), doctest::Contains("checksum"));
  }

  SUBCASE("missing directory") {
    CHECK_THROWS(load_model(dir.path() / "nope"));
  }
}
