#include <set>
#include <string>
#include <vector>

#include "actsparse/data.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace actsparse;

TEST_CASE("byte tokenizer") {
  const auto t = tokenize("Ab\xff");
  CHECK(t == std::vector<TokenId>{65, 98, 255});
  CHECK(tokenize("").empty());
}

TEST_CASE("ingest: window arithmetic and determinism") {
  const testsupport::TempDir dir("ingest");
  const auto file = dir.write("a.txt", testsupport::pseudo_text(1024, 1));

  const auto set = ingest_corpus({file}, 4, 256, 0);
  REQUIRE(set.sequences.size() == 4);
  CHECK(set.token_count() == 1024);
  for (const auto& s : set.sequences) CHECK(s.size() == 256);
  CHECK(set.warnings.empty());

  const auto again = ingest_corpus({file}, 4, 256, 0);
  CHECK(again.sequences == set.sequences);

  // More requested than available: every window once, plus a warning.
  const auto over = ingest_corpus({file}, 10, 256, 3);
  CHECK(over.sequences.size() == 4);
  CHECK(over.warnings.size() == 1);
}

TEST_CASE("ingest: sampling stays inside the file and never overlaps") {
  const testsupport::TempDir dir("ingest-sample");
  const std::string text = testsupport::pseudo_text(5000, 2);
  const auto file = dir.write("big.txt", text);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto set = ingest_corpus({file}, 7, 100, seed);
    REQUIRE(set.sequences.size() == 7);
    std::set<std::uint64_t> offsets;
    for (std::size_t i = 0; i < 7; ++i) {
      const auto& m = set.manifest[i];
      CHECK(m.offset % 100 == 0);
      CHECK(m.offset + m.length <= text.size());
      CHECK(offsets.insert(m.offset).second);
      CHECK(set.sequences[i] == tokenize(std::string_view(text).substr(m.offset, m.length)));
      if (i > 0) CHECK(set.manifest[i - 1].offset < m.offset);
    }
  }
  CHECK(ingest_corpus({file}, 7, 100, 1).sequences != ingest_corpus({file}, 7, 100, 2).sequences);
}

TEST_CASE("ingest: directories, short and empty files, quotas") {
  const testsupport::TempDir dir("ingest-dir");
  dir.write("corpus/b.txt", testsupport::pseudo_text(300, 3));
  dir.write("corpus/sub/a.txt", testsupport::pseudo_text(50, 4));
  dir.write("corpus/empty.txt", "");
  const auto other = dir.write("other.txt", testsupport::pseudo_text(900, 5));

  const auto set = ingest_corpus({dir.path() / "corpus"}, 100, 100, 0);
  // b.txt gives three windows, the short a.txt one window of 50 bytes.
  CHECK(set.sequences.size() == 4);
  std::size_t short_windows = 0;
  for (const auto& m : set.manifest) short_windows += m.length == 50;
  CHECK(short_windows == 1);

  // 4 windows under corpus/ and 9 in other.txt: 6 sequences split 2/4 by
  // largest remainder (1.85 and 4.15).
  const auto mixed = ingest_corpus({dir.path() / "corpus", other}, 6, 100, 1);
  REQUIRE(mixed.sequences.size() == 6);
  std::size_t from_other = 0;
  for (const auto& m : mixed.manifest) from_other += m.path.find("other.txt") != std::string::npos;
  CHECK(from_other == 4);
}

TEST_CASE("ingest: errors") {
  const testsupport::TempDir dir("ingest-err");
  std::filesystem::create_directories(dir.path() / "empty");
  CHECK_THROWS_WITH(ingest_corpus({dir.path() / "empty"}, 4, 16, 0), doctest::Contains("empty"));
  CHECK_THROWS(ingest_corpus({dir.path() / "missing.txt"}, 4, 16, 0));
  const auto blank = dir.write("blank.txt", "");
  CHECK_THROWS_WITH(ingest_corpus({blank}, 4, 16, 0), doctest::Contains("no readable input"));
  CHECK_THROWS(ingest_corpus({}, 4, 16, 0));
  CHECK_THROWS(ingest_corpus({blank}, 4, 0, 0));
}

TEST_CASE("calibration set head") {
  const auto set = testsupport::text_set(5, 10, 1);
  CHECK(set.head(2).sequences.size() == 2);
  CHECK(set.head(2).manifest.size() == 2);
  CHECK(set.head(0).sequences.size() == 5);
  CHECK(set.head(99).sequences.size() == 5);
  CHECK(set.head(2).sequences[1] == set.sequences[1]);
}

TEST_CASE("capture") {
  const Model m = init_toy_model(testsupport::tiny_config(), 1);
  auto set = testsupport::text_set(3, 20, 2);
  set.sequences[1].resize(11);
  const auto cap = capture_block_inputs(m, set);
  REQUIRE(cap.blocks.size() == 2);
  CHECK(cap.sequence_count() == 3);
  CHECK(cap.blocks[0].token_count() == 51);
  for (std::size_t s = 0; s < 3; ++s) {
    CHECK((*cap.blocks[0].inputs)[s] == embed(m, set.sequences[s]));
    CHECK((*cap.blocks[1].inputs)[s] == cap.blocks[0].dense_outputs[s]);
    MacCounter macs;
    const Mat32 replay = block_forward(m.blocks[1], m.config, (*cap.blocks[1].inputs)[s], nullptr, macs);
    CHECK(testsupport::max_abs_diff(replay, cap.blocks[1].dense_outputs[s]) <= 1e-5);
    CHECK(testsupport::max_abs_diff(cap.dense_logits[s], model_forward(m, set.sequences[s], nullptr, macs).logits) == 0.0);
  }
  CHECK_THROWS_WITH(capture_block_inputs(m, CalibrationSet{}), doctest::Contains("empty"));
}
