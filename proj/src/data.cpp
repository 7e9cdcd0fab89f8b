#include "actsparse/data.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <stdexcept>
#include <system_error>

#include "actsparse/io.hpp"

namespace actsparse {

namespace fs = std::filesystem;

namespace {

struct Window {
  std::size_t file;
  std::uint64_t offset;
  std::uint64_t length;
};

std::vector<fs::path> expand(const fs::path& p) {
  std::error_code ec;
  if (fs::is_regular_file(p, ec)) return {p};
  if (!fs::is_directory(p, ec)) throw std::runtime_error("corpus path not readable: " + p.string());
  std::vector<fs::path> out;
  for (const auto& entry : fs::recursive_directory_iterator(p, ec)) {
    if (entry.is_regular_file()) out.push_back(entry.path());
  }
  if (ec) throw std::runtime_error("cannot walk " + p.string() + ": " + ec.message());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

std::vector<TokenId> tokenize(std::string_view text) {
  std::vector<TokenId> out(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) out[i] = static_cast<unsigned char>(text[i]);
  return out;
}

std::size_t CalibrationSet::token_count() const {
  std::size_t n = 0;
  for (const auto& s : sequences) n += s.size();
  return n;
}

CalibrationSet CalibrationSet::head(std::size_t n) const {
  if (n == 0 || n >= sequences.size()) return *this;
  CalibrationSet out;
  out.seed = seed;
  out.sequences.assign(sequences.begin(), sequences.begin() + static_cast<std::ptrdiff_t>(n));
  out.manifest.assign(manifest.begin(), manifest.begin() + static_cast<std::ptrdiff_t>(n));
  return out;
}

CalibrationSet ingest_corpus(const std::vector<fs::path>& paths, std::size_t max_sequences,
                             std::size_t seq_len, std::uint64_t seed) {
  if (paths.empty()) throw std::invalid_argument("no corpus paths given");
  if (seq_len == 0) throw std::invalid_argument("seq_len must be positive");

  std::vector<fs::path> files;
  std::vector<std::string> contents;
  std::vector<std::vector<Window>> per_path(paths.size());
  for (std::size_t p = 0; p < paths.size(); ++p) {
    const auto expanded = expand(paths[p]);
    if (expanded.empty()) throw std::runtime_error("corpus directory is empty: " + paths[p].string());
    for (const auto& f : expanded) {
      std::string bytes = read_file(f);
      const std::size_t id = files.size();
      const std::uint64_t size = bytes.size();
      if (size > 0 && size < seq_len) {
        per_path[p].push_back({id, 0, size});
      } else {
        for (std::uint64_t off = 0; off + seq_len <= size; off += seq_len) {
          per_path[p].push_back({id, off, seq_len});
        }
      }
      files.push_back(f);
      contents.push_back(std::move(bytes));
    }
  }

  std::size_t total = 0;
  for (const auto& w : per_path) total += w.size();
  if (total == 0) throw std::runtime_error("no readable input: every corpus file is empty");

  CalibrationSet set;
  set.seed = seed;
  const std::size_t want = std::min(max_sequences, total);
  if (max_sequences > total) {
    set.warnings.push_back("requested " + std::to_string(max_sequences) + " sequences but only " +
                           std::to_string(total) + " windows exist");
  }

  // Largest-remainder apportionment of `want` across paths.
  std::vector<std::size_t> quota(paths.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t p = 0; p < paths.size(); ++p) {
    const double exact = static_cast<double>(want) * per_path[p].size() / static_cast<double>(total);
    quota[p] = static_cast<std::size_t>(exact);
    assigned += quota[p];
    remainders.push_back({exact - static_cast<double>(quota[p]), p});
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < want; ++i) {
    const std::size_t p = remainders[i % remainders.size()].second;
    if (quota[p] < per_path[p].size()) {
      ++quota[p];
      ++assigned;
    }
  }

  std::mt19937_64 rng(seed);
  for (std::size_t p = 0; p < paths.size(); ++p) {
    auto& windows = per_path[p];
    // Partial Fisher-Yates, then restore file order for a stable layout.
    for (std::size_t i = 0; i < quota[p]; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, windows.size() - 1);
      std::swap(windows[i], windows[pick(rng)]);
    }
    std::vector<Window> chosen(windows.begin(), windows.begin() + static_cast<std::ptrdiff_t>(quota[p]));
    std::sort(chosen.begin(), chosen.end(), [](const Window& a, const Window& b) {
      return a.file != b.file ? a.file < b.file : a.offset < b.offset;
    });
    for (const auto& w : chosen) {
      set.sequences.push_back(tokenize(std::string_view(contents[w.file]).substr(w.offset, w.length)));
      set.manifest.push_back({files[w.file].generic_string(), w.offset, w.length});
    }
  }
  return set;
}

std::size_t BlockCalibCache::token_count() const {
  std::size_t n = 0;
  if (inputs) {
    for (const auto& x : *inputs) n += x.rows;
  }
  return n;
}

CalibrationCapture capture_block_inputs(const Model& model, const CalibrationSet& calib) {
  if (calib.sequences.empty()) throw std::invalid_argument("capture: empty calibration set");
  const std::size_t nb = model.blocks.size();
  std::vector<std::vector<Mat32>> inputs(nb);
  CalibrationCapture cap;
  cap.blocks.resize(nb);
  for (const auto& seq : calib.sequences) {
    MacCounter macs;
    ForwardTrace tr = model_forward(model, seq, nullptr, macs);
    for (std::size_t b = 0; b < nb; ++b) {
      inputs[b].push_back(std::move(tr.block_inputs[b]));
      cap.blocks[b].dense_outputs.push_back(std::move(tr.block_outputs[b]));
    }
    cap.dense_logits.push_back(std::move(tr.logits));
  }
  for (std::size_t b = 0; b < nb; ++b) {
    cap.blocks[b].inputs = std::make_shared<const std::vector<Mat32>>(std::move(inputs[b]));
  }
  return cap;
}

}  // namespace actsparse
