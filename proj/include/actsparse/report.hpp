#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace actsparse {

struct Provenance {
  std::uint64_t seed = 0;
  std::string config_hash;

  /// "# seed=... tool_version=... config_hash=..."
  std::string line() const;
};

/// CSV with a provenance comment line above the header row.
class CsvTable {
 public:
  CsvTable(Provenance provenance, std::vector<std::string> header);

  /// Cells are written verbatim; callers format numbers.
  void add_row(std::vector<std::string> cells);

  std::string to_string() const;
  void write(const std::filesystem::path& path) const;  // atomic

  std::size_t rows() const { return rows_.size(); }

 private:
  Provenance provenance_;
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

}  // namespace actsparse
