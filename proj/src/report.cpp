#include "actsparse/report.hpp"

#include <stdexcept>

#include "actsparse/io.hpp"
#include "actsparse/plan.hpp"

namespace actsparse {

std::string Provenance::line() const {
  return "# seed=" + std::to_string(seed) + " tool_version=" + std::string(kToolVersion) +
         " config_hash=" + config_hash;
}

CsvTable::CsvTable(Provenance provenance, std::vector<std::string> header)
    : provenance_(std::move(provenance)), header_(std::move(header)) {}

void CsvTable::add_row(std::vector<std::string> cells) {
  if (cells.size() != header_.size()) {
    throw std::invalid_argument("csv row has " + std::to_string(cells.size()) + " cells, header has " +
                                std::to_string(header_.size()));
  }
  rows_.push_back(std::move(cells));
}

std::string CsvTable::to_string() const {
  auto join = [](const std::vector<std::string>& cells) {
    std::string s;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) s += ',';
      s += cells[i];
    }
    return s + '\n';
  };
  std::string out = provenance_.line() + '\n' + join(header_);
  for (const auto& r : rows_) out += join(r);
  return out;
}

void CsvTable::write(const std::filesystem::path& path) const { atomic_write_file(path, to_string()); }

}  // namespace actsparse
