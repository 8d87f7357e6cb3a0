// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace refusion::io {

/// Minimal CSV writer: header row plus string cells, quoting cells that
/// contain separators or quotes.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  void add_row(std::vector<std::string> cells);
  void write(const std::filesystem::path& path) const;
  [[nodiscard]] std::string str() const;
  [[nodiscard]] std::size_t rows() const { return rows_.size(); }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

/// Shortest decimal text that reads back to the same double ("nan" for NaN).
std::string format_double(double v);

/// Parses a CSV file written by CsvTable (used by tests and replay checks).
std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path);

struct PlotSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;  // NaN entries are skipped
};

/// Renders series as coloured polylines on a white canvas with axes and
/// tick marks and writes a PNG. Colours follow plot_color(index).
void write_line_plot(const std::filesystem::path& path, const std::vector<PlotSeries>& series,
                     int width = 640, int height = 400);

/// "#rrggbb" colour used for series `index`, for legends kept alongside plots.
std::string plot_color(std::size_t index);

}  // namespace refusion::io
