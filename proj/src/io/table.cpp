// SPDX-License-Identifier: Apache-2.0
#include "refusion/io/table.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "refusion/errors.hpp"
#include "refusion/io/image.hpp"
#include "refusion/tensor.hpp"

namespace refusion::io {

namespace {

std::string quote(const std::string& cell) {
  if (cell.find_first_of(",\"\n") == std::string::npos) return cell;
  std::string out = "\"";
  for (char c : cell) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

void write_row(std::ostream& out, const std::vector<std::string>& row) {
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (i) out << ',';
    out << quote(row[i]);
  }
  out << '\n';
}

constexpr std::array<std::array<std::uint8_t, 3>, 8> kPalette{{{31, 119, 180},
                                                               {255, 127, 14},
                                                               {44, 160, 44},
                                                               {214, 39, 40},
                                                               {148, 103, 189},
                                                               {140, 86, 75},
                                                               {227, 119, 194},
                                                               {127, 127, 127}}};

}  // namespace

void CsvTable::add_row(std::vector<std::string> cells) {
  if (cells.size() != header_.size()) {
    throw std::invalid_argument("CSV row has " + std::to_string(cells.size()) + " cells, header " +
                                std::to_string(header_.size()));
  }
  rows_.push_back(std::move(cells));
}

std::string CsvTable::str() const {
  std::ostringstream out;
  write_row(out, header_);
  for (const auto& r : rows_) write_row(out, r);
  return out.str();
}

void CsvTable::write(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << str();
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingInput("cannot open " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> row;
    std::string cell;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      const char c = line[i];
      if (quoted) {
        if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
          cell += '"';
          ++i;
        } else if (c == '"') {
          quoted = false;
        } else {
          cell += c;
        }
      } else if (c == '"') {
        quoted = true;
      } else if (c == ',') {
        row.push_back(cell);
        cell.clear();
      } else {
        cell += c;
      }
    }
    row.push_back(cell);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string plot_color(std::size_t index) {
  const auto& c = kPalette[index % kPalette.size()];
  char buf[8];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", c[0], c[1], c[2]);
  return buf;
}

void write_line_plot(const std::filesystem::path& path, const std::vector<PlotSeries>& series,
                     int width, int height) {
  Tensor canvas({1, 3, height, width}, 1.0);
  auto set_px = [&](int x, int y, const std::array<std::uint8_t, 3>& rgb) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    for (int c = 0; c < 3; ++c) canvas.at(0, c, y, x) = rgb[static_cast<std::size_t>(c)] / 255.0;
  };
  const int left = 50, right = 15, top = 15, bottom = 40;
  const int pw = width - left - right, ph = height - top - bottom;

  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
  double ymin = xmin, ymax = -xmin;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  }
  if (!std::isfinite(xmin)) xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  const double ypad = 0.05 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;

  const std::array<std::uint8_t, 3> axis{0, 0, 0}, grid{225, 225, 225};
  for (int k = 0; k <= 4; ++k) {
    const int gy = top + ph - k * ph / 4;
    const int gx = left + k * pw / 4;
    for (int x = left; x <= left + pw; ++x) set_px(x, gy, grid);
    for (int y = top; y <= top + ph; ++y) set_px(gx, y, grid);
    for (int t = 1; t <= 5; ++t) {
      set_px(left - t, gy, axis);
      set_px(gx, top + ph + t, axis);
    }
  }
  for (int x = left; x <= left + pw; ++x) set_px(x, top + ph, axis);
  for (int y = top; y <= top + ph; ++y) set_px(left, y, axis);

  auto to_px = [&](double x, double y) {
    return std::pair<double, double>{left + (x - xmin) / (xmax - xmin) * pw,
                                     top + ph - (y - ymin) / (ymax - ymin) * ph};
  };
  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const auto& rgb = kPalette[si % kPalette.size()];
    bool have_prev = false;
    std::pair<double, double> prev{};
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      const auto cur = to_px(s.x[i], s.y[i]);
      if (have_prev) {
        const int steps = 1 + static_cast<int>(std::max(std::abs(cur.first - prev.first),
                                                        std::abs(cur.second - prev.second)));
        for (int k = 0; k <= steps; ++k) {
          const double f = static_cast<double>(k) / steps;
          const int x = static_cast<int>(std::lround(prev.first + f * (cur.first - prev.first)));
          const int y = static_cast<int>(std::lround(prev.second + f * (cur.second - prev.second)));
          set_px(x, y, rgb);
          set_px(x, y + 1, rgb);
        }
      } else {
        set_px(static_cast<int>(cur.first), static_cast<int>(cur.second), rgb);
      }
      prev = cur;
      have_prev = true;
    }
    // Legend swatch: one short bar per series along the bottom margin.
    const int lx = left + static_cast<int>(si) * 40;
    for (int x = lx; x < lx + 30; ++x) {
      for (int y = height - 14; y < height - 8; ++y) set_px(x, y, rgb);
    }
  }
  write_png(path, canvas);
}

}  // namespace refusion::io
