// SPDX-License-Identifier: Apache-2.0
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "csmap/data.hpp"

namespace csmap {
namespace {

std::vector<std::string> split(const std::string& line, bool tabs_only) {
  std::vector<std::string> out;
  if (tabs_only) {
    std::string field;
    std::istringstream ss(line);
    while (std::getline(ss, field, '\t')) out.push_back(field);
    if (!line.empty() && line.back() == '\t') out.emplace_back();
  } else {
    std::istringstream ss(line);
    std::string field;
    while (ss >> field) out.push_back(field);
  }
  for (auto& f : out)
    if (!f.empty() && f.back() == '\r') f.pop_back();
  return out;
}

std::optional<double> parse_number(const std::string& s) {
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

std::size_t to_cell(double v, double lo, double hi, std::size_t extent) {
  if (hi == lo) return 0;
  return static_cast<std::size_t>(std::floor((v - lo) / (hi - lo) * static_cast<double>(extent - 1) + 0.5));
}

}  // namespace

StLoadResult load_st_counts(const std::filesystem::path& matrix_file, const std::filesystem::path& spots_file,
                            GridSize grid, std::optional<CoordinateBounds> bounds) {
  if (grid.height == 0 || grid.width == 0) throw DataError("load_st_counts: grid must be non-empty");
  std::vector<std::string> errors;

  std::ifstream spots_in(spots_file);
  if (!spots_in) throw IoError("cannot open spot file " + spots_file.string());
  std::map<std::string, std::pair<double, double>> spots;
  std::string line;
  for (std::size_t lineno = 1; std::getline(spots_in, line); ++lineno) {
    auto fields = split(line, false);
    if (fields.empty() || fields[0].front() == '#') continue;
    if (fields.size() != 3) {
      errors.push_back(spots_file.string() + ":" + std::to_string(lineno) + ": expected 'spot_id x y'");
      continue;
    }
    auto x = parse_number(fields[1]);
    auto y = parse_number(fields[2]);
    if (!x || !y) {
      if (lineno == 1) continue;  // header
      errors.push_back(spots_file.string() + ":" + std::to_string(lineno) + ": non-numeric coordinate");
      continue;
    }
    spots[fields[0]] = {*x, *y};
  }
  if (spots.empty() && errors.empty()) errors.push_back(spots_file.string() + ": no spots listed");

  CoordinateBounds frame;
  if (bounds) {
    frame = *bounds;
  } else if (!spots.empty()) {
    frame = {spots.begin()->second.first, spots.begin()->second.first, spots.begin()->second.second,
             spots.begin()->second.second};
    for (const auto& [id, xy] : spots) {
      frame.x_min = std::min(frame.x_min, xy.first);
      frame.x_max = std::max(frame.x_max, xy.first);
      frame.y_min = std::min(frame.y_min, xy.second);
      frame.y_max = std::max(frame.y_max, xy.second);
    }
  }

  std::ifstream matrix_in(matrix_file);
  if (!matrix_in) throw IoError("cannot open count matrix " + matrix_file.string());
  std::vector<std::size_t> cells;  // per matrix column
  StLoadResult result;
  for (std::size_t lineno = 1; std::getline(matrix_in, line); ++lineno) {
    if (line.empty() || line == "\r") continue;
    auto fields = split(line, true);
    const std::string where = matrix_file.string() + ":" + std::to_string(lineno) + ": ";
    if (lineno == 1) {
      for (std::size_t k = 1; k < fields.size(); ++k) {
        auto it = spots.find(fields[k]);
        if (it == spots.end()) {
          errors.push_back(where + "spot '" + fields[k] + "' has no coordinates");
          cells.push_back(0);
          continue;
        }
        const auto [x, y] = it->second;
        if (x < frame.x_min || x > frame.x_max || y < frame.y_min || y > frame.y_max) {
          errors.push_back(where + "spot '" + fields[k] + "' lies outside the grid after scaling");
          cells.push_back(0);
          continue;
        }
        const std::size_t row = to_cell(y, frame.y_min, frame.y_max, grid.height);
        const std::size_t col = to_cell(x, frame.x_min, frame.x_max, grid.width);
        cells.push_back(row * grid.width + col);
      }
      if (cells.empty()) errors.push_back(where + "header lists no spots");
      continue;
    }
    if (fields.size() != cells.size() + 1) {
      errors.push_back(where + "expected " + std::to_string(cells.size() + 1) + " fields, found " +
                       std::to_string(fields.size()));
      continue;
    }
    std::vector<double> acc(grid.height * grid.width, 0.0);
    bool ok = true;
    for (std::size_t k = 0; k < cells.size(); ++k) {
      auto v = parse_number(fields[k + 1]);
      if (!v || *v < 0.0) {
        errors.push_back(where + "count '" + fields[k + 1] + "' is not a non-negative number");
        ok = false;
        break;
      }
      acc[cells[k]] += *v;  // colliding spots are summed
    }
    if (!ok) continue;
    const bool all_zero = std::all_of(acc.begin(), acc.end(), [](double v) { return v == 0.0; });
    if (all_zero) {
      result.dropped_all_zero.push_back(fields[0]);
      continue;
    }
    StGrid g;
    g.gene_id = fields[0];
    g.counts = Tensor<float>({grid.height, grid.width});
    for (std::size_t i = 0; i < acc.size(); ++i) g.counts[i] = static_cast<float>(acc[i]);
    const auto [lo, hi] = std::minmax_element(acc.begin(), acc.end());
    g.raw_min = *lo;
    g.raw_max = *hi;
    normalize_min_max(g.counts.values());
    result.genes.push_back(std::move(g));
  }
  if (!errors.empty()) {
    std::string msg = "malformed spatial transcriptomics input (" + std::to_string(errors.size()) + " errors):";
    for (const auto& e : errors) msg += "\n  " + e;
    throw DataError(msg);
  }
  return result;
}

}  // namespace csmap
