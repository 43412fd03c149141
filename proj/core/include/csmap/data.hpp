// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "csmap/tensor.hpp"

namespace csmap {

struct ImageShape {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;

  std::size_t pixels() const { return height * width * channels; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

std::string to_string(const ImageShape& shape);

/// Samples stored NHWC with values in [0,1], optional binary labels per
/// attribute, optional numeric per-sample annotations (e.g. square
/// positions) and a provenance record sufficient to regenerate the set.
struct Dataset {
  ImageShape shape;
  std::vector<float> samples;
  std::vector<std::string> ids;
  std::map<std::string, std::vector<std::uint8_t>> labels;
  std::map<std::string, std::vector<float>> annotations;
  nlohmann::json provenance = nlohmann::json::object();

  std::size_t size() const { return ids.size(); }
  std::span<const float> sample(std::size_t i) const;
  /// [H,W,C] copy of one sample.
  Tensor<float> sample_tensor(std::size_t i) const;
  /// [N,H,W,C] batch of the given samples.
  Tensor<float> batch(std::span<const std::size_t> indices) const;

  /// Throws DataError naming the available attributes when absent.
  const std::vector<std::uint8_t>& label(const std::string& attribute) const;
  const std::vector<float>& annotation(const std::string& key) const;
  std::vector<std::string> label_names() const;
  std::optional<std::size_t> find_id(const std::string& id) const;

  Dataset subset(std::span<const std::size_t> indices) const;
  void validate() const;
};

void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

enum class Brightness { bright, dark };

struct SquaresConfig {
  std::size_t n = 2000;
  std::size_t image_size = 32;
  std::size_t channels = 1;
  std::size_t side = 8;
  Brightness brightness = Brightness::bright;
  /// Explicit square color (one value per channel); overrides brightness.
  std::optional<std::array<float, 3>> color;
  double fraction_with = 0.5;
  /// Background control points are drawn from 0.5 +- amplitude.
  double background_amplitude = 0.1;
  std::uint64_t seed = 0;
};

inline constexpr float kBrightSquareValue = 0.95f;
inline constexpr float kDarkSquareValue = 0.05f;

/// Smooth random backgrounds; a square is pasted into exactly
/// floor(n * fraction_with + 0.5) images. Label "square"; annotations
/// "square_row", "square_col" (-1 when absent) and "square_side".
Dataset gen_squares(const SquaresConfig& config);

struct StLayersConfig {
  std::size_t n_genes = 300;
  std::size_t layer_patterns = 3;
  double noise = 0.2;
  std::uint64_t seed = 0;
  std::size_t grid = 32;
};

/// Concentric equal-area regions (inner disc, then rings) on a grid x grid
/// map, as 0/1 masks of shape [grid, grid].
std::vector<Tensor<float>> st_templates(std::size_t grid, std::size_t layer_patterns);

/// Gene i follows template i % layer_patterns, times (1 + noise * N(0,1))
/// clipped at zero, then min-max normalized. Ids "g<i>"; labels
/// "layer<k>"; annotation "template".
Dataset gen_st_layers(const StLayersConfig& config);

struct StGrid {
  std::string gene_id;
  Tensor<float> counts;  // [H, W], normalized to [0,1]
  double raw_min = 0.0;
  double raw_max = 0.0;
};

struct GridSize {
  std::size_t height = 32;
  std::size_t width = 32;
};

/// Coordinate frame mapped onto the grid. When absent, the bounding box of
/// the listed spots is used.
struct CoordinateBounds {
  double x_min = 0.0, x_max = 0.0, y_min = 0.0, y_max = 0.0;
};

struct StLoadResult {
  std::vector<StGrid> genes;
  std::vector<std::string> dropped_all_zero;
};

/// Tab-separated count matrix (header: corner cell then spot ids; rows:
/// gene id then counts) plus a spot file of "spot_id x y" rows. Spots are
/// placed at rounded grid coordinates, colliding spots are summed and each
/// gene is min-max normalized. Malformed input raises DataError listing
/// every offending line.
StLoadResult load_st_counts(const std::filesystem::path& matrix_file, const std::filesystem::path& spots_file,
                            GridSize grid, std::optional<CoordinateBounds> bounds = std::nullopt);

Dataset st_grids_to_dataset(const StLoadResult& loaded, GridSize grid);

/// Min-max normalization in place; a constant non-zero input maps to all
/// ones and an all-zero input stays zero. Returns (min, max) seen.
std::pair<double, double> normalize_min_max(std::span<float> values);

}  // namespace csmap
