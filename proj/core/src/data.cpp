// SPDX-License-Identifier: Apache-2.0
#include "csmap/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "csmap/container.hpp"

namespace csmap {

std::string to_string(const ImageShape& s) {
  return std::to_string(s.height) + "x" + std::to_string(s.width) + "x" + std::to_string(s.channels);
}

std::span<const float> Dataset::sample(std::size_t i) const {
  if (i >= size()) throw DataError("sample index " + std::to_string(i) + " out of range (" + std::to_string(size()) + ")");
  return std::span<const float>(samples).subspan(i * shape.pixels(), shape.pixels());
}

Tensor<float> Dataset::sample_tensor(std::size_t i) const {
  auto s = sample(i);
  return Tensor<float>({shape.height, shape.width, shape.channels}, std::vector<float>(s.begin(), s.end()));
}

Tensor<float> Dataset::batch(std::span<const std::size_t> indices) const {
  Tensor<float> out({indices.size(), shape.height, shape.width, shape.channels});
  for (std::size_t k = 0; k < indices.size(); ++k) {
    auto s = sample(indices[k]);
    std::copy(s.begin(), s.end(), out.data() + k * shape.pixels());
  }
  return out;
}

std::vector<std::string> Dataset::label_names() const {
  std::vector<std::string> names;
  for (const auto& [k, v] : labels) names.push_back(k);
  return names;
}

const std::vector<std::uint8_t>& Dataset::label(const std::string& attribute) const {
  auto it = labels.find(attribute);
  if (it == labels.end()) {
    std::string available;
    for (const auto& name : label_names()) available += (available.empty() ? "" : ", ") + name;
    throw DataError("dataset has no attribute '" + attribute + "' (available: " +
                    (available.empty() ? "none" : available) + ")");
  }
  return it->second;
}

const std::vector<float>& Dataset::annotation(const std::string& key) const {
  auto it = annotations.find(key);
  if (it == annotations.end()) throw DataError("dataset has no annotation '" + key + "'");
  return it->second;
}

std::optional<std::size_t> Dataset::find_id(const std::string& id) const {
  auto it = std::find(ids.begin(), ids.end(), id);
  if (it == ids.end()) return std::nullopt;
  return static_cast<std::size_t>(it - ids.begin());
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.shape = shape;
  out.provenance = provenance;
  out.provenance["subset_of"] = size();
  out.samples.reserve(indices.size() * shape.pixels());
  for (std::size_t i : indices) {
    auto s = sample(i);
    out.samples.insert(out.samples.end(), s.begin(), s.end());
    out.ids.push_back(ids[i]);
  }
  for (const auto& [name, values] : labels) {
    auto& dst = out.labels[name];
    for (std::size_t i : indices) dst.push_back(values[i]);
  }
  for (const auto& [name, values] : annotations) {
    auto& dst = out.annotations[name];
    for (std::size_t i : indices) dst.push_back(values[i]);
  }
  return out;
}

void Dataset::validate() const {
  if (shape.pixels() == 0) throw DataError("dataset has an empty sample shape");
  if (samples.size() != ids.size() * shape.pixels())
    throw DataError("dataset holds " + std::to_string(samples.size()) + " values for " + std::to_string(ids.size()) +
                    " samples of shape " + to_string(shape));
  for (const auto& [name, values] : labels) {
    if (values.size() != size()) throw DataError("label '" + name + "' has wrong length");
    if (std::any_of(values.begin(), values.end(), [](std::uint8_t v) { return v > 1; }))
      throw DataError("label '" + name + "' has non-binary values");
  }
  for (const auto& [name, values] : annotations)
    if (values.size() != size()) throw DataError("annotation '" + name + "' has wrong length");
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  dataset.validate();
  Container c;
  c.manifest["kind"] = "dataset";
  c.manifest["shape"] = {{"height", dataset.shape.height}, {"width", dataset.shape.width},
                         {"channels", dataset.shape.channels}};
  c.manifest["count"] = dataset.size();
  c.manifest["ids"] = dataset.ids;
  c.manifest["labels"] = nlohmann::json::object();
  for (const auto& [name, values] : dataset.labels) c.manifest["labels"][name] = values;
  c.manifest["seed"] = dataset.provenance.value("seed", nlohmann::json());
  c.manifest["provenance"] = dataset.provenance;
  c.add("samples", Tensor<float>({dataset.size(), dataset.shape.height, dataset.shape.width, dataset.shape.channels},
                                 dataset.samples));
  for (const auto& [name, values] : dataset.annotations)
    c.add("annotation/" + name, Tensor<float>({values.size()}, values));
  write_container(c, path);
}

Dataset load_dataset(const std::filesystem::path& path) {
  Container c = read_container(path);
  if (c.manifest.value("kind", "") != "dataset") throw DataError(path.string() + " is not a dataset container");
  Dataset d;
  try {
    const auto& s = c.manifest.at("shape");
    d.shape = {s.at("height").get<std::size_t>(), s.at("width").get<std::size_t>(),
               s.at("channels").get<std::size_t>()};
    d.ids = c.manifest.at("ids").get<std::vector<std::string>>();
    for (const auto& [name, values] : c.manifest.at("labels").items())
      d.labels[name] = values.get<std::vector<std::uint8_t>>();
    d.provenance = c.manifest.value("provenance", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": malformed dataset manifest: " + e.what());
  }
  d.samples = c.array("samples").to_vector();
  for (const auto& a : c.arrays) {
    if (a.name.rfind("annotation/", 0) == 0) d.annotations[a.name.substr(11)] = a.tensor.to_vector();
  }
  d.validate();
  return d;
}

std::pair<double, double> normalize_min_max(std::span<float> values) {
  if (values.empty()) return {0.0, 0.0};
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, hi = *hi_it;
  if (hi == lo) {
    std::fill(values.begin(), values.end(), hi == 0.0 ? 0.0f : 1.0f);
  } else {
    for (float& v : values) v = static_cast<float>((v - lo) / (hi - lo));
  }
  return {lo, hi};
}

namespace {

// Bilinear upsampling of a coarse random grid: smooth mid-gray background.
void smooth_background(std::mt19937_64& rng, std::size_t size, std::size_t channels, double amplitude, float* out) {
  constexpr std::size_t kControl = 5;
  std::uniform_real_distribution<double> level(0.5 - amplitude, 0.5 + amplitude);
  std::vector<float> grid(kControl * kControl * channels);
  for (float& v : grid) v = static_cast<float>(level(rng));
  const double scale = static_cast<double>(kControl - 1) / static_cast<double>(std::max<std::size_t>(1, size - 1));
  for (std::size_t i = 0; i < size; ++i) {
    const double u = i * scale;
    const auto i0 = std::min<std::size_t>(static_cast<std::size_t>(u), kControl - 2);
    const double fu = u - i0;
    for (std::size_t j = 0; j < size; ++j) {
      const double v = j * scale;
      const auto j0 = std::min<std::size_t>(static_cast<std::size_t>(v), kControl - 2);
      const double fv = v - j0;
      for (std::size_t c = 0; c < channels; ++c) {
        auto g = [&](std::size_t a, std::size_t b) { return grid[(a * kControl + b) * channels + c]; };
        const double val = (1 - fu) * ((1 - fv) * g(i0, j0) + fv * g(i0, j0 + 1)) +
                           fu * ((1 - fv) * g(i0 + 1, j0) + fv * g(i0 + 1, j0 + 1));
        out[(i * size + j) * channels + c] = static_cast<float>(val);
      }
    }
  }
}

}  // namespace

Dataset gen_squares(const SquaresConfig& cfg) {
  if (cfg.n == 0) throw DataError("gen_squares: n must be positive");
  if (cfg.image_size < 2 || cfg.side == 0 || cfg.side >= cfg.image_size)
    throw DataError("gen_squares: need 0 < side < image size, got side " + std::to_string(cfg.side) +
                    " for image size " + std::to_string(cfg.image_size));
  if (!(cfg.fraction_with > 0.0 && cfg.fraction_with < 1.0))
    throw DataError("gen_squares: fraction_with must lie in (0,1)");
  if (cfg.channels != 1 && cfg.channels != 3) throw DataError("gen_squares: channels must be 1 or 3");
  if (!(cfg.background_amplitude >= 0.0 && cfg.background_amplitude <= 0.5))
    throw DataError("gen_squares: background amplitude must lie in [0, 0.5]");

  std::mt19937_64 rng(cfg.seed);
  Dataset d;
  d.shape = {cfg.image_size, cfg.image_size, cfg.channels};
  d.samples.assign(cfg.n * d.shape.pixels(), 0.0f);
  for (std::size_t i = 0; i < cfg.n; ++i) {
    d.ids.push_back("img" + std::to_string(i));
    smooth_background(rng, cfg.image_size, cfg.channels, cfg.background_amplitude, d.samples.data() + i * d.shape.pixels());
  }

  const auto n_with = static_cast<std::size_t>(std::floor(static_cast<double>(cfg.n) * cfg.fraction_with + 0.5));
  std::vector<std::size_t> order(cfg.n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  auto& label = d.labels["square"];
  label.assign(cfg.n, 0);
  auto& rows = d.annotations["square_row"];
  auto& cols = d.annotations["square_col"];
  rows.assign(cfg.n, -1.0f);
  cols.assign(cfg.n, -1.0f);
  d.annotations["square_side"].assign(cfg.n, static_cast<float>(cfg.side));

  std::array<float, 3> color{};
  if (cfg.color) {
    color = *cfg.color;
  } else {
    color.fill(cfg.brightness == Brightness::bright ? kBrightSquareValue : kDarkSquareValue);
  }
  std::uniform_int_distribution<std::size_t> pos(0, cfg.image_size - cfg.side);
  std::vector<std::size_t> chosen(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_with));
  std::sort(chosen.begin(), chosen.end());
  for (std::size_t idx : chosen) {
    const std::size_t r0 = pos(rng), c0 = pos(rng);
    float* img = d.samples.data() + idx * d.shape.pixels();
    for (std::size_t r = r0; r < r0 + cfg.side; ++r)
      for (std::size_t c = c0; c < c0 + cfg.side; ++c)
        for (std::size_t ch = 0; ch < cfg.channels; ++ch)
          img[(r * cfg.image_size + c) * cfg.channels + ch] = color[ch];
    label[idx] = 1;
    rows[idx] = static_cast<float>(r0);
    cols[idx] = static_cast<float>(c0);
  }

  d.provenance = {{"generator", "squares"},
                  {"n", cfg.n},
                  {"image_size", cfg.image_size},
                  {"channels", cfg.channels},
                  {"side", cfg.side},
                  {"brightness", cfg.brightness == Brightness::bright ? "bright" : "dark"},
                  {"fraction_with", cfg.fraction_with},
                  {"background_amplitude", cfg.background_amplitude},
                  {"seed", cfg.seed}};
  if (cfg.color) d.provenance["color"] = *cfg.color;
  return d;
}

std::vector<Tensor<float>> st_templates(std::size_t grid, std::size_t layer_patterns) {
  if (layer_patterns < 2) throw DataError("st_templates: need at least 2 layer patterns");
  if (grid < 4) throw DataError("st_templates: grid too small");
  const double center = (static_cast<double>(grid) - 1.0) / 2.0;
  const double outer = static_cast<double>(grid) / 2.0 - 1.0;
  std::vector<double> radii(layer_patterns + 1);
  for (std::size_t k = 0; k <= layer_patterns; ++k)
    radii[k] = outer * std::sqrt(static_cast<double>(k) / static_cast<double>(layer_patterns));

  std::vector<Tensor<float>> templates(layer_patterns, Tensor<float>({grid, grid}));
  for (std::size_t i = 0; i < grid; ++i)
    for (std::size_t j = 0; j < grid; ++j) {
      const double r = std::hypot(static_cast<double>(i) - center, static_cast<double>(j) - center);
      for (std::size_t k = 0; k < layer_patterns; ++k)
        if (r >= radii[k] && r < radii[k + 1]) templates[k][i * grid + j] = 1.0f;
    }
  return templates;
}

Dataset gen_st_layers(const StLayersConfig& cfg) {
  if (cfg.layer_patterns < 2) throw DataError("gen_st_layers: layer_patterns must be at least 2");
  if (cfg.n_genes == 0) throw DataError("gen_st_layers: n_genes must be positive");
  if (cfg.noise < 0.0) throw DataError("gen_st_layers: noise must be non-negative");
  const auto templates = st_templates(cfg.grid, cfg.layer_patterns);

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Dataset d;
  d.shape = {cfg.grid, cfg.grid, 1};
  d.samples.resize(cfg.n_genes * d.shape.pixels());
  auto& template_id = d.annotations["template"];
  for (std::size_t k = 0; k < cfg.layer_patterns; ++k) d.labels["layer" + std::to_string(k)].assign(cfg.n_genes, 0);

  for (std::size_t g = 0; g < cfg.n_genes; ++g) {
    const std::size_t t = g % cfg.layer_patterns;
    std::span<float> gene(d.samples.data() + g * d.shape.pixels(), d.shape.pixels());
    for (std::size_t p = 0; p < gene.size(); ++p) {
      const double factor = std::max(0.0, 1.0 + cfg.noise * gauss(rng));
      gene[p] = static_cast<float>(templates[t][p] * factor);
    }
    normalize_min_max(gene);
    d.ids.push_back("g" + std::to_string(g));
    d.labels["layer" + std::to_string(t)][g] = 1;
    template_id.push_back(static_cast<float>(t));
  }
  d.provenance = {{"generator", "st_layers"},      {"n_genes", cfg.n_genes}, {"layer_patterns", cfg.layer_patterns},
                  {"noise", cfg.noise},            {"seed", cfg.seed},       {"grid", cfg.grid}};
  return d;
}

Dataset st_grids_to_dataset(const StLoadResult& loaded, GridSize grid) {
  Dataset d;
  d.shape = {grid.height, grid.width, 1};
  for (const auto& g : loaded.genes) {
    if (g.counts.size() != grid.height * grid.width) throw DataError("grid for " + g.gene_id + " has wrong size");
    d.ids.push_back(g.gene_id);
    d.samples.insert(d.samples.end(), g.counts.values().begin(), g.counts.values().end());
  }
  d.provenance = {{"generator", "st_counts"},
                  {"grid", {grid.height, grid.width}},
                  {"dropped_all_zero", loaded.dropped_all_zero.size()}};
  return d;
}

}  // namespace csmap
