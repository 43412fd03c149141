// SPDX-License-Identifier: Apache-2.0
#include "commands.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "csmap/concepts.hpp"
#include "csmap/data.hpp"
#include "csmap/error.hpp"
#include "csmap/image_io.hpp"
#include "csmap/saliency.hpp"
#include "csmap/vae.hpp"

namespace csmap::cli {
namespace fs = std::filesystem;

namespace {

void make_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

void write_text(const fs::path& p, const std::string& text) {
  make_parent(p);
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
  if (!out) throw IoError("failed writing " + p.string());
}

void write_json(const fs::path& p, const nlohmann::json& j) { write_text(p, j.dump(2) + "\n"); }

fs::path sidecar(const fs::path& out, const std::string& suffix) { return fs::path(out.string() + suffix); }

void require_path(const std::string& value, const std::string& flag) {
  if (value.empty()) throw UsageError(flag + " is required");
}

Brightness brightness_from(const std::string& s) {
  if (s == "bright") return Brightness::bright;
  if (s == "dark") return Brightness::dark;
  throw UsageError("--brightness must be bright or dark, got '" + s + "'");
}

Precision precision_from(const std::string& s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  throw UsageError("--precision must be f32 or f64, got '" + s + "'");
}

Colormap colormap_from(const std::string& s) {
  if (s == "gray") return Colormap::gray;
  if (s == "jet") return Colormap::jet;
  throw UsageError("--colormap must be gray or jet, got '" + s + "'");
}

std::size_t index_of(const Dataset& d, const std::string& id) {
  const auto i = d.find_id(id);
  if (!i) throw DataError("dataset has no sample '" + id + "'");
  return *i;
}

void save_dataset_with_config(const Dataset& d, const std::string& out, const nlohmann::json& resolved) {
  require_path(out, "--out");
  make_parent(out);
  save_dataset(d, out);
  write_json(sidecar(out, ".config.json"), resolved);
  std::cout << "wrote " << d.size() << " samples of " << to_string(d.shape) << " to " << out << "\n";
}

}  // namespace

void run_gen_squares(const GenSquaresOptions& o, std::uint64_t seed, const nlohmann::json& resolved) {
  SquaresConfig c;
  c.n = o.n;
  c.image_size = o.image_size;
  c.channels = o.channels;
  c.side = o.side;
  c.brightness = brightness_from(o.brightness);
  if (!o.color.empty()) {
    if (o.color.size() != c.channels) throw UsageError("--color needs one value per channel");
    std::array<float, 3> rgb{};
    std::copy(o.color.begin(), o.color.end(), rgb.begin());
    if (c.channels == 1) rgb[1] = rgb[2] = rgb[0];
    c.color = rgb;
  }
  c.fraction_with = o.fraction_with;
  c.background_amplitude = o.background_amplitude;
  c.seed = seed;
  save_dataset_with_config(gen_squares(c), o.out, resolved);
}

void run_gen_st(const GenStOptions& o, std::uint64_t seed, const nlohmann::json& resolved) {
  StLayersConfig c;
  c.n_genes = o.genes;
  c.layer_patterns = o.layers;
  c.noise = o.noise;
  c.grid = o.grid;
  c.seed = seed;
  save_dataset_with_config(gen_st_layers(c), o.out, resolved);
}

void run_gen_st_load(const GenStLoadOptions& o, const nlohmann::json& resolved) {
  std::optional<CoordinateBounds> bounds;
  if (!o.bounds.empty()) {
    if (o.bounds.size() != 4) throw UsageError("--bounds takes x_min x_max y_min y_max");
    bounds = CoordinateBounds{o.bounds[0], o.bounds[1], o.bounds[2], o.bounds[3]};
  }
  const GridSize grid{o.height, o.width};
  const auto loaded = load_st_counts(o.matrix, o.spots, grid, bounds);
  for (const auto& g : loaded.dropped_all_zero) std::cerr << "dropped all-zero gene " << g << "\n";
  save_dataset_with_config(st_grids_to_dataset(loaded, grid), o.out, resolved);
}

void run_train(const TrainOptions& o, std::uint64_t seed, const nlohmann::json& resolved) {
  require_path(o.out, "--out");
  const Dataset data = load_dataset(o.data);
  VaeArchitecture arch = VaeArchitecture::preset(o.preset);
  if (o.latent_dim > 0) arch = arch.with_latent_dim(o.latent_dim);
  if (o.upsample_decoder) arch = arch.with_upsample_decoder();

  VaeModel model(arch, o.init_seed.value_or(seed));
  TrainConfig tc;
  tc.epochs = o.epochs;
  tc.learning_rate = o.learning_rate;
  tc.batch_size = o.batch_size;
  tc.seed = seed;
  tc.on_epoch = [&](std::size_t e, const EpochLoss& l) {
    std::cerr << "epoch " << e + 1 << "/" << o.epochs << "  total " << l.total << "  reconstruction "
              << l.reconstruction << "  kl " << l.kl << "\n";
  };
  train(model, data, tc);

  make_parent(o.out);
  save_checkpoint(model, o.out);
  nlohmann::json history = nlohmann::json::array();
  for (const auto& e : model.training().history)
    history.push_back({{"total", e.total}, {"reconstruction", e.reconstruction}, {"kl", e.kl}});
  write_json(sidecar(o.out, ".history.json"),
             {{"epochs", o.epochs}, {"learning_rate", o.learning_rate}, {"batch_size", o.batch_size},
              {"seed", seed}, {"history", history}});
  write_json(sidecar(o.out, ".config.json"), resolved);
  std::cout << "wrote checkpoint " << o.out << " (" << model.parameter_count() << " parameters)\n";
}

void run_concept(const ConceptOptions& o, const nlohmann::json& resolved) {
  require_path(o.out, "--out");
  if (o.attr.empty() == o.anchors.empty()) throw UsageError("give exactly one of --attr or --anchors");
  const VaeModel model = load_checkpoint(o.model);
  const Dataset data = load_dataset(o.data);
  const auto codes = encode_dataset(model, data);

  ConceptVector cv;
  nlohmann::json report;
  if (!o.attr.empty()) {
    const auto& labels = data.label(o.attr);
    const auto n_pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), std::uint8_t{1}));
    if (n_pos == 0 || n_pos == labels.size())
      throw DataError("AUC is undefined: attribute '" + o.attr + "' has only " + (n_pos == 0 ? "negative" : "positive") +
                      " samples in " + o.data);
    std::vector<LatentCode> pos, neg;
    for (std::size_t i = 0; i < codes.size(); ++i) {
      auto& group = labels[i] ? pos : neg;
      if (group.size() < o.n_per_group) group.push_back(codes[i]);
    }
    cv = concept_from_attribute(pos, neg, o.name.empty() ? o.attr : o.name);
    const Dataset eval = o.eval_data.empty() ? data : load_dataset(o.eval_data);
    report = to_json(score_report(model, cv, eval, o.attr, o.bins));
    report["evaluated_on"] = o.eval_data.empty() ? o.data : o.eval_data;
  } else {
    const auto cc = concept_from_correlation(codes, data.ids, o.anchors, o.k, o.name);
    cv = cc.concept_vector;
    nlohmann::json selected = nlohmann::json::array();
    for (std::size_t i : cc.selected)
      selected.push_back({{"id", data.ids[i]}, {"correlation", cc.correlations[i]}});
    report = {{"concept", cv.name},
              {"anchors", o.anchors},
              {"k", o.k},
              {"selected", selected},
              {"excluded_zero_variance", cc.excluded_zero_variance}};
  }
  make_parent(o.out);
  save_concept(cv, o.out);
  write_json(o.report.empty() ? sidecar(o.out, ".report.json") : fs::path(o.report), report);
  write_json(sidecar(o.out, ".config.json"), resolved);
  std::cout << "wrote concept '" << cv.name << "' to " << o.out;
  if (report.contains("auc")) std::cout << " (AUC " << report["auc"].get<double>() << ")";
  std::cout << "\n";
}

void run_saliency(const SaliencyOptions& o, std::uint64_t seed, const nlohmann::json& resolved) {
  require_path(o.out_dir, "--out-dir");
  if (o.tau && o.tau_percentile) throw UsageError("--tau and --tau-percentile are mutually exclusive");
  if (o.format != "png" && o.format != "pgm" && o.format != "ppm")
    throw UsageError("--format must be png, pgm or ppm");
  std::optional<ThresholdSpec> tau;
  if (o.tau) tau = ThresholdSpec{ThresholdMode::absolute, *o.tau};
  if (o.tau_percentile) tau = ThresholdSpec{ThresholdMode::percentile, *o.tau_percentile};

  std::vector<BackpropRule> rules;
  bool any_rectified = false;
  for (const auto& r : o.rules) {
    const bool rectified = r == "rectgrad" || r == "rectified";
    any_rectified = any_rectified || rectified;
    rules.push_back(BackpropRule::parse(r, rectified ? tau : std::nullopt));
  }
  if (tau && !any_rectified) throw UsageError("--tau/--tau-percentile only apply to --rule rectgrad");
  const PostProcess post = o.clip ? PostProcess::clip_negative : post_process_from(o.post);
  const ChannelReduce reduce = channel_reduce_from(o.channel_reduce);
  const Colormap cmap = colormap_from(o.colormap);
  const Precision precision = precision_from(o.precision);

  const VaeModel model = load_checkpoint(o.model);
  const ConceptVector cv = load_concept(o.concept_file);
  const Dataset data = load_dataset(o.data);
  std::vector<std::size_t> picks;
  for (const auto& id : o.ids) picks.push_back(index_of(data, id));
  if (o.ids.empty())
    for (std::size_t i = 0; i < std::min(o.limit, data.size()); ++i) picks.push_back(i);

  fs::create_directories(o.out_dir);
  std::vector<SaliencyMap> maps;
  nlohmann::json index = nlohmann::json::array();
  for (std::size_t i : picks) {
    const Tensor<float> x = data.sample_tensor(i);
    for (const auto& rule : rules) {
      SaliencyMap m = o.smoothgrad_samples > 1
                          ? smooth_grad(model, cv, x, rule, {o.smoothgrad_samples, o.smoothgrad_sigma, seed})
                          : concept_saliency(model, cv, x, rule, precision);
      if (post == PostProcess::clip_negative) m = clip_negative(std::move(m));
      if (post == PostProcess::abs) m = abs_map(std::move(m));
      m.channel_reduce = reduce;
      const std::string file = data.ids[i] + "_" + rule.name() + "." + o.format;
      render(m, fs::path(o.out_dir) / file, cmap);
      index.push_back({{"id", data.ids[i]}, {"rule", rule.name()}, {"score", m.score}, {"image", file}});
      maps.push_back(std::move(m));
    }
  }
  save_saliency(maps, fs::path(o.out_dir) / "maps.bin");
  write_json(fs::path(o.out_dir) / "index.json", index);
  write_json(fs::path(o.out_dir) / "config.json", resolved);
  std::cout << "wrote " << maps.size() << " saliency maps to " << o.out_dir << "\n";
}

void run_manipulate(const ManipulateOptions& o, const nlohmann::json& resolved) {
  require_path(o.out, "--out");
  if (o.alphas.empty()) throw UsageError("--alphas needs at least one value");
  const VaeModel model = load_checkpoint(o.model);
  const ConceptVector cv = load_concept(o.concept_file);
  const Dataset data = load_dataset(o.data);
  const std::size_t i = o.id.empty() ? 0 : index_of(data, o.id);

  const auto sweep = manipulate_sweep(model, cv, data.sample_tensor(i), o.alphas);
  make_parent(o.out);
  write_image(to_image8(image_strip(sweep.images)), o.out);
  write_json(sidecar(o.out, ".json"), {{"id", data.ids[i]},
                                       {"concept", cv.name},
                                       {"alphas", sweep.alphas},
                                       {"reencoded_scores", sweep.reencoded_scores},
                                       {"monotone", sweep.monotone}});
  write_json(sidecar(o.out, ".config.json"), resolved);
  std::cout << "wrote " << sweep.images.size() << "-panel strip to " << o.out
            << (sweep.monotone ? " (score monotone in alpha)" : " (score NOT monotone in alpha)") << "\n";
}

}  // namespace csmap::cli
