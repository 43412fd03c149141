// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace csmap::cli {

struct GenSquaresOptions {
  std::size_t n = 2000;
  std::size_t image_size = 32;
  std::size_t channels = 1;
  std::size_t side = 8;
  std::string brightness = "bright";
  std::vector<float> color;
  double fraction_with = 0.5;
  double background_amplitude = 0.1;
  std::string out;
};

struct GenStOptions {
  std::size_t genes = 300;
  std::size_t layers = 3;
  double noise = 0.2;
  std::size_t grid = 32;
  std::string out;
};

struct GenStLoadOptions {
  std::string matrix;
  std::string spots;
  std::size_t height = 32;
  std::size_t width = 32;
  std::vector<double> bounds;  // x_min x_max y_min y_max
  std::string out;
};

struct TrainOptions {
  std::string data;
  std::string preset = "st";
  std::size_t latent_dim = 0;  // 0 keeps the preset's value
  bool upsample_decoder = false;
  std::size_t epochs = 30;
  double learning_rate = 1e-3;
  std::size_t batch_size = 16;
  std::optional<std::uint64_t> init_seed;
  std::string out;
};

struct ConceptOptions {
  std::string model;
  std::string data;
  std::string attr;
  std::vector<std::string> anchors;
  std::size_t k = 50;
  std::size_t n_per_group = 2000;
  std::size_t bins = 50;
  std::string name;
  std::string eval_data;
  std::string out;
  std::string report;
};

struct SaliencyOptions {
  std::string model;
  std::string concept_file;
  std::string data;
  std::vector<std::string> ids;
  std::size_t limit = 8;
  std::vector<std::string> rules{"guided"};
  std::optional<double> tau;
  std::optional<double> tau_percentile;
  std::size_t smoothgrad_samples = 0;
  double smoothgrad_sigma = 0.15;
  std::string post = "raw";
  bool clip = false;
  std::string channel_reduce = "max-abs";
  std::string colormap = "gray";
  std::string format = "png";
  std::string precision = "f32";
  std::string out_dir;
};

struct ManipulateOptions {
  std::string model;
  std::string concept_file;
  std::string data;
  std::string id;
  std::vector<double> alphas{-2, -1, 0, 1, 2};
  std::string out;
};

// Each command writes its artifacts plus the resolved config it was given.
void run_gen_squares(const GenSquaresOptions& o, std::uint64_t seed, const nlohmann::json& resolved);
void run_gen_st(const GenStOptions& o, std::uint64_t seed, const nlohmann::json& resolved);
void run_gen_st_load(const GenStLoadOptions& o, const nlohmann::json& resolved);
void run_train(const TrainOptions& o, std::uint64_t seed, const nlohmann::json& resolved);
void run_concept(const ConceptOptions& o, const nlohmann::json& resolved);
void run_saliency(const SaliencyOptions& o, std::uint64_t seed, const nlohmann::json& resolved);
void run_manipulate(const ManipulateOptions& o, const nlohmann::json& resolved);

}  // namespace csmap::cli
