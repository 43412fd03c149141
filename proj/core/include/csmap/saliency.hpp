// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "csmap/backprop_rule.hpp"
#include "csmap/concepts.hpp"
#include "csmap/image_io.hpp"
#include "csmap/vae.hpp"

namespace csmap {

enum class PostProcess { raw, clip_negative, abs };
enum class ChannelReduce { max_abs, sum, none };

std::string to_string(PostProcess p);
std::string to_string(ChannelReduce r);
PostProcess post_process_from(const std::string& s);
ChannelReduce channel_reduce_from(const std::string& s);

/// Gradient of the concept score with respect to every input pixel.
struct SaliencyMap {
  Tensor<float> raw;  // [H,W,C]
  BackpropRule rule = BackpropRule::vanilla();
  std::string concept_name;
  PostProcess post = PostProcess::raw;
  ChannelReduce channel_reduce = ChannelReduce::max_abs;
  double score = 0.0;  // z_c . mu(x) at the unperturbed input
};

enum class Precision { f32, f64 };

/// Backpropagates S = z_c . mu(x) through the encoder only, batchnorm in
/// inference mode, weights frozen. `x` is [H,W,C].
SaliencyMap concept_saliency(const VaeModel& model, const ConceptVector& concept_vector, const Tensor<float>& x,
                             const BackpropRule& rule = BackpropRule::vanilla(), Precision precision = Precision::f32);

/// S = z_c . mu(x) evaluated in the requested precision.
double concept_score_of(const VaeModel& model, const ConceptVector& concept_vector, const Tensor<double>& x,
                        Precision precision = Precision::f64);

/// max(raw, 0). Idempotent.
SaliencyMap clip_negative(SaliencyMap map);
SaliencyMap abs_map(SaliencyMap map);

struct SmoothGradConfig {
  std::size_t n_samples = 50;
  double noise_sigma = 0.15;  // fraction of the input value range
  std::uint64_t seed = 0;
};

/// Mean of maps over x + N(0, (noise_sigma * range(x))^2) copies.
SaliencyMap smooth_grad(const VaeModel& model, const ConceptVector& concept_vector, const Tensor<float>& x,
                        const BackpropRule& rule, const SmoothGradConfig& config);

/// [H,W,C] -> [H,W,1] (max_abs, sum) or unchanged (none).
Tensor<float> reduce_channels(const Tensor<float>& hwc, ChannelReduce reduce);

/// Min-max scaling to [0,1]; a constant map becomes all zeros. NaN throws.
Tensor<float> normalize_map(const Tensor<float>& values);

enum class Colormap { gray, jet };

/// Reduce, normalize and convert to 8 bits.
Image8 render_image(const SaliencyMap& map, Colormap colormap = Colormap::gray);
void render(const SaliencyMap& map, const std::filesystem::path& path, Colormap colormap = Colormap::gray);

/// decode(mu(x) + alpha * z_c) as [H,W,C].
Tensor<float> manipulate(const VaeModel& model, const ConceptVector& concept_vector, const Tensor<float>& x, double alpha);

struct ManipulationSweep {
  std::vector<double> alphas;
  std::vector<Tensor<float>> images;
  /// Concept score of each decoded image after re-encoding.
  std::vector<double> reencoded_scores;
  /// Scores non-decreasing when alphas are visited in ascending order.
  bool monotone = true;
};

ManipulationSweep manipulate_sweep(const VaeModel& model, const ConceptVector& concept_vector, const Tensor<float>& x,
                                   std::span<const double> alphas);

/// Places [H,W,C] images side by side.
Tensor<float> image_strip(std::span<const Tensor<float>> images);

/// Raw signed maps with their rule, concept and post-processing state.
void save_saliency(std::span<const SaliencyMap> maps, const std::filesystem::path& path);
std::vector<SaliencyMap> load_saliency(const std::filesystem::path& path);

}  // namespace csmap
