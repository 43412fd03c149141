// SPDX-License-Identifier: Apache-2.0
#include "csmap/saliency.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>

#include "csmap/container.hpp"

namespace csmap {
namespace {

void check_concept(const VaeModel& model, const ConceptVector& cv) {
  if (cv.direction.size() != model.latent_dim())
    throw DataError("concept '" + cv.name + "' has " + std::to_string(cv.direction.size()) +
                    " dims but the model latent_dim is " + std::to_string(model.latent_dim()));
}

Shape input_hwc(const VaeModel& model) {
  const ImageShape& s = model.architecture().input;
  return {s.height, s.width, s.channels};
}

template <typename In>
void check_input(const VaeModel& model, const Tensor<In>& x) {
  if (x.shape() != input_hwc(model))
    throw DataError("saliency input " + to_string(x.shape()) + " does not match model input " +
                    to_string(model.architecture().input));
}

/// Records S = z_c . mu(x) for one [H,W,C] input.
template <typename Scalar>
struct ScoreGraph {
  Graph<Scalar> graph;
  NodeId input;
  NodeId score;
};

template <typename Scalar, typename In>
void record_score(ScoreGraph<Scalar>& sg, const VaeModel& model, const ParameterSet<Scalar>& params,
                  const ParameterSet<Scalar>& stats, const ConceptVector& cv, const Tensor<In>& x) {
  sg.input = sg.graph.input(nhwc_to_nchw<Scalar>(x), true);
  const auto heads = record_encoder(sg.graph, model.architecture(), params, stats, sg.input, BatchNormMode::infer,
                                    false);
  Tensor<Scalar> zc({1, cv.direction.size()});
  for (std::size_t i = 0; i < cv.direction.size(); ++i) zc[i] = static_cast<Scalar>(cv.direction[i]);
  sg.score = sg.graph.dot(heads.mean, sg.graph.constant(std::move(zc)));
}

template <typename Scalar>
SaliencyMap saliency_in(const VaeModel& model, const ParameterSet<Scalar>& params, const ParameterSet<Scalar>& stats,
                        const ConceptVector& cv, const Tensor<float>& x, const BackpropRule& rule) {
  ScoreGraph<Scalar> sg;
  record_score(sg, model, params, stats, cv, x);
  SaliencyMap map;
  map.score = static_cast<double>(sg.graph.forward(sg.score)[0]);
  sg.graph.backward(sg.score, rule);
  map.raw = nchw_to_nhwc<float>(sg.graph.grad(sg.input));
  map.raw.reshape(input_hwc(model));
  map.rule = rule;
  map.concept_name = cv.name;
  return map;
}

std::array<float, 3> jet(float v) {
  auto ramp = [](float t) { return std::clamp(1.5f - std::abs(t), 0.0f, 1.0f); };
  return {ramp(4.0f * v - 3.0f), ramp(4.0f * v - 2.0f), ramp(4.0f * v - 1.0f)};
}

}  // namespace

std::string to_string(PostProcess p) {
  switch (p) {
    case PostProcess::raw: return "raw";
    case PostProcess::clip_negative: return "clip-negative";
    case PostProcess::abs: return "abs";
  }
  return "?";
}

std::string to_string(ChannelReduce r) {
  switch (r) {
    case ChannelReduce::max_abs: return "max-abs";
    case ChannelReduce::sum: return "sum";
    case ChannelReduce::none: return "none";
  }
  return "?";
}

PostProcess post_process_from(const std::string& s) {
  if (s == "raw") return PostProcess::raw;
  if (s == "clip-negative" || s == "clip") return PostProcess::clip_negative;
  if (s == "abs") return PostProcess::abs;
  throw UsageError("unknown post-processing '" + s + "' (expected raw, clip-negative or abs)");
}

ChannelReduce channel_reduce_from(const std::string& s) {
  if (s == "max-abs") return ChannelReduce::max_abs;
  if (s == "sum") return ChannelReduce::sum;
  if (s == "none") return ChannelReduce::none;
  throw UsageError("unknown channel reduction '" + s + "' (expected max-abs, sum or none)");
}

SaliencyMap concept_saliency(const VaeModel& model, const ConceptVector& concept_vector, const Tensor<float>& x,
                             const BackpropRule& rule, Precision precision) {
  check_concept(model, concept_vector);
  check_input(model, x);
  if (precision == Precision::f32)
    return saliency_in(model, model.parameters(), model.batchnorm_stats(), concept_vector, x, rule);
  const auto params = cast_parameters<double>(model.parameters());
  const auto stats = cast_parameters<double>(model.batchnorm_stats());
  return saliency_in(model, params, stats, concept_vector, x, rule);
}

double concept_score_of(const VaeModel& model, const ConceptVector& concept_vector, const Tensor<double>& x,
                        Precision precision) {
  check_concept(model, concept_vector);
  check_input(model, x);
  if (precision == Precision::f32) {
    ScoreGraph<float> sg;
    record_score(sg, model, model.parameters(), model.batchnorm_stats(), concept_vector, x);
    return sg.graph.forward(sg.score)[0];
  }
  const auto params = cast_parameters<double>(model.parameters());
  const auto stats = cast_parameters<double>(model.batchnorm_stats());
  ScoreGraph<double> sg;
  record_score(sg, model, params, stats, concept_vector, x);
  return sg.graph.forward(sg.score)[0];
}

SaliencyMap clip_negative(SaliencyMap map) {
  for (float& v : map.raw.values()) v = std::max(v, 0.0f);
  if (map.post == PostProcess::raw) map.post = PostProcess::clip_negative;
  return map;
}

SaliencyMap abs_map(SaliencyMap map) {
  for (float& v : map.raw.values()) v = std::abs(v);
  map.post = PostProcess::abs;
  return map;
}

SaliencyMap smooth_grad(const VaeModel& model, const ConceptVector& concept_vector, const Tensor<float>& x,
                        const BackpropRule& rule, const SmoothGradConfig& cfg) {
  if (cfg.n_samples == 0) throw UsageError("smooth_grad: n_samples must be at least 1");
  if (!(cfg.noise_sigma >= 0.0)) throw UsageError("smooth_grad: noise_sigma must be non-negative");
  check_input(model, x);
  const auto [lo, hi] = std::minmax_element(x.values().begin(), x.values().end());
  const double sigma = cfg.noise_sigma * static_cast<double>(*hi - *lo);
  const SaliencyMap base = concept_saliency(model, concept_vector, x, rule);
  if (sigma == 0.0) return base;

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> noise(0.0, sigma);
  std::vector<double> acc(x.size(), 0.0);
  Tensor<float> noisy(x.shape());
  for (std::size_t s = 0; s < cfg.n_samples; ++s) {
    for (std::size_t i = 0; i < x.size(); ++i) noisy[i] = static_cast<float>(x[i] + noise(rng));
    const SaliencyMap m = concept_saliency(model, concept_vector, noisy, rule);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += m.raw[i];
  }
  SaliencyMap out = base;
  for (std::size_t i = 0; i < acc.size(); ++i)
    out.raw[i] = static_cast<float>(acc[i] / static_cast<double>(cfg.n_samples));
  return out;
}

Tensor<float> reduce_channels(const Tensor<float>& hwc, ChannelReduce reduce) {
  if (hwc.rank() != 3) throw DataError("reduce_channels: expected [H,W,C], got " + to_string(hwc.shape()));
  if (reduce == ChannelReduce::none || hwc.dim(2) == 1) return hwc;
  const std::size_t h = hwc.dim(0), w = hwc.dim(1), c = hwc.dim(2);
  Tensor<float> out({h, w, 1});
  for (std::size_t p = 0; p < h * w; ++p) {
    float acc = 0.0f;
    for (std::size_t k = 0; k < c; ++k) {
      const float v = hwc[p * c + k];
      acc = reduce == ChannelReduce::sum ? acc + v : std::max(acc, std::abs(v));
    }
    out[p] = acc;
  }
  return out;
}

Tensor<float> normalize_map(const Tensor<float>& values) {
  Tensor<float> out = values;
  if (out.empty()) return out;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (!std::isfinite(out[i])) throw NumericalError("saliency map has a non-finite value at index " + std::to_string(i));
  const auto [lo, hi] = std::minmax_element(out.values().begin(), out.values().end());
  const float mn = *lo, mx = *hi;
  if (mx == mn) {
    out.fill(0.0f);
    return out;
  }
  for (float& v : out.values()) v = (v - mn) / (mx - mn);
  return out;
}

Image8 render_image(const SaliencyMap& map, Colormap colormap) {
  const Tensor<float> norm = normalize_map(reduce_channels(map.raw, map.channel_reduce));
  if (colormap == Colormap::gray) return to_image8(norm);
  if (norm.dim(2) != 1) throw UsageError("the jet colormap needs a single-channel map");
  Tensor<float> rgb({norm.dim(0), norm.dim(1), 3});
  for (std::size_t p = 0; p < norm.size(); ++p) {
    const auto c = jet(norm[p]);
    for (std::size_t k = 0; k < 3; ++k) rgb[p * 3 + k] = c[k];
  }
  return to_image8(rgb);
}

void render(const SaliencyMap& map, const std::filesystem::path& path, Colormap colormap) {
  write_image(render_image(map, colormap), path);
}

Tensor<float> manipulate(const VaeModel& model, const ConceptVector& concept_vector, const Tensor<float>& x,
                         double alpha) {
  check_concept(model, concept_vector);
  check_input(model, x);
  std::vector<float> z = encode(model, x).front().mean;
  for (std::size_t i = 0; i < z.size(); ++i)
    z[i] = static_cast<float>(static_cast<double>(z[i]) + alpha * static_cast<double>(concept_vector.direction[i]));
  return decode(model, z);
}

ManipulationSweep manipulate_sweep(const VaeModel& model, const ConceptVector& concept_vector, const Tensor<float>& x,
                                   std::span<const double> alphas) {
  if (alphas.empty()) throw UsageError("manipulate: at least one alpha is required");
  ManipulationSweep sweep;
  sweep.alphas.assign(alphas.begin(), alphas.end());
  for (double a : alphas) {
    sweep.images.push_back(manipulate(model, concept_vector, x, a));
    sweep.reencoded_scores.push_back(concept_score(concept_vector, encode(model, sweep.images.back()).front().mean));
  }
  std::vector<std::size_t> order(alphas.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return alphas[a] < alphas[b]; });
  for (std::size_t i = 1; i < order.size(); ++i)
    if (sweep.reencoded_scores[order[i]] < sweep.reencoded_scores[order[i - 1]]) sweep.monotone = false;
  return sweep;
}

Tensor<float> image_strip(std::span<const Tensor<float>> images) {
  if (images.empty()) throw UsageError("image_strip: no images");
  const Shape s = images.front().shape();
  if (s.size() != 3) throw DataError("image_strip: expected [H,W,C] images, got " + to_string(s));
  for (const auto& im : images)
    if (im.shape() != s) throw DataError("image_strip: images differ in shape");
  const std::size_t h = s[0], w = s[1], c = s[2], n = images.size();
  Tensor<float> out({h, w * n, c});
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < h; ++i)
      std::copy_n(images[k].data() + i * w * c, w * c, out.data() + (i * w * n + k * w) * c);
  return out;
}

void save_saliency(std::span<const SaliencyMap> maps, const std::filesystem::path& path) {
  Container c;
  c.manifest["kind"] = "saliency";
  nlohmann::json entries = nlohmann::json::array();
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const auto& m = maps[i];
    nlohmann::json e = {{"array", "map/" + std::to_string(i)},
                        {"rule", std::string(to_string(m.rule.kind()))},
                        {"rule_name", m.rule.name()},
                        {"concept", m.concept_name},
                        {"post", to_string(m.post)},
                        {"channel_reduce", to_string(m.channel_reduce)},
                        {"score", m.score}};
    if (m.rule.tau())
      e["tau"] = {{"mode", m.rule.tau()->mode == ThresholdMode::absolute ? "absolute" : "percentile"},
                  {"value", m.rule.tau()->value}};
    entries.push_back(std::move(e));
    c.add("map/" + std::to_string(i), m.raw);
  }
  c.manifest["maps"] = std::move(entries);
  write_container(c, path);
}

std::vector<SaliencyMap> load_saliency(const std::filesystem::path& path) {
  const Container c = read_container(path);
  if (c.manifest.value("kind", "") != "saliency") throw DataError(path.string() + " is not a saliency map file");
  std::vector<SaliencyMap> maps;
  try {
    for (const auto& e : c.manifest.at("maps")) {
      SaliencyMap m;
      m.raw = c.array(e.at("array").get<std::string>());
      std::optional<ThresholdSpec> tau;
      if (e.contains("tau"))
        tau = ThresholdSpec{e["tau"].at("mode") == "absolute" ? ThresholdMode::absolute : ThresholdMode::percentile,
                            e["tau"].at("value").get<double>()};
      m.rule = BackpropRule::parse(e.at("rule").get<std::string>(), tau);
      m.concept_name = e.at("concept").get<std::string>();
      m.post = post_process_from(e.at("post").get<std::string>());
      m.channel_reduce = channel_reduce_from(e.at("channel_reduce").get<std::string>());
      m.score = e.at("score").get<double>();
      maps.push_back(std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": malformed saliency manifest: " + e.what());
  }
  return maps;
}

}  // namespace csmap
