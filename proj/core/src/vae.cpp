// SPDX-License-Identifier: Apache-2.0
#include "csmap/vae.hpp"

#include <cmath>
#include <random>

#include "csmap/container.hpp"

namespace csmap {
namespace {

std::string layer_prefix(const char* half, std::size_t i) { return std::string(half) + "." + std::to_string(i); }

template <typename Scalar>
const Tensor<Scalar>& lookup(const ParameterSet<Scalar>& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw DataError("model has no parameter '" + name + "'");
  return it->second;
}

template <typename Scalar>
NodeId bind_parameter(Graph<Scalar>& g, const ParameterSet<Scalar>& params, const std::string& name, bool grads,
            RecordTrace* trace) {
  const NodeId id = g.parameter(lookup(params, name), grads);
  if (trace) trace->parameters[name] = id;
  return id;
}

template <typename Scalar>
NodeId apply_norm_and_activation(Graph<Scalar>& g, NodeId x, const LayerSpec& layer, const std::string& prefix,
                                 const ParameterSet<Scalar>& params, const ParameterSet<Scalar>& stats,
                                 BatchNormMode mode, bool grads, RecordTrace* trace) {
  if (layer.batchnorm) {
    x = g.batchnorm(x, bind_parameter(g, params, prefix + ".bn_gamma", grads, trace),
                    bind_parameter(g, params, prefix + ".bn_beta", grads, trace),
                    g.parameter(lookup(stats, prefix + ".bn_mean"), false),
                    g.parameter(lookup(stats, prefix + ".bn_var"), false), mode);
    if (trace) trace->batchnorm.push_back({x, prefix});
  }
  switch (layer.activation) {
    case Activation::relu: return g.relu(x);
    case Activation::sigmoid: return g.sigmoid(x);
    case Activation::none: return x;
  }
  return x;
}

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Tensor<float> gaussian(Shape shape, double fan_in, double gain) {
    Tensor<float> t(std::move(shape));
    std::normal_distribution<double> dist(0.0, std::sqrt(gain / std::max(1.0, fan_in)));
    for (float& v : t.values()) v = static_cast<float>(dist(rng_));
    return t;
  }

 private:
  std::mt19937_64 rng_;
};

}  // namespace

VaeModel::VaeModel(VaeArchitecture architecture, std::uint64_t init_seed)
    : arch_(std::move(architecture)), init_seed_(init_seed) {
  arch_.validate();
  Initializer init(init_seed);
  auto add_layer = [&](const std::string& prefix, const LayerSpec& l, const Shape& in_shape) {
    const double relu_gain = l.activation == Activation::relu ? 2.0 : 1.0;
    switch (l.kind) {
      case LayerKind::dense: {
        const std::size_t fan_in = element_count(in_shape);
        params_[prefix + ".weight"] = init.gaussian({l.channels, fan_in}, static_cast<double>(fan_in), relu_gain);
        break;
      }
      case LayerKind::conv:
      case LayerKind::upsample_conv: {
        const std::size_t ci = in_shape[0];
        params_[prefix + ".weight"] = init.gaussian({l.channels, ci, l.kernel, l.kernel},
                                                    static_cast<double>(ci * l.kernel * l.kernel), relu_gain);
        break;
      }
      case LayerKind::conv_transpose: {
        const std::size_t ci = in_shape[0];
        const double fan_in = static_cast<double>(ci * l.kernel * l.kernel) / static_cast<double>(l.stride * l.stride);
        params_[prefix + ".weight"] = init.gaussian({ci, l.channels, l.kernel, l.kernel}, fan_in, relu_gain);
        break;
      }
    }
    params_[prefix + ".bias"] = Tensor<float>({l.channels});
    if (l.batchnorm) {
      params_[prefix + ".bn_gamma"] = Tensor<float>::filled({l.channels}, 1.0f);
      params_[prefix + ".bn_beta"] = Tensor<float>({l.channels});
      stats_[prefix + ".bn_mean"] = Tensor<float>({l.channels});
      stats_[prefix + ".bn_var"] = Tensor<float>::filled({l.channels}, 1.0f);
    }
  };
  auto out_shape = [](const LayerSpec& l, const Shape& s) -> Shape {
    switch (l.kind) {
      case LayerKind::dense: return {l.channels};
      case LayerKind::conv:
        return {l.channels, (s[1] + 2 * l.padding - l.kernel) / l.stride + 1,
                (s[2] + 2 * l.padding - l.kernel) / l.stride + 1};
      case LayerKind::conv_transpose:
        return {l.channels, (s[1] - 1) * l.stride + l.kernel + l.output_padding - 2 * l.padding,
                (s[2] - 1) * l.stride + l.kernel + l.output_padding - 2 * l.padding};
      case LayerKind::upsample_conv:
        return {l.channels, s[1] * l.stride + 2 * l.padding - l.kernel + 1,
                s[2] * l.stride + 2 * l.padding - l.kernel + 1};
    }
    return s;
  };

  Shape s{arch_.input.channels, arch_.input.height, arch_.input.width};
  for (std::size_t i = 0; i < arch_.encoder.size(); ++i) {
    add_layer(layer_prefix("encoder", i), arch_.encoder[i], s);
    s = out_shape(arch_.encoder[i], s);
  }
  const std::size_t features = element_count(s);
  params_["encoder.mean.weight"] = init.gaussian({arch_.latent_dim, features}, static_cast<double>(features), 1.0);
  params_["encoder.mean.bias"] = Tensor<float>({arch_.latent_dim});
  params_["encoder.log_var.weight"] =
      init.gaussian({arch_.latent_dim, features}, static_cast<double>(features), 0.1);
  params_["encoder.log_var.bias"] = Tensor<float>({arch_.latent_dim});

  s = {arch_.latent_dim};
  for (std::size_t i = 0; i < arch_.decoder.size(); ++i) {
    add_layer(layer_prefix("decoder", i), arch_.decoder[i], s);
    s = i == 0 ? arch_.decoder_seed : out_shape(arch_.decoder[i], s);
  }
}

std::size_t VaeModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.size();
  return n;
}

template <typename Scalar>
EncoderNodes record_encoder(Graph<Scalar>& g, const VaeArchitecture& arch, const ParameterSet<Scalar>& params,
                            const ParameterSet<Scalar>& stats, NodeId input, BatchNormMode mode, bool grads,
                            RecordTrace* trace) {
  const Shape in = g.shape(input);
  const Shape expected{arch.input.channels, arch.input.height, arch.input.width};
  if (in.size() != 4 || Shape(in.begin() + 1, in.end()) != expected)
    throw DataError("encoder input " + to_string(in) + " does not match architecture " + arch.name + " input [N," +
                    std::to_string(expected[0]) + "," + std::to_string(expected[1]) + "," +
                    std::to_string(expected[2]) + "]");
  NodeId x = input;
  for (std::size_t i = 0; i < arch.encoder.size(); ++i) {
    const LayerSpec& l = arch.encoder[i];
    const std::string prefix = layer_prefix("encoder", i);
    const NodeId w = bind_parameter(g, params, prefix + ".weight", grads, trace);
    const NodeId b = bind_parameter(g, params, prefix + ".bias", grads, trace);
    if (l.kind == LayerKind::dense) {
      if (g.shape(x).size() != 2) x = g.flatten(x);
      x = g.dense(x, w, b);
    } else {
      x = g.conv2d(x, w, b, {l.stride, l.padding, 0});
    }
    x = apply_norm_and_activation(g, x, l, prefix, params, stats, mode, grads, trace);
  }
  if (g.shape(x).size() != 2) x = g.flatten(x);
  EncoderNodes out;
  out.mean = g.dense(x, bind_parameter(g, params, "encoder.mean.weight", grads, trace),
                     bind_parameter(g, params, "encoder.mean.bias", grads, trace));
  out.log_var = g.dense(x, bind_parameter(g, params, "encoder.log_var.weight", grads, trace),
                        bind_parameter(g, params, "encoder.log_var.bias", grads, trace));
  return out;
}

template <typename Scalar>
NodeId record_decoder(Graph<Scalar>& g, const VaeArchitecture& arch, const ParameterSet<Scalar>& params,
                      const ParameterSet<Scalar>& stats, NodeId z, BatchNormMode mode, bool grads,
                      RecordTrace* trace) {
  const Shape zs = g.shape(z);
  if (zs.size() != 2 || zs[1] != arch.latent_dim)
    throw DataError("decoder input " + to_string(zs) + " does not match latent_dim " + std::to_string(arch.latent_dim));
  NodeId x = z;
  for (std::size_t i = 0; i < arch.decoder.size(); ++i) {
    const LayerSpec& l = arch.decoder[i];
    const std::string prefix = layer_prefix("decoder", i);
    const NodeId w = bind_parameter(g, params, prefix + ".weight", grads, trace);
    const NodeId b = bind_parameter(g, params, prefix + ".bias", grads, trace);
    switch (l.kind) {
      case LayerKind::dense: x = g.dense(x, w, b); break;
      case LayerKind::conv_transpose: x = g.conv2d_transpose(x, w, b, {l.stride, l.padding, l.output_padding}); break;
      case LayerKind::upsample_conv:
        x = g.conv2d(g.upsample_nearest(x, l.stride), w, b, {1, l.padding, 0});
        break;
      case LayerKind::conv: x = g.conv2d(x, w, b, {l.stride, l.padding, 0}); break;
    }
    x = apply_norm_and_activation(g, x, l, prefix, params, stats, mode, grads, trace);
    if (i == 0) {
      Shape seed{zs[0]};
      seed.insert(seed.end(), arch.decoder_seed.begin(), arch.decoder_seed.end());
      x = g.reshape(x, seed);
    }
  }
  return x;
}

template EncoderNodes record_encoder(Graph<float>&, const VaeArchitecture&, const ParameterSet<float>&,
                                     const ParameterSet<float>&, NodeId, BatchNormMode, bool,
                                     RecordTrace*);
template EncoderNodes record_encoder(Graph<double>&, const VaeArchitecture&, const ParameterSet<double>&,
                                     const ParameterSet<double>&, NodeId, BatchNormMode, bool,
                                     RecordTrace*);
template NodeId record_decoder(Graph<float>&, const VaeArchitecture&, const ParameterSet<float>&,
                               const ParameterSet<float>&, NodeId, BatchNormMode, bool, RecordTrace*);
template NodeId record_decoder(Graph<double>&, const VaeArchitecture&, const ParameterSet<double>&,
                               const ParameterSet<double>&, NodeId, BatchNormMode, bool,
                               RecordTrace*);

namespace {

Tensor<float> to_network_layout(const VaeModel& model, const Tensor<float>& images) {
  const ImageShape& s = model.architecture().input;
  const Shape& in = images.shape();
  const bool single = in.size() == 3;
  if ((!single && in.size() != 4) || Shape(in.end() - 3, in.end()) != Shape{s.height, s.width, s.channels})
    throw DataError("input " + to_string(in) + " does not match model input " + to_string(s));
  return nhwc_to_nchw<float>(images);
}

}  // namespace

std::vector<LatentCode> encode(const VaeModel& model, const Tensor<float>& images) {
  Graph<float> g;
  const NodeId x = g.constant(to_network_layout(model, images));
  const auto heads = record_encoder(g, model.architecture(), model.parameters(), model.batchnorm_stats(), x,
                                    BatchNormMode::infer, false);
  const Tensor<float>& mean = g.forward(heads.mean);
  const Tensor<float>& log_var = g.forward(heads.log_var);
  const std::size_t n = mean.dim(0), d = mean.dim(1);
  std::vector<LatentCode> codes(n);
  for (std::size_t i = 0; i < n; ++i) {
    codes[i].mean.assign(mean.data() + i * d, mean.data() + (i + 1) * d);
    codes[i].log_var.assign(log_var.data() + i * d, log_var.data() + (i + 1) * d);
  }
  return codes;
}

std::vector<LatentCode> encode_dataset(const VaeModel& model, const Dataset& data, std::size_t batch_size) {
  if (batch_size == 0) throw UsageError("encode_dataset: batch size must be positive");
  std::vector<LatentCode> codes;
  codes.reserve(data.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    auto part = encode(model, data.batch(idx));
    codes.insert(codes.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  return codes;
}

std::vector<float> reparameterize(const LatentCode& code, std::span<const float> noise) {
  if (noise.size() != code.mean.size() || code.log_var.size() != code.mean.size())
    throw DataError("reparameterize: noise length " + std::to_string(noise.size()) + " vs latent_dim " +
                    std::to_string(code.mean.size()));
  std::vector<float> z(code.mean.size());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = code.mean[i] + std::exp(code.log_var[i] / 2.0f) * noise[i];
  return z;
}

Tensor<float> decode_batch(const VaeModel& model, const Tensor<float>& z) {
  if (z.rank() != 2 || z.dim(1) != model.latent_dim())
    throw DataError("decode: latent batch " + to_string(z.shape()) + " does not match latent_dim " +
                    std::to_string(model.latent_dim()));
  Graph<float> g;
  const NodeId zin = g.constant(z);
  const NodeId out = record_decoder(g, model.architecture(), model.parameters(), model.batchnorm_stats(), zin,
                                    BatchNormMode::infer, false);
  return nchw_to_nhwc<float>(g.forward(out));
}

Tensor<float> decode(const VaeModel& model, std::span<const float> z) {
  if (z.size() != model.latent_dim())
    throw DataError("decode: latent vector of length " + std::to_string(z.size()) + " but latent_dim is " +
                    std::to_string(model.latent_dim()));
  Tensor<float> out = decode_batch(model, Tensor<float>({1, z.size()}, std::vector<float>(z.begin(), z.end())));
  const ImageShape& s = model.architecture().input;
  out.reshape({s.height, s.width, s.channels});
  return out;
}

ElboTerms elbo_loss(const VaeModel& model, const Tensor<float>& batch, const Tensor<float>& noise,
                    BatchNormMode mode) {
  Graph<float> g;
  const NodeId x = g.constant(to_network_layout(model, batch));
  const auto& arch = model.architecture();
  const auto heads = record_encoder(g, arch, model.parameters(), model.batchnorm_stats(), x, mode, false);
  if (noise.shape() != g.shape(heads.mean))
    throw DataError("elbo_loss: noise " + to_string(noise.shape()) + " does not match latent batch " +
                    to_string(g.shape(heads.mean)));
  const NodeId z = g.reparameterize(heads.mean, heads.log_var, g.constant(noise));
  const NodeId out = record_decoder(g, arch, model.parameters(), model.batchnorm_stats(), z, mode, false);
  const NodeId recon = g.mse_loss(out, x);
  const NodeId kl = g.gaussian_kl(heads.mean, heads.log_var);
  ElboTerms terms;
  terms.reconstruction = g.forward(recon)[0];
  terms.kl = g.forward(kl)[0];
  terms.total = terms.reconstruction + terms.kl;
  if (!std::isfinite(terms.reconstruction)) throw NumericalError("elbo_loss: reconstruction term is not finite");
  if (!std::isfinite(terms.kl)) throw NumericalError("elbo_loss: kl term is not finite");
  return terms;
}

void save_checkpoint(const VaeModel& model, const std::filesystem::path& path) {
  Container c;
  const auto& rec = model.training();
  c.manifest["kind"] = "checkpoint";
  c.manifest["architecture"] = model.architecture().to_json();
  c.manifest["init_seed"] = model.init_seed();
  c.manifest["seed"] = rec.seed;
  c.manifest["epochs"] = rec.epochs;
  c.manifest["learning_rate"] = rec.learning_rate;
  c.manifest["batch_size"] = rec.batch_size;
  nlohmann::json history = nlohmann::json::array();
  for (const auto& e : rec.history)
    history.push_back({{"total", e.total}, {"reconstruction", e.reconstruction}, {"kl", e.kl}});
  c.manifest["loss_history"] = std::move(history);
  for (const auto& [name, t] : model.parameters()) c.add("param/" + name, t);
  for (const auto& [name, t] : model.batchnorm_stats()) c.add("stat/" + name, t);
  write_container(c, path);
}

VaeModel load_checkpoint(const std::filesystem::path& path) {
  const Container c = read_container(path);
  if (c.manifest.value("kind", "") != "checkpoint") throw DataError(path.string() + " is not a model checkpoint");
  try {
    VaeModel model(VaeArchitecture::from_json(c.manifest.at("architecture")),
                   c.manifest.at("init_seed").get<std::uint64_t>());
    auto restore = [&](ParameterSet<float>& set, const std::string& tag) {
      for (auto& [name, t] : set) {
        const Tensor<float>& stored = c.array(tag + name);
        if (stored.shape() != t.shape())
          throw DataError(path.string() + ": '" + name + "' has shape " + to_string(stored.shape()) + ", expected " +
                          to_string(t.shape()));
        t = stored;
      }
    };
    restore(model.parameters(), "param/");
    restore(model.batchnorm_stats(), "stat/");
    auto& rec = model.training();
    rec.seed = c.manifest.at("seed").get<std::uint64_t>();
    rec.epochs = c.manifest.at("epochs").get<std::size_t>();
    rec.learning_rate = c.manifest.at("learning_rate").get<double>();
    rec.batch_size = c.manifest.at("batch_size").get<std::size_t>();
    for (const auto& e : c.manifest.at("loss_history"))
      rec.history.push_back({e.at("total").get<double>(), e.at("reconstruction").get<double>(),
                             e.at("kl").get<double>()});
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": malformed checkpoint manifest: " + e.what());
  }
}

}  // namespace csmap
