// SPDX-License-Identifier: Apache-2.0
#include <sstream>

#include "csmap/vae.hpp"

namespace csmap {
namespace {

std::string activation_suffix(Activation a) {
  switch (a) {
    case Activation::relu: return ", ReLU";
    case Activation::sigmoid: return ", sigmoid";
    case Activation::none: return "";
  }
  return "";
}

LayerSpec conv(std::size_t k, std::size_t channels, std::size_t stride = 2) {
  return {LayerKind::conv, k, stride, (k - 1) / 2, 0, channels, true, Activation::relu};
}

// Doubles the spatial extent: output = stride * input.
LayerSpec deconv(std::size_t k, std::size_t channels, bool last = false) {
  const std::size_t stride = 2, padding = (k - 1) / 2;
  const std::size_t output_padding = stride + 2 * padding - k;
  return {LayerKind::conv_transpose, k,    stride, padding, output_padding, channels, !last,
          last ? Activation::sigmoid : Activation::relu};
}

LayerSpec dense(std::size_t units) { return {LayerKind::dense, 0, 1, 0, 0, units, true, Activation::relu}; }

std::string to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::conv_transpose: return "conv_transpose";
    case LayerKind::upsample_conv: return "upsample_conv";
    case LayerKind::dense: return "dense";
  }
  return "?";
}

LayerKind layer_kind_from(const std::string& s) {
  if (s == "conv") return LayerKind::conv;
  if (s == "conv_transpose") return LayerKind::conv_transpose;
  if (s == "upsample_conv") return LayerKind::upsample_conv;
  if (s == "dense") return LayerKind::dense;
  throw DataError("unknown layer kind '" + s + "'");
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::none: return "none";
  }
  return "?";
}

Activation activation_from(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "sigmoid") return Activation::sigmoid;
  if (s == "none") return Activation::none;
  throw DataError("unknown activation '" + s + "'");
}

}  // namespace

std::string LayerSpec::describe() const {
  std::ostringstream os;
  switch (kind) {
    case LayerKind::conv:
      os << kernel << 'x' << kernel << ' ' << channels << " conv., stride " << stride;
      break;
    case LayerKind::conv_transpose:
      os << kernel << 'x' << kernel << ' ' << channels << " transposed conv., stride " << stride;
      break;
    case LayerKind::upsample_conv:
      os << stride << "x upsample, " << kernel << 'x' << kernel << ' ' << channels << " conv., stride 1";
      break;
    case LayerKind::dense:
      os << channels << " fully-connected";
      break;
  }
  if (batchnorm) os << ", BN";
  os << activation_suffix(activation);
  return os.str();
}

VaeArchitecture VaeArchitecture::celeba(std::size_t width_divisor) {
  if (width_divisor == 0 || 64 % width_divisor != 0) throw UsageError("celeba width divisor must divide 64");
  const std::size_t d = width_divisor;
  VaeArchitecture a;
  a.name = d == 1 ? "celeba" : "celeba/" + std::to_string(d);
  a.input = {128, 128, 3};
  a.encoder = {conv(5, 64 / d), conv(5, 128 / d), conv(5, 256 / d), conv(5, 512 / d), conv(5, 1024 / d),
               dense(512 / d)};
  a.latent_dim = 400;
  a.decoder_seed = {1024 / d, 4, 4};
  a.decoder = {dense(1024 / d * 4 * 4), deconv(5, 512 / d), deconv(5, 256 / d), deconv(5, 128 / d),
               deconv(5, 64 / d),        deconv(5, 3, true)};
  a.validate();
  return a;
}

VaeArchitecture VaeArchitecture::st() {
  VaeArchitecture a;
  a.name = "st";
  a.input = {32, 32, 1};
  a.encoder = {conv(4, 16), conv(4, 32), conv(4, 64), dense(256)};
  a.latent_dim = 20;
  a.decoder_seed = {64, 4, 4};
  a.decoder = {dense(1024), deconv(4, 32), deconv(4, 16), deconv(4, 1, true)};
  a.validate();
  return a;
}

VaeArchitecture VaeArchitecture::preset(std::string_view name) {
  if (name == "st") return st();
  if (name == "celeba") return celeba();
  throw UsageError("unknown architecture preset '" + std::string(name) + "' (expected st or celeba)");
}

VaeArchitecture VaeArchitecture::with_latent_dim(std::size_t latent_dim) const {
  if (latent_dim == 0) throw UsageError("latent_dim must be positive");
  VaeArchitecture a = *this;
  a.latent_dim = latent_dim;
  return a;
}

VaeArchitecture VaeArchitecture::with_upsample_decoder() const {
  VaeArchitecture a = *this;
  for (auto& layer : a.decoder) {
    if (layer.kind != LayerKind::conv_transpose) continue;
    layer.kind = LayerKind::upsample_conv;
    layer.kernel = 3;
    layer.padding = 1;
    layer.output_padding = 0;
  }
  if (a.name.find("+upsample") == std::string::npos) a.name += "+upsample";
  a.validate();
  return a;
}

std::vector<std::string> VaeArchitecture::encoder_layer_list() const {
  std::vector<std::string> rows;
  for (const auto& l : encoder) rows.push_back(l.describe());
  rows.push_back(std::to_string(latent_dim) + " fully-connected (latent layer): mean and log-variance heads");
  return rows;
}

std::vector<std::string> VaeArchitecture::decoder_layer_list() const {
  std::vector<std::string> rows;
  for (const auto& l : decoder) rows.push_back(l.describe());
  return rows;
}

void VaeArchitecture::validate() const {
  if (input.pixels() == 0) throw DataError("architecture " + name + ": empty input shape");
  if (latent_dim == 0) throw DataError("architecture " + name + ": latent_dim must be positive");
  Shape s{input.channels, input.height, input.width};
  for (std::size_t i = 0; i < encoder.size(); ++i) {
    const auto& l = encoder[i];
    const std::string where = "architecture " + name + ", encoder layer " + std::to_string(i) + ": ";
    if (l.kind == LayerKind::dense) {
      s = {l.channels};
    } else if (l.kind == LayerKind::conv) {
      if (s.size() != 3) throw DataError(where + "convolution after a dense layer");
      if (s[1] + 2 * l.padding < l.kernel || s[2] + 2 * l.padding < l.kernel || l.stride == 0)
        throw DataError(where + "kernel does not fit input " + to_string(s));
      s = {l.channels, (s[1] + 2 * l.padding - l.kernel) / l.stride + 1,
           (s[2] + 2 * l.padding - l.kernel) / l.stride + 1};
    } else {
      throw DataError(where + "only conv and dense layers are allowed in the encoder");
    }
  }
  if (decoder.empty() || decoder.front().kind != LayerKind::dense)
    throw DataError("architecture " + name + ": decoder must start with a dense layer");
  if (decoder.front().channels != element_count(decoder_seed) || decoder_seed.size() != 3)
    throw DataError("architecture " + name + ": first decoder layer does not match seed " + to_string(decoder_seed));
  s = decoder_seed;
  for (std::size_t i = 1; i < decoder.size(); ++i) {
    const auto& l = decoder[i];
    const std::string where = "architecture " + name + ", decoder layer " + std::to_string(i) + ": ";
    if (l.kind == LayerKind::conv_transpose) {
      const auto grow = [&](std::size_t v) {
        return (v - 1) * l.stride + l.kernel + l.output_padding - 2 * l.padding;
      };
      if (l.output_padding >= l.stride) throw DataError(where + "output padding must be below stride");
      s = {l.channels, grow(s[1]), grow(s[2])};
    } else if (l.kind == LayerKind::upsample_conv) {
      const std::size_t h = s[1] * l.stride, w = s[2] * l.stride;
      if (h + 2 * l.padding < l.kernel) throw DataError(where + "kernel does not fit");
      s = {l.channels, h + 2 * l.padding - l.kernel + 1, w + 2 * l.padding - l.kernel + 1};
    } else {
      throw DataError(where + "only transposed or upsampling convolutions may follow the seed");
    }
  }
  const Shape expected{input.channels, input.height, input.width};
  if (s != expected)
    throw DataError("architecture " + name + ": decoder output " + to_string(s) + " does not match input " +
                    to_string(expected));
}

nlohmann::json VaeArchitecture::to_json() const {
  auto layers = [](const std::vector<LayerSpec>& ls) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& l : ls)
      arr.push_back({{"kind", to_string(l.kind)},
                     {"kernel", l.kernel},
                     {"stride", l.stride},
                     {"padding", l.padding},
                     {"output_padding", l.output_padding},
                     {"channels", l.channels},
                     {"batchnorm", l.batchnorm},
                     {"activation", to_string(l.activation)}});
    return arr;
  };
  return {{"name", name},
          {"input", {input.height, input.width, input.channels}},
          {"encoder", layers(encoder)},
          {"latent_dim", latent_dim},
          {"decoder_seed", decoder_seed},
          {"decoder", layers(decoder)}};
}

VaeArchitecture VaeArchitecture::from_json(const nlohmann::json& j) {
  try {
    auto layers = [](const nlohmann::json& arr) {
      std::vector<LayerSpec> ls;
      for (const auto& e : arr)
        ls.push_back({layer_kind_from(e.at("kind").get<std::string>()), e.at("kernel").get<std::size_t>(),
                      e.at("stride").get<std::size_t>(), e.at("padding").get<std::size_t>(),
                      e.at("output_padding").get<std::size_t>(), e.at("channels").get<std::size_t>(),
                      e.at("batchnorm").get<bool>(), activation_from(e.at("activation").get<std::string>())});
      return ls;
    };
    VaeArchitecture a;
    a.name = j.at("name").get<std::string>();
    const auto in = j.at("input").get<std::vector<std::size_t>>();
    if (in.size() != 3) throw DataError("architecture input must be [H, W, C]");
    a.input = {in[0], in[1], in[2]};
    a.encoder = layers(j.at("encoder"));
    a.latent_dim = j.at("latent_dim").get<std::size_t>();
    a.decoder_seed = j.at("decoder_seed").get<Shape>();
    a.decoder = layers(j.at("decoder"));
    a.validate();
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed architecture description: ") + e.what());
  }
}

}  // namespace csmap
