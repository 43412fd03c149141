// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "csmap/autodiff.hpp"
#include "csmap/data.hpp"

namespace csmap {

enum class LayerKind { conv, conv_transpose, upsample_conv, dense };
enum class Activation { none, relu, sigmoid };

struct LayerSpec {
  LayerKind kind = LayerKind::conv;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t output_padding = 0;
  std::size_t channels = 0;  // output channels, or units for dense
  bool batchnorm = false;
  Activation activation = Activation::none;

  /// Human-readable row, e.g. "4x4 16 conv., stride 2, BN, ReLU".
  std::string describe() const;
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Encoder layers feed two dense heads (mean and log-variance) of
/// latent_dim units each. The decoder starts with a dense layer whose
/// output is reshaped to decoder_seed = {C, H, W}.
struct VaeArchitecture {
  std::string name;
  ImageShape input;
  std::vector<LayerSpec> encoder;
  std::size_t latent_dim = 0;
  std::vector<LayerSpec> decoder;
  Shape decoder_seed;

  /// 128x128x3 input, five 5x5 stride-2 conv blocks (64..1024), a
  /// 512-unit dense block, 400-dim latent. `width_divisor` shrinks every
  /// hidden width for desk-scale runs.
  static VaeArchitecture celeba(std::size_t width_divisor = 1);
  /// 32x32x1 input, three 4x4 stride-2 conv blocks (16, 32, 64), a
  /// 256-unit dense block, 20-dim latent.
  static VaeArchitecture st();
  /// "celeba" or "st".
  static VaeArchitecture preset(std::string_view name);

  VaeArchitecture with_latent_dim(std::size_t latent_dim) const;
  /// Replaces each strided transposed convolution in the decoder with
  /// nearest-neighbour 2x upsampling followed by a 3x3 stride-1 conv.
  VaeArchitecture with_upsample_decoder() const;

  std::vector<std::string> encoder_layer_list() const;
  std::vector<std::string> decoder_layer_list() const;

  /// Propagates shapes through both halves; throws DataError on mismatch.
  void validate() const;

  nlohmann::json to_json() const;
  static VaeArchitecture from_json(const nlohmann::json& j);

  friend bool operator==(const VaeArchitecture&, const VaeArchitecture&) = default;
};

template <typename Scalar>
using ParameterSet = std::map<std::string, Tensor<Scalar>>;

template <typename To, typename From>
ParameterSet<To> cast_parameters(const ParameterSet<From>& params) {
  ParameterSet<To> out;
  for (const auto& [name, t] : params) out.emplace(name, t.template cast<To>());
  return out;
}

struct EpochLoss {
  double total = 0.0;
  double reconstruction = 0.0;
  double kl = 0.0;
  friend bool operator==(const EpochLoss&, const EpochLoss&) = default;
};

struct TrainingRecord {
  std::size_t epochs = 0;
  std::uint64_t seed = 0;
  double learning_rate = 0.0;
  std::size_t batch_size = 0;
  std::vector<EpochLoss> history;
};

class VaeModel {
 public:
  /// Fan-in scaled Gaussian weights, zero biases, batchnorm gamma=1 beta=0,
  /// running mean 0 and variance 1.
  explicit VaeModel(VaeArchitecture architecture, std::uint64_t init_seed = 0);

  const VaeArchitecture& architecture() const noexcept { return arch_; }
  std::size_t latent_dim() const noexcept { return arch_.latent_dim; }
  std::uint64_t init_seed() const noexcept { return init_seed_; }

  ParameterSet<float>& parameters() noexcept { return params_; }
  const ParameterSet<float>& parameters() const noexcept { return params_; }
  /// Batchnorm running mean/variance, keyed "<layer>.bn_mean" / "<layer>.bn_var".
  ParameterSet<float>& batchnorm_stats() noexcept { return stats_; }
  const ParameterSet<float>& batchnorm_stats() const noexcept { return stats_; }

  TrainingRecord& training() noexcept { return record_; }
  const TrainingRecord& training() const noexcept { return record_; }

  std::size_t parameter_count() const;

 private:
  VaeArchitecture arch_;
  std::uint64_t init_seed_;
  ParameterSet<float> params_;
  ParameterSet<float> stats_;
  TrainingRecord record_;
};

void save_checkpoint(const VaeModel& model, const std::filesystem::path& path);
VaeModel load_checkpoint(const std::filesystem::path& path);

struct BatchNormSite {
  NodeId node;
  std::string prefix;
};

/// Optional record of what a network recording created.
struct RecordTrace {
  std::vector<BatchNormSite> batchnorm;
  std::map<std::string, NodeId> parameters;
};

/// Node handles of a recorded encoder.
struct EncoderNodes {
  NodeId mean;
  NodeId log_var;
};

/// Records the encoder on an NCHW input node. Parameters are borrowed and
/// must outlive the graph.
template <typename Scalar>
EncoderNodes record_encoder(Graph<Scalar>& graph, const VaeArchitecture& arch, const ParameterSet<Scalar>& params,
                            const ParameterSet<Scalar>& stats, NodeId input, BatchNormMode mode,
                            bool params_require_grad, RecordTrace* trace = nullptr);

/// Records the decoder on a [N, latent_dim] node; output is NCHW in (0,1).
template <typename Scalar>
NodeId record_decoder(Graph<Scalar>& graph, const VaeArchitecture& arch, const ParameterSet<Scalar>& params,
                      const ParameterSet<Scalar>& stats, NodeId z, BatchNormMode mode, bool params_require_grad,
                      RecordTrace* trace = nullptr);

struct LatentCode {
  std::vector<float> mean;
  std::vector<float> log_var;
  std::optional<std::vector<float>> sample;
};

/// Posterior heads for [N,H,W,C] (or a single [H,W,C]) images, batchnorm
/// in inference mode. Deterministic.
std::vector<LatentCode> encode(const VaeModel& model, const Tensor<float>& images);
std::vector<LatentCode> encode_dataset(const VaeModel& model, const Dataset& data, std::size_t batch_size = 256);

/// mean + exp(log_var / 2) * noise
std::vector<float> reparameterize(const LatentCode& code, std::span<const float> noise);

/// One latent vector to an [H,W,C] image.
Tensor<float> decode(const VaeModel& model, std::span<const float> z);
/// [N, latent_dim] to [N,H,W,C].
Tensor<float> decode_batch(const VaeModel& model, const Tensor<float>& z);

struct ElboTerms {
  double total = 0.0;
  double reconstruction = 0.0;  // squared error summed over pixels, averaged over the batch
  double kl = 0.0;              // KL(q(z|x) || N(0, I)), averaged over the batch
};

/// Evaluates the loss for an [N,H,W,C] batch with [N, latent_dim] noise.
ElboTerms elbo_loss(const VaeModel& model, const Tensor<float>& batch, const Tensor<float>& noise,
                    BatchNormMode mode = BatchNormMode::infer);

struct TrainConfig {
  std::size_t epochs = 30;
  double learning_rate = 1e-3;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double bn_momentum = 0.1;
  std::function<void(std::size_t epoch, const EpochLoss& loss)> on_epoch;
};

/// Adam on the ELBO with train-mode batchnorm. Appends one EpochLoss per
/// epoch to the model's history. Deterministic given config.seed.
VaeModel& train(VaeModel& model, const Dataset& data, const TrainConfig& config);

}  // namespace csmap
