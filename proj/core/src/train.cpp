// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "csmap/optim.hpp"
#include "csmap/vae.hpp"

namespace csmap {

VaeModel& train(VaeModel& model, const Dataset& data, const TrainConfig& cfg) {
  if (cfg.epochs == 0) throw UsageError("train: epochs must be at least 1");
  if (cfg.batch_size == 0) throw UsageError("train: batch size must be at least 1");
  if (!(cfg.learning_rate > 0.0)) throw UsageError("train: learning rate must be positive");
  if (data.size() == 0) throw DataError("train: dataset is empty");
  const VaeArchitecture& arch = model.architecture();
  if (data.shape != arch.input)
    throw DataError("train: dataset samples are " + to_string(data.shape) + " but architecture " + arch.name +
                    " expects " + to_string(arch.input));

  Adam adam({cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_epsilon});
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<float> gauss(0.0f, 1.0f);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t d = arch.latent_dim;
  const float momentum = static_cast<float>(cfg.bn_momentum);

  TrainingRecord& rec = model.training();
  rec.seed = cfg.seed;
  rec.learning_rate = cfg.learning_rate;
  rec.batch_size = cfg.batch_size;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochLoss acc;
    std::size_t seen = 0;
    for (std::size_t start = 0, batch_index = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      // Batch statistics are undefined for a single sample.
      if (end - start < 2 && seen > 0) break;
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(end));
      const std::size_t b = idx.size();

      Graph<float> g;
      const NodeId x = g.constant(nhwc_to_nchw<float>(data.batch(idx)));
      RecordTrace trace;
      const auto heads = record_encoder(g, arch, model.parameters(), model.batchnorm_stats(), x,
                                        BatchNormMode::train, true, &trace);
      Tensor<float> noise({b, d});
      for (float& v : noise.values()) v = gauss(rng);
      const NodeId z = g.reparameterize(heads.mean, heads.log_var, g.constant(std::move(noise)));
      const NodeId out = record_decoder(g, arch, model.parameters(), model.batchnorm_stats(), z,
                                        BatchNormMode::train, true, &trace);
      const NodeId recon = g.mse_loss(out, x);
      const NodeId kl = g.gaussian_kl(heads.mean, heads.log_var);
      const NodeId total = g.add(recon, kl);
      g.forward(total);
      const double r = g.value(recon)[0], k = g.value(kl)[0];
      const std::string where =
          "training diverged at epoch " + std::to_string(epoch + 1) + ", batch " + std::to_string(batch_index + 1);
      if (!std::isfinite(r)) throw NumericalError(where + ": reconstruction term is not finite");
      if (!std::isfinite(k)) throw NumericalError(where + ": kl term is not finite");
      g.backward(total);

      std::map<std::string, const Tensor<float>*> grads;
      for (const auto& [name, id] : trace.parameters)
        if (g.has_grad(id)) grads[name] = &g.grad(id);
      adam.step(model.parameters(), grads);

      for (const auto& site : trace.batchnorm) {
        Tensor<float>& rmean = model.batchnorm_stats().at(site.prefix + ".bn_mean");
        Tensor<float>& rvar = model.batchnorm_stats().at(site.prefix + ".bn_var");
        const Tensor<float>& bm = g.batch_mean(site.node);
        const Tensor<float>& bv = g.batch_variance(site.node);
        const Shape& s = g.shape(site.node);
        std::size_t count = s[0];
        for (std::size_t i = 2; i < s.size(); ++i) count *= s[i];
        const float unbias = count > 1 ? static_cast<float>(count) / static_cast<float>(count - 1) : 1.0f;
        for (std::size_t c = 0; c < rmean.size(); ++c) {
          rmean[c] = (1.0f - momentum) * rmean[c] + momentum * bm[c];
          rvar[c] = (1.0f - momentum) * rvar[c] + momentum * bv[c] * unbias;
        }
      }

      acc.reconstruction += r * static_cast<double>(b);
      acc.kl += k * static_cast<double>(b);
      seen += b;
    }
    acc.reconstruction /= static_cast<double>(seen);
    acc.kl /= static_cast<double>(seen);
    acc.total = acc.reconstruction + acc.kl;
    rec.history.push_back(acc);
    ++rec.epochs;
    if (cfg.on_epoch) cfg.on_epoch(epoch, acc);
  }
  return model;
}

}  // namespace csmap
