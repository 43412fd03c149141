// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "csmap/container.hpp"
#include "csmap/error.hpp"
#include "csmap/optim.hpp"
#include "csmap/vae.hpp"
#include "oracles.hpp"

using namespace csmap;

namespace {

std::vector<std::string> rows(std::initializer_list<const char*> r) { return {r.begin(), r.end()}; }

Tensor<float> random_images(const ImageShape& s, std::size_t n, std::uint64_t seed) {
  return oracle::random_tensor<float>({n, s.height, s.width, s.channels}, seed, 0.0, 1.0);
}

void zero_heads(VaeModel& m) {
  for (const char* name : {"encoder.mean.weight", "encoder.mean.bias", "encoder.log_var.weight",
                           "encoder.log_var.bias"})
    m.parameters().at(name).fill(0.0f);
}

Dataset tiny_squares(std::size_t n = 48) {
  SquaresConfig cfg;
  cfg.n = n;
  cfg.seed = 3;
  return gen_squares(cfg);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

TEST(Architecture, StPresetLayerList) {
  const auto a = VaeArchitecture::st();
  EXPECT_EQ(a.input, (ImageShape{32, 32, 1}));
  EXPECT_EQ(a.latent_dim, 20u);
  EXPECT_EQ(a.encoder_layer_list(), rows({"4x4 16 conv., stride 2, BN, ReLU", "4x4 32 conv., stride 2, BN, ReLU",
                                          "4x4 64 conv., stride 2, BN, ReLU", "256 fully-connected, BN, ReLU",
                                          "20 fully-connected (latent layer): mean and log-variance heads"}));
  EXPECT_EQ(a.decoder_layer_list(),
            rows({"1024 fully-connected, BN, ReLU", "4x4 32 transposed conv., stride 2, BN, ReLU",
                  "4x4 16 transposed conv., stride 2, BN, ReLU", "4x4 1 transposed conv., stride 2, sigmoid"}));
}

TEST(Architecture, CelebaPresetLayerList) {
  const auto a = VaeArchitecture::celeba();
  EXPECT_EQ(a.input, (ImageShape{128, 128, 3}));
  EXPECT_EQ(a.latent_dim, 400u);
  EXPECT_EQ(a.encoder_layer_list(),
            rows({"5x5 64 conv., stride 2, BN, ReLU", "5x5 128 conv., stride 2, BN, ReLU",
                  "5x5 256 conv., stride 2, BN, ReLU", "5x5 512 conv., stride 2, BN, ReLU",
                  "5x5 1024 conv., stride 2, BN, ReLU", "512 fully-connected, BN, ReLU",
                  "400 fully-connected (latent layer): mean and log-variance heads"}));
  EXPECT_EQ(a.decoder_layer_list(),
            rows({"16384 fully-connected, BN, ReLU", "5x5 512 transposed conv., stride 2, BN, ReLU",
                  "5x5 256 transposed conv., stride 2, BN, ReLU", "5x5 128 transposed conv., stride 2, BN, ReLU",
                  "5x5 64 transposed conv., stride 2, BN, ReLU", "5x5 3 transposed conv., stride 2, sigmoid"}));
}

TEST(Architecture, StIntermediateShapesFollowTheTable) {
  const VaeModel m(VaeArchitecture::st(), 1);
  Graph<float> g;
  const NodeId x = g.constant(Tensor<float>({1, 1, 32, 32}));
  const auto heads = record_encoder(g, m.architecture(), m.parameters(), m.batchnorm_stats(), x,
                                    BatchNormMode::infer, false);
  const NodeId out = record_decoder(g, m.architecture(), m.parameters(), m.batchnorm_stats(), heads.mean,
                                    BatchNormMode::infer, false);
  std::vector<Shape> enc, dec;
  for (NodeId n : g.nodes_of_kind(OpKind::conv2d)) enc.push_back(g.shape(n));
  for (NodeId n : g.nodes_of_kind(OpKind::conv2d_transpose)) dec.push_back(g.shape(n));
  EXPECT_EQ(enc, (std::vector<Shape>{{1, 16, 16, 16}, {1, 32, 8, 8}, {1, 64, 4, 4}}));
  EXPECT_EQ(dec, (std::vector<Shape>{{1, 32, 8, 8}, {1, 16, 16, 16}, {1, 1, 32, 32}}));
  EXPECT_EQ(g.shape(heads.mean), (Shape{1, 20}));
  EXPECT_EQ(g.shape(heads.log_var), (Shape{1, 20}));
  EXPECT_EQ(g.shape(out), (Shape{1, 1, 32, 32}));
}

TEST(Architecture, CelebaIntermediateShapesAtReducedWidth) {
  const VaeModel m(VaeArchitecture::celeba(16), 1);
  Graph<float> g;
  const NodeId x = g.constant(Tensor<float>({1, 3, 128, 128}));
  const auto heads = record_encoder(g, m.architecture(), m.parameters(), m.batchnorm_stats(), x,
                                    BatchNormMode::infer, false);
  record_decoder(g, m.architecture(), m.parameters(), m.batchnorm_stats(), heads.mean, BatchNormMode::infer, false);
  std::vector<Shape> enc, dec;
  for (NodeId n : g.nodes_of_kind(OpKind::conv2d)) enc.push_back(g.shape(n));
  for (NodeId n : g.nodes_of_kind(OpKind::conv2d_transpose)) dec.push_back(g.shape(n));
  EXPECT_EQ(enc, (std::vector<Shape>{{1, 4, 64, 64}, {1, 8, 32, 32}, {1, 16, 16, 16}, {1, 32, 8, 8}, {1, 64, 4, 4}}));
  EXPECT_EQ(dec, (std::vector<Shape>{{1, 32, 8, 8}, {1, 16, 16, 16}, {1, 8, 32, 32}, {1, 4, 64, 64}, {1, 3, 128, 128}}));
}

TEST(Architecture, JsonRoundTripAndValidation) {
  for (const auto& a : {VaeArchitecture::st(), VaeArchitecture::celeba(8), VaeArchitecture::st().with_upsample_decoder(),
                        VaeArchitecture::st().with_latent_dim(3)})
    EXPECT_EQ(VaeArchitecture::from_json(a.to_json()), a) << a.name;
  auto broken = VaeArchitecture::st();
  broken.decoder.pop_back();
  EXPECT_THROW(broken.validate(), DataError);
  EXPECT_THROW(VaeArchitecture::preset("resnet"), UsageError);
  EXPECT_THROW(VaeArchitecture::celeba(3), UsageError);
}

TEST(Model, ParameterShapesFollowArchitecture) {
  const VaeModel m(VaeArchitecture::st(), 0);
  const auto& p = m.parameters();
  EXPECT_EQ(p.at("encoder.0.weight").shape(), (Shape{16, 1, 4, 4}));
  EXPECT_EQ(p.at("encoder.2.weight").shape(), (Shape{64, 32, 4, 4}));
  EXPECT_EQ(p.at("encoder.3.weight").shape(), (Shape{256, 1024}));
  EXPECT_EQ(p.at("encoder.mean.weight").shape(), (Shape{20, 256}));
  EXPECT_EQ(p.at("encoder.log_var.bias").shape(), (Shape{20}));
  EXPECT_EQ(p.at("decoder.0.weight").shape(), (Shape{1024, 20}));
  EXPECT_EQ(p.at("decoder.1.weight").shape(), (Shape{64, 32, 4, 4}));
  EXPECT_EQ(p.at("decoder.3.weight").shape(), (Shape{16, 1, 4, 4}));
  EXPECT_EQ(p.count("decoder.3.bn_gamma"), 0u);
  for (const auto& [name, t] : m.batchnorm_stats()) {
    const float expect = name.ends_with(".bn_var") ? 1.0f : 0.0f;
    for (float v : t.values()) EXPECT_EQ(v, expect) << name;
  }
  EXPECT_EQ(p.at("encoder.1.bn_gamma"), Tensor<float>::filled({32}, 1.0f));
  EXPECT_EQ(p.at("encoder.1.bias"), Tensor<float>({32}));
  std::size_t total = 0;
  for (const auto& [name, t] : p) total += t.size();
  EXPECT_EQ(m.parameter_count(), total);
}

TEST(Model, InitIsSeededAndFanInScaled) {
  const VaeModel a(VaeArchitecture::st(), 5), b(VaeArchitecture::st(), 5), c(VaeArchitecture::st(), 6);
  EXPECT_EQ(a.parameters(), b.parameters());
  EXPECT_NE(a.parameters().at("encoder.0.weight"), c.parameters().at("encoder.0.weight"));
  // Dense 1024 -> 256 with He scaling: variance about 2/1024.
  const auto& w = a.parameters().at("encoder.3.weight");
  double ss = 0;
  for (float v : w.values()) ss += double(v) * v;
  EXPECT_NEAR(ss / w.size(), 2.0 / 1024, 0.1 * 2.0 / 1024);
}

TEST(Encode, ZeroHeadsGiveZeroMean) {
  VaeModel m(VaeArchitecture::st(), 2);
  zero_heads(m);
  for (const auto& code : encode(m, random_images(m.architecture().input, 3, 9))) {
    EXPECT_EQ(code.mean, std::vector<float>(20, 0.0f));
    EXPECT_EQ(code.log_var, std::vector<float>(20, 0.0f));
  }
}

TEST(Encode, DeterministicAndShapeChecked) {
  const VaeModel m(VaeArchitecture::st(), 2);
  const auto x = random_images(m.architecture().input, 4, 10);
  const auto a = encode(m, x), b = encode(m, x);
  ASSERT_EQ(a.size(), 4u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].mean, b[i].mean);
    EXPECT_EQ(a[i].log_var, b[i].log_var);
    EXPECT_EQ(a[i].mean.size(), 20u);
  }
  // A single [H,W,C] image encodes like the batched one, up to GEMM blocking order.
  Tensor<float> one({32, 32, 1}, std::vector<float>(x.storage().begin(), x.storage().begin() + 1024));
  const auto single = encode(m, one).front().mean;
  for (std::size_t k = 0; k < 20; ++k) EXPECT_NEAR(single[k], a.front().mean[k], 1e-5);
  EXPECT_THROW(encode(m, Tensor<float>({2, 28, 28, 1})), DataError);
}

TEST(Encode, BatchCompositionDoesNotMatterInInferenceMode) {
  const VaeModel m(VaeArchitecture::st(), 2);
  const auto x = random_images(m.architecture().input, 5, 11);
  const auto all = encode(m, x);
  Tensor<float> last({1, 32, 32, 1}, std::vector<float>(x.storage().end() - 1024, x.storage().end()));
  const auto single = encode(m, last);
  for (std::size_t k = 0; k < 20; ++k) EXPECT_NEAR(single[0].mean[k], all[4].mean[k], 1e-5);
}

TEST(Reparameterize, Examples) {
  LatentCode c{{1.0f, -2.0f}, {0.0f, 0.0f}, std::nullopt};
  EXPECT_EQ(reparameterize(c, std::vector<float>{0.0f, 0.0f}), c.mean);
  EXPECT_EQ(reparameterize(c, std::vector<float>{0.5f, 1.5f}), (std::vector<float>{1.5f, -0.5f}));
  LatentCode d{{1.0f}, {static_cast<float>(std::log(4.0))}, std::nullopt};
  EXPECT_NEAR(reparameterize(d, std::vector<float>{0.5f})[0], 2.0f, 1e-6);
  EXPECT_THROW(reparameterize(c, std::vector<float>{0.0f}), DataError);
}

TEST(Decode, ShapeRangeDeterminism) {
  const VaeModel m(VaeArchitecture::st(), 4);
  std::vector<float> z(20);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = std::sin(float(i));
  const auto a = decode(m, z), b = decode(m, z);
  EXPECT_EQ(a.shape(), (Shape{32, 32, 1}));
  EXPECT_EQ(a, b);
  for (float v : a.values()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  EXPECT_THROW(decode(m, std::vector<float>(19)), DataError);
}

TEST(Decode, RoundTripPreservesShapesForBothPresets) {
  for (const auto& arch : {VaeArchitecture::st(), VaeArchitecture::celeba(16)}) {
    const VaeModel m(arch, 1);
    const auto x = random_images(arch.input, 2, 12);
    const auto codes = encode(m, x);
    Tensor<float> z({2, arch.latent_dim});
    for (std::size_t i = 0; i < 2; ++i) std::copy(codes[i].mean.begin(), codes[i].mean.end(), z.data() + i * arch.latent_dim);
    EXPECT_EQ(decode_batch(m, z).shape(), x.shape()) << arch.name;
  }
}

TEST(Decode, UpsampleVariantKeepsShape) {
  const VaeModel m(VaeArchitecture::st().with_upsample_decoder(), 1);
  EXPECT_EQ(decode(m, std::vector<float>(20, 0.1f)).shape(), (Shape{32, 32, 1}));
}

TEST(Elbo, KlExamples) {
  VaeModel m(VaeArchitecture::st().with_latent_dim(1), 3);
  zero_heads(m);
  const auto x = random_images(m.architecture().input, 2, 13);
  const Tensor<float> noise({2, 1});
  EXPECT_EQ(elbo_loss(m, x, noise).kl, 0.0);
  m.parameters().at("encoder.mean.bias")[0] = 1.0f;
  EXPECT_DOUBLE_EQ(elbo_loss(m, x, noise).kl, 0.5);
}

TEST(Elbo, KlNonNegativeAndTotalIsSum) {
  const VaeModel m(VaeArchitecture::st(), 7);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto x = random_images(m.architecture().input, 3, 100 + s);
    const auto noise = oracle::random_tensor<float>({3, 20}, 200 + s);
    const auto t = elbo_loss(m, x, noise);
    EXPECT_GE(t.kl, 0.0);
    EXPECT_GT(t.reconstruction, 0.0);
    EXPECT_DOUBLE_EQ(t.total, t.reconstruction + t.kl);
  }
}

TEST(Elbo, PerfectReconstructionHasZeroError) {
  VaeModel m(VaeArchitecture::st(), 8);
  zero_heads(m);
  const Tensor<float> target = decode(m, std::vector<float>(20, 0.0f));
  Tensor<float> batch({2, 32, 32, 1});
  std::copy(target.storage().begin(), target.storage().end(), batch.data());
  std::copy(target.storage().begin(), target.storage().end(), batch.data() + 1024);
  const auto t = elbo_loss(m, batch, Tensor<float>({2, 20}));
  EXPECT_EQ(t.reconstruction, 0.0);
  EXPECT_EQ(t.kl, 0.0);
}

TEST(Elbo, NonFiniteTermIsNamed) {
  const VaeModel m(VaeArchitecture::st(), 8);
  auto x = random_images(m.architecture().input, 2, 14);
  x[5] = std::numeric_limits<float>::quiet_NaN();
  try {
    elbo_loss(m, x, Tensor<float>({2, 20}));
    FAIL() << "expected a numerical error";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("reconstruction"), std::string::npos) << e.what();
  }
  EXPECT_THROW(elbo_loss(m, random_images(m.architecture().input, 2, 1), Tensor<float>({2, 3})), DataError);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  std::map<std::string, Tensor<float>> params{{"w", Tensor<float>({2}, {1.0f, -1.0f})}};
  const Tensor<float> g({2}, {0.5f, -4.0f});
  Adam adam({0.01, 0.9, 0.999, 1e-8});
  adam.step(params, {{"w", &g}});
  // Bias-corrected m/sqrt(v) is sign(g) on the first step.
  EXPECT_NEAR(params.at("w")[0], 1.0f - 0.01f, 1e-6);
  EXPECT_NEAR(params.at("w")[1], -1.0f + 0.01f, 1e-6);
  adam.step(params, {{"w", &g}});
  EXPECT_NEAR(params.at("w")[0], 1.0f - 0.02f, 1e-6);
  EXPECT_EQ(adam.steps(), 2u);
}

TEST(Train, RejectsBadConfigurations) {
  VaeModel m(VaeArchitecture::st(), 0);
  const Dataset d = tiny_squares(8);
  TrainConfig cfg;
  cfg.epochs = 0;
  EXPECT_THROW(train(m, d, cfg), UsageError);
  cfg.epochs = 1;
  cfg.batch_size = 0;
  EXPECT_THROW(train(m, d, cfg), UsageError);
  cfg.batch_size = 4;
  cfg.learning_rate = 0.0;
  EXPECT_THROW(train(m, d, cfg), UsageError);
  cfg.learning_rate = 1e-3;
  VaeModel celeba(VaeArchitecture::celeba(16), 0);
  try {
    train(celeba, d, cfg);
    FAIL() << "expected a shape error";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("32x32x1"), std::string::npos) << e.what();
  }
}

TEST(Train, SameSeedSameHistoryAndRecord) {
  const Dataset d = tiny_squares(40);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.seed = 11;
  std::size_t calls = 0;
  cfg.on_epoch = [&](std::size_t, const EpochLoss&) { ++calls; };
  VaeModel a(VaeArchitecture::st(), 1), b(VaeArchitecture::st(), 1);
  train(a, d, cfg);
  train(b, d, cfg);
  EXPECT_EQ(calls, 4u);
  ASSERT_EQ(a.training().history.size(), 2u);
  EXPECT_EQ(a.training().history, b.training().history);
  EXPECT_EQ(a.parameters(), b.parameters());
  EXPECT_EQ(a.batchnorm_stats(), b.batchnorm_stats());
  EXPECT_EQ(a.training().epochs, 2u);
  EXPECT_EQ(a.training().seed, 11u);
  for (const auto& e : a.training().history) {
    EXPECT_TRUE(std::isfinite(e.total));
    EXPECT_GE(e.kl, 0.0);
    EXPECT_DOUBLE_EQ(e.total, e.reconstruction + e.kl);
  }
  // Running statistics moved away from their initial values.
  EXPECT_NE(a.batchnorm_stats().at("encoder.0.bn_mean"), Tensor<float>({16}));

  VaeModel c(VaeArchitecture::st(), 1);
  cfg.seed = 12;
  train(c, d, cfg);
  EXPECT_NE(c.training().history, a.training().history);
}

TEST(Train, DivergenceIsReported) {
  const Dataset d = tiny_squares(16);
  VaeModel m(VaeArchitecture::st(), 1);
  m.parameters().at("encoder.log_var.bias").fill(1e4f);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  try {
    train(m, d, cfg);
    FAIL() << "expected divergence";
  } catch (const NumericalError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("batch 1"), std::string::npos) << msg;
  }
}

TEST(Checkpoint, BitExactRoundTrip) {
  oracle::TempDir dir("ckpt");
  const Dataset d = tiny_squares(16);
  VaeModel m(VaeArchitecture::st(), 21);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  cfg.seed = 4;
  train(m, d, cfg);
  save_checkpoint(m, dir / "m.ckpt");
  const VaeModel r = load_checkpoint(dir / "m.ckpt");
  EXPECT_EQ(r.architecture(), m.architecture());
  EXPECT_EQ(r.parameters(), m.parameters());
  EXPECT_EQ(r.batchnorm_stats(), m.batchnorm_stats());
  EXPECT_EQ(r.training().history, m.training().history);
  EXPECT_EQ(r.training().seed, 4u);
  EXPECT_EQ(r.init_seed(), 21u);
  save_checkpoint(r, dir / "again.ckpt");
  EXPECT_EQ(slurp(dir / "m.ckpt"), slurp(dir / "again.ckpt"));

  const auto c = read_container(dir / "m.ckpt");
  EXPECT_EQ(c.manifest.at("kind"), "checkpoint");
  EXPECT_EQ(c.manifest.at("loss_history").size(), 1u);
  EXPECT_TRUE(c.contains("param/encoder.0.weight"));
  EXPECT_TRUE(c.contains("stat/encoder.0.bn_var"));
}

TEST(Checkpoint, RejectsOtherContainers) {
  oracle::TempDir dir("ckpt-bad");
  Container c;
  c.manifest["kind"] = "dataset";
  write_container(c, dir / "x.bin");
  EXPECT_THROW(load_checkpoint(dir / "x.bin"), DataError);
  EXPECT_THROW(load_checkpoint(dir / "missing.bin"), Error);
}
