// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include <random>

#include "csmap/saliency.hpp"

using namespace csmap;

namespace {

Tensor<float> uniform(Shape shape, std::uint64_t seed) {
  Tensor<float> t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  for (float& v : t.values()) v = u(rng);
  return t;
}

// 4x4 stride-2 conv as used by the small encoder; arg is the batch size.
void BM_Conv2dForwardBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto x = uniform({n, 16, 16, 16}, 1), w = uniform({32, 16, 4, 4}, 2), b = uniform({32}, 3);
  for (auto _ : state) {
    Graph<float> g;
    const NodeId xi = g.input(x, true);
    const NodeId y = g.conv2d(xi, g.parameter(w, true), g.parameter(b, true), {2, 1, 0});
    g.forward(y);
    g.backward(y, Tensor<float>::filled(g.shape(y), 1.0f));
    benchmark::DoNotOptimize(g.grad(xi).data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_Conv2dForwardBackward)->Arg(1)->Arg(16);

void BM_ConceptSaliency(benchmark::State& state) {
  const VaeModel model(VaeArchitecture::st(), 1);
  ConceptVector c;
  c.direction.assign(model.latent_dim(), 0.1f);
  const auto x = uniform({32, 32, 1}, 4);
  const BackpropRule rules[] = {BackpropRule::vanilla(), BackpropRule::guided(), BackpropRule::rectified_percentile()};
  const BackpropRule& rule = rules[state.range(0)];
  for (auto _ : state) benchmark::DoNotOptimize(concept_saliency(model, c, x, rule).raw.data());
  state.SetLabel(rule.name());
}
BENCHMARK(BM_ConceptSaliency)->DenseRange(0, 2)->Unit(benchmark::kMillisecond);

// One epoch over a single batch of 16 images: forward, backward and an Adam step.
void BM_TrainStep(benchmark::State& state) {
  SquaresConfig sc;
  sc.n = 16;
  sc.seed = 5;
  const Dataset d = gen_squares(sc);
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 16;
  for (auto _ : state) {
    state.PauseTiming();
    VaeModel model(VaeArchitecture::st(), 1);
    state.ResumeTiming();
    train(model, d, tc);
    benchmark::DoNotOptimize(model.training().history.back().total);
  }
  state.SetItemsProcessed(state.iterations() * 16);
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

void BM_Encode(benchmark::State& state) {
  const VaeModel model(VaeArchitecture::st(), 1);
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto x = uniform({n, 32, 32, 1}, 6);
  for (auto _ : state) benchmark::DoNotOptimize(encode(model, x).data());
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_Encode)->Arg(1)->Arg(64)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
