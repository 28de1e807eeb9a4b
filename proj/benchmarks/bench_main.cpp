#include <benchmark/benchmark.h>

#include <vector>

#include "residual_lens/attn_metrics.hpp"
#include "residual_lens/random.hpp"
#include "residual_lens/spectral.hpp"
#include "residual_lens/toy_model.hpp"

using namespace residual_lens;

namespace {

RepMatrix gaussian(std::size_t T, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(T * d);
  for (auto& x : v) x = rng.normal();
  return RepMatrix(T, d, std::move(v));
}

void BM_SingularValues(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const RepMatrix x = gaussian(2 * n, n, 1);
  for (auto _ : state) benchmark::DoNotOptimize(singular_values(x));
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_SingularValues)->RangeMultiplier(2)->Range(8, 128)->Complexity();

void BM_BoundReport(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const RepMatrix x = gaussian(n, n, 2);
  for (auto _ : state) benchmark::DoNotOptimize(bound_report(x));
}
BENCHMARK(BM_BoundReport)->Arg(16)->Arg(64);

void BM_HeadStats(benchmark::State& state) {
  const auto T = static_cast<std::size_t>(state.range(0));
  const std::size_t H = 8;
  Rng rng(3);
  std::vector<double> w(H * T * T, 0.0);
  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t i = 0; i < T; ++i) {
      double z = 0.0;
      for (std::size_t j = 0; j <= i; ++j) z += (w[(h * T + i) * T + j] = rng.uniform(0.01, 1.0));
      for (std::size_t j = 0; j <= i; ++j) w[(h * T + i) * T + j] /= z;
    }
  }
  const AttnTensor a(H, T, std::move(w));
  for (auto _ : state) benchmark::DoNotOptimize(head_stats(a));
}
BENCHMARK(BM_HeadStats)->Arg(32)->Arg(128)->Arg(512);

void BM_ToyForward(benchmark::State& state) {
  ToyModelConfig cfg;
  cfg.layers = 6;
  const ToyModel model(cfg);
  std::vector<std::size_t> tokens(static_cast<std::size_t>(state.range(0)));
  for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = (7 * i + 3) % cfg.vocab;
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(tokens));
}
BENCHMARK(BM_ToyForward)->Arg(32)->Arg(128);

}  // namespace

BENCHMARK_MAIN();
