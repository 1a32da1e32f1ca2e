// OpenMP kernels against their serial references.
#include <benchmark/benchmark.h>

#include "looplab/linalg.hpp"
#include "looplab/rng.hpp"
#include "looplab/scalarlab.hpp"
#include "looplab/trainer.hpp"

using namespace looplab;

namespace {

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Matrix a = Matrix::gaussian(n, n, rng), b = Matrix::gaussian(n, n, rng);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
}

void BM_MatmulReference(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Matrix a = Matrix::gaussian(n, n, rng), b = Matrix::gaussian(n, n, rng);
  for (auto _ : state) benchmark::DoNotOptimize(matmul_reference(a, b));
}

const std::vector<double> kSigmas{0.5, 1, 2, 4};

void BM_Anisotropy(benchmark::State& state) {
  for (auto _ : state)
    benchmark::DoNotOptimize(run_anisotropy(kSigmas, static_cast<std::size_t>(state.range(0)), kAnisotropyEps, 7));
}

void BM_AnisotropySerial(benchmark::State& state) {
  for (auto _ : state)
    benchmark::DoNotOptimize(
        run_anisotropy_serial(kSigmas, static_cast<std::size_t>(state.range(0)), kAnisotropyEps, 7));
}

struct TrainFixture {
  Model model;
  std::vector<PrefixSumExample> batch;
  TrainFixture() {
    Rng rng(2);
    NetConfig c = TrainConfig::default_net();
    c.L = 16;
    model = Model::random(c, rng);
    batch = gen_prefix_sums(32, 16, 3);
  }
};

void BM_ForwardBackward(benchmark::State& state) {
  static const TrainFixture f;
  for (auto _ : state) benchmark::DoNotOptimize(forward_backward(f.model, f.batch, 3, 4));
}

void BM_ForwardBackwardSerial(benchmark::State& state) {
  static const TrainFixture f;
  for (auto _ : state) benchmark::DoNotOptimize(forward_backward_serial(f.model, f.batch, 3, 4));
}

}  // namespace

BENCHMARK(BM_Matmul)->Arg(64)->Arg(192);
BENCHMARK(BM_MatmulReference)->Arg(64)->Arg(192);
BENCHMARK(BM_Anisotropy)->Arg(2000);
BENCHMARK(BM_AnisotropySerial)->Arg(2000);
BENCHMARK(BM_ForwardBackward)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ForwardBackwardSerial)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
