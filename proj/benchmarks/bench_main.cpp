#include <benchmark/benchmark.h>

#include "permflow/diffcore.hpp"
#include "permflow/flow.hpp"
#include "permflow/metrics.hpp"
#include "permflow/random.hpp"
#include "permflow/selfsup.hpp"

using namespace permflow;

namespace {

DenseArray random_array(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Rng rng(seed);
  DenseArray a({rows, cols});
  for (double& v : a.values()) v = rng.uniform(-1.0, 1.0);
  return a;
}

void BM_MatmulForward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const DenseArray a = random_array(n, 400, 1), b = random_array(400, 32, 2);
  for (auto _ : state) {
    Tape tape(false);
    benchmark::DoNotOptimize(matmul(tape.constant(a), tape.constant(b)).value());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_MatmulForward)->Arg(32)->Arg(256);

void BM_MatmulBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Parameter a("a", random_array(n, 400, 1)), b("b", random_array(400, 32, 2));
  for (auto _ : state) {
    Tape tape;
    tape.backward(sum(matmul(tape.param(a), tape.param(b))));
  }
}
BENCHMARK(BM_MatmulBackward)->Arg(32)->Arg(256);

void BM_FlowForward(benchmark::State& state) {
  FlowModel flow(FlowConfig{.input_dim = 400, .num_layers = 4, .hidden_units = 32, .zero_init_output = false}, 3);
  const DenseArray x = random_array(static_cast<std::size_t>(state.range(0)), 400, 4);
  for (auto _ : state) benchmark::DoNotOptimize(flow.log_prob(x));
}
BENCHMARK(BM_FlowForward)->Arg(32)->Arg(1024);

void BM_FlowTrainStep(benchmark::State& state) {
  FlowModel flow(FlowConfig{.input_dim = 400, .num_layers = 4, .hidden_units = 32, .zero_init_output = false}, 3);
  const DenseArray x = random_array(32, 400, 4);
  for (auto _ : state) {
    Tape tape;
    tape.backward(neg(mean(flow.log_prob(tape, tape.constant(x)))));
  }
}
BENCHMARK(BM_FlowTrainStep);

void BM_Metrics(benchmark::State& state) {
  Rng rng(5);
  ScoreSet s;
  for (std::int64_t i = 0; i < state.range(0); ++i) {
    const bool pos = rng.uniform01() < 0.3;
    s.scores.push_back(rng.normal() + (pos ? 1.0 : 0.0));
    s.positive.push_back(pos);
  }
  for (auto _ : state) benchmark::DoNotOptimize(evaluate_scores(s));
}
BENCHMARK(BM_Metrics)->Arg(1000)->Arg(100000);

void BM_GeneratePermutationSet(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(generate_set(8, static_cast<std::size_t>(state.range(0)), 10, 1));
}
BENCHMARK(BM_GeneratePermutationSet)->Arg(200)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
