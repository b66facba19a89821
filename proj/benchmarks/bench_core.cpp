#include <benchmark/benchmark.h>

#include "slf/cox.hpp"
#include "slf/metrics.hpp"
#include "slf/model.hpp"
#include "slf/simgen.hpp"

using namespace slf;

namespace {

ImageSequence demo_sequence(std::size_t visits, std::size_t side) {
  Rng rng(7);
  ImageSequence seq;
  seq.id = "bench";
  for (std::size_t j = 0; j < visits; ++j) {
    seq.times.push_back(0.05 * double(j));
    Tensor img({side, side});
    for (std::size_t k = 0; k < img.size(); ++k)
      img[k] = rng.uniform(-0.5, 0.5);
    seq.images.push_back(std::move(img));
  }
  return seq;
}

void BM_Matmul(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  Tensor a({n, n}), b({n, n});
  for (std::size_t k = 0; k < a.size(); ++k) a[k] = rng.uniform(-1, 1);
  for (std::size_t k = 0; k < b.size(); ++k) b[k] = rng.uniform(-1, 1);
  for (auto _ : state) {
    Tape tape;
    Var out = tape.matmul(tape.input(a), tape.input(b));
    benchmark::DoNotOptimize(tape.value(out).data());
  }
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_Matmul)->RangeMultiplier(2)->Range(16, 128)->Complexity();

void BM_RiskScoreForward(benchmark::State& state) {
  ModelConfig cfg;
  cfg.dropout = 0.0;
  cfg.seed = 3;
  const ParameterStore store = init_parameters(cfg);
  const ImageSequence seq = demo_sequence(3, 64);
  for (auto _ : state) {
    benchmark::DoNotOptimize(risk_score(seq, 3, store, cfg));
  }
}
BENCHMARK(BM_RiskScoreForward);

void BM_RiskScoreBackward(benchmark::State& state) {
  ModelConfig cfg;
  cfg.dropout = 0.0;
  cfg.seed = 3;
  const ParameterStore store = init_parameters(cfg);
  const ImageSequence seq = demo_sequence(3, 64);
  for (auto _ : state) {
    Tape tape;
    ModelVars vars = bind_parameters(tape, store, cfg);
    Var r = risk_score_node(tape, seq, 3, vars, cfg);
    tape.backward(r);
    benchmark::DoNotOptimize(tape.grad(vars.patch_proj).data());
  }
}
BENCHMARK(BM_RiskScoreBackward);

void BM_BreslowBaseline(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  Rng rng(5);
  std::vector<double> risks(n);
  std::vector<SurvivalRecord> recs(n);
  for (std::size_t i = 0; i < n; ++i) {
    risks[i] = rng.uniform(-1, 1);
    recs[i] = {"p" + std::to_string(i), rng.unit_open(), int(rng.below(2))};
  }
  for (auto _ : state) {
    benchmark::DoNotOptimize(breslow_baseline(risks, recs));
  }
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_BreslowBaseline)->RangeMultiplier(4)->Range(64, 4096)->Complexity();

void BM_TimeDependentAuc(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  Rng rng(9);
  std::vector<double> risks(n);
  std::vector<SurvivalRecord> recs(n);
  for (std::size_t i = 0; i < n; ++i) {
    risks[i] = rng.uniform(-1, 1);
    recs[i] = {"p" + std::to_string(i), 0.05 + 0.9 * rng.unit(),
               int(rng.below(2))};
  }
  for (auto _ : state) {
    benchmark::DoNotOptimize(time_dependent_auc(risks, recs, 0.1, 0.2));
  }
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_TimeDependentAuc)->RangeMultiplier(4)->Range(64, 1024)->Complexity();

void BM_GenerateCohort(benchmark::State& state) {
  SimConfig cfg;
  cfg.cohort = static_cast<std::size_t>(state.range(0));
  cfg.seed = 11;
  for (auto _ : state) {
    benchmark::DoNotOptimize(generate_cohort(cfg).patients.size());
  }
}
BENCHMARK(BM_GenerateCohort)->Arg(10)->Arg(50);

}  // namespace

BENCHMARK_MAIN();
