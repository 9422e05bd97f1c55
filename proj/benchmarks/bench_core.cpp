#include <benchmark/benchmark.h>

#include <vector>

#include "sidlab/distill.hpp"
#include "sidlab/nets.hpp"
#include "sidlab/teacher.hpp"

using namespace sidlab;
using tg::Tape;
using tg::Tensor;

namespace {

DiffusionSchedule schedule() { return DiffusionSchedule::linear(1000, 1e-4, 0.02); }

Tensor random_tensor(tg::Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = rng.normal();
  return t;
}

void BM_MatMul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Tensor a = random_tensor({256, n}, rng);
  const Tensor b = random_tensor({n, n}, rng);
  for (auto _ : state) {
    Tape tape;
    benchmark::DoNotOptimize(tg::matmul(tape.constant(a), tape.constant(b)).value().data().data());
  }
  state.SetItemsProcessed(state.iterations() * 256 * n * n);
}
BENCHMARK(BM_MatMul)->Arg(32)->Arg(128);

struct NetBatch {
  DiffusionSchedule sched = schedule();
  ScoreNet net{NetworkSpec{}, sched, 2};
  Tensor x;
  std::vector<int> t;
  std::vector<ClassId> c;

  explicit NetBatch(std::size_t n) : t(n), c(n) {
    Rng rng(3);
    x = random_tensor({n, 2}, rng);
    for (std::size_t i = 0; i < n; ++i) {
      t[i] = rng.uniform_int(1, 1000);
      c[i] = rng.uniform_int(-1, 3);
    }
  }
};

void BM_ScoreNetForward(benchmark::State& state) {
  NetBatch b(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(b.net.predict(b.x, b.t, b.c).data().data());
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ScoreNetForward)->Arg(256);

void BM_ScoreNetForwardBackward(benchmark::State& state) {
  NetBatch b(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) {
    Tape tape;
    const auto out = b.net.predict_x0(tape, tape.constant(b.x), b.t, b.c, tg::ParamGrad::kTrack);
    tape.backward(tg::sq_norm(out));
    b.net.zero_grad();
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ScoreNetForwardBackward)->Arg(256);

void BM_DistillStep(benchmark::State& state) {
  const auto sched = schedule();
  const auto mix = ConditionalMixture::rings();
  OracleTeacher oracle(mix, sched);
  const ScoreNet init(NetworkSpec{}, sched, 4);
  DistillConfig cfg;
  cfg.K = static_cast<int>(state.range(0));
  cfg.data_enhanced = state.range(1) != 0;
  cfg.real_pairs = 10'000;
  cfg.warmup_images = 0;
  cfg.b_switch_images = 0;
  Distiller d(cfg, oracle, init, mix, sched);
  for (auto _ : state) benchmark::DoNotOptimize(d.step().loss_theta);
  state.SetItemsProcessed(state.iterations() * cfg.batch_size);
}
BENCHMARK(BM_DistillStep)->Args({1, 0})->Args({1, 1})->Args({4, 0})->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
