#include "poisoncert/class_cert.hpp"
#include "poisoncert/data.hpp"
#include "poisoncert/mean_cert.hpp"
#include "poisoncert/meta.hpp"
#include "poisoncert/simulate.hpp"

#include <benchmark/benchmark.h>

#include <random>

using namespace poisoncert;

namespace {

MeanInstance mean_instance(int d) {
  const MeanTask task = gen_gaussian_task(d, 11);
  return MeanInstance{task.mu, task.Sigma, 0.1, 0.1 * Mat::Identity(d, d), 0.05, 1.0};
}

ClassInstance blob_instance(int n) {
  ClassInstance inst;
  inst.points = preprocess(gen_blobs(2, n, 2.0, 3), 2).Z;
  inst.eta = 1e-3;
  inst.sigma = 1e-2;
  inst.epsilon = 0.05;
  return inst;
}

void BM_SolveMeanDual(benchmark::State& state) {
  const MeanInstance inst = mean_instance(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(solve_mean_dual(inst).value);
}
BENCHMARK(BM_SolveMeanDual)->Arg(2)->Arg(5)->Arg(10)->Arg(20)->Unit(benchmark::kMillisecond);

void BM_CertifyMean(benchmark::State& state) {
  const MeanInstance inst = mean_instance(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(certify_mean(inst).verified_value);
}
BENCHMARK(BM_CertifyMean)->Arg(2)->Arg(5)->Unit(benchmark::kMillisecond);

void BM_CertifyClass(benchmark::State& state) {
  const ClassInstance inst = blob_instance(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(certify_class(inst).verified_value);
}
BENCHMARK(BM_CertifyClass)->Arg(10)->Arg(25)->Arg(50)->Arg(100)->Unit(benchmark::kMillisecond);

void BM_HingeTrajectory(benchmark::State& state) {
  const ClassInstance inst = blob_instance(100);
  const AttackPolicy policy = state.range(0) == 0   ? AttackPolicy::label_flip()
                              : state.range(0) == 1 ? AttackPolicy::fgsm(0.1)
                                                    : AttackPolicy::pgd(10, 0.1);
  const Vec start = hinge_warm_start(inst.points, inst.sigma);
  std::uint64_t seed = 0;
  for (auto _ : state)
    benchmark::DoNotOptimize(run_online(inst.rule(), inst.stream(), inst.objective(), policy, inst.adversary_set(),
                                        50000, 10000, seed++, start)
                                 .avg_adv_loss);
  state.SetLabel(policy.name());
  state.SetItemsProcessed(state.iterations() * 50000);
}
BENCHMARK(BM_HingeTrajectory)->DenseRange(0, 2)->Unit(benchmark::kMillisecond);

void BM_MeanTrajectoryGreedy(benchmark::State& state) {
  const MeanInstance inst = mean_instance(static_cast<int>(state.range(0)));
  std::uint64_t seed = 0;
  for (auto _ : state)
    benchmark::DoNotOptimize(run_online(inst.rule(), inst.stream(), inst.objective(), AttackPolicy::greedy(),
                                        mean_adversary_set(inst), 50000, 10000, seed++, inst.mu)
                                 .avg_adv_loss);
  state.SetItemsProcessed(state.iterations() * 50000);
}
BENCHMARK(BM_MeanTrajectoryGreedy)->Arg(2)->Arg(20)->Unit(benchmark::kMillisecond);

void BM_MetaTrain(benchmark::State& state) {
  const int d = static_cast<int>(state.range(0));
  const auto tasks = sample_tasks(d, 10, {}, 5);
  MetaConfig cfg;
  cfg.T = 5;
  for (auto _ : state) benchmark::DoNotOptimize(meta_train(tasks, 0.1, 0.05, 1.0, cfg).S.trace());
}
BENCHMARK(BM_MetaTrain)->Arg(2)->Arg(5)->Unit(benchmark::kMillisecond);

void BM_Preprocess(benchmark::State& state) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;
  FeatureTable t;
  t.X = Mat::NullaryExpr(500, 512, [&] { return g(rng); });
  t.y = Vec::NullaryExpr(500, [&] { return g(rng) > 0 ? 1.0 : -1.0; });
  for (auto _ : state) benchmark::DoNotOptimize(preprocess(t, 30).scale);
}
BENCHMARK(BM_Preprocess)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
