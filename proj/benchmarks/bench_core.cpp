// Microbenchmarks for the hot paths: tape construction and re-evaluation,
// the PGD inner loop, closed-form adaptation, and episode sampling. Run the
// bench_core binary directly; see google-benchmark's --benchmark_* flags.

#include <benchmark/benchmark.h>

#include <utility>
#include <vector>

#include "aq/attacks.hpp"
#include "aq/autodiff.hpp"
#include "aq/finetune.hpp"
#include "aq/nn.hpp"
#include "aq/rng.hpp"
#include "aq/tasks.hpp"

namespace {

using namespace aq;

Architecture desk_arch() {
  Architecture arch;
  arch.input_shape = {16};
  arch.layers = {DenseSpec{32, true}};
  arch.embedding_dim = 16;
  arch.n_way = 5;
  return arch;
}

struct Fixture {
  Architecture arch = desk_arch();
  ParameterSet params;
  Dataset train;
  Episode ep;

  Fixture() {
    Rng rng(1);
    params = init_params(arch, rng);
    auto [tr, te] = gen_synthetic(
        SyntheticSpec{.n_train_classes = 12, .n_test_classes = 8, .dim = 16,
                      .per_class = 40},
        1);
    train = std::move(tr);
    Rng erng(2);
    ep = sample_episode(train, EpisodeSpec{5, 5, 10}, erng);
  }
};

const Fixture& fixture() {
  static Fixture f;
  return f;
}

void BM_TapeBuildForwardLoss(benchmark::State& state) {
  const Fixture& f = fixture();
  for (auto _ : state) {
    Graph g;
    ParamMap m = attach_params(g, f.params);
    Tensor x = g.input("x", f.ep.query_x);
    Tensor loss = cross_entropy(forward_model(f.arch, m, x), f.ep.query_y);
    benchmark::DoNotOptimize(loss.item());
  }
  state.SetItemsProcessed(state.iterations() *
                          static_cast<int64_t>(f.ep.query_y.size()));
}
BENCHMARK(BM_TapeBuildForwardLoss);

void BM_TapeReplay(benchmark::State& state) {
  const Fixture& f = fixture();
  Graph g;
  ParamMap m = attach_params(g, f.params);
  Tensor x = g.input("x", f.ep.query_x);
  Tensor loss = cross_entropy(forward_model(f.arch, m, x), f.ep.query_y);
  std::vector<double> feed = f.ep.query_x.value();
  for (auto _ : state) {
    feed[0] += 1e-9;  // defeat any memoization-by-equality
    g.replay({{"x", feed}});
    benchmark::DoNotOptimize(loss.value());
  }
  state.SetItemsProcessed(state.iterations() *
                          static_cast<int64_t>(f.ep.query_y.size()));
}
BENCHMARK(BM_TapeReplay);

void BM_GradientBuild(benchmark::State& state) {
  const Fixture& f = fixture();
  for (auto _ : state) {
    Graph g;
    ParamMap m = attach_params(g, f.params);
    Tensor x = g.input("x", f.ep.query_x);
    Tensor loss = cross_entropy(forward_model(f.arch, m, x), f.ep.query_y);
    std::vector<Tensor> wrt;
    for (const auto& [name, t] : m) wrt.push_back(t);
    const std::vector<Tensor> grads = g.gradients(loss, wrt);
    benchmark::DoNotOptimize(grads.back().value());
  }
}
BENCHMARK(BM_GradientBuild);

void BM_Pgd20Step(benchmark::State& state) {
  const Fixture& f = fixture();
  ClassifierFn model = snapshot_classifier(f.arch, f.params);
  AttackConfig cfg;
  cfg.eps = 0.06;
  cfg.step = 0.015;
  cfg.steps = 20;
  std::uint64_t seed = 1;
  for (auto _ : state) {
    AttackOutcome out =
        pgd_attack(model, f.ep.query_x, f.ep.query_y, cfg, seed++);
    benchmark::DoNotOptimize(out.perturbation_linf);
  }
  state.SetItemsProcessed(state.iterations() *
                          static_cast<int64_t>(f.ep.query_y.size()));
}
BENCHMARK(BM_Pgd20Step);

void BM_RidgeAdapt(benchmark::State& state) {
  const Fixture& f = fixture();
  FineTuneSpec spec;
  spec.kind = FineTuneKind::kRidge;
  for (auto _ : state) {
    Graph g;
    ParamMap m = attach_params(g, f.params);
    AdaptedModel am = adapt(g, f.arch, spec, m, g.constant(f.ep.support_x),
                            f.ep.support_y, 5);
    benchmark::DoNotOptimize(am.predict(g.constant(f.ep.query_x)).value());
  }
}
BENCHMARK(BM_RidgeAdapt);

void BM_MamlAdapt10(benchmark::State& state) {
  const Fixture& f = fixture();
  FineTuneSpec spec;  // maml_sgd, 10 inner steps
  for (auto _ : state) {
    Graph g;
    ParamMap m = attach_params(g, f.params);
    AdaptedModel am = adapt(g, f.arch, spec, m, g.constant(f.ep.support_x),
                            f.ep.support_y, 5);
    benchmark::DoNotOptimize(am.predict(g.constant(f.ep.query_x)).value());
  }
}
BENCHMARK(BM_MamlAdapt10);

void BM_EpisodeSample(benchmark::State& state) {
  const Fixture& f = fixture();
  Rng rng(3);
  for (auto _ : state) {
    Episode ep = sample_episode(f.train, EpisodeSpec{5, 5, 10}, rng);
    benchmark::DoNotOptimize(ep.query_y);
  }
}
BENCHMARK(BM_EpisodeSample);

}  // namespace

BENCHMARK_MAIN();
