#include <benchmark/benchmark.h>

#include "nappure/attack.hpp"
#include "nappure/pipeline.hpp"
#include "nappure/prior.hpp"
#include "nappure/purifier.hpp"
#include "nappure/transforms.hpp"

using namespace nappure;

namespace {

const TensorShape kShape{1, 8, 8};

ImageTensor bench_image() {
    SeededRng rng(7);
    ImageTensor x(kShape);
    for (double& v : x.data) v = rng.uniform01();
    return x;
}

GmmPrior bench_prior() {
    DatasetConfig cfg;
    return make_prior(cfg);
}

PerturbationParams bench_params(const TransformSpec& spec) {
    SeededRng rng(11);
    ImageTensor ref = bench_image();
    PerturbationParams eps = identity_params(spec, ref);
    FlatVector flat = pack_params(eps);
    for (double& v : flat.data) v += 0.05 * rng.uniform(-1.0, 1.0);
    eps = unpack_params(spec, kShape, flat);
    clamp_param_domains(spec, eps);
    return eps;
}

void BM_ApplyConv(benchmark::State& state) {
    const TransformSpec spec = conv_spec(3);
    const ImageTensor x = bench_image();
    const PerturbationParams eps = bench_params(spec);
    for (auto _ : state) benchmark::DoNotOptimize(apply(spec, x, eps));
}
BENCHMARK(BM_ApplyConv);

void BM_ApplyFlow(benchmark::State& state) {
    const TransformSpec spec = flow_spec();
    const ImageTensor x = bench_image();
    const PerturbationParams eps = bench_params(spec);
    for (auto _ : state) benchmark::DoNotOptimize(apply(spec, x, eps));
}
BENCHMARK(BM_ApplyFlow);

void BM_ApplyComposite(benchmark::State& state) {
    const TransformSpec spec =
        composite_spec({conv_spec(3), patch_spec(3, 0.5), flow_spec(), additive_spec()});
    const ImageTensor x = bench_image();
    const PerturbationParams eps = bench_params(spec);
    for (auto _ : state) benchmark::DoNotOptimize(apply(spec, x, eps));
}
BENCHMARK(BM_ApplyComposite);

void BM_VjpFlow(benchmark::State& state) {
    const TransformSpec spec = flow_spec();
    const ImageTensor x = bench_image();
    const PerturbationParams eps = bench_params(spec);
    const ImageTensor cot = bench_image();
    for (auto _ : state) benchmark::DoNotOptimize(apply_vjp(spec, x, eps, cot));
}
BENCHMARK(BM_VjpFlow);

void BM_Denoise(benchmark::State& state) {
    const GmmPrior prior = bench_prior();
    const FlatVector y = bench_image().flatten();
    for (auto _ : state) benchmark::DoNotOptimize(denoise(prior, y, 0.5));
}
BENCHMARK(BM_Denoise);

void BM_LikelihoodLoss(benchmark::State& state) {
    const GmmPrior prior = bench_prior();
    const ImageTensor x = bench_image();
    SeededRng rng(5);
    const SigmaSchedule schedule;
    for (auto _ : state)
        benchmark::DoNotOptimize(likelihood_loss(prior, x, rng, schedule, false));
}
BENCHMARK(BM_LikelihoodLoss);

void BM_PurifyIteration(benchmark::State& state) {
    // One full flow purification iteration, amortized via a short run.
    const GmmPrior prior = bench_prior();
    const ImageTensor x_adv = bench_image();
    PurifyConfig cfg;
    cfg.lambda1 = 0.01;
    cfg.lambda2 = 5.0;
    cfg.iterations = 16;
    cfg.seed = 3;
    const TransformSpec spec = flow_spec();
    for (auto _ : state) benchmark::DoNotOptimize(nappure_purify(x_adv, spec, prior, cfg));
    state.SetItemsProcessed(state.iterations() * cfg.iterations);
}
BENCHMARK(BM_PurifyIteration);

void BM_PgdStep(benchmark::State& state) {
    DatasetConfig dc;
    const GmmPrior prior = make_prior(dc);
    SeededRng rng(9);
    LabeledDataset data;
    for (int k = 0; k < 3; ++k)
        for (int i = 0; i < 16; ++i) {
            ImageTensor x(kShape);
            for (std::size_t t = 0; t < x.size(); ++t)
                x.data[t] = prior.means[k][t] + 0.05 * rng.gaussian();
            clamp_in_place(x, 0.0, 1.0);
            data.images.push_back(std::move(x));
            data.labels.push_back(k);
        }
    const SoftmaxClassifier clf = train_classifier(data, 100, 0.5, 1).classifier;
    AttackConfig cfg;
    cfg.spec = flow_spec();
    cfg.constraint.radius = 0.6;
    cfg.steps = 8;
    cfg.step_size = 0.1;
    for (auto _ : state) {
        SeededRng arng(17);
        benchmark::DoNotOptimize(pgd_attack(data.images[0], data.labels[0], clf, cfg, arng));
    }
    state.SetItemsProcessed(state.iterations() * cfg.steps);
}
BENCHMARK(BM_PgdStep);

}  // namespace

BENCHMARK_MAIN();
