#include <benchmark/benchmark.h>

#include "ddlab/diffusion.hpp"
#include "ddlab/models.hpp"
#include "ddlab/ops.hpp"
#include "ddlab/tape.hpp"

using namespace ddlab;

static void BM_Matmul(benchmark::State& state) {
    const auto n = state.range(0);
    Prng prng(1);
    const Tensor a = Tensor::randn({n, n}, prng), b = Tensor::randn({n, n}, prng);
    for (auto _ : state) benchmark::DoNotOptimize(ops::matmul(a, b));
    state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256);

static void BM_Conv2dForwardBackward(benchmark::State& state) {
    Prng prng(2);
    Tensor x = Tensor::randn({32, 16, 32, 32}, prng);
    Tensor w = Tensor::randn({16, 16, 3, 3}, prng, 0.1f, true);
    for (auto _ : state) {
        w.zero_grad();
        Tape tape;
        Tensor loss;
        {
            TapeGuard guard(tape);
            loss = ops::sum(ops::conv2d(x, w, 1, 1));
        }
        backward(tape, loss);
    }
}
BENCHMARK(BM_Conv2dForwardBackward)->Unit(benchmark::kMillisecond);

static void BM_VitForward(benchmark::State& state) {
    Prng prng(3);
    const VitModel vit(VitConfig{}, prng.split("vit"));
    const Tensor x = Tensor::uniform({state.range(0), 1, 32, 32}, prng, 0.0f, 1.0f);
    NoGradGuard no_grad;
    for (auto _ : state) benchmark::DoNotOptimize(vit.logits(x));
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_VitForward)->Arg(1)->Arg(32)->Unit(benchmark::kMillisecond);

static void BM_VitTrainStep(benchmark::State& state) {
    Prng prng(4);
    VitModel vit(VitConfig{}, prng.split("vit"));
    const Tensor x = Tensor::uniform({32, 1, 32, 32}, prng, 0.0f, 1.0f);
    const std::vector<int> y(32, 1);
    for (auto _ : state) {
        vit.params().zero_grad();
        Tape tape;
        Tensor loss;
        {
            TapeGuard guard(tape);
            loss = ops::cross_entropy(vit.logits(x), y);
        }
        backward(tape, loss);
    }
}
BENCHMARK(BM_VitTrainStep)->Unit(benchmark::kMillisecond);

static void BM_Degrade(benchmark::State& state) {
    Prng prng(5);
    const auto sched = diffusion::BlurSchedule::linear(10, 0.4, 1.2);
    const Tensor x = Tensor::uniform({100, 1, 32, 32}, prng, 0.0f, 1.0f);
    for (auto _ : state) benchmark::DoNotOptimize(diffusion::degrade(x, static_cast<int>(state.range(0)), sched));
}
BENCHMARK(BM_Degrade)->Arg(1)->Arg(10)->Unit(benchmark::kMillisecond);

static void BM_UNetForward(benchmark::State& state) {
    Prng prng(6);
    const UNet unet(UNetConfig{}, prng.split("unet"));
    const Tensor x = Tensor::uniform({32, 1, 32, 32}, prng, 0.0f, 1.0f);
    NoGradGuard no_grad;
    for (auto _ : state) benchmark::DoNotOptimize(unet.forward(x, 5));
}
BENCHMARK(BM_UNetForward)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
