// SPDX-License-Identifier: Apache-2.0
//
// OpenMP kernels against the serial reference implementation on the shapes
// the detector actually runs: the three backbone convolutions at training
// batch size, the ROI head fc layer, and square GEMMs. Thread count comes from
// OMP_NUM_THREADS.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "ctlab/kernels.hpp"

namespace k = ctlab::kernels;

namespace {

std::vector<float> random_vector(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

// Backbone layer `index` (0..2) on a batch of 16 images of 64x64.
k::ConvShape backbone_layer(int index) {
  static constexpr int channels[] = {3, 16, 32, 32};
  static constexpr int sizes[] = {64, 32, 16};
  k::ConvShape s;
  s.batch = 16;
  s.in_channels = channels[index];
  s.out_channels = channels[index + 1];
  s.in_h = s.in_w = sizes[index];
  s.kernel = 3;
  s.stride = 2;
  s.pad = 1;
  return s;
}

template <bool Reference>
void BM_Gemm(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto a = random_vector(static_cast<std::size_t>(n) * n, 1);
  const auto b = random_vector(static_cast<std::size_t>(n) * n, 2);
  std::vector<float> c(static_cast<std::size_t>(n) * n);
  for (auto _ : state) {
    if constexpr (Reference) {
      k::reference::gemm_nn(n, n, n, a.data(), b.data(), c.data(), false);
    } else {
      k::gemm_nn(n, n, n, a.data(), b.data(), c.data(), false);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2LL * n * n * n);  // flops
}

template <bool Reference>
void BM_ConvForward(benchmark::State& state) {
  const auto s = backbone_layer(static_cast<int>(state.range(0)));
  const auto in = random_vector(s.in_size(), 3);
  const auto w = random_vector(s.weight_size(), 4);
  const auto bias = random_vector(static_cast<std::size_t>(s.out_channels), 5);
  std::vector<float> out(s.out_size());
  for (auto _ : state) {
    if constexpr (Reference) {
      k::reference::conv2d_forward(s, in.data(), w.data(), bias.data(), out.data());
    } else {
      k::conv2d_forward(s, in.data(), w.data(), bias.data(), out.data());
    }
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Reference>
void BM_ConvBackward(benchmark::State& state) {
  const auto s = backbone_layer(static_cast<int>(state.range(0)));
  const auto in = random_vector(s.in_size(), 3);
  const auto w = random_vector(s.weight_size(), 4);
  const auto d_out = random_vector(s.out_size(), 6);
  std::vector<float> d_in(s.in_size()), d_w(s.weight_size()), d_b(static_cast<std::size_t>(s.out_channels));
  for (auto _ : state) {
    if constexpr (Reference) {
      k::reference::conv2d_backward(s, in.data(), w.data(), d_out.data(), d_in.data(), d_w.data(), d_b.data());
    } else {
      k::conv2d_backward(s, in.data(), w.data(), d_out.data(), d_in.data(), d_w.data(), d_b.data());
    }
    benchmark::DoNotOptimize(d_w.data());
  }
}

// ROI head fc: 16 images x 64 proposals, 512 crop features -> 128 hidden.
template <bool Reference>
void BM_Linear(benchmark::State& state) {
  constexpr int batch = 1024, in = 512, out = 128;
  const auto x = random_vector(static_cast<std::size_t>(batch) * in, 7);
  const auto w = random_vector(static_cast<std::size_t>(out) * in, 8);
  const auto b = random_vector(out, 9);
  std::vector<float> y(static_cast<std::size_t>(batch) * out);
  for (auto _ : state) {
    if constexpr (Reference) {
      k::reference::linear_forward(batch, in, out, x.data(), w.data(), b.data(), y.data());
    } else {
      k::linear_forward(batch, in, out, x.data(), w.data(), b.data(), y.data());
    }
    benchmark::DoNotOptimize(y.data());
  }
}

}  // namespace

BENCHMARK(BM_Gemm<false>)->Name("gemm/openmp")->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_Gemm<true>)->Name("gemm/reference")->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_ConvForward<false>)->Name("conv_forward/openmp")->DenseRange(0, 2)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_ConvForward<true>)->Name("conv_forward/reference")->DenseRange(0, 2)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_ConvBackward<false>)->Name("conv_backward/openmp")->DenseRange(0, 2)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_ConvBackward<true>)->Name("conv_backward/reference")->DenseRange(0, 2)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_Linear<false>)->Name("linear_forward/openmp")->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_Linear<true>)->Name("linear_forward/reference")->Unit(benchmark::kMicrosecond);

BENCHMARK_MAIN();
