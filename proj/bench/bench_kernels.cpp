// OpenMP kernels against the serial reference versions kept for testing,
// plus the transforms that dominate a training step.
#include <benchmark/benchmark.h>
#include <omp.h>

#include <vector>

#include "shno/kernels.hpp"
#include "shno/rng.hpp"
#include "shno/sht.hpp"

namespace {

using namespace shno;

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

// Typical shapes: pointwise MLPs over a 32x64 grid, and attention-sized products.
template <bool Reference>
void BM_gemm(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0)), k = static_cast<std::size_t>(st.range(1)),
             m = static_cast<std::size_t>(st.range(2));
  const auto a = random_vec(n * k, 1), b = random_vec(k * m, 2);
  std::vector<double> c(n * m);
  for (auto _ : st) {
    if constexpr (Reference)
      kernels::reference::gemm(a, false, b, false, c, n, k, m);
    else
      kernels::gemm(a, false, b, false, c, n, k, m);
    benchmark::DoNotOptimize(c.data());
  }
  st.SetItemsProcessed(static_cast<std::int64_t>(st.iterations() * n * k * m));
}
BENCHMARK(BM_gemm<false>)->Name("gemm/omp")->Args({2048, 64, 64})->Args({2048, 64, 256})->Args({256, 256, 256});
BENCHMARK(BM_gemm<true>)->Name("gemm/reference")->Args({2048, 64, 64})->Args({2048, 64, 256})->Args({256, 256, 256});

template <bool Reference>
void BM_box_average(benchmark::State& st) {
  const std::size_t nlat = 32, nlon = 64, ch = 256, w = static_cast<std::size_t>(st.range(0));
  const auto in = random_vec(nlat * nlon * ch, 3);
  std::vector<double> out(in.size());
  for (auto _ : st) {
    if constexpr (Reference)
      kernels::reference::box_average(in, out, nlat, nlon, ch, w);
    else
      kernels::box_average(in, out, nlat, nlon, ch, w);
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK(BM_box_average<false>)->Name("box_average/omp")->Arg(3)->Arg(5);
BENCHMARK(BM_box_average<true>)->Name("box_average/reference")->Arg(3)->Arg(5);

void BM_sht_roundtrip(benchmark::State& st) {
  const auto nlat = static_cast<std::size_t>(st.range(0));
  const sht::SphericalGrid grid(nlat, 2 * nlat);
  const sht::ShtPlan plan(grid, sht::Truncation::triangular(static_cast<int>(nlat) - 1));
  const std::size_t channels = 3;
  const auto v = random_vec(channels * grid.size(), 4);
  const sht::GridField f = sht::from_channel_last(v, channels, nlat, 2 * nlat);
  for (auto _ : st) {
    const sht::GridField g = sht::sht_inverse(plan, sht::sht_forward(plan, f));
    benchmark::DoNotOptimize(g.values.data());
  }
}
BENCHMARK(BM_sht_roundtrip)->Name("sht/roundtrip")->Arg(32)->Arg(64);

}  // namespace

int main(int argc, char** argv) {
  benchmark::Initialize(&argc, argv);
  benchmark::AddCustomContext("omp_max_threads", std::to_string(omp_get_max_threads()));
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
