#include <benchmark/benchmark.h>

#include "dilink/kernels.hpp"
#include "dilink/node2vec.hpp"
#include "dilink/rng.hpp"

using namespace dilink;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({r, c});
  for (auto& v : t.data()) v = rng.uniform(-1.0, 1.0);
  return t;
}

template <bool Parallel>
void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
  for (auto _ : state) {
    Tensor c = Parallel ? kernels::matmul(a, b) : kernels::reference::matmul(a, b);
    benchmark::DoNotOptimize(c.data().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}

template <bool Parallel>
void BM_PairDistances(benchmark::State& state) {
  const auto pairs_n = static_cast<std::size_t>(state.range(0));
  const Tensor rows = random_matrix(2000, 32, 3);
  Rng rng(4);
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t k = 0; k < pairs_n; ++k) pairs.emplace_back(rng.below(2000), rng.below(2000));
  for (auto _ : state) {
    auto d = Parallel ? kernels::pair_distances(rows, pairs) : kernels::reference::pair_distances(rows, pairs);
    benchmark::DoNotOptimize(d.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(pairs_n));
}

template <bool Parallel>
void BM_Walks(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  node2vec::Adjacency adj(n);
  Rng rng(5);
  for (std::size_t i = 1; i < n; ++i)
    for (int k = 0; k < 2; ++k) {
      const auto j = rng.below(i);
      adj[i].push_back(j);
      adj[j].push_back(i);
    }
  for (auto& a : adj) {
    std::sort(a.begin(), a.end());
    a.erase(std::unique(a.begin(), a.end()), a.end());
  }
  node2vec::WalkConfig cfg;
  cfg.walks_per_node = 20;
  for (auto _ : state) {
    auto w = Parallel ? node2vec::generate_walks(adj, cfg, 7) : node2vec::reference::generate_walks(adj, cfg, 7);
    benchmark::DoNotOptimize(w.data());
  }
}

}  // namespace

BENCHMARK(BM_Matmul<false>)->Name("matmul/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_Matmul<true>)->Name("matmul/parallel")->Arg(64)->Arg(256);
BENCHMARK(BM_PairDistances<false>)->Name("pair_distances/serial")->Arg(10000)->Arg(100000);
BENCHMARK(BM_PairDistances<true>)->Name("pair_distances/parallel")->Arg(10000)->Arg(100000);
BENCHMARK(BM_Walks<false>)->Name("node2vec_walks/serial")->Arg(100)->Arg(1000);
BENCHMARK(BM_Walks<true>)->Name("node2vec_walks/parallel")->Arg(100)->Arg(1000);

BENCHMARK_MAIN();
