#pragma once

// Cost benchmark of the two cross-attention mechanisms over a grid of
// (S, L, d) points: analytic per-stage FLOPs, an instrumented forward pass
// that recounts them at the tensor-op level, and wall-clock medians over
// repeated forward passes on random data.

#include <cstdint>
#include <string>
#include <vector>

#include "pbseg/config.hpp"
#include "pbseg/flops.hpp"

namespace pbseg {

struct BenchMechanism {
  StageFlops analytic;
  std::uint64_t measured_flops = 0;
  double median_ms = 0.0, p10_ms = 0.0, p90_ms = 0.0;
};

struct BenchPoint {
  std::size_t spatial = 0;  // S
  std::size_t queries = 0;  // L
  std::size_t dim = 0;      // d = D
  std::size_t heads = 0;
  BenchMechanism pbca;
  BenchMechanism standard;
};

std::vector<BenchPoint> run_bench(const RunConfig& cfg, bool measure_latency = true);

std::string bench_flops_json(const std::vector<BenchPoint>& points);
std::string bench_latency_csv(const std::vector<BenchPoint>& points);

}  // namespace pbseg
