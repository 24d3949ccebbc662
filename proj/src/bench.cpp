#include "pbseg/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include <json.hpp>

#include "pbseg/attention.hpp"

namespace pbseg {

namespace {

PbcaParams random_params(std::size_t d, std::size_t big_d, std::size_t heads, std::mt19937_64& rng) {
  PbcaParams p;
  p.heads = heads;
  const std::size_t dh = d / heads;
  const double sd = 1.0 / std::sqrt(static_cast<double>(big_d));
  p.key_proj = {Tensor::randn(Shape{big_d, d}, rng, sd), Tensor::randn(Shape{d}, rng, 0.02)};
  p.query_proj = {Tensor::randn(Shape{big_d, d}, rng, sd), Tensor::randn(Shape{d}, rng, 0.02)};
  p.value_proj = {Tensor::randn(Shape{big_d, d}, rng, sd), Tensor::randn(Shape{d}, rng, 0.02)};
  for (std::size_t h = 0; h < heads; ++h) {
    p.w1.push_back(Tensor::randn(Shape{dh, dh}, rng, 1.0 / std::sqrt(static_cast<double>(dh))));
    p.beta.push_back(Tensor::randn(Shape{dh}, rng, 0.1));
  }
  p.w2 = Tensor::randn(Shape{d, big_d}, rng, 1.0 / std::sqrt(static_cast<double>(d)));
  return p;
}

AttentionMask random_mask(std::size_t l, std::size_t s, std::mt19937_64& rng) {
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  Tensor values(Shape{l, s}, kNegInf);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pos(0, s - 1);
  for (std::size_t q = 0; q < l; ++q) {
    bool open = false;
    for (std::size_t i = 0; i < s; ++i) {
      if (coin(rng) < 0.25) {
        values.data()[q * s + i] = 0.0;
        open = true;
      }
    }
    if (!open) values.data()[q * s + pos(rng)] = 0.0;
  }
  return AttentionMask{values};
}

struct LatencyStats {
  double median = 0.0, p10 = 0.0, p90 = 0.0;
};

LatencyStats summarize(std::vector<double> ms) {
  std::sort(ms.begin(), ms.end());
  auto rank = [&](double q) {
    const std::size_t i = static_cast<std::size_t>(std::llround(q * static_cast<double>(ms.size() - 1)));
    return ms[i];
  };
  return {rank(0.5), rank(0.1), rank(0.9)};
}

}  // namespace

std::vector<BenchPoint> run_bench(const RunConfig& cfg, bool measure_latency) {
  std::vector<BenchPoint> points;
  std::size_t point_index = 0;
  for (std::size_t s : cfg.bench_sizes) {
    for (std::size_t l : cfg.bench_queries) {
      for (std::size_t d : cfg.bench_dims) {
        if (d % cfg.bench_heads != 0) {
          throw std::invalid_argument("bench: dim " + std::to_string(d) + " not divisible by bench.heads " +
                                      std::to_string(cfg.bench_heads));
        }
        BenchPoint pt;
        pt.spatial = s;
        pt.queries = l;
        pt.dim = d;
        pt.heads = cfg.bench_heads;
        pt.pbca.analytic = pbca_layer_flops(s, l, d, d, cfg.bench_heads);
        pt.standard.analytic = standard_layer_flops(s, l, d, d, cfg.bench_heads);

        std::mt19937_64 rng(cfg.seed + 7919 * point_index++);
        const PbcaParams params = random_params(d, d, cfg.bench_heads, rng);
        const Tensor r_s = Tensor::randn(Shape{d, s, 1}, rng, 1.0);
        const Tensor o_in = Tensor::randn(Shape{l, d}, rng, 1.0);
        const AttentionMask mask = random_mask(l, s, rng);

        {
          FlopCounter counter;
          pbca_forward(o_in, r_s, mask, params);
          pt.pbca.measured_flops = counter.count();
          counter.reset();
          standard_masked_cross_attention(o_in, r_s, mask, params);
          pt.standard.measured_flops = counter.count();
        }

        if (measure_latency) {
          auto time_forward = [&](auto&& fn) {
            for (std::size_t i = 0; i + 1 < cfg.bench_warmups; ++i) fn();  // one warmup ran instrumented
            std::vector<double> ms;
            ms.reserve(cfg.bench_repeats);
            for (std::size_t i = 0; i < cfg.bench_repeats; ++i) {
              const auto t0 = std::chrono::steady_clock::now();
              fn();
              const auto t1 = std::chrono::steady_clock::now();
              ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
            }
            return summarize(std::move(ms));
          };
          const LatencyStats sp = time_forward([&] { pbca_forward(o_in, r_s, mask, params); });
          pt.pbca.median_ms = sp.median;
          pt.pbca.p10_ms = sp.p10;
          pt.pbca.p90_ms = sp.p90;
          const LatencyStats ss = time_forward([&] { standard_masked_cross_attention(o_in, r_s, mask, params); });
          pt.standard.median_ms = ss.median;
          pt.standard.p10_ms = ss.p10;
          pt.standard.p90_ms = ss.p90;
        }
        points.push_back(pt);
      }
    }
  }
  return points;
}

std::string bench_flops_json(const std::vector<BenchPoint>& points) {
  nlohmann::json j;
  j["convention"] = {
      {"multiply_accumulate_flops", 2},
      {"elementwise_flops_per_element_per_pass", 1},
      {"ops",
       {{"matmul(m,k,n)", "2*m*k*n"},
        {"elemwise(n)", "n"},
        {"softmax(n)", "5*n  (max, shift, exp, sum, divide)"},
        {"l2_normalize(n,slices)", "3*n + 2*slices"},
        {"argmax(n)", "n"},
        {"bias_add(n)", "n"}}},
      {"stages",
       {{"projection", "input projections, output projection, residual"},
        {"affinity", "spatial-by-query score product"},
        {"selection", "prototype: mask add + argmax; standard: scale + mask + softmax"},
        {"interaction", "prototype: element-wise refinement; standard: weighted value sum"}}},
  };
  auto stage_json = [](const BenchMechanism& m) {
    return nlohmann::json{{"projection", m.analytic.projection}, {"affinity", m.analytic.affinity},
                          {"selection", m.analytic.selection},   {"interaction", m.analytic.interaction},
                          {"total", m.analytic.total()},         {"measured", m.measured_flops}};
  };
  j["points"] = nlohmann::json::array();
  for (const BenchPoint& pt : points) {
    nlohmann::json p;
    p["S"] = pt.spatial;
    p["L"] = pt.queries;
    p["d"] = pt.dim;
    p["heads"] = pt.heads;
    p["pbca"] = stage_json(pt.pbca);
    p["standard"] = stage_json(pt.standard);
    p["ratio"] = static_cast<double>(pt.pbca.analytic.total()) / static_cast<double>(pt.standard.analytic.total());
    j["points"].push_back(p);
  }
  return j.dump(2);
}

std::string bench_latency_csv(const std::vector<BenchPoint>& points) {
  std::ostringstream os;
  os << "S,L,d,mechanism,median_ms,p10_ms,p90_ms\n";
  for (const BenchPoint& pt : points) {
    os << pt.spatial << "," << pt.queries << "," << pt.dim << ",pbca," << pt.pbca.median_ms << "," << pt.pbca.p10_ms
       << "," << pt.pbca.p90_ms << "\n";
    os << pt.spatial << "," << pt.queries << "," << pt.dim << ",standard," << pt.standard.median_ms << ","
       << pt.standard.p10_ms << "," << pt.standard.p90_ms << "\n";
  }
  return os.str();
}

}  // namespace pbseg
