#pragma once

// Per-operation FLOP cost formulas. These are the single source of truth:
// the runtime instrument (ops charge these amounts while executing) and the
// analytic cost model in flops.hpp both call into this table, so "analytic
// equals instrumented" is a real check of the analytic model's op inventory,
// not of the formulas themselves.
//
// Convention: one multiply-accumulate = 2 FLOPs; element-wise arithmetic,
// activations, comparisons and normalization passes = 1 FLOP per element
// per pass. Index moves (gather, reshape, transpose, concat, slice) are free.

#include <cstdint>

namespace pbseg::flop_cost {

using u64 = std::uint64_t;

// C[m x n] = A[m x k] B[k x n]
inline u64 matmul(u64 m, u64 k, u64 n) { return 2 * m * k * n; }

// add / sub / mul / div, one pass over the output
inline u64 elemwise(u64 out_numel) { return out_numel; }

inline u64 sigmoid(u64 numel) { return numel; }
inline u64 relu(u64 numel) { return numel; }

// max-scan, subtract, exp, sum, divide: five passes
inline u64 softmax(u64 numel) { return 5 * numel; }

// squared-norm accumulation (2 per element) + divide, plus sqrt and floor
// clamp per slice
inline u64 l2_normalize(u64 numel, u64 slices) { return 3 * numel + 2 * slices; }

// one compare per scanned element
inline u64 argmax(u64 numel) { return numel; }

// mean: sum pass + one divide per slice
inline u64 global_avg_pool(u64 numel, u64 channels) { return numel + channels; }

inline u64 conv2d(u64 c_out, u64 h_out, u64 w_out, u64 c_in, u64 k, bool bias) {
  u64 out = c_out * h_out * w_out;
  return 2 * out * c_in * k * k + (bias ? out : 0);
}

// per output element: 4 corner MACs; per point: fractional weight setup
inline u64 bilinear_sample(u64 channels, u64 points) { return 8 * channels * points + 6 * points; }

inline u64 upsample_bilinear_2x(u64 out_numel) { return 8 * out_numel; }

// mean, center, squared-sum (2), scale: five passes + sqrt per row
inline u64 layer_norm(u64 numel, u64 rows) { return 5 * numel + rows; }

// stable x,g -> max(x,0) - x*g + log1p(exp(-|x|)): five passes
inline u64 bce_with_logits(u64 numel) { return 5 * numel; }

// per row: max-scan, shift+exp, sum, log, pick + weighting
inline u64 cross_entropy(u64 rows, u64 cols) { return 4 * rows * cols + 4 * rows; }

}  // namespace pbseg::flop_cost
