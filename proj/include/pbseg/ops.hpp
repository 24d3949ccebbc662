#pragma once

// Differentiable tensor operations. Every op runs a plain forward pass and,
// when a Tape is active and some input requires grad, records one backward
// step that accumulates exact adjoints into its inputs.
//
// Broadcasting (add/sub/mul/div): shapes are right-aligned; a singleton axis
// stretches to match, missing leading axes are treated as singletons.

#include <cstdint>
#include <utility>
#include <vector>

#include "pbseg/tensor.hpp"

namespace pbseg {

// ---- linear algebra ----

// 2-D product [m x k] [k x n] -> [m x n]
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor transpose2d(const Tensor& a);

// ---- element-wise with broadcasting ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, double s);
Tensor sub(const Tensor& a, double s);
Tensor mul(const Tensor& a, double s);

// ---- reductions / selection ----

struct ArgmaxResult {
  Tensor values;                     // shape = input shape with `axis` removed; constant
  std::vector<std::size_t> indices;  // first maximum on ties
};

// non-differentiable: values and indices are constants of the recorded graph
ArgmaxResult reduce_argmax(const Tensor& t, std::size_t axis);

Tensor reduce_sum(const Tensor& t);   // scalar
Tensor reduce_mean(const Tensor& t);  // scalar

// rows of a 2-D tensor by index; gradient scatters back into the source rows
Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& rows);

// ---- shape plumbing (free of FLOPs, gradients are index moves) ----

Tensor reshape(const Tensor& t, Shape shape);
Tensor slice_cols(const Tensor& t, std::size_t start, std::size_t len);      // 2-D
Tensor concat_cols(const std::vector<Tensor>& parts);                        // 2-D
Tensor slice_outer(const Tensor& t, std::size_t start, std::size_t len);     // axis 0

// ---- normalization / activations ----

// each slice along `axis` divided by max(||slice||_2, eps)
Tensor l2_normalize(const Tensor& t, std::size_t axis, double eps = 1e-6);

Tensor sigmoid(const Tensor& t);
Tensor relu(const Tensor& t);
// shifted by the per-slice max before exponentiation
Tensor softmax(const Tensor& t, std::size_t axis);

// row-wise standardization of a 2-D tensor: (x - mean) / sqrt(var + eps)
Tensor layer_norm_rows(const Tensor& t, double eps = 1e-5);

// ---- spatial ----

// input [C_in x H x W], weights [C_out x C_in x k x k], k in {1,3},
// stride in {1,2}, zero padding (k-1)/2; bias may be empty (numel 0 tensor
// is not representable, pass has_bias=false via the overload without bias)
Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias, std::size_t stride);
Tensor conv2d(const Tensor& input, const Tensor& weights, std::size_t stride);

// map [C x H x W], points [P x 2] as continuous (y, x) -> [C x P].
// Zero-padding semantics: corners outside the map contribute zero, so points
// fully outside [-1,H]x[-1,W] sample to zero. Differentiable in map values
// and point coordinates (one-sided at integer lattice lines).
Tensor bilinear_sample(const Tensor& map, const Tensor& points);

// [C x H x W] -> [C x 2H x 2W], half-pixel centers, edges clamped
Tensor upsample_bilinear_2x(const Tensor& map);

// [C x H x W] -> [C x 1 x 1] per-channel mean
Tensor global_avg_pool(const Tensor& map);

// ---- losses (fused for numerical stability) ----

// element-wise max(x,0) - x*g + log1p(exp(-|x|)); targets are constants
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

// weighted mean over rows of -log softmax(logits_row)[label]:
//   sum_i w_i * (logsumexp_i - x_i[label_i]) / sum_i w_i
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<std::size_t>& labels,
                          const std::vector<double>& row_weights);

// ---- non-differentiable helpers ----

// value-level bilinear resize of [C x H x W] (same sampling convention as
// upsample_bilinear_2x); used where the result feeds thresholding
Tensor bilinear_resize_values(const Tensor& map, std::size_t out_h, std::size_t out_w);

// populates .grad of every requires_grad tensor reachable on the active tape
void backward(Tape& tape, const Tensor& loss);

}  // namespace pbseg
