#pragma once

// Convolutional pixel decoder: per-scale projection to a common width,
// channel reweighting from a pooled global descriptor (context-aware
// modulation), and a top-down pyramid where each level is fused through a
// deformable 3x3 convolution. The finest level skips the deformable conv
// and is a plain sum, preserving high-frequency detail.

#include <array>
#include <cstdint>

#include "pbseg/decisions.hpp"
#include "pbseg/ops.hpp"
#include "pbseg/tensor.hpp"

namespace pbseg {

// two 1x1 convolutions with a ReLU between; hidden width D/4
struct CamParams {
  Tensor w1, b1;  // D/4 x D x 1 x 1, D/4
  Tensor w2, b2;  // D x D/4 x 1 x 1, D
};

// E^c = E' * sigmoid(MLP(Pool(E'))) + E', one gate value per channel
Tensor context_modulate(const Tensor& e_proj, const CamParams& params);

// 3x3 deformable convolution, stride 1, pad 1, offsets only (no per-sample
// modulation scalars). The offset predictor is a standard 3x3 conv emitting
// 2 channels per kernel tap, (dy, dx) interleaved, and is initialized to
// exact zeros so a fresh layer reproduces the standard convolution.
struct DeformConvParams {
  Tensor offset_w;  // 18 x D x 3 x 3
  Tensor offset_b;  // 18
  Tensor kernel;    // D x D x 3 x 3
  Tensor bias;      // D
};

Tensor deform_conv(const Tensor& input, const DeformConvParams& params, DecisionTrace* trace = nullptr);

struct PyramidScaleParams {
  Tensor proj_w, proj_b;  // 1x1 projection d_s -> D
  CamParams cam;
  DeformConvParams dconv;  // unused at the finest scale
};

struct PixelDecoderParams {
  std::array<PyramidScaleParams, 4> scales;  // index s-1 for s in 1..4
  Tensor pool_proj_w, pool_proj_b;           // 1x1 map d_4 -> D for the pooled context of the coarsest level
  bool use_cam = true;
  bool use_dconv = true;
};

struct FeaturePyramid {
  std::array<Tensor, 4> projected;  // E'_s
  std::array<Tensor, 4> modulated;  // E^c_s
  std::array<Tensor, 4> levels;     // R_s, all D x h_s x w_s
};

// backbone[s-1] = E_s with spatial size (H/4, H/8, H/16, H/32).
// R_4 = DConv(E^c_4 + Proj(Pool(E_4)))
// R_s = DConv(E^c_s + Upsample2x(R_{s+1}))  for s in {3, 2}
// R_1 = E^c_1 + Upsample2x(R_2)
FeaturePyramid build_pyramid(const std::array<Tensor, 4>& backbone, const PixelDecoderParams& params,
                             DecisionTrace* trace = nullptr);

}  // namespace pbseg
