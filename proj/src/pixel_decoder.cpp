#include "pbseg/pixel_decoder.hpp"

#include <cmath>

namespace pbseg {

namespace {

// differentiable extraction of the (ky, kx) tap of a 4-D kernel as a
// C_out x C_in matrix
Tensor kernel_tap(const Tensor& kernel, std::size_t ky, std::size_t kx) {
  const std::size_t co = kernel.extent(0), ci = kernel.extent(1), k = kernel.extent(2);
  Tensor out(Shape{co, ci});
  const double* p = kernel.data();
  double* po = out.data();
  for (std::size_t a = 0; a < co; ++a)
    for (std::size_t b = 0; b < ci; ++b) po[a * ci + b] = p[((a * ci + b) * k + ky) * k + kx];

  out.set_requires_grad(kernel.requires_grad());
  if (kernel.requires_grad() && Tape::active()) {
    auto kn = kernel.node(), on = out.node();
    Tape::active()->record([kn, on, co, ci, k, ky, kx](BackwardContext& ctx) {
      const double* d = ctx.read(on.get());
      if (!d) return;
      double* g = ctx.accum(kn.get());
      for (std::size_t a = 0; a < co; ++a)
        for (std::size_t b = 0; b < ci; ++b) g[((a * ci + b) * k + ky) * k + kx] += d[a * ci + b];
    });
  }
  return out;
}

}  // namespace

Tensor context_modulate(const Tensor& e_proj, const CamParams& params) {
  const Tensor pooled = global_avg_pool(e_proj);                     // D x 1 x 1
  const Tensor hidden = relu(conv2d(pooled, params.w1, params.b1, 1));
  const Tensor gamma = conv2d(hidden, params.w2, params.b2, 1);      // D x 1 x 1
  return add(mul(e_proj, sigmoid(gamma)), e_proj);
}

Tensor deform_conv(const Tensor& input, const DeformConvParams& params, DecisionTrace* trace) {
  if (input.rank() != 3) throw std::invalid_argument("deform_conv: expected D x h x w, got " + shape_str(input.shape()));
  if (params.kernel.extent(1) != input.extent(0)) {
    throw std::invalid_argument("deform_conv: kernel " + shape_str(params.kernel.shape()) + " vs input " +
                                shape_str(input.shape()));
  }
  const std::size_t h = input.extent(1), w = input.extent(2);
  const std::size_t s = h * w;
  const std::size_t c_out = params.kernel.extent(0);

  const Tensor offsets = conv2d(input, params.offset_w, params.offset_b, 1);  // 18 x h x w
  const Tensor off_flat = reshape(offsets, Shape{18, s});

  // base sampling grid, one row per output pixel
  Tensor grid_y(Shape{s, 1}), grid_x(Shape{s, 1});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      grid_y.data()[y * w + x] = static_cast<double>(y);
      grid_x.data()[y * w + x] = static_cast<double>(x);
    }

  Tensor acc;  // C_out x S
  for (std::size_t tap = 0; tap < 9; ++tap) {
    const double dy = static_cast<double>(tap / 3) - 1.0;
    const double dx = static_cast<double>(tap % 3) - 1.0;
    const Tensor off_y = reshape(slice_outer(off_flat, 2 * tap, 1), Shape{s, 1});
    const Tensor off_x = reshape(slice_outer(off_flat, 2 * tap + 1, 1), Shape{s, 1});
    const Tensor py = add(add(off_y, grid_y), dy);
    const Tensor px = add(add(off_x, grid_x), dx);
    if (trace) {
      for (std::size_t i = 0; i < s; ++i) {
        for (double c : {py.data()[i], px.data()[i]}) {
          const double frac = c - std::floor(c);
          trace->note_margin(std::min(frac, 1.0 - frac));
        }
      }
    }
    const Tensor sampled = bilinear_sample(input, concat_cols({py, px}));  // C_in x S
    const Tensor contrib = matmul(kernel_tap(params.kernel, tap / 3, tap % 3), sampled);
    acc = (tap == 0) ? contrib : add(acc, contrib);
  }
  const Tensor biased = add(acc, reshape(params.bias, Shape{c_out, 1}));
  return reshape(biased, Shape{c_out, h, w});
}

FeaturePyramid build_pyramid(const std::array<Tensor, 4>& backbone, const PixelDecoderParams& params,
                             DecisionTrace* trace) {
  FeaturePyramid pyr;
  for (std::size_t i = 0; i < 4; ++i) {
    pyr.projected[i] = conv2d(backbone[i], params.scales[i].proj_w, params.scales[i].proj_b, 1);
    pyr.modulated[i] =
        params.use_cam ? context_modulate(pyr.projected[i], params.scales[i].cam) : pyr.projected[i];
  }
  auto fuse = [&](const Tensor& x, const PyramidScaleParams& sp) {
    return params.use_dconv ? deform_conv(x, sp.dconv, trace) : conv2d(x, sp.dconv.kernel, sp.dconv.bias, 1);
  };

  // coarsest level: pooled scene context, projected and broadcast
  const Tensor ctx = conv2d(global_avg_pool(backbone[3]), params.pool_proj_w, params.pool_proj_b, 1);  // D x 1 x 1
  pyr.levels[3] = fuse(add(pyr.modulated[3], ctx), params.scales[3]);

  for (std::size_t s = 3; s >= 2; --s) {
    const Tensor up = upsample_bilinear_2x(pyr.levels[s]);
    if (up.shape() != pyr.modulated[s - 1].shape()) {
      throw std::invalid_argument("build_pyramid: upsampled level " + shape_str(up.shape()) +
                                  " does not match scale " + std::to_string(s) + " features " +
                                  shape_str(pyr.modulated[s - 1].shape()));
    }
    pyr.levels[s - 1] = fuse(add(pyr.modulated[s - 1], up), params.scales[s - 1]);
  }
  const Tensor up1 = upsample_bilinear_2x(pyr.levels[1]);
  if (up1.shape() != pyr.modulated[0].shape()) {
    throw std::invalid_argument("build_pyramid: upsampled level " + shape_str(up1.shape()) +
                                " does not match finest features " + shape_str(pyr.modulated[0].shape()));
  }
  pyr.levels[0] = add(pyr.modulated[0], up1);
  return pyr;
}

}  // namespace pbseg
