#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "pbseg/gradcheck.hpp"
#include "pbseg/pixel_decoder.hpp"

using namespace pbseg;

namespace {

CamParams random_cam(std::size_t d, std::mt19937_64& rng) {
  const std::size_t dr = d / 4;
  return {Tensor::randn({dr, d, 1, 1}, rng, 0.5), Tensor::randn({dr}, rng, 0.1),
          Tensor::randn({d, dr, 1, 1}, rng, 0.5), Tensor::randn({d}, rng, 0.1)};
}

DeformConvParams random_dconv(std::size_t d, std::mt19937_64& rng, double offset_scale) {
  DeformConvParams p;
  p.offset_w = Tensor::randn(Shape{18, d, 3, 3}, rng, offset_scale);
  p.offset_b = Tensor::randn(Shape{18}, rng, offset_scale);
  p.kernel = Tensor::randn(Shape{d, d, 3, 3}, rng, 0.3);
  p.bias = Tensor::randn(Shape{d}, rng, 0.1);
  return p;
}

DeformConvParams zero_offset_dconv(std::size_t d, std::mt19937_64& rng) {
  DeformConvParams p = random_dconv(d, rng, 0.0);
  p.offset_w = Tensor::zeros(Shape{18, d, 3, 3});
  p.offset_b = Tensor::zeros(Shape{18});
  return p;
}

PixelDecoderParams random_pixel_params(const std::array<std::size_t, 4>& in_ch, std::size_t d,
                                       std::mt19937_64& rng) {
  PixelDecoderParams p;
  for (std::size_t s = 0; s < 4; ++s) {
    p.scales[s].proj_w = Tensor::randn(Shape{d, in_ch[s], 1, 1}, rng, 0.4);
    p.scales[s].proj_b = Tensor::randn(Shape{d}, rng, 0.1);
    p.scales[s].cam = random_cam(d, rng);
    if (s >= 1) p.scales[s].dconv = zero_offset_dconv(d, rng);
  }
  p.pool_proj_w = Tensor::randn(Shape{d, in_ch[3], 1, 1}, rng, 0.4);
  p.pool_proj_b = Tensor::randn(Shape{d}, rng, 0.1);
  return p;
}

}  // namespace

TEST_CASE("context_modulate zero map, zero MLP, and per-channel gate ratio") {
  std::mt19937_64 rng(41);
  const std::size_t d = 8;
  CamParams cam = random_cam(d, rng);

  const Tensor zero_map = Tensor::zeros(Shape{d, 3, 3});
  CamParams cam_zero_bias = cam;
  cam_zero_bias.b1 = Tensor::zeros(Shape{d / 4});
  cam_zero_bias.b2 = Tensor::zeros(Shape{d});
  const Tensor out_zero = context_modulate(zero_map, cam_zero_bias);
  for (double v : out_zero.values()) CHECK(v == 0.0);

  // zero MLP weights: gamma = 0, sigmoid = 0.5, so E^c = 1.5 E'
  CamParams cam_z{Tensor::zeros(Shape{d / 4, d, 1, 1}), Tensor::zeros(Shape{d / 4}),
                  Tensor::zeros(Shape{d, d / 4, 1, 1}), Tensor::zeros(Shape{d})};
  const Tensor e = Tensor::randn(Shape{d, 4, 4}, rng);
  const Tensor out15 = context_modulate(e, cam_z);
  for (std::size_t i = 0; i < e.numel(); ++i) CHECK(out15.data()[i] == doctest::Approx(1.5 * e.data()[i]));

  // general case: the pixel-wise ratio is constant per channel, 1 + sigmoid(gamma_c)
  const Tensor e2 = Tensor::uniform(Shape{d, 4, 4}, rng, 0.5, 2.0);
  const Tensor out = context_modulate(e2, cam);
  const Tensor gamma = conv2d(relu(conv2d(global_avg_pool(e2), cam.w1, cam.b1, 1)), cam.w2, cam.b2, 1);
  for (std::size_t c = 0; c < d; ++c) {
    const double expect = 1.0 + 1.0 / (1.0 + std::exp(-gamma.data()[c]));
    for (std::size_t i = 0; i < 16; ++i) {
      const double ratio = out.data()[c * 16 + i] / e2.data()[c * 16 + i];
      CHECK(ratio == doctest::Approx(expect).epsilon(1e-10));
    }
  }
}

TEST_CASE("deform_conv with zero offsets equals the standard convolution") {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t d = 1 + rng() % 5;
    const std::size_t h = 2 + rng() % 5, w = 2 + rng() % 5;
    DeformConvParams p = zero_offset_dconv(d, rng);
    const Tensor input = Tensor::randn(Shape{d, h, w}, rng);
    const Tensor got = deform_conv(input, p);
    const Tensor want = conv2d(input, p.kernel, p.bias, 1);
    CHECK(got.shape() == want.shape());
    for (std::size_t i = 0; i < want.numel(); ++i) CHECK(std::abs(got.data()[i] - want.data()[i]) < 1e-12);
  }
}

TEST_CASE("deform_conv with zero kernel outputs the bias") {
  std::mt19937_64 rng(43);
  DeformConvParams p = random_dconv(3, rng, 0.1);
  p.kernel = Tensor::zeros(Shape{3, 3, 3, 3});
  const Tensor input = Tensor::randn(Shape{3, 4, 5}, rng);
  const Tensor out = deform_conv(input, p);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 20; ++i) CHECK(out.data()[c * 20 + i] == doctest::Approx(p.bias.data()[c]));
}

TEST_CASE("deform_conv constant (+1,0) offset equals conv of the shifted input") {
  std::mt19937_64 rng(44);
  const std::size_t d = 2, h = 8, w = 8;
  DeformConvParams p = zero_offset_dconv(d, rng);
  // inject dy = +1, dx = 0 on every tap
  for (std::size_t tap = 0; tap < 9; ++tap) p.offset_b.data()[2 * tap] = 1.0;

  const Tensor input = Tensor::randn(Shape{d, h, w}, rng);
  const Tensor got = deform_conv(input, p);

  Tensor shifted(Shape{d, h, w});
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t y = 0; y + 1 < h; ++y)
      for (std::size_t x = 0; x < w; ++x) shifted(c, y, x) = input(c, y + 1, x);
  const Tensor want = conv2d(shifted, p.kernel, p.bias, 1);

  // interior rows only: the shifted copy is invalid at the bottom border
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t y = 1; y + 2 < h; ++y)
      for (std::size_t x = 1; x + 1 < w; ++x)
        CHECK(got(c, y, x) == doctest::Approx(want(c, y, x)).epsilon(1e-12));
}

TEST_CASE("deform_conv gradients match finite differences") {
  for (std::uint64_t seed = 45;; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t d = 2;
    DeformConvParams p = random_dconv(d, rng, 0.08);
    Tensor input = Tensor::randn(Shape{d, 5, 5}, rng).set_requires_grad(true);
    std::vector<Tensor> tensors{input};
    for (Tensor* t : {&p.offset_w, &p.offset_b, &p.kernel, &p.bias}) {
      t->set_requires_grad(true);
      tensors.push_back(*t);
    }
    GradCheckSpec spec;
    spec.tensors = tensors;
    spec.track_decisions = true;
    spec.probes_per_tensor = 5;
    spec.seed = seed;
    spec.forward = [&](DecisionTrace* trace) {
      const Tensor out = deform_conv(input, p, trace);
      std::mt19937_64 wrng(77);
      return reduce_sum(mul(out, Tensor::uniform(out.shape(), wrng, -1.0, 1.0)));
    };
    const auto res = finite_diff_check(spec);
    if (res.min_margin < 1e-3) continue;  // sampling too close to the lattice
    CHECK(res.max_rel_err < 1e-4);
    break;
  }
}

TEST_CASE("build_pyramid shapes follow the stride chain and zero maps to zero") {
  std::mt19937_64 rng(46);
  const std::array<std::size_t, 4> ch{4, 6, 8, 10};
  const std::size_t d = 8;
  PixelDecoderParams params = random_pixel_params(ch, d, rng);

  std::array<Tensor, 4> feats;
  for (std::size_t s = 0; s < 4; ++s) {
    const std::size_t side = 16 >> s;  // 64x64 input: 16, 8, 4, 2
    feats[s] = Tensor::randn(Shape{ch[s], side, side}, rng);
  }
  const FeaturePyramid pyr = build_pyramid(feats, params);
  for (std::size_t s = 0; s < 4; ++s) {
    CHECK(pyr.levels[s].shape() == Shape{d, std::size_t(16) >> s, std::size_t(16) >> s});
  }

  // zero features and zero biases flow to zero through every path
  PixelDecoderParams zp = params;
  for (std::size_t s = 0; s < 4; ++s) {
    zp.scales[s].proj_b = Tensor::zeros(Shape{d});
    zp.scales[s].cam.b1 = Tensor::zeros(Shape{d / 4});
    zp.scales[s].cam.b2 = Tensor::zeros(Shape{d});
    if (s >= 1) {
      zp.scales[s].dconv.bias = Tensor::zeros(Shape{d});
      zp.scales[s].dconv.offset_b = Tensor::zeros(Shape{18});
    }
  }
  zp.pool_proj_b = Tensor::zeros(Shape{d});
  std::array<Tensor, 4> zeros;
  for (std::size_t s = 0; s < 4; ++s) zeros[s] = Tensor::zeros(feats[s].shape());
  const FeaturePyramid zpyr = build_pyramid(zeros, zp);
  for (std::size_t s = 0; s < 4; ++s) {
    for (double v : zpyr.levels[s].values()) CHECK(v == 0.0);
  }

  // mismatched spatial chain is rejected
  std::array<Tensor, 4> bad = feats;
  bad[1] = Tensor::randn(Shape{ch[1], 7, 7}, rng);
  CHECK_THROWS_AS(build_pyramid(bad, params), std::invalid_argument);
}

TEST_CASE("build_pyramid with zero offsets equals a hand-composed convolution pipeline") {
  std::mt19937_64 rng(47);
  const std::array<std::size_t, 4> ch{2, 2, 2, 2};
  const std::size_t d = 8;
  PixelDecoderParams params = random_pixel_params(ch, d, rng);  // offsets already zero

  std::array<Tensor, 4> feats;
  for (std::size_t s = 0; s < 4; ++s) feats[s] = Tensor::randn(Shape{ch[s], std::size_t(16) >> s, std::size_t(16) >> s}, rng);
  const FeaturePyramid pyr = build_pyramid(feats, params);

  auto cam = [&](const Tensor& e, const CamParams& c) {
    return add(mul(e, sigmoid(conv2d(relu(conv2d(global_avg_pool(e), c.w1, c.b1, 1)), c.w2, c.b2, 1))), e);
  };
  std::array<Tensor, 4> ec;
  for (std::size_t s = 0; s < 4; ++s) {
    ec[s] = cam(conv2d(feats[s], params.scales[s].proj_w, params.scales[s].proj_b, 1), params.scales[s].cam);
  }
  const Tensor ctx = conv2d(global_avg_pool(feats[3]), params.pool_proj_w, params.pool_proj_b, 1);
  const Tensor r4 = conv2d(add(ec[3], ctx), params.scales[3].dconv.kernel, params.scales[3].dconv.bias, 1);
  const Tensor r3 = conv2d(add(ec[2], upsample_bilinear_2x(r4)), params.scales[2].dconv.kernel,
                           params.scales[2].dconv.bias, 1);
  const Tensor r2 = conv2d(add(ec[1], upsample_bilinear_2x(r3)), params.scales[1].dconv.kernel,
                           params.scales[1].dconv.bias, 1);
  const Tensor r1 = add(ec[0], upsample_bilinear_2x(r2));

  const std::array<const Tensor*, 4> want{&r1, &r2, &r3, &r4};
  for (std::size_t s = 0; s < 4; ++s) {
    for (std::size_t i = 0; i < want[s]->numel(); ++i) {
      CHECK(std::abs(pyr.levels[s].data()[i] - want[s]->data()[i]) < 1e-10);
    }
  }
}

TEST_CASE("pyramid gradient matches finite differences on 16x16 finest features") {
  for (std::uint64_t seed = 48;; ++seed) {
    std::mt19937_64 rng(seed);
    const std::array<std::size_t, 4> ch{3, 3, 3, 3};
    const std::size_t d = 8;
    PixelDecoderParams params = random_pixel_params(ch, d, rng);
    // move offsets off the lattice for a checkable instance
    for (std::size_t s = 1; s < 4; ++s) {
      params.scales[s].dconv.offset_w = Tensor::randn(Shape{18, d, 3, 3}, rng, 0.02);
      params.scales[s].dconv.offset_b = Tensor::randn(Shape{18}, rng, 0.05);
    }

    std::array<Tensor, 4> feats;
    for (std::size_t s = 0; s < 4; ++s) {
      feats[s] = Tensor::randn(Shape{ch[s], std::size_t(16) >> s, std::size_t(16) >> s}, rng);
      feats[s].set_requires_grad(true);
    }
    std::vector<Tensor> tensors(feats.begin(), feats.end());
    for (std::size_t s = 0; s < 4; ++s) {
      for (Tensor* t : {&params.scales[s].proj_w, &params.scales[s].cam.w1, &params.scales[s].cam.w2}) {
        t->set_requires_grad(true);
        tensors.push_back(*t);
      }
      if (s >= 1) {
        for (Tensor* t : {&params.scales[s].dconv.offset_w, &params.scales[s].dconv.kernel}) {
          t->set_requires_grad(true);
          tensors.push_back(*t);
        }
      }
    }
    params.pool_proj_w.set_requires_grad(true);
    tensors.push_back(params.pool_proj_w);

    GradCheckSpec spec;
    spec.tensors = tensors;
    spec.track_decisions = true;
    spec.probes_per_tensor = 3;
    spec.seed = seed;
    spec.forward = [&](DecisionTrace* trace) {
      const FeaturePyramid pyr = build_pyramid(feats, params, trace);
      std::mt19937_64 wrng(88);
      Tensor loss;
      for (std::size_t s = 0; s < 4; ++s) {
        const Tensor term = reduce_sum(mul(pyr.levels[s], Tensor::uniform(pyr.levels[s].shape(), wrng, -1.0, 1.0)));
        loss = (s == 0) ? term : add(loss, term);
      }
      return loss;
    };
    const auto res = finite_diff_check(spec);
    if (res.min_margin < 1e-3) continue;
    CHECK(res.max_rel_err < 1e-4);
    break;
  }
}
