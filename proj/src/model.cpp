#include "pbseg/model.hpp"

#include <cmath>
#include <stdexcept>

#include "pbseg/hungarian.hpp"

namespace pbseg {

void ModelConfig::validate() const {
  if (queries == 0) throw std::invalid_argument("config: need at least one query");
  if (dim < 4) throw std::invalid_argument("config: hidden dim must be at least 4 (channel reduction D/4)");
  if (heads == 0 || dim % heads != 0) {
    throw std::invalid_argument("config: dim " + std::to_string(dim) + " not divisible by heads " +
                                std::to_string(heads));
  }
  if (d() % heads != 0) {
    throw std::invalid_argument("config: proj_dim " + std::to_string(d()) + " not divisible by heads " +
                                std::to_string(heads));
  }
  if (layers % 3 != 0) {
    throw std::invalid_argument("config: layers " + std::to_string(layers) +
                                " must be divisible by 3 to complete the scale round-robin");
  }
  if (classes == 0) throw std::invalid_argument("config: need at least one class");
  if (input_h % 32 != 0 || input_w % 32 != 0 || input_h == 0 || input_w == 0) {
    throw std::invalid_argument("config: input " + std::to_string(input_h) + "x" + std::to_string(input_w) +
                                " must be divisible by 32");
  }
  for (std::size_t c : channels) {
    if (c == 0) throw std::invalid_argument("config: backbone channels must be positive");
  }
}

namespace {

Tensor xavier(Shape shape, std::mt19937_64& rng) {
  const std::size_t fan_in = shape[0], fan_out = shape[shape.size() - 1];
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return Tensor::uniform(std::move(shape), rng, -limit, limit);
}

Tensor conv_init(std::size_t c_out, std::size_t c_in, std::size_t k, std::mt19937_64& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(c_in * k * k));
  return Tensor::randn(Shape{c_out, c_in, k, k}, rng, stddev);
}

}  // namespace

Tensor PBSegModel::register_param(const std::string& name, Tensor t) {
  t.set_requires_grad(true);
  params_.push_back({name, t});
  return t;
}

PBSegModel::PBSegModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t D = cfg_.dim, L = cfg_.queries, d = cfg_.d(), dh = d / cfg_.heads;

  query_embed_ = register_param("queries", Tensor::randn(Shape{L, D}, rng, 0.1));

  std::size_t in_ch = 3;
  for (std::size_t s = 0; s < 4; ++s) {
    const std::size_t out_ch = cfg_.channels[s];
    const std::string p = "backbone.s" + std::to_string(s + 1);
    backbone_[s].w1 = register_param(p + ".conv1.w", conv_init(out_ch, in_ch, 3, rng));
    backbone_[s].b1 = register_param(p + ".conv1.b", Tensor::zeros(Shape{out_ch}));
    backbone_[s].w2 = register_param(p + ".conv2.w", conv_init(out_ch, out_ch, 3, rng));
    backbone_[s].b2 = register_param(p + ".conv2.b", Tensor::zeros(Shape{out_ch}));
    in_ch = out_ch;
  }

  const std::size_t dr = D / 4;
  for (std::size_t s = 0; s < 4; ++s) {
    const std::string p = "pixel.s" + std::to_string(s + 1);
    PyramidScaleParams& sp = pixel_.scales[s];
    sp.proj_w = register_param(p + ".proj.w", conv_init(D, cfg_.channels[s], 1, rng));
    sp.proj_b = register_param(p + ".proj.b", Tensor::zeros(Shape{D}));
    sp.cam.w1 = register_param(p + ".cam.fc1.w", conv_init(dr, D, 1, rng));
    sp.cam.b1 = register_param(p + ".cam.fc1.b", Tensor::zeros(Shape{dr}));
    sp.cam.w2 = register_param(p + ".cam.fc2.w", conv_init(D, dr, 1, rng));
    sp.cam.b2 = register_param(p + ".cam.fc2.b", Tensor::zeros(Shape{D}));
    if (s >= 1) {  // the finest level is fused without a convolution
      sp.dconv.offset_w = register_param(p + ".dconv.offset.w", Tensor::zeros(Shape{18, D, 3, 3}));
      sp.dconv.offset_b = register_param(p + ".dconv.offset.b", Tensor::zeros(Shape{18}));
      sp.dconv.kernel = register_param(p + ".dconv.kernel", conv_init(D, D, 3, rng));
      sp.dconv.bias = register_param(p + ".dconv.bias", Tensor::zeros(Shape{D}));
    }
  }
  pixel_.pool_proj_w = register_param("pixel.pool_proj.w", conv_init(D, cfg_.channels[3], 1, rng));
  pixel_.pool_proj_b = register_param("pixel.pool_proj.b", Tensor::zeros(Shape{D}));
  pixel_.use_cam = cfg_.use_cam;
  pixel_.use_dconv = cfg_.use_dconv;

  auto make_linear = [&](const std::string& name, std::size_t in, std::size_t out) {
    Linear lin;
    lin.w = register_param(name + ".w", xavier(Shape{in, out}, rng));
    lin.b = register_param(name + ".b", Tensor::zeros(Shape{out}));
    return lin;
  };

  decoder_.resize(cfg_.layers);
  for (std::size_t i = 0; i < cfg_.layers; ++i) {
    const std::string p = "dec" + std::to_string(i);
    DecoderLayerParams& lp = decoder_[i];
    lp.use_pbca = cfg_.use_pbca;
    lp.cross.heads = cfg_.heads;
    lp.cross.key_proj = make_linear(p + ".cross.key", D, d);
    lp.cross.query_proj = make_linear(p + ".cross.query", D, d);
    lp.cross.value_proj = make_linear(p + ".cross.value", D, d);
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
      lp.cross.w1.push_back(register_param(p + ".cross.w1.h" + std::to_string(h), xavier(Shape{dh, dh}, rng)));
      lp.cross.beta.push_back(register_param(p + ".cross.beta.h" + std::to_string(h), Tensor::full(Shape{dh}, 0.1)));
    }
    lp.cross.w2 = register_param(p + ".cross.w2", xavier(Shape{d, D}, rng));
    lp.self_attn.heads = cfg_.heads;
    lp.self_attn.q = make_linear(p + ".self.q", D, D);
    lp.self_attn.k = make_linear(p + ".self.k", D, D);
    lp.self_attn.v = make_linear(p + ".self.v", D, D);
    lp.self_attn.o = make_linear(p + ".self.o", D, D);
    lp.ffn.fc1 = make_linear(p + ".ffn.fc1", D, cfg_.ffn());
    lp.ffn.fc2 = make_linear(p + ".ffn.fc2", cfg_.ffn(), D);
    auto make_norm = [&](const std::string& name) {
      LayerNormParams np;
      np.gain = register_param(name + ".gain", Tensor::full(Shape{D}, 1.0));
      np.bias = register_param(name + ".bias", Tensor::zeros(Shape{D}));
      return np;
    };
    lp.norm_cross = make_norm(p + ".norm_cross");
    lp.norm_self = make_norm(p + ".norm_self");
    lp.norm_ffn = make_norm(p + ".norm_ffn");
  }

  mask_fc1_ = make_linear("head.mask.fc1", D, D);
  mask_fc2_ = make_linear("head.mask.fc2", D, D);
  class_head_ = make_linear("head.class", D, cfg_.classes + 1);
}

void PBSegModel::randomize_offset_predictors(std::mt19937_64& rng, double stddev) {
  for (std::size_t s = 1; s < 4; ++s) {
    for (Tensor t : {pixel_.scales[s].dconv.offset_w, pixel_.scales[s].dconv.offset_b}) {
      std::normal_distribution<double> dist(0.0, stddev);
      for (double& v : t.values()) v = dist(rng);
    }
  }
}

std::array<Tensor, 4> PBSegModel::run_backbone(const Tensor& image) const {
  if (image.rank() != 3 || image.extent(0) != 3) {
    throw std::invalid_argument("backbone: expected 3 x H x W image, got " + shape_str(image.shape()));
  }
  if (image.extent(1) % 32 != 0 || image.extent(2) % 32 != 0) {
    throw std::invalid_argument("backbone: image size " + shape_str(image.shape()) + " not divisible by 32");
  }
  std::array<Tensor, 4> feats;
  Tensor x = image;
  for (std::size_t s = 0; s < 4; ++s) {
    const BackboneStage& st = backbone_[s];
    // stage 1 applies stride 2 twice to reach stride 4
    x = relu(conv2d(x, st.w1, st.b1, 2));
    x = relu(conv2d(x, st.w2, st.b2, s == 0 ? 2 : 1));
    feats[s] = x;
  }
  return feats;
}

MaskPrediction PBSegModel::predict_heads(const Tensor& queries, const Tensor& r1) const {
  const std::size_t h = r1.extent(1), w = r1.extent(2);
  const Tensor embed = apply_linear(mask_fc2_, relu(apply_linear(mask_fc1_, queries)));  // L x D
  const Tensor r1_flat = reshape(r1, Shape{r1.extent(0), h * w});
  MaskPrediction pred;
  pred.mask_logits = reshape(matmul(embed, r1_flat), Shape{queries.extent(0), h, w});
  pred.class_logits = apply_linear(class_head_, queries);
  return pred;
}

PBSegModel::ForwardResult PBSegModel::forward(const Tensor& image, DecisionTrace* trace) const {
  ForwardResult out;
  out.pyramid = build_pyramid(run_backbone(image), pixel_, trace);
  const Tensor& r1 = out.pyramid.levels[0];

  out.predictions.push_back(predict_heads(query_embed_, r1));
  Tensor x = query_embed_;
  for (std::size_t i = 0; i < cfg_.layers; ++i) {
    const Tensor& r_s = out.pyramid.levels[layer_scale(i) - 1];
    const AttentionMask mask =
        build_attention_mask(out.predictions.back().mask_logits, r_s.extent(1), r_s.extent(2), trace);
    x = decoder_layer(x, r_s, mask, decoder_[i], trace);
    out.predictions.push_back(predict_heads(x, r1));
  }
  out.queries_out = x;
  return out;
}

GroundTruth downsample_ground_truth(const IndexArray& raster, std::size_t classes) {
  if (raster.rows % 4 != 0 || raster.cols % 4 != 0) {
    throw std::invalid_argument("ground truth raster size must be divisible by 4");
  }
  GroundTruth gt;
  const std::size_t h = raster.rows / 4, w = raster.cols / 4;
  gt.raster_small = IndexArray(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) gt.raster_small.at(y, x) = raster.at(4 * y + 2, 4 * x + 2);

  for (std::size_t c = 0; c < classes; ++c) {
    Tensor mask(Shape{h, w});
    std::size_t count = 0;
    for (std::size_t i = 0; i < gt.raster_small.size(); ++i) {
      if (gt.raster_small.v[i] == static_cast<std::int64_t>(c)) {
        mask.data()[i] = 1.0;
        ++count;
      }
    }
    if (count > 0) gt.objects.push_back({c, mask});
  }
  return gt;
}

namespace {

// value-level loss terms used for the matching cost
double bce_value(const double* logits, const double* target, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += std::max(logits[i], 0.0) - logits[i] * target[i] + std::log1p(std::exp(-std::abs(logits[i])));
  }
  return acc / static_cast<double>(n);
}

double dice_value(const double* logits, const double* target, std::size_t n) {
  double inter = 0.0, psum = 0.0, gsum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double s = logits[i] >= 0 ? 1.0 / (1.0 + std::exp(-logits[i]))
                                    : std::exp(logits[i]) / (1.0 + std::exp(logits[i]));
    inter += s * target[i];
    psum += s;
    gsum += target[i];
  }
  return 1.0 - (2.0 * inter + 1.0) / (psum + gsum + 1.0);
}

}  // namespace

MatchResult hungarian_match(const MaskPrediction& pred, const GroundTruth& gt, const ModelConfig& cfg) {
  const std::size_t L = pred.class_logits.extent(0);
  const std::size_t G = gt.objects.size();
  if (G > L) {
    throw std::invalid_argument("hungarian_match: " + std::to_string(G) + " ground-truth objects exceed " +
                                std::to_string(L) + " queries");
  }
  MatchResult res;
  if (G == 0) return res;

  const std::size_t k = pred.class_logits.extent(1);
  const std::size_t s = pred.mask_logits.numel() / L;
  std::vector<double> cost(G * L);
  for (std::size_t q = 0; q < L; ++q) {
    const double* row = pred.class_logits.data() + q * k;
    double m = row[0];
    for (std::size_t j = 1; j < k; ++j) m = std::max(m, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - m);
    const double* mask_row = pred.mask_logits.data() + q * s;
    for (std::size_t g = 0; g < G; ++g) {
      const double p_label = std::exp(row[gt.objects[g].label] - m) / z;
      const double* target = gt.objects[g].mask.data();
      cost[g * L + q] = cfg.lambda_cls * (-p_label) + cfg.lambda_bce * bce_value(mask_row, target, s) +
                        cfg.lambda_dice * dice_value(mask_row, target, s);
    }
  }
  res.assignment = solve_assignment(cost, G, L, &res.cost);
  return res;
}

Tensor compute_loss(const std::vector<MaskPrediction>& predictions, const GroundTruth& gt, const ModelConfig& cfg,
                    DecisionTrace* trace) {
  if (predictions.empty()) throw std::invalid_argument("compute_loss: no predictions");
  Tensor total;
  bool first = true;
  for (const MaskPrediction& pred : predictions) {
    const MatchResult match = hungarian_match(pred, gt, cfg);
    const std::size_t L = pred.class_logits.extent(0);
    const std::size_t G = gt.objects.size();
    if (trace) {
      for (std::size_t a : match.assignment) trace->add_index(a);
    }

    std::vector<std::size_t> labels(L, cfg.classes);  // null class by default
    std::vector<double> weights(L, cfg.null_weight);
    for (std::size_t g = 0; g < G; ++g) {
      labels[match.assignment[g]] = gt.objects[g].label;
      weights[match.assignment[g]] = 1.0;
    }
    Tensor term = mul(cross_entropy_rows(pred.class_logits, labels, weights), cfg.lambda_cls);

    if (G > 0) {
      const std::size_t sp = pred.mask_logits.numel() / L;
      const Tensor mask_flat = reshape(pred.mask_logits, Shape{L, sp});
      Tensor bce_sum, dice_sum;
      for (std::size_t g = 0; g < G; ++g) {
        const Tensor row = slice_outer(mask_flat, match.assignment[g], 1);  // 1 x sp
        const Tensor target = reshape(gt.objects[g].mask, Shape{1, sp});
        const Tensor bce = reduce_mean(bce_with_logits(row, target));
        const Tensor sig = sigmoid(row);
        const Tensor numer = add(mul(reduce_sum(mul(sig, target)), 2.0), 1.0);
        const Tensor denom = add(add(reduce_sum(sig), reduce_sum(target)), 1.0);
        const Tensor dice = add(mul(div(numer, denom), -1.0), 1.0);
        bce_sum = (g == 0) ? bce : add(bce_sum, bce);
        dice_sum = (g == 0) ? dice : add(dice_sum, dice);
      }
      const double inv_g = 1.0 / static_cast<double>(G);
      term = add(term, add(mul(bce_sum, cfg.lambda_bce * inv_g), mul(dice_sum, cfg.lambda_dice * inv_g)));
    }
    total = first ? term : add(total, term);
    first = false;
  }
  return total;
}

IndexArray semantic_inference(const MaskPrediction& pred, std::size_t classes) {
  const std::size_t L = pred.class_logits.extent(0);
  const std::size_t k = pred.class_logits.extent(1);
  if (k != classes + 1) {
    throw std::invalid_argument("semantic_inference: class head width " + std::to_string(k) + " vs classes " +
                                std::to_string(classes));
  }
  const std::size_t h = pred.mask_logits.extent(1), w = pred.mask_logits.extent(2);
  const std::size_t s = h * w;

  // P = softmax over classes, null column dropped from scoring
  std::vector<double> probs(L * classes);
  for (std::size_t q = 0; q < L; ++q) {
    const double* row = pred.class_logits.data() + q * k;
    double m = row[0];
    for (std::size_t j = 1; j < k; ++j) m = std::max(m, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - m);
    for (std::size_t c = 0; c < classes; ++c) probs[q * classes + c] = std::exp(row[c] - m) / z;
  }

  std::vector<double> scores(classes * s, 0.0);
  for (std::size_t q = 0; q < L; ++q) {
    const double* mask_row = pred.mask_logits.data() + q * s;
    for (std::size_t c = 0; c < classes; ++c) {
      const double p = probs[q * classes + c];
      if (p == 0.0) continue;
      double* srow = scores.data() + c * s;
      for (std::size_t i = 0; i < s; ++i) {
        const double sig = mask_row[i] >= 0 ? 1.0 / (1.0 + std::exp(-mask_row[i]))
                                            : std::exp(mask_row[i]) / (1.0 + std::exp(mask_row[i]));
        srow[i] += p * sig;
      }
    }
  }

  IndexArray raster(h, w);
  for (std::size_t i = 0; i < s; ++i) {
    double best = scores[i];
    std::size_t best_c = 0;
    for (std::size_t c = 1; c < classes; ++c) {
      if (scores[c * s + i] > best) {
        best = scores[c * s + i];
        best_c = c;
      }
    }
    raster.v[i] = static_cast<std::int64_t>(best_c);
  }
  return raster;
}

IndexArray upsample_labels_4x(const IndexArray& raster) {
  IndexArray out(raster.rows * 4, raster.cols * 4);
  for (std::size_t y = 0; y < out.rows; ++y)
    for (std::size_t x = 0; x < out.cols; ++x) out.at(y, x) = raster.at(y / 4, x / 4);
  return out;
}

IndexArray semantic_inference_fullres(const MaskPrediction& pred, std::size_t classes) {
  return upsample_labels_4x(semantic_inference(pred, classes));
}

void AdamW::init(const std::vector<NamedParam>& params) {
  t = 0;
  m.assign(params.size(), {});
  v.assign(params.size(), {});
  for (std::size_t i = 0; i < params.size(); ++i) {
    m[i].assign(params[i].tensor.numel(), 0.0);
    v[i].assign(params[i].tensor.numel(), 0.0);
  }
}

void AdamW::step(std::vector<NamedParam>& params, double lr) {
  if (m.size() != params.size()) throw std::logic_error("AdamW: call init() first");
  ++t;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i].tensor;
    const std::vector<double>& grad = p.grad();
    double* pv = p.data();
    const std::size_t n = p.numel();
    for (std::size_t j = 0; j < n; ++j) {
      const double g = grad.empty() ? 0.0 : grad[j];
      m[i][j] = beta1 * m[i][j] + (1.0 - beta1) * g;
      v[i][j] = beta2 * v[i][j] + (1.0 - beta2) * g * g;
      const double mhat = m[i][j] / bc1;
      const double vhat = v[i][j] / bc2;
      pv[j] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * pv[j]);
    }
    p.zero_grad();
  }
}

double cosine_lr(double base, std::size_t step, std::size_t total_steps) {
  if (total_steps == 0) return base;
  const double phase = static_cast<double>(step) / static_cast<double>(total_steps);
  return base * 0.5 * (1.0 + std::cos(3.14159265358979323846 * phase));
}

double train_step(PBSegModel& model, const std::vector<const SceneSample*>& batch, AdamW& opt, double lr) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  Tape tape;
  Tensor total;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const SceneSample& sample = *batch[i];
    auto fwd = model.forward(sample.image);
    const GroundTruth gt = downsample_ground_truth(sample.labels, model.config().classes);
    const Tensor loss = compute_loss(fwd.predictions, gt, model.config());
    total = (i == 0) ? loss : add(total, loss);
  }
  total = mul(total, 1.0 / static_cast<double>(batch.size()));
  const double loss_value = total.item();
  if (!std::isfinite(loss_value)) {
    throw std::runtime_error("train_step: non-finite loss (" + std::to_string(loss_value) + "), aborting");
  }
  tape.backward(total);
  opt.step(model.params(), lr);
  return loss_value;
}

}  // namespace pbseg
