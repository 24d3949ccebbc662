#pragma once

// End-to-end query-based mask-classification model: a small strided
// convolutional backbone, the convolutional pixel decoder, a transformer
// decoder whose layers cycle the pyramid scales coarse-to-fine, and
// per-query mask/class heads. Training uses bipartite matching with deep
// supervision over every intermediate prediction.

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "pbseg/attention.hpp"
#include "pbseg/data.hpp"
#include "pbseg/decisions.hpp"
#include "pbseg/pixel_decoder.hpp"
#include "pbseg/tensor.hpp"

namespace pbseg {

struct ModelConfig {
  std::size_t queries = 20;  // L
  std::size_t dim = 64;      // D
  std::size_t heads = 4;
  std::size_t layers = 6;    // must be divisible by 3 (scale round-robin)
  std::size_t classes = 4;   // C; the class head adds one null slot
  std::size_t input_h = 64, input_w = 64;
  std::size_t proj_dim = 0;    // d of the cross-attention projections; 0 -> dim
  std::size_t ffn_hidden = 0;  // 0 -> 4 * dim
  std::array<std::size_t, 4> channels{16, 32, 64, 128};
  double lambda_cls = 2.0, lambda_bce = 5.0, lambda_dice = 5.0;
  double null_weight = 0.1;
  bool use_pbca = true, use_cam = true, use_dconv = true;

  std::size_t d() const { return proj_dim ? proj_dim : dim; }
  std::size_t ffn() const { return ffn_hidden ? ffn_hidden : 4 * dim; }
  std::size_t h1() const { return input_h / 4; }
  std::size_t w1() const { return input_w / 4; }
  void validate() const;  // throws std::invalid_argument
  bool operator==(const ModelConfig&) const = default;
};

struct MaskPrediction {
  Tensor class_logits;  // L x (C+1); softmax rows live on the (C+1)-simplex
  Tensor mask_logits;   // L x h1 x w1
};

struct NamedParam {
  std::string name;
  Tensor tensor;
};

// one matched ground-truth object: binary mask at the prediction resolution
struct GtObject {
  std::size_t label;
  Tensor mask;  // h1 x w1, entries {0, 1}
};
struct GroundTruth {
  std::vector<GtObject> objects;
  IndexArray raster_small;  // h1 x w1
};

// nearest-neighbor downsample (stride 4, half-pixel centers) and split into
// one object per class present
GroundTruth downsample_ground_truth(const IndexArray& raster, std::size_t classes);

struct MatchResult {
  std::vector<std::size_t> assignment;  // ground-truth index -> query index, injective
  double cost = 0.0;
};

struct BackboneStage {
  Tensor w1, b1, w2, b2;
};

class PBSegModel {
 public:
  PBSegModel(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  std::vector<NamedParam>& params() { return params_; }
  const std::vector<NamedParam>& params() const { return params_; }

  struct ForwardResult {
    FeaturePyramid pyramid;
    std::vector<MaskPrediction> predictions;  // layers + 1: raw queries first
    Tensor queries_out;
  };
  ForwardResult forward(const Tensor& image, DecisionTrace* trace = nullptr) const;

  std::array<Tensor, 4> run_backbone(const Tensor& image) const;
  MaskPrediction predict_heads(const Tensor& queries, const Tensor& r1) const;

  // scale attended by decoder layer i: 4, 3, 2, 4, 3, 2, ...
  static std::size_t layer_scale(std::size_t layer_index) { return 4 - layer_index % 3; }

  // move the offset predictors off their exact-zero initialization; gradient
  // checks need sampling positions away from the interpolation lattice
  void randomize_offset_predictors(std::mt19937_64& rng, double stddev);

  const Tensor& query_embeddings() const { return query_embed_; }
  const PixelDecoderParams& pixel_params() const { return pixel_; }
  const std::vector<DecoderLayerParams>& decoder_params() const { return decoder_; }

 private:
  Tensor register_param(const std::string& name, Tensor t);

  ModelConfig cfg_;
  std::vector<NamedParam> params_;
  Tensor query_embed_;  // L x D
  std::array<BackboneStage, 4> backbone_;
  PixelDecoderParams pixel_;
  std::vector<DecoderLayerParams> decoder_;
  Linear mask_fc1_, mask_fc2_;  // D -> D -> D with ReLU between
  Linear class_head_;           // D -> C + 1
};

// cost(g, l) = lambda_cls * (-P_l[label_g]) + lambda_bce * BCE + lambda_dice * Dice,
// minimized over injective assignments; throws if #gt > L
MatchResult hungarian_match(const MaskPrediction& pred, const GroundTruth& gt, const ModelConfig& cfg);

// deep-supervised total: sum over prediction points of
//   lambda_cls * CE(class logits; unmatched -> null, weight null_weight)
// + lambda_bce * mean-over-matched-pairs of per-mask pixel BCE
// + lambda_dice * mean-over-matched-pairs of Dice with +1 smoothing
Tensor compute_loss(const std::vector<MaskPrediction>& predictions, const GroundTruth& gt, const ModelConfig& cfg,
                    DecisionTrace* trace = nullptr);

// argmax_c sum_l P_l[c] sigmoid(mask_l) over the real classes (null excluded)
IndexArray semantic_inference(const MaskPrediction& pred, std::size_t classes);  // h1 x w1
IndexArray upsample_labels_4x(const IndexArray& raster);                         // nearest neighbor
IndexArray semantic_inference_fullres(const MaskPrediction& pred, std::size_t classes);

struct AdamW {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.05;
  std::size_t t = 0;
  std::vector<std::vector<double>> m, v;

  void init(const std::vector<NamedParam>& params);
  // decoupled update; zeroes gradients afterwards
  void step(std::vector<NamedParam>& params, double lr);
};

// base * 0.5 * (1 + cos(pi * step / total))
double cosine_lr(double base, std::size_t step, std::size_t total_steps);

// forward/backward over the batch, one optimizer update; returns the loss.
// Throws std::runtime_error on a non-finite loss.
double train_step(PBSegModel& model, const std::vector<const SceneSample*>& batch, AdamW& opt, double lr);

}  // namespace pbseg
