#pragma once

// Prototype cross-attention: each object query selects the single spatial
// feature with maximum masked affinity as its prototype, then refines itself
// through element-wise interaction with that prototype. The post-affinity
// stage touches exactly L rows per head regardless of the spatial size, which
// is where the cost advantage over standard masked cross-attention comes
// from. The standard mechanism is kept alongside as the comparison baseline
// and as the ablation fallback.

#include <cstdint>
#include <vector>

#include "pbseg/decisions.hpp"
#include "pbseg/ops.hpp"
#include "pbseg/tensor.hpp"

namespace pbseg {

// L object embeddings of width D
struct QuerySet {
  Tensor embeddings;  // L x D
  std::size_t count() const { return embeddings.extent(0); }
  std::size_t dim() const { return embeddings.extent(1); }
};

// Per-query spatial gate, shared across heads: 0 on predicted foreground,
// -inf elsewhere. Rows that would be entirely -inf have already been
// replaced by all-zero rows (fallback rule), so the sentinel never feeds an
// all-masked argmax or softmax.
struct AttentionMask {
  Tensor values;  // L x S, entries in {0, -inf}
};

// x[N x in] -> x w + b
struct Linear {
  Tensor w;  // in x out
  Tensor b;  // out
};
Tensor apply_linear(const Linear& lin, const Tensor& x);

struct PbcaParams {
  Linear key_proj;            // D -> d, produces V from spatial tokens
  Linear query_proj;          // D -> d, produces T from object embeddings
  Linear value_proj;          // D -> d, exercised only by the standard baseline
  std::vector<Tensor> w1;     // per head, d_h x d_h
  std::vector<Tensor> beta;   // per head, d_h
  Tensor w2;                  // d -> D, shared across heads after concatenation
  std::size_t heads = 1;

  std::size_t proj_dim() const { return key_proj.w.extent(1); }
  std::size_t head_dim() const { return proj_dim() / heads; }
};

struct PrototypeSelection {
  std::vector<std::size_t> indices;  // J, one spatial index per query
  Tensor prototypes;                 // V_p, L x d_h; row l equals V[J[l]] bitwise
};

// A = V T^T  (one head)
Tensor compute_affinity(const Tensor& v, const Tensor& t);

// Per query l: J[l] = argmax_s (A[s,l] + N[l,s]), first maximum on ties;
// a query whose mask row is entirely -inf falls back to the unmasked argmax.
PrototypeSelection select_prototypes(const Tensor& affinity, const AttentionMask& mask, const Tensor& v,
                                     DecisionTrace* trace = nullptr);

struct PbcaResult {
  Tensor queries;                                // L x D
  std::vector<std::vector<std::size_t>> indices; // per head, per query
};

// Full prototype cross-attention including the residual onto o_in.
PbcaResult pbca_forward(const Tensor& o_in, const Tensor& r_s /* D x h x w */, const AttentionMask& mask,
                        const PbcaParams& params, DecisionTrace* trace = nullptr);

// The update term alone (no residual); the decoder layer owns the residual
// so that its skip path carries the unnormalized layer input.
PbcaResult pbca_update(const Tensor& o_in, const Tensor& r_s, const AttentionMask& mask, const PbcaParams& params,
                       DecisionTrace* trace = nullptr);

// Standard masked cross-attention baseline: per head
// softmax(T V^T / sqrt(d_h) + N) V_values, output-projected, with residual.
Tensor standard_masked_cross_attention(const Tensor& o_in, const Tensor& r_s, const AttentionMask& mask,
                                       const PbcaParams& params);
Tensor standard_attention_update(const Tensor& o_in, const Tensor& r_s, const AttentionMask& mask,
                                 const PbcaParams& params);

// Thresholds the previous layer's mask prediction at this layer's spatial
// resolution: 0 where sigmoid(logit) > 0.5, -inf elsewhere, then the
// all--inf fallback per query. Output is a constant of the recorded graph.
AttentionMask build_attention_mask(const Tensor& prev_mask_logits /* L x h x w */, std::size_t h_s, std::size_t w_s,
                                   DecisionTrace* trace = nullptr);

struct SelfAttentionParams {
  Linear q, k, v, o;  // all D -> D
  std::size_t heads = 1;
};

struct FfnParams {
  Linear fc1;  // D -> hidden
  Linear fc2;  // hidden -> D
};

struct LayerNormParams {
  Tensor gain;  // D
  Tensor bias;  // D
};
Tensor apply_layer_norm(const LayerNormParams& p, const Tensor& x);

// One transformer-decoder block: cross-attention, query self-attention and
// feed-forward, each as x + sublayer(norm(x)).
struct DecoderLayerParams {
  PbcaParams cross;
  SelfAttentionParams self_attn;
  FfnParams ffn;
  LayerNormParams norm_cross, norm_self, norm_ffn;
  bool use_pbca = true;
};

Tensor decoder_layer(const Tensor& o_in, const Tensor& r_s, const AttentionMask& mask,
                     const DecoderLayerParams& params, DecisionTrace* trace = nullptr);

Tensor self_attention_update(const Tensor& x, const SelfAttentionParams& p);

// spatial map [D x h x w] -> token rows [S x D]
Tensor flatten_tokens(const Tensor& r_s);

}  // namespace pbseg
