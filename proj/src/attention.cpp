#include "pbseg/attention.hpp"

#include <cmath>
#include <limits>

#include "pbseg/flop_cost.hpp"

namespace pbseg {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}

Tensor apply_linear(const Linear& lin, const Tensor& x) { return add(matmul(x, lin.w), lin.b); }

Tensor apply_layer_norm(const LayerNormParams& p, const Tensor& x) {
  return add(mul(layer_norm_rows(x), p.gain), p.bias);
}

Tensor flatten_tokens(const Tensor& r_s) {
  if (r_s.rank() != 3) throw std::invalid_argument("flatten_tokens: expected D x h x w, got " + shape_str(r_s.shape()));
  const std::size_t d = r_s.extent(0), s = r_s.extent(1) * r_s.extent(2);
  return transpose2d(reshape(r_s, Shape{d, s}));
}

Tensor compute_affinity(const Tensor& v, const Tensor& t) {
  if (v.rank() != 2 || t.rank() != 2 || v.extent(1) != t.extent(1)) {
    throw std::invalid_argument("compute_affinity: incompatible shapes " + shape_str(v.shape()) + " and " +
                                shape_str(t.shape()));
  }
  return matmul(v, transpose2d(t));
}

PrototypeSelection select_prototypes(const Tensor& affinity, const AttentionMask& mask, const Tensor& v,
                                     DecisionTrace* trace) {
  const std::size_t s = affinity.extent(0), l = affinity.extent(1);
  if (mask.values.extent(0) != l || mask.values.extent(1) != s) {
    throw std::invalid_argument("select_prototypes: mask " + shape_str(mask.values.shape()) + " vs affinity " +
                                shape_str(affinity.shape()));
  }
  const double* a = affinity.data();
  const double* n = mask.values.data();
  PrototypeSelection sel;
  sel.indices.resize(l);
  for (std::size_t q = 0; q < l; ++q) {
    const double* nrow = n + q * s;
    bool any_open = false;
    for (std::size_t i = 0; i < s; ++i) {
      if (nrow[i] == 0.0) {
        any_open = true;
        break;
      }
    }
    double best = kNegInf, second = kNegInf;
    std::size_t best_i = 0;
    for (std::size_t i = 0; i < s; ++i) {
      const double val = any_open ? a[i * l + q] + nrow[i] : a[i * l + q];
      if (val > best) {
        second = best;
        best = val;
        best_i = i;
      } else if (val > second) {
        second = val;
      }
    }
    sel.indices[q] = best_i;
    if (trace) {
      trace->add_index(best_i);
      if (std::isfinite(second)) trace->note_margin(best - second);
    }
  }
  // mask add + argmax scan
  FlopCounter::charge(flop_cost::elemwise(s * l) + flop_cost::argmax(s * l));
  sel.prototypes = gather_rows(v, sel.indices);
  return sel;
}

namespace {

PbcaResult pbca_core(const Tensor& o_in, const Tensor& r_s, const AttentionMask& mask, const PbcaParams& params,
                     DecisionTrace* trace, bool with_residual) {
  const std::size_t heads = params.heads;
  const std::size_t d = params.proj_dim();
  if (heads == 0 || d % heads != 0) {
    throw std::invalid_argument("pbca: projection width " + std::to_string(d) + " not divisible by " +
                                std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  const Tensor tokens = flatten_tokens(r_s);
  const Tensor v = apply_linear(params.key_proj, tokens);   // S x d
  const Tensor t = apply_linear(params.query_proj, o_in);   // L x d

  PbcaResult res;
  std::vector<Tensor> head_outputs;
  head_outputs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor vh = slice_cols(v, h * dh, dh);
    const Tensor th = slice_cols(t, h * dh, dh);
    const Tensor affinity = compute_affinity(vh, th);  // S x L
    PrototypeSelection sel = select_prototypes(affinity, mask, vh, trace);
    res.indices.push_back(sel.indices);
    const Tensor u = matmul(mul(th, sel.prototypes), params.w1[h]);        // L x dh
    const Tensor z = add(mul(l2_normalize(u, 1), params.beta[h]), sel.prototypes);
    head_outputs.push_back(z);
  }
  const Tensor z_concat = concat_cols(head_outputs);      // L x d
  const Tensor delta = matmul(z_concat, params.w2);       // L x D
  res.queries = with_residual ? add(delta, o_in) : delta;
  return res;
}

// fallback rule applied at the value level: any query row that is entirely
// -inf is replaced by zeros before entering the softmax path
Tensor sanitize_mask_rows(const Tensor& mask) {
  const std::size_t l = mask.extent(0), s = mask.extent(1);
  Tensor out = mask.detached();
  double* p = out.data();
  for (std::size_t q = 0; q < l; ++q) {
    bool any_open = false;
    for (std::size_t i = 0; i < s; ++i) {
      if (p[q * s + i] == 0.0) {
        any_open = true;
        break;
      }
    }
    if (!any_open) {
      for (std::size_t i = 0; i < s; ++i) p[q * s + i] = 0.0;
    }
  }
  return out;
}

Tensor standard_core(const Tensor& o_in, const Tensor& r_s, const AttentionMask& mask, const PbcaParams& params,
                     bool with_residual) {
  const std::size_t heads = params.heads;
  const std::size_t d = params.proj_dim();
  if (heads == 0 || d % heads != 0) {
    throw std::invalid_argument("standard attention: projection width " + std::to_string(d) +
                                " not divisible by " + std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  const Tensor tokens = flatten_tokens(r_s);
  const Tensor v = apply_linear(params.key_proj, tokens);     // S x d
  const Tensor t = apply_linear(params.query_proj, o_in);     // L x d
  const Tensor vv = apply_linear(params.value_proj, tokens);  // S x d
  const Tensor gate = sanitize_mask_rows(mask.values);        // L x S

  std::vector<Tensor> head_outputs;
  head_outputs.reserve(heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor vh = slice_cols(v, h * dh, dh);
    const Tensor th = slice_cols(t, h * dh, dh);
    const Tensor vvh = slice_cols(vv, h * dh, dh);
    const Tensor scores = add(mul(matmul(th, transpose2d(vh)), scale), gate);  // L x S
    const Tensor attn = softmax(scores, 1);
    head_outputs.push_back(matmul(attn, vvh));  // L x dh
  }
  const Tensor delta = matmul(concat_cols(head_outputs), params.w2);
  return with_residual ? add(delta, o_in) : delta;
}

}  // namespace

PbcaResult pbca_forward(const Tensor& o_in, const Tensor& r_s, const AttentionMask& mask, const PbcaParams& params,
                        DecisionTrace* trace) {
  return pbca_core(o_in, r_s, mask, params, trace, true);
}

PbcaResult pbca_update(const Tensor& o_in, const Tensor& r_s, const AttentionMask& mask, const PbcaParams& params,
                       DecisionTrace* trace) {
  return pbca_core(o_in, r_s, mask, params, trace, false);
}

Tensor standard_masked_cross_attention(const Tensor& o_in, const Tensor& r_s, const AttentionMask& mask,
                                       const PbcaParams& params) {
  return standard_core(o_in, r_s, mask, params, true);
}

Tensor standard_attention_update(const Tensor& o_in, const Tensor& r_s, const AttentionMask& mask,
                                 const PbcaParams& params) {
  return standard_core(o_in, r_s, mask, params, false);
}

AttentionMask build_attention_mask(const Tensor& prev_mask_logits, std::size_t h_s, std::size_t w_s,
                                   DecisionTrace* trace) {
  if (prev_mask_logits.rank() != 3) {
    throw std::invalid_argument("build_attention_mask: expected L x h x w, got " + shape_str(prev_mask_logits.shape()));
  }
  const std::size_t l = prev_mask_logits.extent(0);
  const Tensor resized = bilinear_resize_values(prev_mask_logits.detached(), h_s, w_s);
  const std::size_t s = h_s * w_s;
  Tensor values(Shape{l, s});
  const double* p = resized.data();
  double* out = values.data();
  for (std::size_t q = 0; q < l; ++q) {
    bool any_open = false;
    for (std::size_t i = 0; i < s; ++i) {
      const double logit = p[q * s + i];
      const bool fg = logit > 0.0;  // sigmoid(logit) > 0.5
      out[q * s + i] = fg ? 0.0 : kNegInf;
      any_open = any_open || fg;
      if (trace) {
        trace->add_bit(fg);
        trace->note_margin(std::abs(logit));
      }
    }
    if (!any_open) {
      for (std::size_t i = 0; i < s; ++i) out[q * s + i] = 0.0;
    }
  }
  return AttentionMask{values};
}

Tensor self_attention_update(const Tensor& x, const SelfAttentionParams& p) {
  const std::size_t d = x.extent(1);
  if (p.heads == 0 || d % p.heads != 0) {
    throw std::invalid_argument("self attention: width " + std::to_string(d) + " not divisible by " +
                                std::to_string(p.heads) + " heads");
  }
  const std::size_t dh = d / p.heads;
  const Tensor q = apply_linear(p.q, x);
  const Tensor k = apply_linear(p.k, x);
  const Tensor v = apply_linear(p.v, x);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> heads;
  heads.reserve(p.heads);
  for (std::size_t h = 0; h < p.heads; ++h) {
    const Tensor qh = slice_cols(q, h * dh, dh);
    const Tensor kh = slice_cols(k, h * dh, dh);
    const Tensor vh = slice_cols(v, h * dh, dh);
    const Tensor attn = softmax(mul(matmul(qh, transpose2d(kh)), scale), 1);
    heads.push_back(matmul(attn, vh));
  }
  return apply_linear(p.o, concat_cols(heads));
}

Tensor decoder_layer(const Tensor& o_in, const Tensor& r_s, const AttentionMask& mask,
                     const DecoderLayerParams& params, DecisionTrace* trace) {
  Tensor x = o_in;
  const Tensor pre_cross = apply_layer_norm(params.norm_cross, x);
  const Tensor cross = params.use_pbca ? pbca_update(pre_cross, r_s, mask, params.cross, trace).queries
                                       : standard_attention_update(pre_cross, r_s, mask, params.cross);
  x = add(x, cross);
  x = add(x, self_attention_update(apply_layer_norm(params.norm_self, x), params.self_attn));
  const Tensor pre_ffn = apply_layer_norm(params.norm_ffn, x);
  x = add(x, apply_linear(params.ffn.fc2, relu(apply_linear(params.ffn.fc1, pre_ffn))));
  return x;
}

}  // namespace pbseg
