#include "pbseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "pbseg/flop_cost.hpp"

namespace pbseg {

namespace {

bool want_tape(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::active()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

bool any_grad(std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

[[noreturn]] void dim_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

// Right-aligned broadcast plan: per-output-axis element strides into each
// input, zero where the input axis is stretched.
struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;
  bool same = false;
};

BroadcastPlan make_broadcast_plan(const char* op, const Shape& a, const Shape& b) {
  BroadcastPlan p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  p.out.resize(rank);
  std::vector<std::size_t> ea(rank, 1), eb(rank, 1);
  for (std::size_t i = 0; i < a.size(); ++i) ea[rank - a.size() + i] = a[i];
  for (std::size_t i = 0; i < b.size(); ++i) eb[rank - b.size() + i] = b[i];
  for (std::size_t i = 0; i < rank; ++i) {
    if (ea[i] == eb[i]) {
      p.out[i] = ea[i];
    } else if (ea[i] == 1 || eb[i] == 1) {
      p.out[i] = std::max(ea[i], eb[i]);
    } else {
      dim_error(op, a, b);
    }
  }
  p.stride_a.assign(rank, 0);
  p.stride_b.assign(rank, 0);
  std::size_t sa = 1, sb = 1;
  for (std::size_t i = rank; i-- > 0;) {
    p.stride_a[i] = (ea[i] == 1) ? 0 : sa;
    p.stride_b[i] = (eb[i] == 1) ? 0 : sb;
    sa *= ea[i];
    sb *= eb[i];
  }
  return p;
}

// Calls fn(out_index, a_index, b_index) for every output element.
template <class Fn>
void for_each_broadcast(const BroadcastPlan& p, Fn&& fn) {
  const std::size_t rank = p.out.size();
  std::vector<std::size_t> ix(rank, 0);
  std::size_t oa = 0, ob = 0;
  const std::size_t total = shape_numel(p.out);
  for (std::size_t o = 0; o < total; ++o) {
    fn(o, oa, ob);
    for (std::size_t i = rank; i-- > 0;) {
      ++ix[i];
      oa += p.stride_a[i];
      ob += p.stride_b[i];
      if (ix[i] < p.out[i]) break;
      ix[i] = 0;
      oa -= p.stride_a[i] * p.out[i];
      ob -= p.stride_b[i] * p.out[i];
    }
  }
}

enum class EwKind { Add, Sub, Mul, Div };

Tensor elemwise_binary(const char* name, EwKind kind, const Tensor& a, const Tensor& b) {
  BroadcastPlan plan = make_broadcast_plan(name, a.shape(), b.shape());
  Tensor out(plan.out);
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  auto apply = [kind](double x, double y) {
    switch (kind) {
      case EwKind::Add: return x + y;
      case EwKind::Sub: return x - y;
      case EwKind::Mul: return x * y;
      case EwKind::Div: return x / y;
    }
    return 0.0;
  };
  if (plan.same) {
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) po[i] = apply(pa[i], pb[i]);
  } else {
    for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) { po[o] = apply(pa[ia], pb[ib]); });
  }
  FlopCounter::charge(flop_cost::elemwise(out.numel()));

  out.set_requires_grad(any_grad({&a, &b}));
  if (want_tape({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape::active()->record([an, bn, on, plan, kind](BackwardContext& ctx) {
      const double* d = ctx.read(on.get());
      if (!d) return;
      double* ga = an->requires_grad ? ctx.accum(an.get()) : nullptr;
      double* gb = bn->requires_grad ? ctx.accum(bn.get()) : nullptr;
      const double* va = an->value.data();
      const double* vb = bn->value.data();
      auto step = [&](std::size_t o, std::size_t ia, std::size_t ib) {
        switch (kind) {
          case EwKind::Add:
            if (ga) ga[ia] += d[o];
            if (gb) gb[ib] += d[o];
            break;
          case EwKind::Sub:
            if (ga) ga[ia] += d[o];
            if (gb) gb[ib] -= d[o];
            break;
          case EwKind::Mul:
            if (ga) ga[ia] += d[o] * vb[ib];
            if (gb) gb[ib] += d[o] * va[ia];
            break;
          case EwKind::Div:
            if (ga) ga[ia] += d[o] / vb[ib];
            if (gb) gb[ib] -= d[o] * va[ia] / (vb[ib] * vb[ib]);
            break;
        }
      };
      if (plan.same) {
        const std::size_t n = on->value.size();
        for (std::size_t i = 0; i < n; ++i) step(i, i, i);
      } else {
        for_each_broadcast(plan, step);
      }
    });
  }
  return out;
}

// outer x axis x inner decomposition for axis-wise ops
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit axis_split(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw std::invalid_argument(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  AxisSplit sp;
  for (std::size_t i = 0; i < axis; ++i) sp.outer *= s[i];
  sp.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) sp.inner *= s[i];
  return sp;
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) dim_error("matmul", a.shape(), b.shape());
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor out(Shape{m, n});
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = po + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      const double ail = pa[i * k + l];
      if (ail == 0.0) continue;
      const double* brow = pb + l * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += ail * brow[j];
    }
  }
  FlopCounter::charge(flop_cost::matmul(m, k, n));

  out.set_requires_grad(any_grad({&a, &b}));
  if (want_tape({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape::active()->record([an, bn, on, m, k, n](BackwardContext& ctx) {
      const double* d = ctx.read(on.get());
      if (!d) return;
      if (an->requires_grad) {
        double* ga = ctx.accum(an.get());
        const double* vb = bn->value.data();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t l = 0; l < k; ++l) {
            double acc = 0.0;
            const double* drow = d + i * n;
            const double* brow = vb + l * n;
            for (std::size_t j = 0; j < n; ++j) acc += drow[j] * brow[j];
            ga[i * k + l] += acc;
          }
        }
      }
      if (bn->requires_grad) {
        double* gb = ctx.accum(bn.get());
        const double* va = an->value.data();
        for (std::size_t i = 0; i < m; ++i) {
          const double* drow = d + i * n;
          for (std::size_t l = 0; l < k; ++l) {
            const double ail = va[i * k + l];
            if (ail == 0.0) continue;
            double* grow = gb + l * n;
            for (std::size_t j = 0; j < n; ++j) grow[j] += ail * drow[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor transpose2d(const Tensor& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose2d: expected 2-D, got " + shape_str(a.shape()));
  const std::size_t m = a.extent(0), n = a.extent(1);
  Tensor out(Shape{n, m});
  const double* pa = a.data();
  double* po = out.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) po[j * m + i] = pa[i * n + j];

  out.set_requires_grad(a.requires_grad());
  if (want_tape({&a})) {
    auto an = a.node(), on = out.node();
    Tape::active()->record([an, on, m, n](BackwardContext& ctx) {
      const double* d = ctx.read(on.get());
      if (!d) return;
      double* ga = ctx.accum(an.get());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += d[j * m + i];
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return elemwise_binary("add", EwKind::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elemwise_binary("sub", EwKind::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elemwise_binary("mul", EwKind::Mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return elemwise_binary("div", EwKind::Div, a, b); }

namespace {

Tensor elemwise_scalar(const Tensor& a, double scale, double shift) {
  // out = scale * a + shift
  Tensor out(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) po[i] = scale * pa[i] + shift;
  FlopCounter::charge(flop_cost::elemwise(n));

  out.set_requires_grad(a.requires_grad());
  if (want_tape({&a})) {
    auto an = a.node(), on = out.node();
    Tape::active()->record([an, on, scale, n](BackwardContext& ctx) {
      const double* d = ctx.read(on.get());
      if (!d) return;
      double* ga = ctx.accum(an.get());
      for (std::size_t i = 0; i < n; ++i) ga[i] += scale * d[i];
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, double s) { return elemwise_scalar(a, 1.0, s); }
Tensor sub(const Tensor& a, double s) { return elemwise_scalar(a, 1.0, -s); }
Tensor mul(const Tensor& a, double s) { return elemwise_scalar(a, s, 0.0); }

ArgmaxResult reduce_argmax(const Tensor& t, std::size_t axis) {
  const AxisSplit sp = axis_split(t.shape(), axis, "reduce_argmax");
  Shape out_shape;
  for (std::size_t i = 0; i < t.rank(); ++i) {
    if (i != axis) out_shape.push_back(t.shape()[i]);
  }
  if (out_shape.empty()) out_shape.push_back(1);
  ArgmaxResult res{Tensor(out_shape), std::vector<std::size_t>(sp.outer * sp.inner)};
  const double* p = t.data();
  double* pv = res.values.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      double best = p[(o * sp.len) * sp.inner + in];
      std::size_t best_i = 0;
      for (std::size_t a = 1; a < sp.len; ++a) {
        const double v = p[(o * sp.len + a) * sp.inner + in];
        if (v > best) {
          best = v;
          best_i = a;
        }
      }
      pv[o * sp.inner + in] = best;
      res.indices[o * sp.inner + in] = best_i;
    }
  }
  FlopCounter::charge(flop_cost::argmax(t.numel()));
  return res;
}

Tensor reduce_sum(const Tensor& t) {
  double acc = 0.0;
  for (double v : t.values()) acc += v;
  Tensor out = Tensor::scalar(acc);
  FlopCounter::charge(flop_cost::elemwise(t.numel()));

  out.set_requires_grad(t.requires_grad());
  if (want_tape({&t})) {
    auto tn = t.node(), on = out.node();
    Tape::active()->record([tn, on](BackwardContext& ctx) {
      const double* d = ctx.read(on.get());
      if (!d) return;
      double* g = ctx.accum(tn.get());
      const std::size_t n = tn->value.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += d[0];
    });
  }
  return out;
}

Tensor reduce_mean(const Tensor& t) { return mul(reduce_sum(t), 1.0 / static_cast<double>(t.numel())); }

Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& rows) {
  if (t.rank() != 2) throw std::invalid_argument("gather_rows: expected 2-D, got " + shape_str(t.shape()));
  const std::size_t r = t.extent(0), c = t.extent(1);
  for (std::size_t i : rows) {
    if (i >= r) throw std::out_of_range("gather_rows: row " + std::to_string(i) + " out of " + std::to_string(r));
  }
  Tensor out(Shape{rows.size(), c});
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::memcpy(out.data() + i * c, t.data() + rows[i] * c, c * sizeof(double));

  out.set_requires_grad(t.requires_grad());
  if (want_tape({&t})) {
    auto tn = t.node(), on = out.node();
    auto idx = rows;
    Tape::active()->record([tn, on, idx, c](BackwardContext& ctx) {
      const double* d = ctx.read(on.get());
      if (!d) return;
      double* g = ctx.accum(tn.get());
      for (std::size_t i = 0; i < idx.size(); ++i) {
        double* grow = g + idx[i] * c;
        const double* drow = d + i * c;
        for (std::size_t j = 0; j < c; ++j) grow[j] += drow[j];
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& t, Shape shape) {
  if (shape_numel(shape) != t.numel()) dim_error("reshape", t.shape(), shape);
  Tensor out(std::move(shape), t.values());
  out.set_requires_grad(t.requires_grad());
  if (want_tape({&t})) {
    auto tn = t.node(), on = out.node();
    Tape::active()->record([tn, on](BackwardContext& ctx) {
      const double* d = ctx.read(on.get());
      if (!d) return;
      double* g = ctx.accum(tn.get());
      const std::size_t n = tn->value.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += d[i];
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& t, std::size_t start, std::size_t len) {
  if (t.rank() != 2 || start + len > t.extent(1)) {
    throw std::invalid_argument("slice_cols: [" + std::to_string(start) + "," + std::to_string(start + len) +
                                ") out of " + shape_str(t.shape()));
  }
  const std::size_t r = t.extent(0), c = t.extent(1);
  Tensor out(Shape{r, len});
  for (std::size_t i = 0; i < r; ++i)
    std::memcpy(out.data() + i * len, t.data() + i * c + start, len * sizeof(double));

  out.set_requires_grad(t.requires_grad());
  if (want_tape({&t})) {
    auto tn = t.node(), on = out.node();
    Tape::active()->record([tn, on, start, len, r, c](BackwardContext& ctx) {
      const double* d = ctx.read(on.get());
      if (!d) return;
      double* g = ctx.accum(tn.get());
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < len; ++j) g[i * c + start + j] += d[i * len + j];
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  const std::size_t r = parts[0].extent(0);
  std::size_t total = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.extent(0) != r) dim_error("concat_cols", parts[0].shape(), p.shape());
    total += p.extent(1);
    rg = rg || p.requires_grad();
  }
  Tensor out(Shape{r, total});
  std::size_t col = 0;
  for (const Tensor& p : parts) {
    const std::size_t c = p.extent(1);
    for (std::size_t i = 0; i < r; ++i)
      std::memcpy(out.data() + i * total + col, p.data() + i * c, c * sizeof(double));
    col += c;
  }

  out.set_requires_grad(rg);
  if (rg && Tape::active()) {
    std::vector<std::shared_ptr<TensorNode>> nodes;
    for (const Tensor& p : parts) nodes.push_back(p.node());
    auto on = out.node();
    Tape::active()->record([nodes, on, r, total](BackwardContext& ctx) {
      const double* d = ctx.read(on.get());
      if (!d) return;
      std::size_t col = 0;
      for (const auto& nd : nodes) {
        const std::size_t c = nd->shape[1];
        if (nd->requires_grad) {
          double* g = ctx.accum(nd.get());
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += d[i * total + col + j];
        }
        col += c;
      }
    });
  }
  return out;
}

Tensor slice_outer(const Tensor& t, std::size_t start, std::size_t len) {
  if (t.rank() < 1 || start + len > t.extent(0)) {
    throw std::invalid_argument("slice_outer: [" + std::to_string(start) + "," + std::to_string(start + len) +
                                ") out of " + shape_str(t.shape()));
  }
  Shape out_shape = t.shape();
  out_shape[0] = len;
  const std::size_t block = t.numel() / t.extent(0);
  Tensor out(out_shape);
  std::memcpy(out.data(), t.data() + start * block, len * block * sizeof(double));

  out.set_requires_grad(t.requires_grad());
  if (want_tape({&t})) {
    auto tn = t.node(), on = out.node();
    Tape::active()->record([tn, on, start, block, len](BackwardContext& ctx) {
      const double* d = ctx.read(on.get());
      if (!d) return;
      double* g = ctx.accum(tn.get());
      const std::size_t n = len * block;
      for (std::size_t i = 0; i < n; ++i) g[start * block + i] += d[i];
    });
  }
  return out;
}

Tensor l2_normalize(const Tensor& t, std::size_t axis, double eps) {
  if (eps <= 0) throw std::invalid_argument("l2_normalize: eps must be positive");
  const AxisSplit sp = axis_split(t.shape(), axis, "l2_normalize");
  Tensor out(t.shape());
  const double* p = t.data();
  double* po = out.data();
  // divisors saved for backward: max(||slice||, eps)
  std::vector<double> divisors(sp.outer * sp.inner);
  std::vector<char> clamped(sp.outer * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      double ss = 0.0;
      for (std::size_t a = 0; a < sp.len; ++a) {
        const double v = p[(o * sp.len + a) * sp.inner + in];
        ss += v * v;
      }
      const double norm = std::sqrt(ss);
      const bool cl = !(norm > eps);
      const double dv = cl ? eps : norm;
      divisors[o * sp.inner + in] = dv;
      clamped[o * sp.inner + in] = cl ? 1 : 0;
      for (std::size_t a = 0; a < sp.len; ++a) {
        const std::size_t k = (o * sp.len + a) * sp.inner + in;
        po[k] = p[k] / dv;
      }
    }
  }
  FlopCounter::charge(flop_cost::l2_normalize(t.numel(), sp.outer * sp.inner));

  out.set_requires_grad(t.requires_grad());
  if (want_tape({&t})) {
    auto tn = t.node(), on = out.node();
    Tape::active()->record([tn, on, sp, divisors, clamped](BackwardContext& ctx) {
      const double* d = ctx.read(on.get());
      if (!d) return;
      double* g = ctx.accum(tn.get());
      const double* x = tn->value.data();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
          const double dv = divisors[o * sp.inner + in];
          if (clamped[o * sp.inner + in]) {
            // y = x / eps: constant divisor
            for (std::size_t a = 0; a < sp.len; ++a) {
              const std::size_t k = (o * sp.len + a) * sp.inner + in;
              g[k] += d[k] / dv;
            }
          } else {
            // y = x / ||x||: J^T d = d/||x|| - x (x.d) / ||x||^3
            double xd = 0.0;
            for (std::size_t a = 0; a < sp.len; ++a) {
              const std::size_t k = (o * sp.len + a) * sp.inner + in;
              xd += x[k] * d[k];
            }
            const double inv = 1.0 / dv;
            const double inv3 = inv * inv * inv;
            for (std::size_t a = 0; a < sp.len; ++a) {
              const std::size_t k = (o * sp.len + a) * sp.inner + in;
              g[k] += d[k] * inv - x[k] * xd * inv3;
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& t) {
  Tensor out(t.shape());
  const double* p = t.data();
  double* po = out.data();
  const std::size_t n = t.numel();
  for (std::size_t i = 0; i < n; ++i) po[i] = stable_sigmoid(p[i]);
  FlopCounter::charge(flop_cost::sigmoid(n));

  out.set_requires_grad(t.requires_grad());
  if (want_tape({&t})) {
    auto tn = t.node(), on = out.node();
    Tape::active()->record([tn, on, n](BackwardContext& ctx) {
      const double* d = ctx.read(on.get());
      if (!d) return;
      double* g = ctx.accum(tn.get());
      const double* y = on->value.data();
      for (std::size_t i = 0; i < n; ++i) g[i] += d[i] * y[i] * (1.0 - y[i]);
    });
  }
  return out;
}

Tensor relu(const Tensor& t) {
  Tensor out(t.shape());
  const double* p = t.data();
  double* po = out.data();
  const std::size_t n = t.numel();
  for (std::size_t i = 0; i < n; ++i) po[i] = p[i] > 0.0 ? p[i] : 0.0;
  FlopCounter::charge(flop_cost::relu(n));

  out.set_requires_grad(t.requires_grad());
  if (want_tape({&t})) {
    auto tn = t.node(), on = out.node();
    Tape::active()->record([tn, on, n](BackwardContext& ctx) {
      const double* d = ctx.read(on.get());
      if (!d) return;
      double* g = ctx.accum(tn.get());
      const double* x = tn->value.data();
      for (std::size_t i = 0; i < n; ++i) {
        if (x[i] > 0.0) g[i] += d[i];
      }
    });
  }
  return out;
}

Tensor softmax(const Tensor& t, std::size_t axis) {
  const AxisSplit sp = axis_split(t.shape(), axis, "softmax");
  Tensor out(t.shape());
  const double* p = t.data();
  double* po = out.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      double m = p[(o * sp.len) * sp.inner + in];
      for (std::size_t a = 1; a < sp.len; ++a) m = std::max(m, p[(o * sp.len + a) * sp.inner + in]);
      double sum = 0.0;
      for (std::size_t a = 0; a < sp.len; ++a) {
        const std::size_t k = (o * sp.len + a) * sp.inner + in;
        po[k] = std::exp(p[k] - m);
        sum += po[k];
      }
      for (std::size_t a = 0; a < sp.len; ++a) po[(o * sp.len + a) * sp.inner + in] /= sum;
    }
  }
  FlopCounter::charge(flop_cost::softmax(t.numel()));

  out.set_requires_grad(t.requires_grad());
  if (want_tape({&t})) {
    auto tn = t.node(), on = out.node();
    Tape::active()->record([tn, on, sp](BackwardContext& ctx) {
      const double* d = ctx.read(on.get());
      if (!d) return;
      double* g = ctx.accum(tn.get());
      const double* y = on->value.data();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
          double dot = 0.0;
          for (std::size_t a = 0; a < sp.len; ++a) {
            const std::size_t k = (o * sp.len + a) * sp.inner + in;
            dot += d[k] * y[k];
          }
          for (std::size_t a = 0; a < sp.len; ++a) {
            const std::size_t k = (o * sp.len + a) * sp.inner + in;
            g[k] += y[k] * (d[k] - dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor layer_norm_rows(const Tensor& t, double eps) {
  if (t.rank() != 2) throw std::invalid_argument("layer_norm_rows: expected 2-D, got " + shape_str(t.shape()));
  const std::size_t r = t.extent(0), c = t.extent(1);
  Tensor out(t.shape());
  const double* p = t.data();
  double* po = out.data();
  std::vector<double> inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = p + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double dlt = row[j] - mu;
      var += dlt * dlt;
    }
    var /= static_cast<double>(c);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[i] = inv;
    for (std::size_t j = 0; j < c; ++j) po[i * c + j] = (row[j] - mu) * inv;
  }
  FlopCounter::charge(flop_cost::layer_norm(t.numel(), r));

  out.set_requires_grad(t.requires_grad());
  if (want_tape({&t})) {
    auto tn = t.node(), on = out.node();
    Tape::active()->record([tn, on, r, c, inv_std](BackwardContext& ctx) {
      const double* d = ctx.read(on.get());
      if (!d) return;
      double* g = ctx.accum(tn.get());
      const double* y = on->value.data();
      const double cn = static_cast<double>(c);
      for (std::size_t i = 0; i < r; ++i) {
        const double* drow = d + i * c;
        const double* yrow = y + i * c;
        double dsum = 0.0, dysum = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          dsum += drow[j];
          dysum += drow[j] * yrow[j];
        }
        const double inv = inv_std[i];
        for (std::size_t j = 0; j < c; ++j) {
          g[i * c + j] += inv * (drow[j] - dsum / cn - yrow[j] * dysum / cn);
        }
      }
    });
  }
  return out;
}

Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias, std::size_t stride) {
  if (input.rank() != 3 || weights.rank() != 4) dim_error("conv2d", input.shape(), weights.shape());
  const std::size_t c_in = input.extent(0), h = input.extent(1), w = input.extent(2);
  const std::size_t c_out = weights.extent(0), k = weights.extent(2);
  if (weights.extent(1) != c_in || weights.extent(3) != k) dim_error("conv2d", input.shape(), weights.shape());
  if (k != 1 && k != 3) throw std::invalid_argument("conv2d: kernel must be 1 or 3");
  if (stride != 1 && stride != 2) throw std::invalid_argument("conv2d: stride must be 1 or 2");
  const bool has_bias = bias.numel() > 0 && bias.rank() > 0 && !(bias.rank() == 1 && bias.extent(0) == 0);
  if (has_bias && (bias.rank() != 1 || bias.extent(0) != c_out)) dim_error("conv2d bias", bias.shape(), weights.shape());
  const std::size_t pad = (k - 1) / 2;
  const std::size_t h_out = (h + 2 * pad - k) / stride + 1;
  const std::size_t w_out = (w + 2 * pad - k) / stride + 1;

  Tensor out(Shape{c_out, h_out, w_out});
  const double* pin = input.data();
  const double* pw = weights.data();
  double* po = out.data();
  for (std::size_t co = 0; co < c_out; ++co) {
    double* plane = po + co * h_out * w_out;
    if (has_bias) {
      const double b = bias.data()[co];
      for (std::size_t i = 0; i < h_out * w_out; ++i) plane[i] = b;
    }
    for (std::size_t ci = 0; ci < c_in; ++ci) {
      const double* iplane = pin + ci * h * w;
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const double wv = pw[((co * c_in + ci) * k + ky) * k + kx];
          if (wv == 0.0) continue;
          for (std::size_t oy = 0; oy < h_out; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            double* orow = plane + oy * w_out;
            const double* irow = iplane + static_cast<std::size_t>(iy) * w;
            for (std::size_t ox = 0; ox < w_out; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              orow[ox] += wv * irow[static_cast<std::size_t>(ix)];
            }
          }
        }
      }
    }
  }
  FlopCounter::charge(flop_cost::conv2d(c_out, h_out, w_out, c_in, k, has_bias));

  out.set_requires_grad(any_grad({&input, &weights, &bias}));
  if (want_tape({&input, &weights, &bias})) {
    auto in_n = input.node(), w_n = weights.node(), b_n = bias.node(), on = out.node();
    Tape::active()->record([in_n, w_n, b_n, on, c_in, c_out, h, w, k, stride, pad, h_out, w_out,
                            has_bias](BackwardContext& ctx) {
      const double* d = ctx.read(on.get());
      if (!d) return;
      const double* vin = in_n->value.data();
      const double* vw = w_n->value.data();
      double* gin = in_n->requires_grad ? ctx.accum(in_n.get()) : nullptr;
      double* gw = w_n->requires_grad ? ctx.accum(w_n.get()) : nullptr;
      double* gb = (has_bias && b_n->requires_grad) ? ctx.accum(b_n.get()) : nullptr;
      for (std::size_t co = 0; co < c_out; ++co) {
        const double* dplane = d + co * h_out * w_out;
        if (gb) {
          double acc = 0.0;
          for (std::size_t i = 0; i < h_out * w_out; ++i) acc += dplane[i];
          gb[co] += acc;
        }
        for (std::size_t ci = 0; ci < c_in; ++ci) {
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
              const std::size_t widx = ((co * c_in + ci) * k + ky) * k + kx;
              const double wv = vw[widx];
              double wacc = 0.0;
              for (std::size_t oy = 0; oy < h_out; ++oy) {
                const std::ptrdiff_t iy =
                    static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                const double* drow = dplane + oy * w_out;
                const std::size_t ibase = ci * h * w + static_cast<std::size_t>(iy) * w;
                for (std::size_t ox = 0; ox < w_out; ++ox) {
                  const std::ptrdiff_t ix =
                      static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                  if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                  const std::size_t iidx = ibase + static_cast<std::size_t>(ix);
                  if (gw) wacc += drow[ox] * vin[iidx];
                  if (gin) gin[iidx] += wv * drow[ox];
                }
              }
              if (gw) gw[widx] += wacc;
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor conv2d(const Tensor& input, const Tensor& weights, std::size_t stride) {
  static const Tensor no_bias;  // rank-0 placeholder, value-less
  return conv2d(input, weights, no_bias, stride);
}

Tensor bilinear_sample(const Tensor& map, const Tensor& points) {
  if (map.rank() != 3) throw std::invalid_argument("bilinear_sample: map must be C x H x W, got " + shape_str(map.shape()));
  if (points.rank() != 2 || points.extent(1) != 2) {
    throw std::invalid_argument("bilinear_sample: points must be P x 2, got " + shape_str(points.shape()));
  }
  const std::size_t c = map.extent(0), h = map.extent(1), w = map.extent(2);
  const std::size_t np = points.extent(0);
  Tensor out(Shape{c, np});
  const double* pm = map.data();
  const double* pp = points.data();
  double* po = out.data();

  auto fetch = [&](std::size_t ch, std::ptrdiff_t y, std::ptrdiff_t x) -> double {
    if (y < 0 || y >= static_cast<std::ptrdiff_t>(h) || x < 0 || x >= static_cast<std::ptrdiff_t>(w)) return 0.0;
    return pm[ch * h * w + static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)];
  };

  for (std::size_t p = 0; p < np; ++p) {
    const double y = pp[p * 2 + 0];
    const double x = pp[p * 2 + 1];
    const double fy0 = std::floor(y), fx0 = std::floor(x);
    const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(fy0), x0 = static_cast<std::ptrdiff_t>(fx0);
    const double ty = y - fy0, tx = x - fx0;
    const double w00 = (1 - ty) * (1 - tx), w01 = (1 - ty) * tx, w10 = ty * (1 - tx), w11 = ty * tx;
    for (std::size_t ch = 0; ch < c; ++ch) {
      po[ch * np + p] = w00 * fetch(ch, y0, x0) + w01 * fetch(ch, y0, x0 + 1) + w10 * fetch(ch, y0 + 1, x0) +
                        w11 * fetch(ch, y0 + 1, x0 + 1);
    }
  }
  FlopCounter::charge(flop_cost::bilinear_sample(c, np));

  out.set_requires_grad(any_grad({&map, &points}));
  if (want_tape({&map, &points})) {
    auto mn = map.node(), pn = points.node(), on = out.node();
    Tape::active()->record([mn, pn, on, c, h, w, np](BackwardContext& ctx) {
      const double* d = ctx.read(on.get());
      if (!d) return;
      const double* pm = mn->value.data();
      const double* pp = pn->value.data();
      double* gm = mn->requires_grad ? ctx.accum(mn.get()) : nullptr;
      double* gp = pn->requires_grad ? ctx.accum(pn.get()) : nullptr;
      auto in_range = [&](std::ptrdiff_t y, std::ptrdiff_t x) {
        return y >= 0 && y < static_cast<std::ptrdiff_t>(h) && x >= 0 && x < static_cast<std::ptrdiff_t>(w);
      };
      auto fetch = [&](std::size_t ch, std::ptrdiff_t y, std::ptrdiff_t x) -> double {
        return in_range(y, x) ? pm[ch * h * w + static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] : 0.0;
      };
      for (std::size_t p = 0; p < np; ++p) {
        const double y = pp[p * 2 + 0];
        const double x = pp[p * 2 + 1];
        const double fy0 = std::floor(y), fx0 = std::floor(x);
        const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(fy0), x0 = static_cast<std::ptrdiff_t>(fx0);
        const double ty = y - fy0, tx = x - fx0;
        double dy_acc = 0.0, dx_acc = 0.0;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double dv = d[ch * np + p];
          if (dv == 0.0 && !gp) continue;
          const double v00 = fetch(ch, y0, x0), v01 = fetch(ch, y0, x0 + 1);
          const double v10 = fetch(ch, y0 + 1, x0), v11 = fetch(ch, y0 + 1, x0 + 1);
          if (gm) {
            auto scatter = [&](std::ptrdiff_t yy, std::ptrdiff_t xx, double wgt) {
              if (in_range(yy, xx))
                gm[ch * h * w + static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)] += dv * wgt;
            };
            scatter(y0, x0, (1 - ty) * (1 - tx));
            scatter(y0, x0 + 1, (1 - ty) * tx);
            scatter(y0 + 1, x0, ty * (1 - tx));
            scatter(y0 + 1, x0 + 1, ty * tx);
          }
          if (gp) {
            dy_acc += dv * (-(1 - tx) * v00 - tx * v01 + (1 - tx) * v10 + tx * v11);
            dx_acc += dv * (-(1 - ty) * v00 + (1 - ty) * v01 - ty * v10 + ty * v11);
          }
        }
        if (gp) {
          gp[p * 2 + 0] += dy_acc;
          gp[p * 2 + 1] += dx_acc;
        }
      }
    });
  }
  return out;
}

namespace {

// shared kernel for the x2 upsample and the value-level resize
void bilinear_resize_plain(const double* src, std::size_t c, std::size_t h, std::size_t w, double* dst,
                           std::size_t oh, std::size_t ow) {
  const double sy_scale = static_cast<double>(h) / static_cast<double>(oh);
  const double sx_scale = static_cast<double>(w) / static_cast<double>(ow);
  for (std::size_t oy = 0; oy < oh; ++oy) {
    double sy = (static_cast<double>(oy) + 0.5) * sy_scale - 0.5;
    sy = std::min(std::max(sy, 0.0), static_cast<double>(h - 1));
    const std::size_t y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t ox = 0; ox < ow; ++ox) {
      double sx = (static_cast<double>(ox) + 0.5) * sx_scale - 0.5;
      sx = std::min(std::max(sx, 0.0), static_cast<double>(w - 1));
      const std::size_t x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - static_cast<double>(x0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* pl = src + ch * h * w;
        const double v = (1 - fy) * ((1 - fx) * pl[y0 * w + x0] + fx * pl[y0 * w + x1]) +
                         fy * ((1 - fx) * pl[y1 * w + x0] + fx * pl[y1 * w + x1]);
        dst[ch * oh * ow + oy * ow + ox] = v;
      }
    }
  }
}

}  // namespace

Tensor upsample_bilinear_2x(const Tensor& map) {
  if (map.rank() != 3) throw std::invalid_argument("upsample_bilinear_2x: expected C x H x W, got " + shape_str(map.shape()));
  const std::size_t c = map.extent(0), h = map.extent(1), w = map.extent(2);
  const std::size_t oh = 2 * h, ow = 2 * w;
  Tensor out(Shape{c, oh, ow});
  bilinear_resize_plain(map.data(), c, h, w, out.data(), oh, ow);
  FlopCounter::charge(flop_cost::upsample_bilinear_2x(out.numel()));

  out.set_requires_grad(map.requires_grad());
  if (want_tape({&map})) {
    auto mn = map.node(), on = out.node();
    Tape::active()->record([mn, on, c, h, w, oh, ow](BackwardContext& ctx) {
      const double* d = ctx.read(on.get());
      if (!d) return;
      double* g = ctx.accum(mn.get());
      for (std::size_t oy = 0; oy < oh; ++oy) {
        double sy = (static_cast<double>(oy) + 0.5) * 0.5 - 0.5;
        sy = std::min(std::max(sy, 0.0), static_cast<double>(h - 1));
        const std::size_t y0 = static_cast<std::size_t>(sy);
        const std::size_t y1 = std::min(y0 + 1, h - 1);
        const double fy = sy - static_cast<double>(y0);
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double sx = (static_cast<double>(ox) + 0.5) * 0.5 - 0.5;
          sx = std::min(std::max(sx, 0.0), static_cast<double>(w - 1));
          const std::size_t x0 = static_cast<std::size_t>(sx);
          const std::size_t x1 = std::min(x0 + 1, w - 1);
          const double fx = sx - static_cast<double>(x0);
          for (std::size_t ch = 0; ch < c; ++ch) {
            const double dv = d[ch * oh * ow + oy * ow + ox];
            double* pl = g + ch * h * w;
            pl[y0 * w + x0] += dv * (1 - fy) * (1 - fx);
            pl[y0 * w + x1] += dv * (1 - fy) * fx;
            pl[y1 * w + x0] += dv * fy * (1 - fx);
            pl[y1 * w + x1] += dv * fy * fx;
          }
        }
      }
    });
  }
  return out;
}

Tensor global_avg_pool(const Tensor& map) {
  if (map.rank() != 3) throw std::invalid_argument("global_avg_pool: expected C x H x W, got " + shape_str(map.shape()));
  const std::size_t c = map.extent(0), h = map.extent(1), w = map.extent(2);
  const double inv = 1.0 / static_cast<double>(h * w);
  Tensor out(Shape{c, 1, 1});
  const double* p = map.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    const double* plane = p + ch * h * w;
    for (std::size_t i = 0; i < h * w; ++i) acc += plane[i];
    out.data()[ch] = acc * inv;
  }
  FlopCounter::charge(flop_cost::global_avg_pool(map.numel(), c));

  out.set_requires_grad(map.requires_grad());
  if (want_tape({&map})) {
    auto mn = map.node(), on = out.node();
    Tape::active()->record([mn, on, c, h, w, inv](BackwardContext& ctx) {
      const double* d = ctx.read(on.get());
      if (!d) return;
      double* g = ctx.accum(mn.get());
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double dv = d[ch] * inv;
        double* plane = g + ch * h * w;
        for (std::size_t i = 0; i < h * w; ++i) plane[i] += dv;
      }
    });
  }
  return out;
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  if (logits.shape() != targets.shape()) dim_error("bce_with_logits", logits.shape(), targets.shape());
  const std::size_t n = logits.numel();
  Tensor out(logits.shape());
  const double* x = logits.data();
  const double* g = targets.data();
  double* po = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    po[i] = std::max(x[i], 0.0) - x[i] * g[i] + std::log1p(std::exp(-std::abs(x[i])));
  }
  FlopCounter::charge(flop_cost::bce_with_logits(n));

  out.set_requires_grad(logits.requires_grad());
  if (want_tape({&logits})) {
    auto ln = logits.node(), tn = targets.node(), on = out.node();
    Tape::active()->record([ln, tn, on, n](BackwardContext& ctx) {
      const double* d = ctx.read(on.get());
      if (!d) return;
      double* gl = ctx.accum(ln.get());
      const double* x = ln->value.data();
      const double* t = tn->value.data();
      for (std::size_t i = 0; i < n; ++i) gl[i] += d[i] * (stable_sigmoid(x[i]) - t[i]);
    });
  }
  return out;
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<std::size_t>& labels,
                          const std::vector<double>& row_weights) {
  if (logits.rank() != 2) throw std::invalid_argument("cross_entropy_rows: expected 2-D, got " + shape_str(logits.shape()));
  const std::size_t r = logits.extent(0), c = logits.extent(1);
  if (labels.size() != r || row_weights.size() != r) {
    throw std::invalid_argument("cross_entropy_rows: labels/weights must have one entry per row");
  }
  double wsum = 0.0;
  for (double w : row_weights) wsum += w;
  if (wsum <= 0.0) throw std::invalid_argument("cross_entropy_rows: weights must sum to a positive value");
  const double* x = logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    if (labels[i] >= c) throw std::out_of_range("cross_entropy_rows: label out of range");
    const double* row = x + i * c;
    double m = row[0];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - m);
    total += row_weights[i] * (m + std::log(s) - row[labels[i]]);
  }
  Tensor out = Tensor::scalar(total / wsum);
  FlopCounter::charge(flop_cost::cross_entropy(r, c));

  out.set_requires_grad(logits.requires_grad());
  if (want_tape({&logits})) {
    auto ln = logits.node(), on = out.node();
    auto lab = labels;
    auto wts = row_weights;
    Tape::active()->record([ln, on, lab, wts, wsum, r, c](BackwardContext& ctx) {
      const double* d = ctx.read(on.get());
      if (!d) return;
      double* g = ctx.accum(ln.get());
      const double* x = ln->value.data();
      for (std::size_t i = 0; i < r; ++i) {
        const double* row = x + i * c;
        double m = row[0];
        for (std::size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - m);
        const double scale = d[0] * wts[i] / wsum;
        for (std::size_t j = 0; j < c; ++j) {
          const double p = std::exp(row[j] - m) / s;
          g[i * c + j] += scale * (p - (j == lab[i] ? 1.0 : 0.0));
        }
      }
    });
  }
  return out;
}

Tensor bilinear_resize_values(const Tensor& map, std::size_t out_h, std::size_t out_w) {
  if (map.rank() != 3) throw std::invalid_argument("bilinear_resize_values: expected C x H x W, got " + shape_str(map.shape()));
  Tensor out(Shape{map.extent(0), out_h, out_w});
  bilinear_resize_plain(map.data(), map.extent(0), map.extent(1), map.extent(2), out.data(), out_h, out_w);
  FlopCounter::charge(flop_cost::upsample_bilinear_2x(out.numel()));
  return out;
}

void backward(Tape& tape, const Tensor& loss) { tape.backward(loss); }

}  // namespace pbseg
