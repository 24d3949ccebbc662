#include "pbseg/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>

namespace pbseg {

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

static void check_shape(const Shape& s) {
  if (s.empty()) throw std::invalid_argument("tensor shape must have at least one axis");
  for (std::size_t e : s) {
    if (e == 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_str(s));
  }
}

Tensor::Tensor(Shape shape, double fill) : n_(std::make_shared<TensorNode>()) {
  check_shape(shape);
  n_->shape = std::move(shape);
  n_->value.assign(shape_numel(n_->shape), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : n_(std::make_shared<TensorNode>()) {
  check_shape(shape);
  if (shape_numel(shape) != data.size()) {
    throw std::invalid_argument("data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  }
  n_->shape = std::move(shape);
  n_->value = std::move(data);
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.n_->value) v = dist(rng);
  return t;
}

Tensor Tensor::uniform(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : t.n_->value) v = dist(rng);
  return t;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw std::invalid_argument("item() expects a scalar tensor, got shape " + shape_str(shape()));
  }
  return n_->value[0];
}

Tensor& Tensor::set_requires_grad(bool rg) {
  n_->requires_grad = rg;
  return *this;
}

void Tensor::zero_grad() {
  if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
}

bool Tensor::all_finite() const {
  for (double v : n_->value) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::size_t Tensor::offset(std::initializer_list<std::size_t> ix) const {
  const Shape& s = n_->shape;
  if (ix.size() != s.size()) {
    throw std::out_of_range("index rank " + std::to_string(ix.size()) + " vs tensor " + shape_str(s));
  }
  std::size_t off = 0, axis = 0;
  for (std::size_t i : ix) {
    off = off * s[axis] + i;
    ++axis;
  }
  return off;
}

double* BackwardContext::accum(TensorNode* n) {
  if (n->adjoint_stamp != stamp_) {
    n->adjoint.assign(n->value.size(), 0.0);
    n->adjoint_stamp = stamp_;
    touched_.push_back(n);
  }
  return n->adjoint.data();
}

namespace {
thread_local Tape* g_active_tape = nullptr;
thread_local FlopCounter* g_active_flops = nullptr;
std::atomic<std::uint64_t> g_sweep_stamp{1};
}  // namespace

Tape::Tape() : prev_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward() expects a scalar loss, got shape " + shape_str(loss.shape()));
  }
  BackwardContext ctx(g_sweep_stamp.fetch_add(1, std::memory_order_relaxed));
  ctx.accum(loss.node().get())[0] = 1.0;
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)(ctx);
  for (TensorNode* n : ctx.touched()) {
    if (n->requires_grad) {
      if (n->grad.size() != n->value.size()) n->grad.assign(n->value.size(), 0.0);
      for (std::size_t i = 0; i < n->adjoint.size(); ++i) n->grad[i] += n->adjoint[i];
    }
    n->adjoint.clear();
    n->adjoint.shrink_to_fit();
  }
}

FlopCounter::FlopCounter() : prev_(g_active_flops) { g_active_flops = this; }

FlopCounter::~FlopCounter() { g_active_flops = prev_; }

void FlopCounter::charge(std::uint64_t flops) {
  if (g_active_flops) g_active_flops->count_ += flops;
}

}  // namespace pbseg
