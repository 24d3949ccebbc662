#pragma once

// Dense 64-bit float tensor with tape-based reverse-mode differentiation.
//
// Tensors are cheap shared handles onto a storage node (shape, values, grad).
// Operations in ops.hpp record a backward step onto the thread-active Tape;
// Tape::backward replays the steps in exact reverse execution order,
// accumulating adjoints (+=) and flushing them into the .grad slot of every
// tensor that requires_grad. Running ops with no active tape is plain forward
// evaluation.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace pbseg {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized on first accumulation, same length as value
  bool requires_grad = false;

  // scratch adjoint for the reverse sweep in flight; valid iff stamp matches
  std::vector<double> adjoint;
  std::uint64_t adjoint_stamp = 0;
};

class Tensor {
 public:
  Tensor() : n_(std::make_shared<TensorNode>()) {}
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor(Shape{1}, {v}); }
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor full(Shape shape, double v) { return Tensor(std::move(shape), v); }
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0);
  static Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi);

  const Shape& shape() const { return n_->shape; }
  std::size_t rank() const { return n_->shape.size(); }
  std::size_t numel() const { return n_->value.size(); }
  std::size_t extent(std::size_t axis) const { return n_->shape.at(axis); }

  double* data() { return n_->value.data(); }
  const double* data() const { return n_->value.data(); }
  std::vector<double>& values() { return n_->value; }
  const std::vector<double>& values() const { return n_->value; }

  // row-major element access, e.g. t(c, y, x)
  template <class... Ix>
  double& operator()(Ix... ix) {
    return n_->value[offset({static_cast<std::size_t>(ix)...})];
  }
  template <class... Ix>
  double operator()(Ix... ix) const {
    return n_->value[offset({static_cast<std::size_t>(ix)...})];
  }

  double item() const;

  bool requires_grad() const { return n_->requires_grad; }
  Tensor& set_requires_grad(bool rg);

  // gradient buffer; zero-sized until a backward sweep has reached this tensor
  std::vector<double>& grad() { return n_->grad; }
  const std::vector<double>& grad() const { return n_->grad; }
  void zero_grad();

  bool all_finite() const;

  // detached copy of the current values (no grad lineage)
  Tensor detached() const { return Tensor(n_->shape, n_->value); }

  const std::shared_ptr<TensorNode>& node() const { return n_; }

 private:
  std::size_t offset(std::initializer_list<std::size_t> ix) const;
  std::shared_ptr<TensorNode> n_;
};

// Adjoint access for backward steps. Adjoints live in the tensor nodes but are
// only meaningful for the sweep whose stamp they carry.
class BackwardContext {
 public:
  explicit BackwardContext(std::uint64_t stamp) : stamp_(stamp) {}

  // adjoint of a node if this sweep has touched it, else nullptr (treat as 0)
  const double* read(TensorNode* n) const {
    return n->adjoint_stamp == stamp_ ? n->adjoint.data() : nullptr;
  }
  // adjoint buffer for accumulation, zero-filled on first touch
  double* accum(TensorNode* n);

  const std::vector<TensorNode*>& touched() const { return touched_; }

 private:
  std::uint64_t stamp_;
  std::vector<TensorNode*> touched_;
};

// ComputationRecord: the ordered list of executed differentiable operations.
// One Tape is active per thread at a time (constructor installs, destructor
// restores the previous one). backward() may be called more than once; grads
// accumulate across calls.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(std::function<void(BackwardContext&)> step) {
    steps_.push_back(std::move(step));
  }
  std::size_t size() const { return steps_.size(); }

  void backward(const Tensor& loss);

 private:
  std::vector<std::function<void(BackwardContext&)>> steps_;
  Tape* prev_;
};

// FLOP accounting. Ops charge their documented cost to the thread-active
// counter; with no counter installed the charge is a no-op. Convention:
// a multiply-accumulate is 2 FLOPs, element-wise/activation passes are
// 1 FLOP per element per pass (see flop_cost.hpp for the per-op formulas).
class FlopCounter {
 public:
  FlopCounter();
  ~FlopCounter();
  FlopCounter(const FlopCounter&) = delete;
  FlopCounter& operator=(const FlopCounter&) = delete;

  std::uint64_t count() const { return count_; }
  void reset() { count_ = 0; }

  static void charge(std::uint64_t flops);

 private:
  std::uint64_t count_ = 0;
  FlopCounter* prev_;
};

}  // namespace pbseg
