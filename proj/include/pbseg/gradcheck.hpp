#pragma once

// Central finite-difference verification of recorded gradients. The check
// runs one backward pass, then probes random coordinates of the listed
// tensors with symmetric steps and compares against the stored grads.
//
// The loss of the larger components is only piecewise-smooth (argmax picks,
// mask thresholds, matching). The forward callback fills a DecisionTrace; a
// probe whose +/-h evaluations land on a different piece (trace hash change)
// is resampled, and the instance's base min_margin is reported so callers
// can reject setups that sit too close to a boundary.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pbseg/decisions.hpp"
#include "pbseg/tensor.hpp"

namespace pbseg {

struct GradCheckSpec {
  std::vector<Tensor> tensors;  // probed tensors; all must require grad
  // rebuilds the loss from current tensor values; may ignore the trace
  std::function<Tensor(DecisionTrace*)> forward;
  bool track_decisions = false;
  std::size_t probes_per_tensor = 10;
  double step = 1e-5;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t probes = 0;
  std::size_t skipped = 0;  // probes resampled because a decision flipped
  double min_margin = 0.0;  // of the base forward pass
};

GradCheckResult finite_diff_check(const GradCheckSpec& spec);

// |a - n| / max(1, |a|, |n|)
double rel_err(double analytic, double numeric);

}  // namespace pbseg
