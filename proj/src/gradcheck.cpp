#include "pbseg/gradcheck.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace pbseg {

double rel_err(double analytic, double numeric) {
  const double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
  return std::abs(analytic - numeric) / denom;
}

GradCheckResult finite_diff_check(const GradCheckSpec& spec) {
  if (!spec.forward) throw std::invalid_argument("finite_diff_check: no forward function");
  for (const Tensor& t : spec.tensors) {
    if (!t.requires_grad()) throw std::invalid_argument("finite_diff_check: probed tensor must require grad");
  }

  GradCheckResult res;
  DecisionTrace base;

  // analytic gradients from one recorded pass
  std::vector<std::vector<double>> analytic;
  {
    for (Tensor t : spec.tensors) t.zero_grad();
    Tape tape;
    Tensor loss = spec.forward(spec.track_decisions ? &base : nullptr);
    tape.backward(loss);
    for (const Tensor& t : spec.tensors) {
      if (t.grad().empty()) {
        analytic.emplace_back(t.numel(), 0.0);
      } else {
        analytic.push_back(t.grad());
      }
    }
    for (Tensor t : spec.tensors) t.zero_grad();
  }
  res.min_margin = base.min_margin;

  std::mt19937_64 rng(spec.seed);
  const double h = spec.step;
  auto probe_value = [&](bool* flipped) {
    if (!spec.track_decisions) return spec.forward(nullptr).item();
    DecisionTrace trace;
    const double v = spec.forward(&trace).item();
    if (trace.hash != base.hash) *flipped = true;
    return v;
  };

  for (std::size_t ti = 0; ti < spec.tensors.size(); ++ti) {
    Tensor t = spec.tensors[ti];
    std::uniform_int_distribution<std::size_t> pick(0, t.numel() - 1);
    const std::size_t want = std::min(spec.probes_per_tensor, t.numel());
    std::size_t done = 0, attempts = 0;
    while (done < want && attempts < want * 20 + 20) {
      ++attempts;
      const std::size_t i = pick(rng);
      const double saved = t.data()[i];
      bool flipped = false;

      t.data()[i] = saved + h;
      const double lp = probe_value(&flipped);
      t.data()[i] = saved - h;
      const double lm = probe_value(&flipped);
      t.data()[i] = saved;

      if (flipped) {
        ++res.skipped;
        continue;
      }
      const double numeric = (lp - lm) / (2.0 * h);
      res.max_rel_err = std::max(res.max_rel_err, rel_err(analytic[ti][i], numeric));
      ++res.probes;
      ++done;
    }
  }
  return res;
}

}  // namespace pbseg
