#pragma once

// Trace of the discrete decisions taken during a forward pass: prototype
// argmax picks, attention-mask bits, matching assignments. The loss is
// piecewise-smooth in the parameters; finite-difference probes are only
// valid while these decisions stay fixed, so gradient checking compares
// trace hashes between probe points and tracks how close the pass came to
// a decision boundary (min_margin).

#include <cstdint>
#include <limits>
#include <algorithm>

namespace pbseg {

struct DecisionTrace {
  std::uint64_t hash = 1469598103934665603ull;  // FNV-1a
  double min_margin = std::numeric_limits<double>::infinity();

  void add_u64(std::uint64_t x) {
    for (int i = 0; i < 8; ++i) {
      hash ^= (x >> (8 * i)) & 0xffu;
      hash *= 1099511628211ull;
    }
  }
  void add_index(std::size_t i) { add_u64(static_cast<std::uint64_t>(i) + 0x9e3779b97f4a7c15ull); }
  void add_bit(bool b) { add_u64(b ? 0x6b43a9b5u : 0x1b873593u); }
  void note_margin(double m) { min_margin = std::min(min_margin, m); }
};

}  // namespace pbseg
