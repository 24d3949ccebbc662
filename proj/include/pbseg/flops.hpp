#pragma once

// Analytic FLOP model of one cross-attention layer, split into stages:
//   projection  - input projections (keys/queries, plus values for the
//                 standard mechanism), the output projection and residual
//   affinity    - the spatial-by-query score product
//   selection   - what gates the tokens: masked argmax (prototype path) or
//                 scale + mask + softmax (standard path)
//   interaction - per-token refinement: the element-wise prototype stage
//                 or the softmax-weighted value sum
// Counts are exact functions of shapes, mirroring the executed op sequence
// term by term via flop_cost.hpp; the bench validates them against an
// instrumented run.

#include <cstdint>

namespace pbseg {

struct StageFlops {
  std::uint64_t projection = 0;
  std::uint64_t affinity = 0;
  std::uint64_t selection = 0;
  std::uint64_t interaction = 0;

  std::uint64_t total() const { return projection + affinity + selection + interaction; }
};

// S spatial tokens, L queries, projection width d (embedding width D = d
// unless stated otherwise), multi-head count heads; d must divide by heads
StageFlops pbca_layer_flops(std::size_t s, std::size_t l, std::size_t d, std::size_t big_d, std::size_t heads);
StageFlops standard_layer_flops(std::size_t s, std::size_t l, std::size_t d, std::size_t big_d, std::size_t heads);

}  // namespace pbseg
