#include "pbseg/flops.hpp"

#include <stdexcept>

#include "pbseg/flop_cost.hpp"

namespace pbseg {

namespace fc = flop_cost;

StageFlops pbca_layer_flops(std::size_t s, std::size_t l, std::size_t d, std::size_t big_d, std::size_t heads) {
  if (heads == 0 || d % heads != 0) throw std::invalid_argument("pbca_layer_flops: d must divide by heads");
  const std::size_t dh = d / heads;
  StageFlops f;
  // V = tokens Wk + bk, T = O Wq + bq, out = Z W2 + O
  f.projection = fc::matmul(s, big_d, d) + fc::elemwise(s * d)      // keys
               + fc::matmul(l, big_d, d) + fc::elemwise(l * d)      // queries
               + fc::matmul(l, d, big_d) + fc::elemwise(l * big_d); // output + residual
  // per head: A = V_h T_h^T
  f.affinity = heads * fc::matmul(s, dh, l);
  // per head: mask add + argmax scan
  f.selection = heads * (fc::elemwise(s * l) + fc::argmax(s * l));
  // per head: (T o V_p) W1, normalize, beta gate, prototype residual
  f.interaction = heads * (fc::elemwise(l * dh)            // T o V_p
                           + fc::matmul(l, dh, dh)         // W1
                           + fc::l2_normalize(l * dh, l)   // U / ||U||
                           + fc::elemwise(l * dh)          // beta o
                           + fc::elemwise(l * dh));        // + V_p
  return f;
}

StageFlops standard_layer_flops(std::size_t s, std::size_t l, std::size_t d, std::size_t big_d, std::size_t heads) {
  if (heads == 0 || d % heads != 0) throw std::invalid_argument("standard_layer_flops: d must divide by heads");
  const std::size_t dh = d / heads;
  StageFlops f;
  f.projection = fc::matmul(s, big_d, d) + fc::elemwise(s * d)      // keys
               + fc::matmul(l, big_d, d) + fc::elemwise(l * d)      // queries
               + fc::matmul(s, big_d, d) + fc::elemwise(s * d)      // values
               + fc::matmul(l, d, big_d) + fc::elemwise(l * big_d); // output + residual
  f.affinity = heads * fc::matmul(l, dh, s);
  // per head: scale, mask add, softmax
  f.selection = heads * (2 * fc::elemwise(l * s) + fc::softmax(l * s));
  // per head: softmax-weighted value sum over all S tokens
  f.interaction = heads * fc::matmul(l, s, dh);
  return f;
}

}  // namespace pbseg
