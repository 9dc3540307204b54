#pragma once

#include "qmwf/tensor.hpp"
#include "qmwf/wavefunction.hpp"

namespace qmwf {

/// Projection of the materialized global tensor onto the sentence's product
/// state. Exponential in sentence length; a reference for small instances.
inline double projection_bruteforce(const SentenceMatrix& s, const CPFactors& f,
                                    std::size_t cap = kDefaultElementCap) {
    if (s.rows() != f.order() || s.cols() != f.dim()) {
        throw DimensionError("sentence shape does not match CP factors");
    }
    checked_element_count(s.rows(), s.cols(), cap);
    const DenseTensor global = cp_reconstruct(f, cap);
    const auto rows = s.row_vectors();
    const DenseTensor local = tensor_product(rows, cap);
    return inner_product(global, local);
}

}  // namespace qmwf
