#pragma once

#include <cstddef>
#include <vector>

#include "moeforge/dense_ffn.hpp"

namespace moeforge {

/// One expert: a SwiGLU block cut from the dense FFN along the neurons in source_indices.
struct ExpertFfn {
    DenseFfn weights; // d x m, d x m, m x d
    std::vector<std::size_t> source_indices;

    std::size_t size() const noexcept { return weights.hidden_dim(); }

    bool operator==(const ExpertFfn&) const = default;
};

inline Vector expert_forward(const ExpertFfn& expert, std::span<const double> x)
{
    return ffn_forward(expert.weights, x).y;
}

} // namespace moeforge
