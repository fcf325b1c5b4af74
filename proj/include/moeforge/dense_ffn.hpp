#pragma once

#include <cmath>
#include <span>
#include <string>

#include "moeforge/tensor.hpp"

namespace moeforge {

/// SwiGLU feed-forward block, y = h W_down with h = x W_up (*) Swish(x W_gate).
///
/// x is a row vector of length d. Neuron j of the block is column j of w_up and
/// w_gate together with row j of w_down.
struct DenseFfn {
    Matrix w_up;   // d x d_h
    Matrix w_gate; // d x d_h
    Matrix w_down; // d_h x d

    std::size_t model_dim() const noexcept { return w_up.rows(); }
    std::size_t hidden_dim() const noexcept { return w_up.cols(); }
    std::size_t parameter_count() const noexcept { return w_up.size() + w_gate.size() + w_down.size(); }

    void validate() const
    {
        const std::size_t d = w_up.rows();
        const std::size_t dh = w_up.cols();
        if (d == 0 || dh == 0)
            throw ShapeError("DenseFfn: empty dimensions");
        if (w_gate.rows() != d || w_gate.cols() != dh || w_down.rows() != dh || w_down.cols() != d)
            throw ShapeError("DenseFfn: inconsistent shapes w_up " + shape_str(w_up) + ", w_gate " +
                             shape_str(w_gate) + ", w_down " + shape_str(w_down));
    }

    bool operator==(const DenseFfn&) const = default;

    /// Teacher-style random init: N(0, 1/sqrt(d)) for the input projections, N(0, 1/sqrt(d_h)) for w_down.
    static DenseFfn random(std::size_t d, std::size_t dh, Rng& rng)
    {
        const double in_std = 1.0 / std::sqrt(static_cast<double>(d));
        const double out_std = 1.0 / std::sqrt(static_cast<double>(dh));
        DenseFfn f;
        f.w_up = Matrix::random_normal(d, dh, rng, in_std);
        f.w_gate = Matrix::random_normal(d, dh, rng, in_std);
        f.w_down = Matrix::random_normal(dh, d, rng, out_std);
        return f;
    }
};

struct FfnOutput {
    Vector y; // length d
    Vector h; // length d_h
};

inline FfnOutput ffn_forward(const DenseFfn& ffn, std::span<const double> x)
{
    if (x.size() != ffn.model_dim())
        throw ShapeError("ffn_forward: input length " + std::to_string(x.size()) + ", expected " +
                         std::to_string(ffn.model_dim()));
    const Vector up = vecmat(x, ffn.w_up);
    const Vector gate = vecmat(x, ffn.w_gate);
    FfnOutput out;
    out.h.resize(up.size());
    for (std::size_t j = 0; j < up.size(); ++j)
        out.h[j] = up[j] * swish(gate[j]);
    out.y = vecmat(out.h, ffn.w_down);
    return out;
}

/// Gradient of the loss with respect to h, given the gradient at the output y: grad_y W_down^T.
inline Vector ffn_output_grad_to_h(const DenseFfn& ffn, std::span<const double> grad_y)
{
    if (grad_y.size() != ffn.model_dim())
        throw ShapeError("ffn_output_grad_to_h: gradient length " + std::to_string(grad_y.size()) +
                         ", expected " + std::to_string(ffn.model_dim()));
    return matvec(ffn.w_down, grad_y);
}

} // namespace moeforge
