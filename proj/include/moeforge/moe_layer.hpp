#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moeforge/dense_ffn.hpp"
#include "moeforge/expert.hpp"
#include "moeforge/partitioner.hpp"

namespace moeforge {

/// Noisy top-k router: H = x W_g + eps (*) softplus(x W_noise), eps ~ N(0, 1) per expert;
/// G = softmax over the k largest entries of H with the rest masked.
struct GateNetwork {
    Matrix w_g;     // d x N
    Matrix w_noise; // d x N, read only when noise_enabled
    std::size_t k = 1;
    bool noise_enabled = false;

    std::size_t expert_count() const noexcept { return w_g.cols(); }
    std::size_t parameter_count() const noexcept { return w_g.size() + (noise_enabled ? w_noise.size() : 0); }

    void validate() const
    {
        if (w_g.cols() == 0 || w_g.rows() == 0)
            throw ShapeError("GateNetwork: empty w_g");
        if (w_noise.rows() != w_g.rows() || w_noise.cols() != w_g.cols())
            throw ShapeError("GateNetwork: w_noise " + shape_str(w_noise) + " does not match w_g " + shape_str(w_g));
        if (k < 1 || k > w_g.cols())
            throw InvalidArgument("GateNetwork: k=" + std::to_string(k) + " outside [1, " +
                                  std::to_string(w_g.cols()) + "]");
    }

    bool operator==(const GateNetwork&) const = default;
};

struct GateOutput {
    Vector weights;     // length N, nonzero only on topk
    IndexSet topk;      // selected experts, highest logit first
    Vector clean;       // x W_g
    Vector noise_raw;   // x W_noise (empty when noise is off)
    Vector noise_draws; // eps (empty when noise is off)
    Vector logits;      // H
};

/// Indices of the k largest values, largest first; equal values keep the lower index first.
inline IndexSet top_k_indices(std::span<const double> values, std::size_t k)
{
    IndexSet order(values.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
    order.resize(k);
    return order;
}

/// Gate evaluation with caller-supplied noise draws (one per expert, ignored when noise is off).
inline GateOutput gate_forward_with_noise(const GateNetwork& gate, std::span<const double> x,
                                          std::span<const double> noise_draws)
{
    gate.validate();
    const std::size_t n = gate.expert_count();
    GateOutput out;
    out.clean = vecmat(x, gate.w_g);
    out.logits = out.clean;
    if (gate.noise_enabled) {
        if (noise_draws.size() != n)
            throw ShapeError("gate_forward: expected " + std::to_string(n) + " noise draws");
        out.noise_raw = vecmat(x, gate.w_noise);
        out.noise_draws.assign(noise_draws.begin(), noise_draws.end());
        for (std::size_t i = 0; i < n; ++i)
            out.logits[i] += noise_draws[i] * softplus(out.noise_raw[i]);
    }
    out.topk = top_k_indices(out.logits, gate.k);
    Vector masked(n, kMasked);
    for (auto i : out.topk)
        masked[i] = out.logits[i];
    out.weights = softmax(masked);
    return out;
}

inline GateOutput gate_forward(const GateNetwork& gate, std::span<const double> x, Rng& rng)
{
    Vector eps;
    if (gate.noise_enabled) {
        eps.resize(gate.expert_count());
        for (auto& e : eps)
            e = rng.normal();
    }
    return gate_forward_with_noise(gate, x, eps);
}

/// The sparse layer: y = sum_{i in K} G_i * scale_factor * E_i(x) + residual(x).
struct MoeLayer {
    std::vector<ExpertFfn> experts;
    GateNetwork gate;
    double scale_factor = 1.0;
    std::optional<ExpertFfn> residual_expert;

    std::size_t expert_count() const noexcept { return experts.size(); }
    std::size_t model_dim() const noexcept { return gate.w_g.rows(); }

    void validate() const
    {
        gate.validate();
        if (experts.size() != gate.expert_count())
            throw ShapeError("MoeLayer: " + std::to_string(experts.size()) + " experts but gate routes to " +
                             std::to_string(gate.expert_count()));
        for (const auto& e : experts) {
            e.weights.validate();
            if (e.weights.model_dim() != model_dim())
                throw ShapeError("MoeLayer: expert model dimension differs from the gate");
        }
        if (residual_expert) {
            residual_expert->weights.validate();
            if (residual_expert->weights.model_dim() != model_dim())
                throw ShapeError("MoeLayer: residual model dimension differs from the gate");
        }
    }

    bool operator==(const MoeLayer&) const = default;
};

/// Per-token routing decision.
struct RoutingRecord {
    IndexSet experts; // selected, highest logit first
    Vector weights;   // gate weight of each selected expert, same order
};

/// Inputs the balance losses need from one token.
struct AuxLossTerms {
    Vector gate_probs; // full length-N gate vector G(x)
};

struct MoeOutput {
    Vector y;
    RoutingRecord routing;
    AuxLossTerms aux;
};

inline MoeOutput moe_forward_with_gate(const MoeLayer& layer, std::span<const double> x, const GateOutput& g)
{
    if (x.size() != layer.model_dim())
        throw ShapeError("moe_forward: input length " + std::to_string(x.size()) + ", expected " +
                         std::to_string(layer.model_dim()));
    MoeOutput out;
    out.y.assign(layer.model_dim(), 0.0);
    for (auto i : g.topk) {
        const Vector e = expert_forward(layer.experts[i], x);
        axpy(g.weights[i] * layer.scale_factor, e, out.y);
        out.routing.experts.push_back(i);
        out.routing.weights.push_back(g.weights[i]);
    }
    if (layer.residual_expert)
        axpy(1.0, expert_forward(*layer.residual_expert, x), out.y);
    out.aux.gate_probs = g.weights;
    return out;
}

inline MoeOutput moe_forward(const MoeLayer& layer, std::span<const double> x, Rng& rng)
{
    layer.validate();
    return moe_forward_with_gate(layer, x, gate_forward(layer.gate, x, rng));
}

/// Squared coefficient of variation (population variance over squared mean). Zero for an all-zero vector.
inline double cv_squared(std::span<const double> v)
{
    if (v.empty())
        return 0.0;
    const double n = static_cast<double>(v.size());
    double mean = 0.0;
    for (double e : v)
        mean += e;
    mean /= n;
    if (mean == 0.0)
        return 0.0;
    double var = 0.0;
    for (double e : v)
        var += (e - mean) * (e - mean);
    var /= n;
    return var / (mean * mean);
}

struct BalanceLoss {
    double importance_loss = 0.0; // CV^2 of per-expert summed gate probabilities
    double load_loss = 0.0;       // CV^2 of per-expert hard selection counts
};

inline BalanceLoss balance_loss(std::span<const RoutingRecord> batch_routing, std::span<const Vector> gate_probs)
{
    if (batch_routing.empty() || gate_probs.empty())
        throw InvalidArgument("balance_loss: empty batch");
    if (batch_routing.size() != gate_probs.size())
        throw ShapeError("balance_loss: routing and gate-probability batches differ in length");
    const std::size_t n = gate_probs.front().size();
    Vector importance(n, 0.0);
    Vector load(n, 0.0);
    for (std::size_t t = 0; t < gate_probs.size(); ++t) {
        if (gate_probs[t].size() != n)
            throw ShapeError("balance_loss: gate probability vectors differ in length");
        for (std::size_t i = 0; i < n; ++i)
            importance[i] += gate_probs[t][i];
        for (auto e : batch_routing[t].experts) {
            if (e >= n)
                throw InvalidArgument("balance_loss: expert index out of range");
            load[e] += 1.0;
        }
    }
    return {cv_squared(importance), cv_squared(load)};
}

struct GateInit {
    enum class Kind { Zeros, Random } kind = Kind::Zeros;
    std::uint64_t seed = 0;

    static GateInit zeros() { return {}; }
    static GateInit random(std::uint64_t seed) { return {Kind::Random, seed}; }
};

/// Slices one expert per partition set, builds the residual expert from the shared
/// residual (if any), initializes the router and fixes scale_factor = n / k.
inline MoeLayer assemble_moe(const DenseFfn& ffn, const ExpertPartition& partition, std::size_t k,
                             GateInit init = GateInit::zeros(), bool noise_enabled = false)
{
    ffn.validate();
    const std::size_t n = partition.expert_count();
    if (partition.hidden_dim != ffn.hidden_dim())
        throw ShapeError("assemble_moe: partition hidden size " + std::to_string(partition.hidden_dim) +
                         " != FFN hidden size " + std::to_string(ffn.hidden_dim()));
    if (k < 1 || k > n)
        throw InvalidArgument("assemble_moe: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");

    MoeLayer layer;
    for (const auto& s : partition.sets)
        layer.experts.push_back(slice_expert(ffn, s));
    if (partition.shared_residual && !partition.shared_residual->empty())
        layer.residual_expert = slice_expert(ffn, *partition.shared_residual);

    const std::size_t d = ffn.model_dim();
    layer.gate.k = k;
    layer.gate.noise_enabled = noise_enabled;
    if (init.kind == GateInit::Kind::Random) {
        Rng rng(init.seed);
        const double stddev = 1.0 / std::sqrt(static_cast<double>(d));
        layer.gate.w_g = Matrix::random_normal(d, n, rng, stddev);
        layer.gate.w_noise = Matrix::random_normal(d, n, rng, stddev);
    } else {
        layer.gate.w_g = Matrix(d, n);
        layer.gate.w_noise = Matrix(d, n);
    }
    layer.scale_factor = static_cast<double>(n) / static_cast<double>(k);
    return layer;
}

/// Parameters touched by one token: the k largest experts, the residual block and the router.
inline std::size_t activated_parameter_count(const MoeLayer& layer)
{
    std::vector<std::size_t> sizes;
    for (const auto& e : layer.experts)
        sizes.push_back(e.weights.parameter_count());
    std::sort(sizes.begin(), sizes.end(), std::greater<>());
    std::size_t total = 0;
    for (std::size_t i = 0; i < layer.gate.k && i < sizes.size(); ++i)
        total += sizes[i];
    if (layer.residual_expert)
        total += layer.residual_expert->weights.parameter_count();
    return total + layer.gate.parameter_count();
}

inline std::size_t total_parameter_count(const MoeLayer& layer)
{
    std::size_t total = layer.gate.parameter_count();
    for (const auto& e : layer.experts)
        total += e.weights.parameter_count();
    if (layer.residual_expert)
        total += layer.residual_expert->weights.parameter_count();
    return total;
}

} // namespace moeforge
