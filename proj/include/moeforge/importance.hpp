#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "moeforge/dense_ffn.hpp"
#include "moeforge/partitioner.hpp"

namespace moeforge {

/// Accumulated first-order Taylor scores |h (*) dL/dh| per intermediate neuron.
struct ImportanceVector {
    Vector values;
    std::size_t samples_seen = 0;

    ImportanceVector() = default;
    explicit ImportanceVector(std::size_t hidden_dim) : values(hidden_dim, 0.0) {}

    bool operator==(const ImportanceVector&) const = default;
};

/// One training example seen through the FFN: input x and the loss gradient at the FFN output.
struct GradSample {
    Vector x;
    Vector grad_y;
};

struct DataGroup {
    std::string id;
    std::vector<GradSample> samples;
};

/// v += sum over the group of |h (*) grad_h L|, with h from the forward pass and
/// grad_h L = grad_y W_down^T.
inline ImportanceVector accumulate_importance(const DenseFfn& ffn, const DataGroup& group, ImportanceVector v)
{
    ffn.validate();
    if (v.values.size() != ffn.hidden_dim())
        throw ShapeError("accumulate_importance: importance length " + std::to_string(v.values.size()) +
                         ", hidden size " + std::to_string(ffn.hidden_dim()));
    for (const auto& s : group.samples) {
        const auto fwd = ffn_forward(ffn, s.x);
        const Vector grad_h = ffn_output_grad_to_h(ffn, s.grad_y);
        for (std::size_t j = 0; j < v.values.size(); ++j)
            v.values[j] += std::abs(fwd.h[j] * grad_h[j]);
        ++v.samples_seen;
    }
    return v;
}

/// Elementwise sum of two accumulators; equals accumulating both groups in sequence.
inline ImportanceVector merge(const ImportanceVector& a, const ImportanceVector& b)
{
    if (a.values.size() != b.values.size())
        throw ShapeError("merge: importance lengths differ");
    ImportanceVector out = a;
    for (std::size_t j = 0; j < out.values.size(); ++j)
        out.values[j] += b.values[j];
    out.samples_seen += b.samples_seen;
    return out;
}

/// Plain Lloyd k-means on the samples (seeded distinct-sample init, at most 100 rounds).
/// Returns the sample indices belonging to each of the n groups; a group may be empty.
inline std::vector<IndexSet> group_data_by_clustering(const std::vector<Vector>& samples, std::size_t n, Rng& rng)
{
    constexpr std::size_t kMaxIters = 100;
    if (n == 0)
        throw InvalidArgument("group_data_by_clustering: n must be at least 1");
    if (n > samples.size())
        throw InvalidArgument("group_data_by_clustering: " + std::to_string(n) + " groups requested for " +
                              std::to_string(samples.size()) + " samples");
    const std::size_t count = samples.size();

    IndexSet order(count);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = 0; i < n; ++i)
        std::swap(order[i], order[i + rng.uniform_index(count - i)]);
    std::vector<Vector> centroids;
    for (std::size_t c = 0; c < n; ++c)
        centroids.push_back(samples[order[c]]);

    std::vector<std::size_t> assign(count, n);
    for (std::size_t iter = 0; iter < kMaxIters; ++iter) {
        bool changed = false;
        for (std::size_t i = 0; i < count; ++i) {
            std::size_t best = 0;
            double best_dist = squared_distance(samples[i], centroids[0]);
            for (std::size_t c = 1; c < n; ++c) {
                const double dist = squared_distance(samples[i], centroids[c]);
                if (dist < best_dist) {
                    best_dist = dist;
                    best = c;
                }
            }
            if (assign[i] != best) {
                assign[i] = best;
                changed = true;
            }
        }
        if (!changed)
            break;
        std::vector<std::size_t> members(n, 0);
        std::vector<Vector> sums(n, Vector(samples.front().size(), 0.0));
        for (std::size_t i = 0; i < count; ++i) {
            axpy(1.0, samples[i], sums[assign[i]]);
            ++members[assign[i]];
        }
        // An emptied cluster keeps its previous centroid.
        for (std::size_t c = 0; c < n; ++c)
            if (members[c] > 0)
                for (std::size_t k = 0; k < sums[c].size(); ++k)
                    centroids[c][k] = sums[c][k] / static_cast<double>(members[c]);
    }

    std::vector<IndexSet> groups(n);
    for (std::size_t i = 0; i < count; ++i)
        groups[assign[i]].push_back(i);
    return groups;
}

/// Builds the grouped data for a squared-error loss L = 1/2 |y - target|^2, so grad_y = y - target.
inline std::vector<DataGroup> make_quadratic_groups(const DenseFfn& ffn, const std::vector<Vector>& inputs,
                                                   const std::vector<Vector>& targets,
                                                   const std::vector<IndexSet>& groups)
{
    if (inputs.size() != targets.size())
        throw ShapeError("make_quadratic_groups: input and target counts differ");
    std::vector<DataGroup> out;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        DataGroup group{"group" + std::to_string(g), {}};
        for (auto i : groups[g]) {
            const Vector y = ffn_forward(ffn, inputs[i]).y;
            if (targets[i].size() != y.size())
                throw ShapeError("make_quadratic_groups: target length mismatch");
            Vector grad(y.size());
            for (std::size_t k = 0; k < y.size(); ++k)
                grad[k] = y[k] - targets[i][k];
            group.samples.push_back({inputs[i], std::move(grad)});
        }
        out.push_back(std::move(group));
    }
    return out;
}

/// One importance vector per group, each starting from zero.
inline std::vector<Vector> group_importance(const DenseFfn& ffn, const std::vector<DataGroup>& groups)
{
    std::vector<Vector> out;
    for (const auto& g : groups)
        out.push_back(accumulate_importance(ffn, g, ImportanceVector(ffn.hidden_dim())).values);
    return out;
}

} // namespace moeforge
