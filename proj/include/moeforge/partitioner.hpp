#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "moeforge/dense_ffn.hpp"
#include "moeforge/expert.hpp"
#include "moeforge/rng.hpp"

namespace moeforge {

enum class PartitionMethod { IndependentRandom, IndependentClustering, SharingInner, SharingInter };

inline std::string_view to_string(PartitionMethod m) noexcept
{
    switch (m) {
    case PartitionMethod::IndependentRandom: return "independent_random";
    case PartitionMethod::IndependentClustering: return "independent_clustering";
    case PartitionMethod::SharingInner: return "sharing_inner";
    case PartitionMethod::SharingInter: return "sharing_inter";
    }
    return "unknown";
}

inline PartitionMethod parse_partition_method(std::string_view s)
{
    for (auto m : {PartitionMethod::IndependentRandom, PartitionMethod::IndependentClustering,
                   PartitionMethod::SharingInner, PartitionMethod::SharingInter})
        if (to_string(m) == s)
            return m;
    throw InvalidArgument("unknown partition method '" + std::string(s) + "'");
}

inline bool is_independent(PartitionMethod m) noexcept
{
    return m == PartitionMethod::IndependentRandom || m == PartitionMethod::IndependentClustering;
}

using IndexSet = std::vector<std::size_t>;

/// Expert index sets over the intermediate neurons of one FFN.
struct ExpertPartition {
    PartitionMethod method = PartitionMethod::IndependentRandom;
    std::size_t hidden_dim = 0;
    std::size_t expert_size = 0;
    std::vector<IndexSet> sets;
    std::optional<IndexSet> shared_residual; // SharingInter only

    std::size_t expert_count() const noexcept { return sets.size(); }

    bool operator==(const ExpertPartition&) const = default;
};

/// Throws InvalidArgument unless the partition meets the invariants of its method:
/// every set sorted, strictly increasing, in range and of size expert_size; Independent
/// partitions disjoint and covering; the residual (if any) disjoint from every set.
inline void validate_partition(const ExpertPartition& p)
{
    if (p.sets.empty())
        throw InvalidArgument("partition has no experts");
    std::vector<int> seen(p.hidden_dim, 0);
    auto check_sorted = [&](const IndexSet& s, const std::string& what) {
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (s[i] >= p.hidden_dim)
                throw InvalidArgument(what + ": index " + std::to_string(s[i]) + " out of range");
            if (i > 0 && s[i] <= s[i - 1])
                throw InvalidArgument(what + ": indices not strictly increasing");
        }
    };
    for (std::size_t j = 0; j < p.sets.size(); ++j) {
        const std::string what = "expert " + std::to_string(j);
        if (p.sets[j].size() != p.expert_size)
            throw InvalidArgument(what + ": size " + std::to_string(p.sets[j].size()) + " != " +
                                  std::to_string(p.expert_size));
        check_sorted(p.sets[j], what);
        for (auto i : p.sets[j])
            ++seen[i];
    }
    if (is_independent(p.method)) {
        if (p.shared_residual)
            throw InvalidArgument("independent partition carries a residual set");
        for (std::size_t i = 0; i < p.hidden_dim; ++i)
            if (seen[i] != 1)
                throw InvalidArgument("neuron " + std::to_string(i) + " covered " + std::to_string(seen[i]) +
                                      " times in an independent partition");
    }
    if (p.shared_residual) {
        check_sorted(*p.shared_residual, "residual");
        for (auto i : *p.shared_residual)
            if (seen[i] != 0)
                throw InvalidArgument("residual neuron " + std::to_string(i) + " also assigned to an expert");
    }
}

namespace detail {

inline std::size_t checked_expert_size(std::size_t dh, std::size_t n)
{
    if (n == 0)
        throw InvalidArgument("expert count must be at least 1");
    if (dh % n != 0)
        throw InvalidArgument("expert count " + std::to_string(n) + " does not divide hidden size " +
                              std::to_string(dh));
    return dh / n;
}

/// Indices ordered by descending score; equal scores keep the lower index first.
inline IndexSet ranking(std::span<const double> scores)
{
    IndexSet order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return order;
}

inline IndexSet top_m(std::span<const double> scores, std::size_t m)
{
    IndexSet order = ranking(scores);
    order.resize(m);
    std::sort(order.begin(), order.end());
    return order;
}

/// Per-neuron vectors: column j of w_up as a d-dimensional point.
inline std::vector<Vector> neuron_vectors(const Matrix& w_up)
{
    std::vector<Vector> pts(w_up.cols(), Vector(w_up.rows()));
    for (std::size_t r = 0; r < w_up.rows(); ++r)
        for (std::size_t c = 0; c < w_up.cols(); ++c)
            pts[c][r] = w_up(r, c);
    return pts;
}

} // namespace detail

inline ExpertPartition split_independent_random(std::size_t hidden_dim, std::size_t n, Rng& rng)
{
    const std::size_t m = detail::checked_expert_size(hidden_dim, n);
    IndexSet perm(hidden_dim);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    // Fisher-Yates with the toolkit's own index draw so the permutation is bit-stable.
    for (std::size_t i = hidden_dim; i > 1; --i)
        std::swap(perm[i - 1], perm[rng.uniform_index(i)]);

    ExpertPartition p{PartitionMethod::IndependentRandom, hidden_dim, m, {}, std::nullopt};
    for (std::size_t j = 0; j < n; ++j) {
        IndexSet s(perm.begin() + static_cast<std::ptrdiff_t>(j * m),
                   perm.begin() + static_cast<std::ptrdiff_t>((j + 1) * m));
        std::sort(s.begin(), s.end());
        p.sets.push_back(std::move(s));
    }
    return p;
}

/// Balanced k-means over arbitrary points; returns the cluster id of each point.
///
/// Every cluster receives exactly points.size() / n members. The assignment step
/// visits (point, cluster) pairs in ascending order of
/// dist(point, cluster) - mean_c dist(point, c), ties broken by point then cluster
/// index, and takes a pair when the point is still free and the cluster has room.
inline std::vector<std::size_t> balanced_kmeans(const std::vector<Vector>& points, std::size_t n,
                                                std::size_t max_iters, Rng& rng)
{
    const std::size_t count = points.size();
    const std::size_t capacity = detail::checked_expert_size(count, n);
    if (max_iters == 0)
        throw InvalidArgument("balanced_kmeans: max_iters must be at least 1");

    // Seed centroids with n distinct points chosen by a partial Fisher-Yates shuffle.
    IndexSet order(count);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = 0; i < n; ++i)
        std::swap(order[i], order[i + rng.uniform_index(count - i)]);
    std::vector<Vector> centroids;
    for (std::size_t c = 0; c < n; ++c)
        centroids.push_back(points[order[c]]);

    std::vector<std::size_t> assign(count, n);
    std::vector<std::tuple<double, std::size_t, std::size_t>> pairs;
    pairs.reserve(count * n);
    for (std::size_t iter = 0; iter < max_iters; ++iter) {
        pairs.clear();
        for (std::size_t i = 0; i < count; ++i) {
            Vector dist(n);
            double mean = 0.0;
            for (std::size_t c = 0; c < n; ++c) {
                dist[c] = squared_distance(points[i], centroids[c]);
                mean += dist[c];
            }
            mean /= static_cast<double>(n);
            for (std::size_t c = 0; c < n; ++c)
                pairs.emplace_back(dist[c] - mean, i, c);
        }
        std::sort(pairs.begin(), pairs.end());

        std::vector<std::size_t> next(count, n);
        std::vector<std::size_t> fill(n, 0);
        for (const auto& [margin, i, c] : pairs) {
            if (next[i] != n || fill[c] == capacity)
                continue;
            next[i] = c;
            ++fill[c];
        }

        const bool converged = next == assign;
        assign = std::move(next);
        if (converged)
            break;

        for (std::size_t c = 0; c < n; ++c)
            std::fill(centroids[c].begin(), centroids[c].end(), 0.0);
        for (std::size_t i = 0; i < count; ++i)
            axpy(1.0 / static_cast<double>(capacity), points[i], centroids[assign[i]]);
    }
    return assign;
}

inline ExpertPartition split_independent_clustering(const DenseFfn& ffn, std::size_t n, std::size_t max_iters,
                                                    Rng& rng)
{
    ffn.validate();
    const std::size_t dh = ffn.hidden_dim();
    const std::size_t m = detail::checked_expert_size(dh, n);
    const auto assign = balanced_kmeans(detail::neuron_vectors(ffn.w_up), n, max_iters, rng);

    ExpertPartition p{PartitionMethod::IndependentClustering, dh, m, std::vector<IndexSet>(n), std::nullopt};
    for (std::size_t i = 0; i < dh; ++i)
        p.sets[assign[i]].push_back(i);
    return p;
}

namespace detail {

inline void check_importance_inputs(const std::vector<Vector>& importance, std::size_t m)
{
    if (importance.empty())
        throw InvalidArgument("at least one importance vector is required");
    const std::size_t dh = importance.front().size();
    for (const auto& v : importance)
        if (v.size() != dh)
            throw ShapeError("importance vectors differ in length");
    if (m == 0 || m > dh)
        throw InvalidArgument("expert size " + std::to_string(m) + " outside [1, " + std::to_string(dh) + "]");
}

} // namespace detail

/// Expert i takes the m highest-scoring neurons of importance[i].
inline ExpertPartition split_sharing_inner(const std::vector<Vector>& importance, std::size_t m)
{
    detail::check_importance_inputs(importance, m);
    ExpertPartition p{PartitionMethod::SharingInner, importance.front().size(), m, {}, std::nullopt};
    for (const auto& v : importance)
        p.sets.push_back(detail::top_m(v, m));
    return p;
}

/// Neurons present in at least ceil(threshold * n) provisional top-m sets become an
/// always-on residual block; each expert then refills to m neurons from its own
/// ranking with residual neurons excluded.
inline ExpertPartition split_sharing_inter(const std::vector<Vector>& importance, std::size_t m,
                                           double residual_threshold)
{
    detail::check_importance_inputs(importance, m);
    if (!(residual_threshold > 0.0 && residual_threshold <= 1.0))
        throw InvalidArgument("residual threshold must lie in (0, 1]");
    const std::size_t n = importance.size();
    const std::size_t dh = importance.front().size();
    const auto min_votes = static_cast<std::size_t>(std::ceil(residual_threshold * static_cast<double>(n)));

    std::vector<std::size_t> votes(dh, 0);
    for (const auto& v : importance)
        for (auto i : detail::top_m(v, m))
            ++votes[i];

    IndexSet residual;
    for (std::size_t i = 0; i < dh; ++i)
        if (votes[i] >= min_votes)
            residual.push_back(i);

    ExpertPartition p{PartitionMethod::SharingInter, dh, m, {}, std::nullopt};
    for (std::size_t e = 0; e < n; ++e) {
        IndexSet s;
        for (auto i : detail::ranking(importance[e])) {
            if (votes[i] >= min_votes)
                continue;
            s.push_back(i);
            if (s.size() == m)
                break;
        }
        if (s.size() < m)
            throw InvalidArgument("expert " + std::to_string(e) + " has only " + std::to_string(s.size()) +
                                  " non-residual candidates, needs " + std::to_string(m));
        std::sort(s.begin(), s.end());
        p.sets.push_back(std::move(s));
    }
    if (!residual.empty())
        p.shared_residual = std::move(residual);
    return p;
}

/// Copies columns `indices` of w_up/w_gate and rows `indices` of w_down, in index order.
inline ExpertFfn slice_expert(const DenseFfn& ffn, std::span<const std::size_t> indices)
{
    ffn.validate();
    if (indices.empty())
        throw InvalidArgument("slice_expert: empty index set");
    const std::size_t d = ffn.model_dim();
    const std::size_t dh = ffn.hidden_dim();
    for (std::size_t k = 0; k < indices.size(); ++k) {
        if (indices[k] >= dh)
            throw InvalidArgument("slice_expert: index " + std::to_string(indices[k]) + " out of range [0, " +
                                  std::to_string(dh) + ")");
        if (k > 0 && indices[k] <= indices[k - 1])
            throw InvalidArgument("slice_expert: indices must be strictly increasing");
    }
    const std::size_t m = indices.size();
    ExpertFfn e;
    e.weights.w_up = Matrix(d, m);
    e.weights.w_gate = Matrix(d, m);
    e.weights.w_down = Matrix(m, d);
    for (std::size_t r = 0; r < d; ++r)
        for (std::size_t k = 0; k < m; ++k) {
            e.weights.w_up(r, k) = ffn.w_up(r, indices[k]);
            e.weights.w_gate(r, k) = ffn.w_gate(r, indices[k]);
        }
    for (std::size_t k = 0; k < m; ++k)
        for (std::size_t c = 0; c < d; ++c)
            e.weights.w_down(k, c) = ffn.w_down(indices[k], c);
    e.source_indices.assign(indices.begin(), indices.end());
    return e;
}

/// Mean over expert pairs of |S_i n S_j| / m. Zero for a single expert.
inline double mean_pairwise_overlap(const ExpertPartition& p)
{
    const std::size_t n = p.sets.size();
    if (n < 2 || p.expert_size == 0)
        return 0.0;
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = a + 1; b < n; ++b) {
            IndexSet common;
            std::set_intersection(p.sets[a].begin(), p.sets[a].end(), p.sets[b].begin(), p.sets[b].end(),
                                  std::back_inserter(common));
            total += static_cast<double>(common.size()) / static_cast<double>(p.expert_size);
            ++pairs;
        }
    return total / static_cast<double>(pairs);
}

} // namespace moeforge
