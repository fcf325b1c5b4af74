#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "moeforge/error.hpp"
#include "moeforge/tensor.hpp"

namespace moeforge {

/// One expert selection of one token at one layer.
struct RoutingRow {
    std::uint64_t token_id = 0;
    std::string domain;
    std::size_t layer = 0;
    std::size_t expert_id = 0;
    double weight = 0.0;

    bool operator==(const RoutingRow&) const = default;
};

/// Selection counts per [layer][expert][domain]; a token routed to k experts adds k counts.
class RoutingStats {
public:
    RoutingStats() = default;

    RoutingStats(std::size_t layers, std::size_t experts, std::vector<std::string> domains)
        : layers_(layers), experts_(experts), domains_(std::move(domains)),
          counts_(layers_ * experts_ * domains_.size(), 0), tokens_(layers_ * domains_.size(), 0)
    {
    }

    std::size_t layers() const noexcept { return layers_; }
    std::size_t experts() const noexcept { return experts_; }
    const std::vector<std::string>& domains() const noexcept { return domains_; }

    std::uint64_t count(std::size_t layer, std::size_t expert, std::size_t domain) const
    {
        return counts_[(layer * experts_ + expert) * domains_.size() + domain];
    }
    std::uint64_t& count(std::size_t layer, std::size_t expert, std::size_t domain)
    {
        return counts_[(layer * experts_ + expert) * domains_.size() + domain];
    }

    /// Distinct tokens of `domain` seen at `layer`.
    std::uint64_t tokens(std::size_t layer, std::size_t domain) const { return tokens_[layer * domains_.size() + domain]; }
    std::uint64_t& tokens(std::size_t layer, std::size_t domain) { return tokens_[layer * domains_.size() + domain]; }

    std::size_t domain_index(const std::string& label) const
    {
        for (std::size_t i = 0; i < domains_.size(); ++i)
            if (domains_[i] == label)
                return i;
        throw InvalidArgument("unknown domain label '" + label + "'");
    }

    /// Adds another shard's counts. Shards must not share (layer, token) pairs.
    void merge(const RoutingStats& other)
    {
        if (other.layers_ != layers_ || other.experts_ != experts_ || other.domains_ != domains_)
            throw ShapeError("RoutingStats::merge: shapes differ");
        for (std::size_t i = 0; i < counts_.size(); ++i)
            counts_[i] += other.counts_[i];
        for (std::size_t i = 0; i < tokens_.size(); ++i)
            tokens_[i] += other.tokens_[i];
    }

    bool operator==(const RoutingStats&) const = default;

private:
    std::size_t layers_ = 0;
    std::size_t experts_ = 0;
    std::vector<std::string> domains_;
    std::vector<std::uint64_t> counts_;
    std::vector<std::uint64_t> tokens_;
};

/// Exact counting; the result does not depend on row order. A token id must keep one
/// domain across all of its rows.
inline RoutingStats collect_routing(std::span<const RoutingRow> rows, std::size_t layers, std::size_t experts,
                                    std::vector<std::string> domains)
{
    RoutingStats stats(layers, experts, std::move(domains));
    std::map<std::pair<std::size_t, std::uint64_t>, std::size_t> seen; // (layer, token) -> domain
    std::map<std::uint64_t, std::size_t> token_domain;
    for (const auto& r : rows) {
        if (r.layer >= layers)
            throw InvalidArgument("routing row: layer " + std::to_string(r.layer) + " outside [0, " +
                                  std::to_string(layers) + ")");
        if (r.expert_id >= experts)
            throw InvalidArgument("routing row: expert " + std::to_string(r.expert_id) + " outside [0, " +
                                  std::to_string(experts) + ")");
        const std::size_t dom = stats.domain_index(r.domain);
        const auto [it, fresh] = token_domain.emplace(r.token_id, dom);
        if (!fresh && it->second != dom)
            throw InvalidArgument("routing row: token " + std::to_string(r.token_id) + " labelled with two domains");
        ++stats.count(r.layer, r.expert_id, dom);
        if (seen.emplace(std::pair{r.layer, r.token_id}, dom).second)
            ++stats.tokens(r.layer, dom);
    }
    return stats;
}

/// Each listed domain's expert-count vector at `layer`, normalized to sum 1.
inline std::vector<Vector> routing_distributions(const RoutingStats& stats, std::size_t layer,
                                                 const std::vector<std::size_t>& domains)
{
    if (layer >= stats.layers())
        throw InvalidArgument("layer " + std::to_string(layer) + " out of range");
    std::vector<Vector> out;
    for (auto dom : domains) {
        Vector p(stats.experts(), 0.0);
        double total = 0.0;
        for (std::size_t e = 0; e < stats.experts(); ++e) {
            p[e] = static_cast<double>(stats.count(layer, e, dom));
            total += p[e];
        }
        if (total == 0.0)
            throw InvalidArgument("domain '" + stats.domains()[dom] + "' has no routed tokens at layer " +
                                  std::to_string(layer));
        for (auto& v : p)
            v /= total;
        out.push_back(std::move(p));
    }
    return out;
}

/// Pairwise Euclidean distances between the normalized routing distributions of the
/// listed domains. Symmetric with an exactly zero diagonal.
inline Matrix routing_l2_matrix(const RoutingStats& stats, std::size_t layer, const std::vector<std::size_t>& domains)
{
    const auto dist = routing_distributions(stats, layer, domains);
    const std::size_t n = domains.size();
    Matrix out(n, n);
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = a + 1; b < n; ++b) {
            const double v = std::sqrt(squared_distance(dist[a], dist[b]));
            out(a, b) = v;
            out(b, a) = v;
        }
    return out;
}

/// All domains; every one of them must have routed tokens at `layer`.
inline Matrix routing_l2_matrix(const RoutingStats& stats, std::size_t layer)
{
    std::vector<std::size_t> all(stats.domains().size());
    for (std::size_t i = 0; i < all.size(); ++i)
        all[i] = i;
    return routing_l2_matrix(stats, layer, all);
}

struct LayerExpert {
    std::size_t layer = 0;
    std::size_t expert = 0;

    bool operator==(const LayerExpert&) const = default;
};

/// Experts whose share of a layer's routed selections is below threshold / N.
/// Experts that were never selected are always reported.
inline std::vector<LayerExpert> dead_expert_report(const RoutingStats& stats, double threshold)
{
    if (!(threshold >= 0.0 && threshold < 1.0))
        throw InvalidArgument("dead_expert_report: threshold must lie in [0, 1)");
    std::vector<LayerExpert> out;
    const double cutoff = threshold / static_cast<double>(stats.experts());
    for (std::size_t l = 0; l < stats.layers(); ++l) {
        std::vector<std::uint64_t> per_expert(stats.experts(), 0);
        std::uint64_t total = 0;
        for (std::size_t e = 0; e < stats.experts(); ++e) {
            for (std::size_t d = 0; d < stats.domains().size(); ++d)
                per_expert[e] += stats.count(l, e, d);
            total += per_expert[e];
        }
        for (std::size_t e = 0; e < stats.experts(); ++e) {
            const double share = total == 0 ? 0.0 : static_cast<double>(per_expert[e]) / static_cast<double>(total);
            if (per_expert[e] == 0 || share < cutoff)
                out.push_back({l, e});
        }
    }
    return out;
}

} // namespace moeforge
