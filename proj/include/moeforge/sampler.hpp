#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "moeforge/error.hpp"
#include "moeforge/rng.hpp"
#include "moeforge/tensor.hpp"

namespace moeforge {

inline std::vector<std::string> default_domains()
{
    return {"CommonCrawl", "C4", "GitHub", "Wikipedia", "Books", "arXiv", "StackExchange"};
}

/// A probability vector over named data domains.
struct DomainWeights {
    std::vector<std::string> domains;
    Vector weights;

    static DomainWeights uniform(std::vector<std::string> domains)
    {
        const double w = 1.0 / static_cast<double>(domains.size());
        Vector weights(domains.size(), w);
        return {std::move(domains), std::move(weights)};
    }

    std::size_t size() const noexcept { return domains.size(); }

    std::size_t index_of(std::string_view label) const
    {
        for (std::size_t i = 0; i < domains.size(); ++i)
            if (domains[i] == label)
                return i;
        throw InvalidArgument("unknown domain '" + std::string(label) + "'");
    }

    void validate() const
    {
        if (domains.empty())
            throw InvalidArgument("DomainWeights: no domains");
        if (weights.size() != domains.size())
            throw ShapeError("DomainWeights: " + std::to_string(weights.size()) + " weights for " +
                             std::to_string(domains.size()) + " domains");
        double sum = 0.0;
        for (double w : weights) {
            if (!(w >= 0.0) || !std::isfinite(w))
                throw InvalidArgument("DomainWeights: weights must be finite and nonnegative");
            sum += w;
        }
        if (std::abs(sum - 1.0) > 1e-12)
            throw InvalidArgument("DomainWeights: weights sum to " + std::to_string(sum));
    }

    bool operator==(const DomainWeights&) const = default;
};

enum class SamplerMode { Static, Dynamic };

/// The four mixture strategies: fixed LLaMA-v1 or Sheared-LLaMA weights, or dynamic
/// reweighting that starts from (and is anchored to) LLaMA-v1 or uniform weights.
enum class SamplingStrategy { StaticLlama, StaticSheared, DynamicLlama, DynamicUniform };

inline std::string_view to_string(SamplingStrategy s) noexcept
{
    switch (s) {
    case SamplingStrategy::StaticLlama: return "static_llama";
    case SamplingStrategy::StaticSheared: return "static_sheared";
    case SamplingStrategy::DynamicLlama: return "dynamic_llama";
    case SamplingStrategy::DynamicUniform: return "dynamic_uniform";
    }
    return "unknown";
}

inline SamplingStrategy parse_sampling_strategy(std::string_view s)
{
    for (auto v : {SamplingStrategy::StaticLlama, SamplingStrategy::StaticSheared, SamplingStrategy::DynamicLlama,
                   SamplingStrategy::DynamicUniform})
        if (to_string(v) == s)
            return v;
    throw InvalidArgument("unknown sampling strategy '" + std::string(s) + "'");
}

struct SamplerState {
    DomainWeights current;
    DomainWeights reference_weights;
    Vector reference_loss;
    std::size_t tokens_since_update = 0;
    std::size_t update_interval_tokens = 1;
    std::size_t tokens_per_draw = 1;
    SamplerMode mode = SamplerMode::Static;

    bool update_due() const noexcept
    {
        return mode == SamplerMode::Dynamic && tokens_since_update >= update_interval_tokens;
    }

    void validate() const
    {
        current.validate();
        reference_weights.validate();
        if (current.domains != reference_weights.domains)
            throw InvalidArgument("SamplerState: current and reference weights name different domains");
        if (mode == SamplerMode::Dynamic && reference_loss.size() != current.size())
            throw ShapeError("SamplerState: one reference loss per domain is required");
        if (update_interval_tokens == 0)
            throw InvalidArgument("SamplerState: update interval must be positive");
        if (tokens_per_draw == 0)
            throw InvalidArgument("SamplerState: tokens per draw must be positive");
    }
};

/// `base` is the LLaMA-v1 preset for the LLaMA strategies and the Sheared preset for
/// StaticSheared; DynamicUniform ignores its values and uses uniform weights over its domains.
inline SamplerState make_sampler(SamplingStrategy strategy, const DomainWeights& base, Vector reference_loss,
                                 std::size_t update_interval_tokens, std::size_t tokens_per_draw = 1)
{
    SamplerState s;
    s.reference_weights = strategy == SamplingStrategy::DynamicUniform ? DomainWeights::uniform(base.domains) : base;
    s.current = s.reference_weights;
    s.mode = (strategy == SamplingStrategy::StaticLlama || strategy == SamplingStrategy::StaticSheared)
                 ? SamplerMode::Static
                 : SamplerMode::Dynamic;
    s.reference_loss = std::move(reference_loss);
    s.update_interval_tokens = update_interval_tokens;
    s.tokens_per_draw = tokens_per_draw;
    s.validate();
    return s;
}

/// Draws a domain index with probability current.weights and advances the token counter.
inline std::size_t next_domain(SamplerState& state, Rng& rng)
{
    const double u = rng.uniform();
    const auto& w = state.current.weights;
    double cum = 0.0;
    std::size_t pick = w.size() - 1;
    for (std::size_t i = 0; i < w.size(); ++i) {
        cum += w[i];
        if (u < cum) {
            pick = i;
            break;
        }
    }
    // Rounding can leave the cumulative sum just under 1; never land on a zero-weight tail.
    while (w[pick] == 0.0 && pick > 0)
        --pick;
    state.tokens_since_update += state.tokens_per_draw;
    return pick;
}

/// Reference-loss reweighting: excess_i = max(observed_i - reference_i, 0),
/// w_i proportional to reference_weight_i * exp(excess_i). Resets the token counter.
inline SamplerState dynamic_update(SamplerState state, std::span<const double> observed_loss)
{
    if (state.mode != SamplerMode::Dynamic)
        throw InvalidArgument("dynamic_update: sampler is in static mode");
    const std::size_t n = state.current.size();
    if (observed_loss.size() != n || state.reference_loss.size() != n)
        throw ShapeError("dynamic_update: one observed loss per domain is required");

    Vector excess(n);
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(observed_loss[i]))
            throw InvalidArgument("dynamic_update: non-finite loss for domain " + state.current.domains[i]);
        excess[i] = std::max(observed_loss[i] - state.reference_loss[i], 0.0);
        any = any || excess[i] > 0.0;
    }
    if (!any) {
        // exp(0) == 1 everywhere: the rule returns the reference weights themselves.
        state.current = state.reference_weights;
    } else {
        Vector w(n);
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            w[i] = state.reference_weights.weights[i] * std::exp(excess[i]);
            sum += w[i];
        }
        for (auto& v : w)
            v /= sum;
        state.current.weights = std::move(w);
    }
    state.tokens_since_update = 0;
    return state;
}

/// Drops every document whose flag is set; order of the survivors is preserved.
template <typename Doc>
std::vector<Doc> apply_filter_mask(const std::vector<Doc>& stream, const std::vector<bool>& drop)
{
    if (stream.size() != drop.size())
        throw ShapeError("apply_filter_mask: " + std::to_string(drop.size()) + " flags for " +
                         std::to_string(stream.size()) + " documents");
    std::vector<Doc> out;
    for (std::size_t i = 0; i < stream.size(); ++i)
        if (!drop[i])
            out.push_back(stream[i]);
    return out;
}

struct ScheduleEntry {
    std::size_t step = 0;
    std::size_t domain = 0;
    Vector weights; // weights in force for this draw
};

/// Runs `draws` sampling steps. In dynamic mode, whenever the token counter reaches the
/// interval the next observed losses are requested from `observe(update_index)` and the
/// weights are updated before the following draw.
inline std::vector<ScheduleEntry> run_schedule(SamplerState& state, std::size_t draws, Rng& rng,
                                               const std::function<Vector(std::size_t)>& observe = {})
{
    state.validate();
    std::vector<ScheduleEntry> log;
    log.reserve(draws);
    std::size_t updates = 0;
    for (std::size_t step = 0; step < draws; ++step) {
        ScheduleEntry e;
        e.step = step;
        e.weights = state.current.weights;
        e.domain = next_domain(state, rng);
        log.push_back(std::move(e));
        if (state.update_due()) {
            if (!observe)
                throw InvalidArgument("run_schedule: dynamic sampler needs observed losses");
            state = dynamic_update(std::move(state), observe(updates++));
        }
    }
    return log;
}

} // namespace moeforge
