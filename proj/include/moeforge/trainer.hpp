#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "moeforge/dense_ffn.hpp"
#include "moeforge/moe_layer.hpp"

namespace moeforge {

struct TrainConfig {
    double lr_max = 0.05;
    double lr_final = 0.005;
    std::size_t warmup_steps = 10;
    std::size_t total_steps = 500;
    std::size_t batch_size = 32;
    double balance_coeff = 0.01;
    std::uint64_t seed = 0;

    void validate() const
    {
        if (lr_final > lr_max)
            throw InvalidArgument("TrainConfig: lr_final exceeds lr_max");
        if (lr_max < 0.0 || lr_final < 0.0)
            throw InvalidArgument("TrainConfig: negative learning rate");
        if (warmup_steps > total_steps)
            throw InvalidArgument("TrainConfig: warmup_steps exceeds total_steps");
        if (batch_size == 0)
            throw InvalidArgument("TrainConfig: batch_size must be at least 1");
        if (balance_coeff < 0.0)
            throw InvalidArgument("TrainConfig: negative balance coefficient");
    }
};

/// Linear warmup from 0 to lr_max over warmup_steps, then cosine decay to lr_final at total_steps.
inline double lr_at(std::size_t step, const TrainConfig& cfg)
{
    if (step > cfg.total_steps)
        throw InvalidArgument("lr_at: step " + std::to_string(step) + " beyond total_steps");
    if (step < cfg.warmup_steps)
        return cfg.lr_max * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    const std::size_t span = cfg.total_steps - cfg.warmup_steps;
    if (span == 0)
        return cfg.lr_max;
    const double progress = static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(span);
    return cfg.lr_final + 0.5 * (cfg.lr_max - cfg.lr_final) * (1.0 + std::cos(std::numbers::pi * progress));
}

struct TrainReport {
    std::vector<double> loss; // full objective on the step's batch, before the update
    std::vector<double> importance_loss;
    std::vector<double> load_loss;
    std::vector<double> lr;
    std::vector<double> routing_entropy; // mean gate entropy over the batch
    double initial_mse = 0.0;            // over the whole data set, noise off
    double final_mse = 0.0;
};

/// Raised when the objective turns non-finite; carries the steps completed so far.
class TrainingDiverged : public DivergenceError {
public:
    TrainingDiverged(const std::string& what, TrainReport partial)
        : DivergenceError(what), partial_(std::move(partial))
    {
    }
    const TrainReport& partial_report() const noexcept { return partial_; }

private:
    TrainReport partial_;
};

/// Every trainable block of the layer in a fixed order: per expert (w_up, w_gate, w_down),
/// the residual expert, the router w_g and, when noise is on, w_noise.
inline std::vector<std::span<double>> parameter_blocks(MoeLayer& layer)
{
    std::vector<std::span<double>> out;
    auto add_ffn = [&](DenseFfn& f) {
        out.push_back(f.w_up.data());
        out.push_back(f.w_gate.data());
        out.push_back(f.w_down.data());
    };
    for (auto& e : layer.experts)
        add_ffn(e.weights);
    if (layer.residual_expert)
        add_ffn(layer.residual_expert->weights);
    out.push_back(layer.gate.w_g.data());
    if (layer.gate.noise_enabled)
        out.push_back(layer.gate.w_noise.data());
    return out;
}

/// Same shapes as `layer`, every entry zero.
inline MoeLayer zeros_like(const MoeLayer& layer)
{
    MoeLayer z = layer;
    for (auto block : parameter_blocks(z))
        std::fill(block.begin(), block.end(), 0.0);
    std::fill(z.gate.w_noise.data().begin(), z.gate.w_noise.data().end(), 0.0);
    return z;
}

struct BatchResult {
    double loss = 0.0;
    double mse = 0.0; // mean over tokens and output coordinates of (y - target)^2
    BalanceLoss balance;
    double routing_entropy = 0.0;
};

/// Worker count for per-token work, from MOEFORGE_THREADS (default 1).
inline std::size_t thread_limit()
{
    if (const char* env = std::getenv("MOEFORGE_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && v > 0)
            return static_cast<std::size_t>(v);
    }
    return 1;
}

namespace detail {

struct ExpertTrace {
    Vector up, gate, h, out;
};

inline ExpertTrace trace_expert(const DenseFfn& w, std::span<const double> x)
{
    ExpertTrace t;
    t.up = vecmat(x, w.w_up);
    t.gate = vecmat(x, w.w_gate);
    t.h.resize(t.up.size());
    for (std::size_t j = 0; j < t.h.size(); ++j)
        t.h[j] = t.up[j] * swish(t.gate[j]);
    t.out = vecmat(t.h, w.w_down);
    return t;
}

/// Accumulates the gradient of the loss through one SwiGLU block given dL/d(block output).
inline void backprop_expert(const DenseFfn& w, const ExpertTrace& t, std::span<const double> x,
                            std::span<const double> grad_out, DenseFfn& grad)
{
    const std::size_t m = t.h.size();
    const std::size_t d = x.size();
    for (std::size_t j = 0; j < m; ++j)
        for (std::size_t c = 0; c < d; ++c)
            grad.w_down(j, c) += t.h[j] * grad_out[c];
    const Vector grad_h = matvec(w.w_down, grad_out);
    for (std::size_t j = 0; j < m; ++j) {
        const double d_up = grad_h[j] * swish(t.gate[j]);
        const double d_gate = grad_h[j] * t.up[j] * swish_grad(t.gate[j]);
        for (std::size_t r = 0; r < d; ++r) {
            grad.w_up(r, j) += x[r] * d_up;
            grad.w_gate(r, j) += x[r] * d_gate;
        }
    }
}

struct TokenTrace {
    GateOutput gate;
    std::vector<ExpertTrace> experts; // aligned with gate.topk
    std::optional<ExpertTrace> residual;
    Vector y;
};

inline TokenTrace trace_token(const MoeLayer& layer, std::span<const double> x, std::span<const double> noise)
{
    TokenTrace t;
    t.gate = gate_forward_with_noise(layer.gate, x, noise);
    t.y.assign(layer.model_dim(), 0.0);
    for (auto i : t.gate.topk) {
        t.experts.push_back(trace_expert(layer.experts[i].weights, x));
        axpy(t.gate.weights[i] * layer.scale_factor, t.experts.back().out, t.y);
    }
    if (layer.residual_expert) {
        t.residual = trace_expert(layer.residual_expert->weights, x);
        axpy(1.0, t.residual->out, t.y);
    }
    return t;
}

inline void backprop_token(const MoeLayer& layer, const TokenTrace& t, std::span<const double> x,
                           std::span<const double> grad_y, std::span<const double> grad_importance, MoeLayer& grad)
{
    const auto& g = t.gate;
    const std::size_t k = g.topk.size();

    // dL/dG_i for the selected experts: output path plus the importance-balance path.
    Vector grad_weight(k);
    double weighted = 0.0;
    for (std::size_t s = 0; s < k; ++s) {
        const std::size_t i = g.topk[s];
        grad_weight[s] = layer.scale_factor * dot(grad_y, t.experts[s].out) + grad_importance[i];
        weighted += g.weights[i] * grad_weight[s];
    }
    // Softmax restricted to the selected logits; unselected logits receive nothing.
    for (std::size_t s = 0; s < k; ++s) {
        const std::size_t i = g.topk[s];
        const double grad_logit = g.weights[i] * (grad_weight[s] - weighted);
        for (std::size_t r = 0; r < x.size(); ++r)
            grad.gate.w_g(r, i) += x[r] * grad_logit;
        if (layer.gate.noise_enabled) {
            const double grad_raw = grad_logit * g.noise_draws[i] * sigmoid(g.noise_raw[i]);
            for (std::size_t r = 0; r < x.size(); ++r)
                grad.gate.w_noise(r, i) += x[r] * grad_raw;
        }
    }

    Vector grad_expert(grad_y.size());
    for (std::size_t s = 0; s < k; ++s) {
        const std::size_t i = g.topk[s];
        const double coeff = layer.scale_factor * g.weights[i];
        for (std::size_t c = 0; c < grad_y.size(); ++c)
            grad_expert[c] = coeff * grad_y[c];
        backprop_expert(layer.experts[i].weights, t.experts[s], x, grad_expert, grad.experts[i].weights);
    }
    if (layer.residual_expert)
        backprop_expert(layer.residual_expert->weights, *t.residual, x, grad_y, grad.residual_expert->weights);
}

/// d CV^2(v) / d v_i = (2/n)(v_i - mean)/mean^2 - 2 var/(n mean^3).
inline Vector cv_squared_grad(std::span<const double> v)
{
    const double n = static_cast<double>(v.size());
    double mean = 0.0;
    for (double e : v)
        mean += e;
    mean /= n;
    Vector out(v.size(), 0.0);
    if (mean == 0.0)
        return out;
    double var = 0.0;
    for (double e : v)
        var += (e - mean) * (e - mean);
    var /= n;
    for (std::size_t i = 0; i < v.size(); ++i)
        out[i] = 2.0 * (v[i] - mean) / (n * mean * mean) - 2.0 * var / (n * mean * mean * mean);
    return out;
}

template <typename Fn>
void for_each_token(std::size_t count, Fn&& fn)
{
    const std::size_t workers = std::min(thread_limit(), count);
    if (workers <= 1) {
        for (std::size_t t = 0; t < count; ++t)
            fn(t);
        return;
    }
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            for (std::size_t t = w; t < count; t += workers)
                fn(t);
        });
}

} // namespace detail

/// Objective on one batch:
///   L = (1/B) sum_t 1/2 |y_t - target_t|^2 + balance_coeff * (importance_loss + load_loss).
///
/// When `grad` is non-null it must have the layer's shapes; dL/dparam is added to it.
/// Top-k selection is treated as constant (straight-through), so only selected logits
/// receive gradient. The load term uses hard counts and contributes no gradient.
/// noise[t] holds token t's per-expert draws (ignored when the router's noise is off).
inline BatchResult evaluate_batch(const MoeLayer& layer, std::span<const Vector> inputs,
                                  std::span<const Vector> targets, std::span<const Vector> noise,
                                  double balance_coeff, MoeLayer* grad = nullptr)
{
    const std::size_t batch = inputs.size();
    if (batch == 0)
        throw InvalidArgument("evaluate_batch: empty batch");
    if (targets.size() != batch)
        throw ShapeError("evaluate_batch: target count differs from input count");
    if (layer.gate.noise_enabled && noise.size() != batch)
        throw ShapeError("evaluate_batch: one noise vector per token is required");

    std::vector<detail::TokenTrace> traces(batch);
    detail::for_each_token(batch, [&](std::size_t t) {
        traces[t] = detail::trace_token(layer, inputs[t],
                                        layer.gate.noise_enabled ? std::span<const double>(noise[t])
                                                                 : std::span<const double>());
    });

    BatchResult res;
    std::vector<RoutingRecord> routing(batch);
    std::vector<Vector> probs(batch);
    double sq = 0.0;
    for (std::size_t t = 0; t < batch; ++t) {
        if (targets[t].size() != traces[t].y.size())
            throw ShapeError("evaluate_batch: target length mismatch");
        sq += squared_distance(traces[t].y, targets[t]);
        routing[t].experts = traces[t].gate.topk;
        probs[t] = traces[t].gate.weights;
        for (double p : probs[t])
            if (p > 0.0)
                res.routing_entropy -= p * std::log(p);
    }
    const double b = static_cast<double>(batch);
    res.routing_entropy /= b;
    res.mse = sq / (b * static_cast<double>(layer.model_dim()));
    res.balance = balance_loss(routing, probs);
    res.loss = 0.5 * sq / b + balance_coeff * (res.balance.importance_loss + res.balance.load_loss);

    if (grad) {
        const std::size_t n = layer.expert_count();
        Vector importance(n, 0.0);
        for (const auto& p : probs)
            for (std::size_t i = 0; i < n; ++i)
                importance[i] += p[i];
        Vector grad_importance = detail::cv_squared_grad(importance);
        for (double& v : grad_importance)
            v *= balance_coeff;

        // Per-token gradients are computed independently and summed in token order,
        // so the result does not depend on the worker count.
        std::vector<MoeLayer> partial(batch);
        detail::for_each_token(batch, [&](std::size_t t) {
            partial[t] = zeros_like(layer);
            Vector grad_y(traces[t].y.size());
            for (std::size_t c = 0; c < grad_y.size(); ++c)
                grad_y[c] = (traces[t].y[c] - targets[t][c]) / b;
            detail::backprop_token(layer, traces[t], inputs[t], grad_y, grad_importance, partial[t]);
        });
        auto dst = parameter_blocks(*grad);
        for (auto& p : partial) {
            auto src = parameter_blocks(p);
            for (std::size_t blk = 0; blk < dst.size(); ++blk)
                axpy(1.0, src[blk], dst[blk]);
        }
    }
    return res;
}

/// Mean squared error of the layer against the teacher over `inputs`, router noise off.
inline double distillation_mse(const MoeLayer& layer, const DenseFfn& teacher, std::span<const Vector> inputs)
{
    if (inputs.empty())
        return 0.0;
    MoeLayer clean = layer;
    clean.gate.noise_enabled = false;
    double sq = 0.0;
    for (const auto& x : inputs) {
        const GateOutput g = gate_forward_with_noise(clean.gate, x, {});
        sq += squared_distance(moe_forward_with_gate(clean, x, g).y, ffn_forward(teacher, x).y);
    }
    return sq / (static_cast<double>(inputs.size()) * static_cast<double>(layer.model_dim()));
}

/// Trains `layer` in place to reproduce `teacher` on `data` with plain SGD.
///
/// Step s uses the batch data[(s*B + b) mod |data|], b < B, and the rate lr_at(s + 1),
/// so the final update runs at lr_final. Router noise, when enabled, is drawn from an
/// Rng seeded with cfg.seed.
inline TrainReport train_distill(MoeLayer& layer, const DenseFfn& teacher, std::span<const Vector> data,
                                 const TrainConfig& cfg)
{
    cfg.validate();
    layer.validate();
    teacher.validate();
    if (teacher.model_dim() != layer.model_dim())
        throw ShapeError("train_distill: teacher and layer model dimensions differ");
    if (data.empty())
        throw InvalidArgument("train_distill: no training data");

    std::vector<Vector> targets;
    targets.reserve(data.size());
    for (const auto& x : data)
        targets.push_back(ffn_forward(teacher, x).y);

    TrainReport report;
    report.initial_mse = distillation_mse(layer, teacher, data);

    Rng noise_rng(cfg.seed);
    const std::size_t batch = cfg.batch_size;
    std::vector<Vector> xs(batch), ts(batch), noise;
    for (std::size_t step = 0; step < cfg.total_steps; ++step) {
        for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t idx = (step * batch + b) % data.size();
            xs[b] = data[idx];
            ts[b] = targets[idx];
        }
        noise.clear();
        if (layer.gate.noise_enabled)
            for (std::size_t b = 0; b < batch; ++b)
                noise.push_back(random_normal_vector(layer.expert_count(), noise_rng));

        MoeLayer grad = zeros_like(layer);
        const BatchResult res = evaluate_batch(layer, xs, ts, noise, cfg.balance_coeff, &grad);
        const double lr = lr_at(step + 1, cfg);
        if (!std::isfinite(res.loss))
            throw TrainingDiverged("training diverged at step " + std::to_string(step), std::move(report));
        report.loss.push_back(res.loss);
        report.importance_loss.push_back(res.balance.importance_loss);
        report.load_loss.push_back(res.balance.load_loss);
        report.routing_entropy.push_back(res.routing_entropy);
        report.lr.push_back(lr);

        if (lr == 0.0)
            continue;
        auto params = parameter_blocks(layer);
        auto grads = parameter_blocks(grad);
        for (std::size_t blk = 0; blk < params.size(); ++blk)
            axpy(-lr, grads[blk], params[blk]);
    }
    report.final_mse = distillation_mse(layer, teacher, data);
    if (!std::isfinite(report.final_mse))
        throw TrainingDiverged("training diverged: final error is not finite", std::move(report));
    return report;
}

/// Same layer with every expert (and residual) replaced by a fresh random SwiGLU block of identical
/// shape, drawn with DenseFfn::random's scaling. The router is left untouched.
inline MoeLayer scratch_like(const MoeLayer& layer, Rng& rng)
{
    MoeLayer out = layer;
    auto reinit = [&](ExpertFfn& e) {
        e.weights = DenseFfn::random(e.weights.model_dim(), e.weights.hidden_dim(), rng);
    };
    for (auto& e : out.experts)
        reinit(e);
    if (out.residual_expert)
        reinit(*out.residual_expert);
    return out;
}

struct ScratchComparison {
    TrainReport split_report;
    TrainReport scratch_report;
};

/// Trains a layer cut from the teacher and a randomly initialized layer of identical
/// shape under the same config and data.
inline ScratchComparison compare_from_scratch(const DenseFfn& teacher, const ExpertPartition& partition,
                                              std::size_t k, std::span<const Vector> data, const TrainConfig& cfg,
                                              Rng& rng)
{
    MoeLayer split = assemble_moe(teacher, partition, k);
    MoeLayer scratch = scratch_like(split, rng);
    ScratchComparison out;
    out.split_report = train_distill(split, teacher, data, cfg);
    out.scratch_report = train_distill(scratch, teacher, data, cfg);
    return out;
}

} // namespace moeforge
