#pragma once

// Subcommands of the moeforge tool. Kept in a header so tests can drive them in-process.

#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "moeforge/moeforge.hpp"

namespace moeforge::cli {

enum ExitCode : int { kOk = 0, kUsage = 2, kDataError = 3, kDivergence = 4 };

/// Settings shared by the subcommands. Loaded from --config (JSON); flags override.
///
///   {
///     "partition": {"method": "independent_random", "experts": 4, "topk": 2,
///                   "residual_threshold": 0.5, "gate_init": "zeros", "max_iters": 100,
///                   "importance_samples": 512, "seed": 0},
///     "train":     {"lr_max": 0.05, "lr_final": 0.005, "warmup_steps": 10, "total_steps": 500,
///                   "batch_size": 32, "balance_coeff": 0.01, "seed": 0},
///     "data":      {"samples": 256, "seed": 1},
///     "sampler":   {"strategy": "dynamic_uniform", "preset": "presets/llama_v1.json",
///                   "reference_loss": [...], "observed_losses": [[...], ...],
///                   "update_interval_tokens": 1000, "tokens_per_draw": 1, "draws": 10000, "seed": 0}
///   }
struct RunConfig {
    PartitionMethod method = PartitionMethod::IndependentRandom;
    std::size_t experts = 4;
    std::size_t topk = 2;
    double residual_threshold = 0.5;
    std::string gate_init = "zeros";
    std::size_t max_iters = 100;
    std::size_t importance_samples = 512;
    std::uint64_t partition_seed = 0;

    TrainConfig train;
    std::size_t data_samples = 256;
    std::uint64_t data_seed = 1;

    SamplingStrategy strategy = SamplingStrategy::StaticLlama;
    std::string preset_path;
    std::optional<DomainWeights> inline_weights;
    Vector reference_loss;
    std::vector<Vector> observed_losses;
    std::size_t update_interval_tokens = 1000;
    std::size_t tokens_per_draw = 1;
    std::size_t draws = 10000;
    std::uint64_t sampler_seed = 0;
};

inline RunConfig load_run_config(const std::string& path)
{
    RunConfig c;
    const auto j = read_json(path);
    const auto base = std::filesystem::path(path).parent_path();
    try {
        if (auto p = j.find("partition"); p != j.end()) {
            if (p->contains("method"))
                c.method = parse_partition_method(p->at("method").get<std::string>());
            c.experts = p->value("experts", c.experts);
            c.topk = p->value("topk", c.topk);
            c.residual_threshold = p->value("residual_threshold", c.residual_threshold);
            c.gate_init = p->value("gate_init", c.gate_init);
            c.max_iters = p->value("max_iters", c.max_iters);
            c.importance_samples = p->value("importance_samples", c.importance_samples);
            c.partition_seed = p->value("seed", c.partition_seed);
        }
        if (auto t = j.find("train"); t != j.end()) {
            c.train.lr_max = t->value("lr_max", c.train.lr_max);
            c.train.lr_final = t->value("lr_final", c.train.lr_final);
            c.train.warmup_steps = t->value("warmup_steps", c.train.warmup_steps);
            c.train.total_steps = t->value("total_steps", c.train.total_steps);
            c.train.batch_size = t->value("batch_size", c.train.batch_size);
            c.train.balance_coeff = t->value("balance_coeff", c.train.balance_coeff);
            c.train.seed = t->value("seed", c.train.seed);
            c.train.validate();
        }
        if (auto d = j.find("data"); d != j.end()) {
            c.data_samples = d->value("samples", c.data_samples);
            c.data_seed = d->value("seed", c.data_seed);
        }
        if (auto s = j.find("sampler"); s != j.end()) {
            if (s->contains("strategy"))
                c.strategy = parse_sampling_strategy(s->at("strategy").get<std::string>());
            if (s->contains("preset")) {
                auto preset = std::filesystem::path(s->at("preset").get<std::string>());
                if (preset.is_relative() && !std::filesystem::exists(preset))
                    preset = base / preset;
                if (!std::filesystem::exists(preset))
                    throw FormatError("sampler preset '" + preset.string() + "' does not exist");
                c.preset_path = preset.string();
            }
            if (s->contains("weights"))
                c.inline_weights = domain_weights_from_json(*s);
            c.reference_loss = s->value("reference_loss", Vector{});
            c.observed_losses = s->value("observed_losses", std::vector<Vector>{});
            c.update_interval_tokens = s->value("update_interval_tokens", c.update_interval_tokens);
            c.tokens_per_draw = s->value("tokens_per_draw", c.tokens_per_draw);
            c.draws = s->value("draws", c.draws);
            c.sampler_seed = s->value("seed", c.sampler_seed);
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("config '" + path + "': " + e.what());
    }
    return c;
}

/// Inputs x ~ N(0, I_d), drawn in order from Rng(seed).
inline std::vector<Vector> synthetic_inputs(std::size_t count, std::size_t d, std::uint64_t seed)
{
    Rng rng(seed);
    std::vector<Vector> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i)
        out.push_back(random_normal_vector(d, rng));
    return out;
}

inline GateInit parse_gate_init(const std::string& s, std::uint64_t seed)
{
    if (s == "zeros")
        return GateInit::zeros();
    if (s == "random")
        return GateInit::random(seed);
    throw InvalidArgument("unknown gate init '" + s + "' (expected zeros or random)");
}

/// Builds the partition for `method`. The sharing methods score neurons on synthetic
/// inputs: the inputs are k-means clustered into n groups and each group's importance is
/// accumulated under L = 1/2 |y - target|^2 with random N(0, 1) targets.
inline ExpertPartition build_partition(const DenseFfn& ffn, const RunConfig& c, std::vector<Vector>* importance_out)
{
    Rng base(c.partition_seed);
    Rng split_rng = base.split();
    Rng data_rng = base.split();
    switch (c.method) {
    case PartitionMethod::IndependentRandom:
        return split_independent_random(ffn.hidden_dim(), c.experts, split_rng);
    case PartitionMethod::IndependentClustering:
        return split_independent_clustering(ffn, c.experts, c.max_iters, split_rng);
    case PartitionMethod::SharingInner:
    case PartitionMethod::SharingInter: {
        const std::size_t m = moeforge::detail::checked_expert_size(ffn.hidden_dim(), c.experts);
        std::vector<Vector> inputs, targets;
        for (std::size_t i = 0; i < c.importance_samples; ++i) {
            inputs.push_back(random_normal_vector(ffn.model_dim(), data_rng));
            targets.push_back(random_normal_vector(ffn.model_dim(), data_rng));
        }
        const auto groups = group_data_by_clustering(inputs, c.experts, split_rng);
        auto importance = group_importance(ffn, make_quadratic_groups(ffn, inputs, targets, groups));
        if (importance_out)
            *importance_out = importance;
        return c.method == PartitionMethod::SharingInner ? split_sharing_inner(importance, m)
                                                         : split_sharing_inter(importance, m, c.residual_threshold);
    }
    }
    throw InvalidArgument("unhandled partition method");
}

inline std::string partition_summary(const ExpertPartition& p)
{
    std::ostringstream os;
    os << "method " << to_string(p.method) << ": " << p.expert_count() << " experts of " << p.expert_size
       << " neurons (hidden size " << p.hidden_dim << ")\n";
    for (std::size_t j = 0; j < p.sets.size(); ++j)
        os << "  expert " << j << ": " << p.sets[j].size() << " neurons\n";
    os << "  mean pairwise overlap: " << format_double(mean_pairwise_overlap(p)) << "\n";
    os << "  residual neurons: " << (p.shared_residual ? p.shared_residual->size() : 0) << "\n";
    return os.str();
}

namespace detail {

inline std::string out_path(const std::string& dir, const std::string& name)
{
    std::filesystem::create_directories(dir);
    return (std::filesystem::path(dir) / name).string();
}

/// Domain inputs for `route`: domain j draws x ~ N(mu_j, I) with mu_j ~ N(0, 4 I) fixed per seed.
inline std::vector<Vector> domain_centers(std::size_t domains, std::size_t d, std::uint64_t seed)
{
    Rng rng(seed);
    std::vector<Vector> out;
    for (std::size_t j = 0; j < domains; ++j)
        out.push_back(random_normal_vector(d, rng, 2.0));
    return out;
}

inline std::vector<std::string> split_list(const std::string& s)
{
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty())
        out.push_back(cur);
    return out;
}

} // namespace detail

/// Parses and runs one command line. Messages go to `out`, errors to `err`.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr)
{
    CLI::App app{"moeforge: build sparse MoE layers from dense SwiGLU FFNs"};
    app.require_subcommand(1);

    std::string config_path, out_dir, ffn_file, layer_file, teacher_file, partition_file, routing_file, method_name,
        gate_init, domains_list;
    std::size_t experts = 0, topk = 0, dim = 8, hidden = 16, layers = 0, tokens_per_domain = 100;
    std::uint64_t seed = 0;
    double residual_threshold = -1.0;
    std::vector<std::string> layer_files;

    auto* make_ffn = app.add_subcommand("make-ffn", "write a random dense SwiGLU FFN (teacher) as MFT");
    make_ffn->add_option("--d", dim, "model dimension")->check(CLI::PositiveNumber);
    make_ffn->add_option("--hidden", hidden, "intermediate size d_h")->check(CLI::PositiveNumber);
    make_ffn->add_option("--seed", seed);
    make_ffn->add_option("--out", out_dir, "output MFT file")->required();

    auto* split = app.add_subcommand("split", "partition an FFN into experts and assemble the MoE layer");
    split->add_option("--ffn", ffn_file, "dense FFN MFT")->required();
    split->add_option("--method", method_name, "independent_random|independent_clustering|sharing_inner|sharing_inter");
    split->add_option("--experts", experts, "expert count N");
    split->add_option("--topk", topk, "experts selected per token");
    split->add_option("--seed", seed);
    split->add_option("--residual-threshold", residual_threshold, "sharing_inter residual vote fraction");
    split->add_option("--gate-init", gate_init, "zeros|random");
    split->add_option("--config", config_path);
    split->add_option("--out", out_dir, "output directory")->required();

    auto* assemble = app.add_subcommand("assemble", "assemble an MoE layer from an FFN and a partition file");
    assemble->add_option("--ffn", ffn_file)->required();
    assemble->add_option("--partition", partition_file)->required();
    assemble->add_option("--topk", topk)->required();
    assemble->add_option("--gate-init", gate_init);
    assemble->add_option("--seed", seed);
    assemble->add_option("--out", out_dir, "output directory")->required();

    auto* train = app.add_subcommand("train", "distill the dense teacher into an MoE layer");
    train->add_option("--layer", layer_file)->required();
    train->add_option("--teacher", teacher_file)->required();
    train->add_option("--config", config_path);
    train->add_option("--seed", seed, "overrides train.seed");
    train->add_option("--out", out_dir)->required();

    auto* route = app.add_subcommand("route", "route synthetic per-domain tokens through layers; emit routing CSV");
    route->add_option("--layer", layer_files, "layer MFT (repeat for several layers)")->required();
    route->add_option("--tokens-per-domain", tokens_per_domain);
    route->add_option("--domains", domains_list, "comma-separated domain labels");
    route->add_option("--seed", seed);
    route->add_option("--out", out_dir, "output directory")->required();

    auto* schedule = app.add_subcommand("schedule", "run a domain sampling schedule; emit weight log CSV");
    schedule->add_option("--config", config_path)->required();
    schedule->add_option("--seed", seed, "overrides sampler.seed");
    schedule->add_option("--out", out_dir)->required();

    auto* analyze = app.add_subcommand("analyze", "per-layer routing heatmaps and domain distance matrices");
    analyze->add_option("--routing", routing_file, "routing CSV")->required();
    analyze->add_option("--experts", experts, "expert count (default: inferred)");
    analyze->add_option("--layers", layers, "layer count (default: inferred)");
    analyze->add_option("--domains", domains_list, "comma-separated domain labels");
    analyze->add_option("--out", out_dir)->required();

    std::vector<const char*> argv{"moeforge"};
    for (const auto& a : args)
        argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << "\n";
        return kUsage;
    }

    try {
        if (*make_ffn) {
            Rng rng(seed);
            const DenseFfn ffn = DenseFfn::random(dim, hidden, rng);
            write_mft(out_dir, ffn_to_tensors(ffn));
            out << "wrote FFN d=" << dim << " d_h=" << hidden << " to " << out_dir << "\n";
            return kOk;
        }

        if (*split) {
            RunConfig c = config_path.empty() ? RunConfig{} : load_run_config(config_path);
            if (!method_name.empty())
                c.method = parse_partition_method(method_name);
            if (experts)
                c.experts = experts;
            if (topk)
                c.topk = topk;
            if (split->count("--seed"))
                c.partition_seed = seed;
            if (residual_threshold >= 0.0)
                c.residual_threshold = residual_threshold;
            if (!gate_init.empty())
                c.gate_init = gate_init;
            const DenseFfn ffn = ffn_from_tensors(read_mft(ffn_file));
            std::vector<Vector> importance;
            const ExpertPartition p = build_partition(ffn, c, &importance);
            validate_partition(p);
            const MoeLayer layer = assemble_moe(ffn, p, c.topk, parse_gate_init(c.gate_init, c.partition_seed));
            write_file(detail::out_path(out_dir, "partition.json"), partition_to_text(p));
            write_mft(detail::out_path(out_dir, "layer.mft"), layer_to_tensors(layer));
            if (!importance.empty()) {
                nlohmann::ordered_json j = nlohmann::ordered_json::array();
                for (const auto& v : importance)
                    j.push_back(v);
                write_file(detail::out_path(out_dir, "importance.json"), j.dump(2) + "\n");
            }
            out << partition_summary(p);
            return kOk;
        }

        if (*assemble) {
            const DenseFfn ffn = ffn_from_tensors(read_mft(ffn_file));
            const ExpertPartition p = partition_from_json(read_json(partition_file));
            const MoeLayer layer = assemble_moe(ffn, p, topk, parse_gate_init(gate_init.empty() ? "zeros" : gate_init, seed));
            write_mft(detail::out_path(out_dir, "layer.mft"), layer_to_tensors(layer));
            out << "assembled " << layer.expert_count() << " experts, k=" << layer.gate.k
                << ", scale factor " << format_double(layer.scale_factor) << "\n";
            return kOk;
        }

        if (*train) {
            RunConfig c = config_path.empty() ? RunConfig{} : load_run_config(config_path);
            if (train->count("--seed"))
                c.train.seed = seed;
            MoeLayer layer = layer_from_tensors(read_mft(layer_file));
            const DenseFfn teacher = ffn_from_tensors(read_mft(teacher_file));
            const auto data = synthetic_inputs(c.data_samples, teacher.model_dim(), c.data_seed);
            const std::string csv_path = detail::out_path(out_dir, "train_report.csv");
            try {
                const TrainReport r = train_distill(layer, teacher, data, c.train);
                write_file(csv_path, train_report_csv(r));
                write_mft(detail::out_path(out_dir, "layer.mft"), layer_to_tensors(layer));
                out << "initial mse " << format_double(r.initial_mse) << ", final mse " << format_double(r.final_mse)
                    << "\n";
            } catch (const TrainingDiverged& e) {
                write_file(csv_path, train_report_csv(e.partial_report()));
                err << "error: " << e.what() << "\n";
                return kDivergence;
            }
            return kOk;
        }

        if (*route) {
            std::vector<MoeLayer> stack;
            for (const auto& f : layer_files)
                stack.push_back(layer_from_tensors(read_mft(f)));
            const auto domains = domains_list.empty() ? default_domains() : detail::split_list(domains_list);
            const std::size_t d = stack.front().model_dim();
            for (const auto& l : stack)
                if (l.model_dim() != d)
                    throw ShapeError("route: layers differ in model dimension");
            const auto centers = detail::domain_centers(domains.size(), d, seed);
            Rng rng(seed ^ 0x5eed5eedULL);
            std::vector<RoutingRow> rows;
            std::uint64_t token = 0;
            for (std::size_t dom = 0; dom < domains.size(); ++dom)
                for (std::size_t t = 0; t < tokens_per_domain; ++t, ++token) {
                    Vector x = random_normal_vector(d, rng);
                    axpy(1.0, centers[dom], x);
                    for (std::size_t l = 0; l < stack.size(); ++l) {
                        const auto res = moe_forward(stack[l], x, rng);
                        for (std::size_t s = 0; s < res.routing.experts.size(); ++s)
                            rows.push_back({token, domains[dom], l, res.routing.experts[s], res.routing.weights[s]});
                        x = res.y;
                    }
                }
            write_file(detail::out_path(out_dir, "routing.csv"), routing_rows_csv(rows));
            out << "wrote " << rows.size() << " routing rows\n";
            return kOk;
        }

        if (*schedule) {
            RunConfig c = load_run_config(config_path);
            if (schedule->count("--seed"))
                c.sampler_seed = seed;
            DomainWeights base;
            if (c.inline_weights)
                base = *c.inline_weights;
            else if (!c.preset_path.empty())
                base = domain_weights_from_json(read_json(c.preset_path));
            else
                base = DomainWeights::uniform(default_domains());
            const bool dynamic =
                c.strategy == SamplingStrategy::DynamicLlama || c.strategy == SamplingStrategy::DynamicUniform;
            if (dynamic && c.observed_losses.empty())
                throw InvalidArgument("schedule: dynamic strategies need sampler.observed_losses");
            SamplerState state = make_sampler(c.strategy, base, c.reference_loss, c.update_interval_tokens,
                                              c.tokens_per_draw);
            Rng rng(c.sampler_seed);
            const auto log = run_schedule(state, c.draws, rng, [&](std::size_t i) {
                return c.observed_losses[i % c.observed_losses.size()];
            });
            write_file(detail::out_path(out_dir, "schedule.csv"), schedule_csv(log, base.domains));
            out << "wrote " << log.size() << " schedule rows (" << to_string(c.strategy) << ")\n";
            return kOk;
        }

        if (*analyze) {
            const auto rows = parse_routing_csv(read_file(routing_file));
            const auto domains = domains_list.empty() ? default_domains() : detail::split_list(domains_list);
            std::size_t n_layers = layers, n_experts = experts;
            for (const auto& r : rows) {
                if (!layers)
                    n_layers = std::max(n_layers, r.layer + 1);
                if (!experts)
                    n_experts = std::max(n_experts, r.expert_id + 1);
            }
            const RoutingStats stats = collect_routing(rows, n_layers, n_experts, domains);
            std::filesystem::create_directories(out_dir);
            for (std::size_t l = 0; l < n_layers; ++l) {
                write_file(detail::out_path(out_dir, "heatmap_layer" + std::to_string(l) + ".csv"),
                           heatmap_csv(stats, l));
                // Distances cover the domains that have routed tokens at this layer.
                std::vector<std::size_t> present;
                std::vector<std::string> labels;
                for (std::size_t dom = 0; dom < domains.size(); ++dom)
                    if (stats.tokens(l, dom) > 0) {
                        present.push_back(dom);
                        labels.push_back(domains[dom]);
                    }
                write_file(detail::out_path(out_dir, "l2_layer" + std::to_string(l) + ".csv"),
                           distance_csv(routing_l2_matrix(stats, l, present), labels));
            }
            out << "analyzed " << rows.size() << " routing rows over " << n_layers << " layer(s)\n";
            return kOk;
        }
    } catch (const DivergenceError& e) {
        err << "error: " << e.what() << "\n";
        return kDivergence;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kDataError;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: " << e.what() << "\n";
        return kDataError;
    }
    return kUsage;
}

} // namespace moeforge::cli
