#pragma once

// Drives the moeforge command line in-process and compares output trees.

#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"

namespace harness {

namespace fs = std::filesystem;

struct CliResult {
    int code = 0;
    std::string out;
    std::string err;
};

inline CliResult run(const std::vector<std::string>& args)
{
    std::ostringstream out, err;
    const int code = moeforge::cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

/// Fresh, empty directory under the system temp dir.
inline std::string scratch_dir(const std::string& name)
{
    const fs::path dir = fs::temp_directory_path() / ("moeforge_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir.string();
}

inline std::string path(const std::string& dir, const std::string& file) { return (fs::path(dir) / file).string(); }

/// Relative path -> contents for every regular file below `dir`.
inline std::vector<std::pair<std::string, std::string>> snapshot(const std::string& dir)
{
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file())
            out.emplace_back(fs::relative(e.path(), dir).string(), moeforge::read_file(e.path().string()));
    std::sort(out.begin(), out.end());
    return out;
}

/// Runs every subcommand twice from identical inputs into two separate trees and returns
/// one message per command whose outputs differ (empty when all are bytewise identical).
/// `config_dir` holds the shipped example configs.
inline std::vector<std::string> determinism_failures(const std::string& work, const std::string& config_dir)
{
    std::vector<std::string> failures;
    const std::string inputs = path(work, "inputs");
    fs::create_directories(inputs);
    const std::string teacher = path(inputs, "teacher.mft");
    if (run({"make-ffn", "--d", "8", "--hidden", "16", "--seed", "5", "--out", teacher}).code != 0)
        return {"make-ffn (setup) failed"};
    if (run({"split", "--ffn", teacher, "--method", "sharing_inter", "--experts", "4", "--topk", "2", "--seed", "9",
             "--residual-threshold", "0.5", "--gate-init", "random", "--out", path(inputs, "split")})
            .code != 0)
        return {"split (setup) failed"};
    const std::string layer = path(inputs, "split/layer.mft");

    struct Command {
        std::string name;
        std::vector<std::string> args; // "--out" and its directory are appended per run
        std::string out_file;          // non-empty when --out names a file rather than a directory
    };
    const std::vector<Command> commands{
        {"make-ffn", {"make-ffn", "--d", "8", "--hidden", "16", "--seed", "3"}, "ffn.mft"},
        {"split independent_random",
         {"split", "--ffn", teacher, "--method", "independent_random", "--experts", "4", "--topk", "2", "--seed", "1"},
         ""},
        {"split independent_clustering",
         {"split", "--ffn", teacher, "--method", "independent_clustering", "--experts", "4", "--topk", "2", "--seed",
          "1"},
         ""},
        {"split sharing_inner",
         {"split", "--ffn", teacher, "--method", "sharing_inner", "--experts", "4", "--topk", "1", "--seed", "1"},
         ""},
        {"split sharing_inter",
         {"split", "--ffn", teacher, "--method", "sharing_inter", "--experts", "4", "--topk", "2", "--seed", "1",
          "--residual-threshold", "0.5"},
         ""},
        {"assemble",
         {"assemble", "--ffn", teacher, "--partition", path(inputs, "split/partition.json"), "--topk", "1",
          "--gate-init", "random", "--seed", "4"},
         ""},
        {"train",
         {"train", "--layer", layer, "--teacher", teacher, "--config", path(config_dir, "train_smoke.json"), "--seed",
          "2"},
         ""},
        {"route", {"route", "--layer", layer, "--layer", layer, "--tokens-per-domain", "20", "--seed", "6"}, ""},
        {"schedule dynamic",
         {"schedule", "--config", path(config_dir, "schedule_dynamic_uniform.json"), "--seed", "8"},
         ""},
        {"schedule static", {"schedule", "--config", path(config_dir, "schedule_static_llama.json")}, ""},
    };

    for (const auto& c : commands) {
        std::vector<std::vector<std::pair<std::string, std::string>>> trees;
        bool ok = true;
        for (int rep = 0; rep < 2; ++rep) {
            const std::string dir = path(work, "run" + std::to_string(rep));
            fs::remove_all(dir);
            fs::create_directories(dir);
            auto args = c.args;
            args.push_back("--out");
            args.push_back(c.out_file.empty() ? dir : path(dir, c.out_file));
            const auto res = run(args);
            if (res.code != 0) {
                failures.push_back(c.name + ": exit " + std::to_string(res.code) + " " + res.err);
                ok = false;
                break;
            }
            trees.push_back(snapshot(dir));
        }
        if (ok && (trees[0] != trees[1] || trees[0].empty()))
            failures.push_back(c.name + ": outputs differ between identical runs");
    }

    // analyze consumes a routing file produced above.
    const std::string routed = path(work, "routed");
    fs::create_directories(routed);
    if (run({"route", "--layer", layer, "--tokens-per-domain", "20", "--seed", "6", "--out", routed}).code != 0) {
        failures.push_back("route (analyze setup) failed");
        return failures;
    }
    std::vector<std::vector<std::pair<std::string, std::string>>> trees;
    for (int rep = 0; rep < 2; ++rep) {
        const std::string dir = path(work, "analyze" + std::to_string(rep));
        fs::remove_all(dir);
        const auto res = run({"analyze", "--routing", path(routed, "routing.csv"), "--experts", "4", "--out", dir});
        if (res.code != 0) {
            failures.push_back("analyze: exit " + std::to_string(res.code) + " " + res.err);
            return failures;
        }
        trees.push_back(snapshot(dir));
    }
    if (trees[0] != trees[1] || trees[0].empty())
        failures.push_back("analyze: outputs differ between identical runs");
    return failures;
}

} // namespace harness
