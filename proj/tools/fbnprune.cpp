// SPDX-License-Identifier: Apache-2.0
//
// fbnprune: train a small decoder, find functional networks in its MLP
// activations, prune by them, and evaluate.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "fbnprune/digest.hpp"
#include "fbnprune/error.hpp"
#include "fbnprune/pipeline.hpp"
#include "fbnprune/run_config.hpp"

namespace {

using namespace fbnprune;

struct Flags {
    std::string config_file;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    std::optional<int> workers;
    std::string out_dir;
    bool quiet = false;
    bool print_config = false;

    std::string method;
    std::optional<double> rate;
    std::string checkpoint;
};

cli::RunConfig resolve(const Flags & f) {
    std::vector<std::string> overrides = f.overrides;
    if (f.seed) overrides.push_back(fmt::format("seed={}", *f.seed));
    if (f.workers) overrides.push_back(fmt::format("workers={}", *f.workers));
    if (!f.out_dir.empty()) overrides.push_back("paths.out_dir=" + nlohmann::json(f.out_dir).dump());
    if (!f.method.empty()) overrides.push_back("prune.method=" + nlohmann::json(f.method).dump());
    if (f.rate) overrides.push_back(fmt::format("prune.rate={}", *f.rate));
    std::optional<std::filesystem::path> file;
    if (!f.config_file.empty()) file = f.config_file;
    return cli::load_run_config(file, overrides);
}

int run(int argc, char ** argv) {
    CLI::App app{"Functional-network pruning of a small decoder-only language model"};
    app.fallthrough();
    app.require_subcommand(1);
    Flags f;
    app.add_option("--config", f.config_file, "JSON config file overlaid on the defaults");
    app.add_option("--set", f.overrides, "Override one config value: dotted.key=value (repeatable)")->take_all();
    app.add_option("--seed", f.seed, "Run seed");
    app.add_option("--workers", f.workers, "Worker threads for decomposition cells");
    app.add_option("--out-dir", f.out_dir, "Run directory for artifacts");
    app.add_flag("-q,--quiet", f.quiet, "Suppress progress logging");
    app.add_flag("--print-config", f.print_config, "Print the effective config and exit");

    auto * train = app.add_subcommand("train", "Train the model on the corpus -> checkpoint.fbnp");
    auto * capture = app.add_subcommand("capture", "Draw calibration samples -> calibration.json [signals/]");
    auto * decompose = app.add_subcommand("decompose", "Group ICA per layer -> masks.json");
    auto * prune = app.add_subcommand("prune", "Select and remove MLP units -> plan.json, pruned.fbnp");
    prune->add_option("--method", f.method, "canica | random | magnitude | fluctuation");
    prune->add_option("--rate", f.rate, "Fraction of hidden units removed per layer");
    auto * eval = app.add_subcommand("eval", "Held-out perplexity -> report.json, report.csv");
    eval->add_option("--checkpoint", f.checkpoint, "Checkpoint to evaluate (default: pruned.fbnp, else checkpoint.fbnp)");
    auto * sweep = app.add_subcommand("sweep", "Method comparison or one-axis sweep -> sweep.json, sweep.csv");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError & e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : exit_code(ErrorKind::Config);
    }

    const cli::StageContext ctx{resolve(f), f.quiet ? cli::Logger{} : cli::Logger{[](const std::string & m) {
                                                           fmt::print(stderr, "[fbnprune] {}\n", m);
                                                       }}};
    if (f.print_config) {
        std::cout << ctx.config.json.dump(2) << "\n";
        return 0;
    }

    nlohmann::json manifest;
    if (train->parsed()) manifest = cli::run_train(ctx);
    if (capture->parsed()) manifest = cli::run_capture(ctx);
    if (decompose->parsed()) manifest = cli::run_decompose(ctx);
    if (prune->parsed()) manifest = cli::run_prune(ctx);
    if (eval->parsed()) {
        std::optional<std::filesystem::path> ck;
        if (!f.checkpoint.empty()) ck = f.checkpoint;
        manifest = cli::run_eval(ctx, ck);
    }
    if (sweep->parsed()) manifest = cli::run_sweep(ctx);
    std::cout << canonical_json(manifest.at("summary")) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char ** argv) {
    try {
        return run(argc, argv);
    } catch (const fbnprune::Error & e) {
        fmt::print(stderr, "fbnprune: {} error: {}\n", fbnprune::to_string(e.kind()), e.what());
        return fbnprune::exit_code(e.kind());
    } catch (const std::filesystem::filesystem_error & e) {
        fmt::print(stderr, "fbnprune: io error: {}\n", e.what());
        return fbnprune::exit_code(fbnprune::ErrorKind::Io);
    } catch (const nlohmann::json::exception & e) {
        fmt::print(stderr, "fbnprune: format error: {}\n", e.what());
        return fbnprune::exit_code(fbnprune::ErrorKind::Format);
    } catch (const std::exception & e) {
        fmt::print(stderr, "fbnprune: error: {}\n", e.what());
        return 1;
    }
}
