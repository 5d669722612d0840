// SPDX-License-Identifier: Apache-2.0
//
// Effective configuration of a command-line run. The JSON form is the
// defaults tree overlaid with a config file and then with dotted-key
// overrides; keys absent from the defaults are rejected.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fbnprune/evalkit.hpp"
#include "fbnprune/fbn.hpp"
#include "fbnprune/model.hpp"
#include "fbnprune/pruning.hpp"
#include "fbnprune/trainer.hpp"

namespace fbnprune::cli {

struct SweepSettings {
    evalkit::Axis axis = evalkit::Axis::None;
    std::vector<double> values;
    std::vector<pruning::Method> methods;
    std::vector<double> rates;  // axis none only
    double rate = 0.2;          // fixed rate for the other axes
    std::vector<std::uint64_t> seeds;
};

struct RunConfig {
    nlohmann::json json;  // effective tree, echoed into artifacts

    std::uint64_t seed = 0;
    int workers = 1;
    std::filesystem::path corpus;
    std::filesystem::path out_dir;
    std::size_t heldout_bytes = 0;

    model::ModelConfig model;
    model::TrainConfig train;

    std::size_t calibration_samples = 0;
    bool dump_signals = false;

    fbn::FbnConfig fbn;

    pruning::Method method = pruning::Method::Canica;
    double rate = 0.2;
    bool compensation = true;

    std::size_t eval_max_tokens = 0;

    SweepSettings sweep;

    evalkit::ExperimentConfig experiment() const;
    /// SHA-256 of the canonical effective tree.
    std::string digest() const;
};

nlohmann::json default_config();

/// Sets `dotted_key` (e.g. "fbn.tau") to `value`, parsed as JSON when it
/// parses and taken as a string otherwise. Unknown keys are a Config error.
void apply_override(nlohmann::json & tree, const std::string & dotted_key, const std::string & value);

/// Overlays `patch` onto `tree`, rejecting keys the tree does not have.
void merge_config(nlohmann::json & tree, const nlohmann::json & patch, const std::string & prefix = "");

/// Typed view of a complete tree; Config error on bad types or values.
RunConfig parse_run_config(const nlohmann::json & tree);

/// Defaults, then the optional file, then each "key=value" override.
RunConfig load_run_config(const std::optional<std::filesystem::path> & file, const std::vector<std::string> & overrides);

}  // namespace fbnprune::cli
