// SPDX-License-Identifier: Apache-2.0
//
// Command-line stages. Each stage reads its inputs from the run directory,
// writes its outputs there, and finishes by writing <stage>.manifest.json
// with the effective config and the SHA-256 of every input and output.
// Outputs of a failed stage are removed.
//
//   train      -> checkpoint.fbnp
//   capture    -> calibration.json [signals/*.fbns]
//   decompose  -> masks.json
//   prune      -> plan.json pruned.fbnp
//   eval       -> report.json report.csv
//   sweep      -> sweep.json sweep.csv
#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "fbnprune/run_config.hpp"

namespace fbnprune::cli {

using Logger = std::function<void(const std::string &)>;

struct StageContext {
    RunConfig config;
    Logger log;
};

nlohmann::json run_train(const StageContext & ctx);
nlohmann::json run_capture(const StageContext & ctx);
/// Runs capture first when calibration.json is absent.
nlohmann::json run_decompose(const StageContext & ctx);
/// With method canica, runs decompose first when masks.json is absent.
nlohmann::json run_prune(const StageContext & ctx);
/// Evaluates `checkpoint`, defaulting to pruned.fbnp when present and
/// checkpoint.fbnp otherwise.
nlohmann::json run_eval(const StageContext & ctx, const std::optional<std::filesystem::path> & checkpoint = {});
nlohmann::json run_sweep(const StageContext & ctx);

}  // namespace fbnprune::cli
