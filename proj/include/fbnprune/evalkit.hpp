// SPDX-License-Identifier: Apache-2.0
//
// Held-out perplexity and the experiment drivers built on it: method
// comparisons over (method, rate, seed) cells and one-axis sweeps.
#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "fbnprune/calibration.hpp"
#include "fbnprune/fbn.hpp"
#include "fbnprune/model.hpp"
#include "fbnprune/pruning.hpp"

namespace fbnprune::evalkit {

using model::Token;

struct EvalReport {
    std::string model_digest;
    std::string dataset_digest;
    std::size_t token_count = 0;
    double nll_sum = 0.0;
    double perplexity = 0.0;
    std::string method = "none";
    double rate = 0.0;
    nlohmann::json config = nlohmann::json::object();
};

nlohmann::json to_json(const EvalReport & r);

/// Summed natural-log NLL of targets[t] under the softmax of logits row t.
double nll_from_logits(const model::Tensor & logits, std::span<const Token> targets);

/// Windows of context_len + 1 tokens with stride context_len, so every token
/// after the first is predicted exactly once; a trailing window needs >= 2 tokens.
/// max_tokens > 0 truncates the held-out stream first.
EvalReport perplexity(const model::ModelCheckpoint & ckpt, std::span<const Token> heldout, std::size_t max_tokens = 0);

enum class Axis { None, NComponents, CalibrationSize, PruningRate };

std::string_view to_string(Axis a) noexcept;
Axis parse_axis(std::string_view name);

struct ExperimentConfig {
    fbn::FbnConfig fbn;                     // seed is replaced per cell
    std::size_t calibration_samples = 3200;
    bool compensation = true;
    int workers = 1;
    std::size_t eval_max_tokens = 0;
};

nlohmann::json to_json(const ExperimentConfig & c);

struct ResultRow {
    std::string method;
    double rate = 0.0;
    std::uint64_t seed = 0;
    std::string axis;
    std::optional<double> x;
    double perplexity = 0.0;
    std::size_t tokens = 0;
    nlohmann::json extras = nlohmann::json::object();
};

struct SweepResult {
    std::string axis;
    std::vector<ResultRow> rows;
    std::vector<ResultRow> baselines;
};

struct ExperimentInputs {
    const model::ModelCheckpoint * ckpt = nullptr;
    const calibration::Corpus * calibration_source = nullptr;
    const calibration::Corpus * heldout = nullptr;
};

using Log = std::function<void(const std::string &)>;

/// One row per (seed, method, rate), in that nesting order, plus the
/// unpruned baseline row.
SweepResult compare_methods(const ExperimentInputs & in, std::span<const pruning::Method> methods,
                            std::span<const double> rates, std::span<const std::uint64_t> seeds,
                            const ExperimentConfig & cfg, const Log & log = {});

/// One pipeline run per axis value for each (seed, method) with everything
/// else fixed. Calibration-size values must be multiples of the group size;
/// their groups are nested prefixes of one plan over the largest value.
SweepResult sweep(const ExperimentInputs & in, Axis axis, std::span<const double> values,
                  std::span<const pruning::Method> methods, double rate, std::span<const std::uint64_t> seeds,
                  const ExperimentConfig & cfg, const Log & log = {});

std::string to_csv(const SweepResult & r);
nlohmann::json to_json(const SweepResult & r);

}  // namespace fbnprune::evalkit
