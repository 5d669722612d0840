// SPDX-License-Identifier: Apache-2.0
//
// Structured removal of MLP hidden units: activation statistics, per-method
// unit selection at a common keep count, mean-restoring compensation bias and
// physical slicing of the gate/up/down projections.
#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "fbnprune/model.hpp"
#include "fbnprune/random.hpp"

namespace fbnprune::pruning {

using Vector = Eigen::VectorXd;

enum class Method { Canica, Random, Magnitude, Fluctuation };

std::string_view to_string(Method m) noexcept;
Method parse_method(std::string_view name);

/// Per-layer moments of the hidden product activation (silu(gate) * up).
struct LayerStats {
    Vector mean;
    Vector m2;  // sum of squared deviations from the mean
    std::size_t count = 0;

    Vector variance() const;  // population variance
    /// Chan et al. pairwise combination; associative up to rounding.
    void merge(const LayerStats & other);
};

struct ActivationStats {
    std::vector<LayerStats> layers;
    std::size_t token_count = 0;

    void add(std::span<const model::CaptureRecord> records);
    void merge(const ActivationStats & other);
};

ActivationStats collect_stats(const model::ModelCheckpoint & ckpt, std::span<const std::vector<model::Token>> samples);

struct PruningPlan {
    Method method = Method::Canica;
    double rate = 0.0;
    std::uint64_t seed = 0;
    std::vector<std::vector<int>> per_layer_kept;
    bool compensation = false;
    std::optional<std::vector<Eigen::VectorXf>> per_layer_bias;
};

struct PlanInputs {
    /// Per-layer unit scores from the functional-network decomposition (canica).
    const std::vector<Vector> * canica_scores = nullptr;
    /// Activation statistics (fluctuation).
    const ActivationStats * stats = nullptr;
    RngSeed seed{0};
};

/// Per-layer unit importance for a method; higher means more important.
std::vector<Vector> method_scores(Method method, const model::ModelCheckpoint & ckpt, const PlanInputs & inputs);

/// Keeps keep_count(d_hidden, rate) units per layer ranked by method_scores.
PruningPlan build_plan(Method method, const model::ModelCheckpoint & ckpt, double rate, const PlanInputs & inputs);

/// bias_l = sum over pruned units j of mean_product[j] * down_proj[:, j].
std::vector<Eigen::VectorXf> compute_compensation(const model::ModelCheckpoint & ckpt, const PruningPlan & plan,
                                                  const ActivationStats & stats);

/// Slices every layer to its kept units and adds the plan's bias (if any) to
/// the down projection bias. Meta is left as is.
model::ModelCheckpoint apply_plan(const model::ModelCheckpoint & ckpt, const PruningPlan & plan);

/// Units of each layer not in the plan's kept list.
std::vector<std::vector<int>> pruned_units(const model::ModelConfig & config, const PruningPlan & plan);

nlohmann::json to_json(const PruningPlan & plan);
PruningPlan plan_from_json(const nlohmann::json & j);

}  // namespace fbnprune::pruning
