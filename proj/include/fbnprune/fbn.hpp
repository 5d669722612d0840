// SPDX-License-Identifier: Apache-2.0
//
// Functional-network identification: per-layer neuron signals, group spatial
// ICA (per-subject whitening, group PCA, FastICA over neurons), thresholded
// source maps, OR aggregation and per-unit importance scores.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "fbnprune/calibration.hpp"
#include "fbnprune/model.hpp"
#include "fbnprune/numerics.hpp"

namespace fbnprune::fbn {

using numerics::Index;
using numerics::Matrix;
using numerics::Vector;
using BoolMatrix = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;
using BoolVector = Eigen::Array<bool, Eigen::Dynamic, 1>;

enum class SignalMode { Gate, Up, Both, Product };

std::string_view to_string(SignalMode mode) noexcept;
SignalMode parse_signal_mode(std::string_view name);
/// Number of signal columns for a layer of width d_hidden.
Index signal_width(SignalMode mode, Index d_hidden) noexcept;

struct FbnConfig {
    Index n_components = 128;
    double tau = 2.0;
    std::size_t group_size = 40;
    SignalMode signal_mode = SignalMode::Both;
    RngSeed seed{0};
    numerics::FastIcaOptions ica;

    void validate() const;
};

nlohmann::json to_json(const FbnConfig & c);

struct SignalMatrix {
    int layer = 0;
    Matrix data;  // tokens x n_signals
    SignalMode mode = SignalMode::Both;
    std::size_t sample_id = 0;
    bool z_scored = false;
};

/// Raw (unstandardized) signals of one layer for one sample, rounded to the
/// float32 values produced by the forward pass.
SignalMatrix raw_signals(const model::CaptureRecord & record, SignalMode mode, std::size_t sample_id);

/// raw_signals followed by per-column z-scoring.
SignalMatrix assemble_signals(const model::CaptureRecord & record, SignalMode mode, std::size_t sample_id);

/// z-scores a raw signal matrix in place (no-op when already standardized).
void standardize(SignalMatrix & s);

struct SourceDecomposition {
    int layer = 0;
    std::size_t group_id = 0;
    Matrix sources;  // k_effective x n_signals, rows standardized
    Matrix mixing;   // k_effective x k_effective; group-reduced data = mixing * sources
    bool converged = false;
    int iterations = 0;
    Index k_requested = 0;
    Index k_effective = 0;
    std::vector<std::string> warnings;
};

/// Group spatial ICA over the subjects (samples) of one layer. The FastICA
/// stream is seeded with derive_seed(cfg.seed, {layer, group_id}).
SourceDecomposition canica(std::span<const SignalMatrix> group, const FbnConfig & cfg, int layer = 0,
                           std::size_t group_id = 0);

/// Entry (i, j) is true iff |S(i, j)| > tau.
BoolMatrix threshold_sources(const SourceDecomposition & dec, double tau);

/// Column j is true iff any row of any mask marks it.
BoolVector aggregate_or(std::span<const BoolMatrix> masks);

/// Max |S(i, j)| over every component of every decomposition, per signal column.
Vector column_scores(std::span<const SourceDecomposition> decs);

/// Per hidden unit: for mode both, max of the gate and up column values;
/// otherwise the column value itself.
Vector unit_scores(const Vector & column_scores, SignalMode mode, Index d_hidden);
BoolVector unit_mask(const BoolVector & column_mask, SignalMode mode, Index d_hidden);

Vector neuron_scores(std::span<const SourceDecomposition> decs, SignalMode mode, Index d_hidden);

/// round((1 - p) * d) with halves rounded up.
Index keep_count(Index d_hidden, double rate);

/// Indices of the keep_count(d, p) largest scores (ties to the lower index), ascending.
std::vector<int> select_kept(const Vector & scores, double rate);

/// Streaming per-layer aggregate over decompositions: OR of thresholded masks
/// and running max of |loading|. Both reductions are order independent.
struct LayerMaskSet {
    int layer = 0;
    Index d_hidden = 0;
    SignalMode mode = SignalMode::Both;
    double tau = 2.0;
    Index k_requested = 0;
    Index k_effective_min = 0;
    Index k_effective_max = 0;
    std::size_t group_count = 0;
    std::size_t converged_count = 0;
    BoolVector global_mask;  // n_signals
    Vector scores;           // n_signals
    std::vector<BoolMatrix> per_group_masks;  // kept only when requested

    LayerMaskSet() = default;
    LayerMaskSet(int layer, Index d_hidden, SignalMode mode, double tau, Index k_requested);

    void add(const SourceDecomposition & dec, bool keep_group_mask = false);
    void merge(const LayerMaskSet & other);

    Vector unit_scores() const;
    BoolVector unit_mask() const;
    double converged_fraction() const;
};

/// Mask/score file: {"<layer>": {...}, ..., "meta": {...}}.
nlohmann::json masks_to_json(std::span<const LayerMaskSet> layers, const nlohmann::json & meta);
std::vector<LayerMaskSet> masks_from_json(const nlohmann::json & j);

// Signal dump files: "FBNS" | u32 version | u64 header length | header JSON |
// float32 little-endian payload (row-major tokens x n_signals, raw values).
inline constexpr char kSignalMagic[4] = {'F', 'B', 'N', 'S'};
inline constexpr std::uint32_t kSignalVersion = 1;

std::string serialize_signals(const SignalMatrix & s);
SignalMatrix deserialize_signals(std::string_view bytes);
void save_signals(const SignalMatrix & s, const std::filesystem::path & path);
SignalMatrix load_signals(const std::filesystem::path & path);

/// Supplies raw signals for every layer of one sample.
using SignalSource = std::function<std::vector<SignalMatrix>(std::size_t sample_id)>;

/// Runs the checkpoint with capture on one calibration sample.
std::vector<SignalMatrix> capture_signals(const model::ModelCheckpoint & ckpt, std::span<const model::Token> tokens,
                                          SignalMode mode, std::size_t sample_id);

struct DecomposeProgress {
    std::size_t group_index = 0;
    std::size_t groups_total = 0;
    int layer = 0;
    const SourceDecomposition * decomposition = nullptr;
};

struct DecomposeOptions {
    int workers = 1;
    bool keep_group_masks = false;
    std::function<void(const DecomposeProgress &)> on_cell;
    /// Called after each group in plan order with the aggregate so far.
    std::function<void(std::size_t groups_done, const std::vector<LayerMaskSet> &)> on_prefix;
};

/// Decomposes every layer of every group of the plan (group g is the g-th
/// entry of plan.groups). The result does not depend on the worker count.
std::vector<LayerMaskSet> decompose(const model::ModelConfig & config, const calibration::GroupPlan & plan,
                                    const SignalSource & signals, const FbnConfig & cfg,
                                    const DecomposeOptions & options = {});

}  // namespace fbnprune::fbn
