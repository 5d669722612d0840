// SPDX-License-Identifier: Apache-2.0
//
// Byte-level corpus handling and calibration sampling. Samples are
// non-overlapping windows at seeded offsets; groups are a seeded partition of
// the sample indices.
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fbnprune/model.hpp"
#include "fbnprune/random.hpp"

namespace fbnprune::calibration {

using model::Token;

struct Corpus {
    std::vector<Token> tokens;  // one token per byte
    std::string digest;         // SHA-256 of the bytes
};

Corpus corpus_from_bytes(std::span<const std::uint8_t> bytes);
Corpus load_corpus(const std::filesystem::path & path);

/// The last `heldout_bytes` bytes are reserved for evaluation; the rest is
/// used for training and calibration.
struct CorpusSplit {
    Corpus train;
    Corpus heldout;
};
CorpusSplit split_corpus(const Corpus & corpus, std::size_t heldout_bytes);

struct CalibrationSet {
    std::vector<std::vector<Token>> samples;
    std::vector<std::size_t> offsets;  // ascending, samples[i] starts at offsets[i]
    std::string source_digest;
    RngSeed seed;
    int context_len = 0;

    std::size_t size() const { return samples.size(); }
};

/// Draws n_samples windows of context_len tokens at seeded non-overlapping offsets.
CalibrationSet ingest(const Corpus & source, int context_len, std::size_t n_samples, RngSeed seed);
CalibrationSet ingest(const std::filesystem::path & path, int context_len, std::size_t n_samples, RngSeed seed);

/// Rebuilds a set from a manifest and the source it was drawn from; the
/// source digest must match.
CalibrationSet from_manifest(const Corpus & source, const nlohmann::json & manifest);
nlohmann::json manifest(const CalibrationSet & set);

struct GroupPlan {
    std::size_t group_size = 0;
    std::vector<std::vector<std::size_t>> groups;  // disjoint sample indices
    std::vector<std::size_t> leftovers;           // unused sample indices

    std::size_t n_groups() const { return groups.size(); }
};

/// floor(n / group_size) groups over a seeded permutation of 0..n-1.
GroupPlan plan_groups(std::size_t n_samples, std::size_t group_size, RngSeed seed);
GroupPlan plan_groups(const CalibrationSet & set, std::size_t group_size);

nlohmann::json to_json(const GroupPlan & plan);

}  // namespace fbnprune::calibration
