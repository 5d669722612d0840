// SPDX-License-Identifier: Apache-2.0

#include "fbnprune/calibration.hpp"

#include <algorithm>
#include <unordered_set>

#include <fmt/format.h>

#include "fbnprune/digest.hpp"
#include "fbnprune/error.hpp"
#include "fbnprune/io.hpp"

namespace fbnprune::calibration {

namespace {

std::string digest_tokens(std::span<const Token> tokens) {
    std::string bytes(tokens.size(), '\0');
    for (std::size_t i = 0; i < tokens.size(); ++i) bytes[i] = static_cast<char>(static_cast<std::uint8_t>(tokens[i]));
    return sha256_hex(bytes);
}

Corpus slice(const Corpus & c, std::size_t begin, std::size_t end) {
    Corpus out;
    out.tokens.assign(c.tokens.begin() + static_cast<std::ptrdiff_t>(begin), c.tokens.begin() + static_cast<std::ptrdiff_t>(end));
    out.digest = digest_tokens(out.tokens);
    return out;
}

// Robert Floyd's sampling of m distinct values from [0, n), returned sorted.
std::vector<std::size_t> sample_distinct(std::size_t n, std::size_t m, Rng & rng) {
    std::unordered_set<std::size_t> chosen;
    chosen.reserve(m * 2);
    std::vector<std::size_t> out;
    out.reserve(m);
    for (std::size_t j = n - m; j < n; ++j) {
        const std::size_t t = static_cast<std::size_t>(rng.below(j + 1));
        const std::size_t pick = chosen.count(t) ? j : t;
        chosen.insert(pick);
        out.push_back(pick);
    }
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace

Corpus corpus_from_bytes(std::span<const std::uint8_t> bytes) {
    Corpus c;
    c.tokens.assign(bytes.begin(), bytes.end());
    c.digest = sha256_hex(std::span<const unsigned char>(bytes.data(), bytes.size()));
    return c;
}

Corpus load_corpus(const std::filesystem::path & path) {
    const auto bytes = io::read_bytes(path);
    return corpus_from_bytes(bytes);
}

CorpusSplit split_corpus(const Corpus & corpus, std::size_t heldout_bytes) {
    const std::size_t n = corpus.tokens.size();
    if (heldout_bytes < 2 || heldout_bytes >= n) {
        fail(ErrorKind::Argument,
             fmt::format("heldout size {} must be in [2, corpus size {})", heldout_bytes, n));
    }
    return {slice(corpus, 0, n - heldout_bytes), slice(corpus, n - heldout_bytes, n)};
}

CalibrationSet ingest(const Corpus & source, int context_len, std::size_t n_samples, RngSeed seed) {
    if (n_samples == 0) fail(ErrorKind::Argument, "calibration: n_samples must be positive (empty set)");
    if (context_len < 1) fail(ErrorKind::Argument, "calibration: context_len must be positive");
    const std::size_t len = static_cast<std::size_t>(context_len);
    const std::size_t total = source.tokens.size();
    if (n_samples > total / len) {
        fail(ErrorKind::Argument, fmt::format("calibration: source of {} tokens is too small for {} windows of {}",
                                              total, n_samples, len));
    }
    // Non-overlapping placements correspond one-to-one with sorted distinct
    // draws d_0 < ... < d_{n-1} from [0, total - n*len + n): offset_i = d_i + i*(len-1).
    Rng rng(derive_seed(seed, {0xca11}));
    const std::vector<std::size_t> d = sample_distinct(total - n_samples * len + n_samples, n_samples, rng);

    CalibrationSet set;
    set.seed = seed;
    set.context_len = context_len;
    set.source_digest = source.digest;
    set.offsets.resize(n_samples);
    set.samples.resize(n_samples);
    for (std::size_t i = 0; i < n_samples; ++i) {
        const std::size_t off = d[i] + i * (len - 1);
        set.offsets[i] = off;
        set.samples[i].assign(source.tokens.begin() + static_cast<std::ptrdiff_t>(off),
                              source.tokens.begin() + static_cast<std::ptrdiff_t>(off + len));
    }
    return set;
}

CalibrationSet ingest(const std::filesystem::path & path, int context_len, std::size_t n_samples, RngSeed seed) {
    return ingest(load_corpus(path), context_len, n_samples, seed);
}

nlohmann::json manifest(const CalibrationSet & set) {
    return {
        {"source_digest", set.source_digest},
        {"seed", set.seed.value},
        {"context_len", set.context_len},
        {"n_samples", set.samples.size()},
        {"offsets", set.offsets},
    };
}

CalibrationSet from_manifest(const Corpus & source, const nlohmann::json & m) {
    CalibrationSet set;
    try {
        set.source_digest = m.at("source_digest").get<std::string>();
        set.seed = RngSeed{m.at("seed").get<std::uint64_t>()};
        set.context_len = m.at("context_len").get<int>();
        set.offsets = m.at("offsets").get<std::vector<std::size_t>>();
    } catch (const nlohmann::json::exception & e) {
        fail(ErrorKind::Format, std::string("calibration manifest: ") + e.what());
    }
    if (set.source_digest != source.digest) {
        fail(ErrorKind::Format, "calibration manifest: source digest does not match the corpus");
    }
    const std::size_t len = static_cast<std::size_t>(set.context_len);
    for (std::size_t off : set.offsets) {
        if (off + len > source.tokens.size()) fail(ErrorKind::Format, "calibration manifest: offset out of range");
        set.samples.emplace_back(source.tokens.begin() + static_cast<std::ptrdiff_t>(off),
                                 source.tokens.begin() + static_cast<std::ptrdiff_t>(off + len));
    }
    return set;
}

GroupPlan plan_groups(std::size_t n_samples, std::size_t group_size, RngSeed seed) {
    if (group_size == 0) fail(ErrorKind::Argument, "plan_groups: group_size must be positive");
    if (group_size > n_samples) {
        fail(ErrorKind::Argument, fmt::format("plan_groups: group_size {} exceeds sample count {}", group_size, n_samples));
    }
    Rng rng(derive_seed(seed, {0x6709}));
    const std::vector<std::size_t> order = rng.permutation(n_samples);
    GroupPlan plan;
    plan.group_size = group_size;
    const std::size_t n_groups = n_samples / group_size;
    for (std::size_t g = 0; g < n_groups; ++g) {
        plan.groups.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(g * group_size),
                                 order.begin() + static_cast<std::ptrdiff_t>((g + 1) * group_size));
    }
    plan.leftovers.assign(order.begin() + static_cast<std::ptrdiff_t>(n_groups * group_size), order.end());
    return plan;
}

GroupPlan plan_groups(const CalibrationSet & set, std::size_t group_size) {
    return plan_groups(set.size(), group_size, set.seed);
}

nlohmann::json to_json(const GroupPlan & plan) {
    return {
        {"group_size", plan.group_size},
        {"n_groups", plan.groups.size()},
        {"groups", plan.groups},
        {"leftovers", plan.leftovers},
    };
}

}  // namespace fbnprune::calibration
