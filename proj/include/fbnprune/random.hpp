// SPDX-License-Identifier: Apache-2.0
//
// Seeded pseudo-random streams. Only the engine (mt19937_64) comes from the
// standard library; the distributions are written out here so that streams are
// bit-identical across standard library implementations.

#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace fbnprune {

struct RngSeed {
    std::uint64_t value = 0;

    friend bool operator==(RngSeed, RngSeed) = default;
};

/// splitmix64 finalizer; used to derive independent child seeds.
std::uint64_t mix64(std::uint64_t x) noexcept;

/// Child seed for a (base, tag...) tuple, e.g. derive_seed(seed, {layer, group}).
RngSeed derive_seed(RngSeed base, std::initializer_list<std::uint64_t> tags) noexcept;

class Rng {
public:
    explicit Rng(RngSeed seed) : engine_(seed.value) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform();

    /// Standard normal via Box-Muller.
    double normal();

    /// Uniform integer in [0, n); n > 0.
    std::uint64_t below(std::uint64_t n);

    /// Fisher-Yates shuffle of 0..n-1.
    std::vector<std::size_t> permutation(std::size_t n);

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace fbnprune
