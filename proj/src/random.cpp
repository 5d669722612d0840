// SPDX-License-Identifier: Apache-2.0

#include "fbnprune/random.hpp"

#include <cmath>
#include <numbers>

namespace fbnprune {

std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

RngSeed derive_seed(RngSeed base, std::initializer_list<std::uint64_t> tags) noexcept {
    std::uint64_t h = mix64(base.value);
    for (std::uint64_t t : tags) {
        h = mix64(h ^ mix64(t + 0x632be59bd9b4e019ULL));
    }
    return RngSeed{h};
}

double Rng::uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = 0.0;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

std::uint64_t Rng::below(std::uint64_t n) {
    // rejection sampling on the top of the range keeps the draw unbiased
    const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % n);
    std::uint64_t x = 0;
    do {
        x = engine_();
    } while (x >= limit);
    return x % n;
}

std::vector<std::size_t> Rng::permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = below(i);
        std::swap(p[i - 1], p[j]);
    }
    return p;
}

}  // namespace fbnprune
