// SPDX-License-Identifier: Apache-2.0
//
// Small seeded models and corpora shared by the unit suites.

#pragma once

#include <cstdint>
#include <vector>

#include "fbnprune/calibration.hpp"
#include "fbnprune/model.hpp"
#include "fbnprune/random.hpp"

namespace fbnprune::testing {

inline model::ModelConfig tiny_config() {
    model::ModelConfig c;
    c.n_layers = 2;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_hidden = 24;
    c.vocab_size = 32;
    c.context_len = 12;
    return c;
}

inline model::ModelCheckpoint random_checkpoint(const model::ModelConfig & c, std::uint64_t seed, float std = 0.3f) {
    return model::init_checkpoint(c, RngSeed{seed}, std);
}

inline std::vector<model::Token> random_tokens(int vocab, std::size_t n, std::uint64_t seed) {
    Rng rng(RngSeed{seed});
    std::vector<model::Token> t(n);
    for (auto & v : t) v = static_cast<model::Token>(rng.below(static_cast<std::uint64_t>(vocab)));
    return t;
}

/// Byte corpus with some repeated structure over a small alphabet.
inline calibration::Corpus patterned_corpus(std::size_t n, int vocab, std::uint64_t seed) {
    Rng rng(RngSeed{seed});
    std::vector<std::uint8_t> bytes(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint64_t noise = rng.below(4) == 0 ? rng.below(static_cast<std::uint64_t>(vocab)) : 0;
        bytes[i] = static_cast<std::uint8_t>((i * 7 + i / 5 + noise) % static_cast<std::size_t>(vocab));
    }
    return calibration::corpus_from_bytes(bytes);
}

inline double max_abs_diff(const model::Tensor & a, const model::Tensor & b) {
    return (a - b).cwiseAbs().maxCoeff();
}

}  // namespace fbnprune::testing

namespace fbnprune::testing {

/// Makes the listed layer-0 hidden units produce the same product activation
/// for every token: every embedding row shares coordinate 0 and its norm,
/// position embeddings and layer-0 attention values are zero, and the listed
/// units read only coordinate 0.
inline void make_constant_units(model::ModelCheckpoint & ckpt, const std::vector<int> & units, std::uint64_t seed) {
    Rng rng(RngSeed{seed});
    auto & w = ckpt.weights;
    const Eigen::Index d = ckpt.config.d_model;
    w.pos_embedding.setZero();
    for (Eigen::Index t = 0; t < w.tok_embedding.rows(); ++t) {
        Eigen::VectorXf rest(d - 1);
        for (Eigen::Index i = 0; i < rest.size(); ++i) rest(i) = static_cast<float>(rng.normal());
        rest *= 2.0f / rest.norm();
        w.tok_embedding(t, 0) = 1.0f;
        w.tok_embedding.row(t).tail(d - 1) = rest.transpose();
    }
    auto & L = w.layers[0];
    L.attn_v.setZero();
    for (int j : units) {
        L.gate_proj.row(j).setZero();
        L.up_proj.row(j).setZero();
        L.gate_proj(j, 0) = static_cast<float>(0.5 + rng.uniform());
        L.up_proj(j, 0) = static_cast<float>(rng.normal());
    }
}

}  // namespace fbnprune::testing
