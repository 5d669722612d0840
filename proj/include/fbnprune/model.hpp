// SPDX-License-Identifier: Apache-2.0
//
// Decoder-only transformer with gated (SiLU) MLPs. Weights are float32 and
// stored row-major so that checkpoint payloads are plain memory copies.
//
//   x   = tok_embedding[t] + pos_embedding[pos]
//   per layer:
//     x += attn(rmsnorm(x) * attn_norm)
//     m  = rmsnorm(x) * mlp_norm
//     x += (silu(m gate^T) * (m up^T)) down^T [+ down_bias]
//   logits = (rmsnorm(x) * final_norm) lm_head^T

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "fbnprune/random.hpp"

namespace fbnprune::model {

using Tensor = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VectorF = Eigen::VectorXf;
using Index = Eigen::Index;
using Token = std::int32_t;

enum class Activation { Silu };

struct ModelConfig {
    int n_layers = 4;
    int d_model = 128;
    int n_heads = 4;
    int d_hidden = 344;
    int vocab_size = 256;
    int context_len = 256;
    Activation activation = Activation::Silu;
    float norm_eps = 1e-5f;
    /// Per-layer hidden width; empty means every layer uses d_hidden.
    std::vector<int> layer_hidden;

    int hidden(int layer) const;
    /// Throws ErrorKind::Config on inconsistent values.
    void validate() const;

    friend bool operator==(const ModelConfig &, const ModelConfig &) = default;
};

nlohmann::json to_json(const ModelConfig & c);
ModelConfig model_config_from_json(const nlohmann::json & j);

struct LayerWeights {
    VectorF attn_norm;
    Tensor attn_q, attn_k, attn_v, attn_o;  // d_model x d_model
    VectorF mlp_norm;
    Tensor gate_proj;  // d_hidden x d_model
    Tensor up_proj;    // d_hidden x d_model
    Tensor down_proj;  // d_model x d_hidden
    std::optional<VectorF> down_bias;

    Index hidden() const { return gate_proj.rows(); }
};

struct ModelWeights {
    Tensor tok_embedding;  // vocab x d_model
    Tensor pos_embedding;  // context_len x d_model
    std::vector<LayerWeights> layers;
    VectorF final_norm;
    Tensor lm_head;        // vocab x d_model
};

struct ModelCheckpoint {
    ModelConfig config;
    ModelWeights weights;
    /// Free-form provenance (config digest, input digests, pruning record).
    nlohmann::json meta = nlohmann::json::object();
};

/// Mutable view of one named parameter tensor in canonical order.
struct TensorRef {
    std::string name;
    std::vector<std::int64_t> shape;
    std::span<float> data;
};

std::vector<TensorRef> tensors(ModelWeights & w);
std::vector<std::int64_t> tensor_shape(const ModelWeights & w, const std::string & name);

/// Zero-filled weights with the shapes implied by `config`.
ModelWeights zero_weights(const ModelConfig & config);
/// Gaussian initialization (std = init_std; residual outputs scaled by 1/sqrt(2 n_layers)).
ModelCheckpoint init_checkpoint(const ModelConfig & config, RngSeed seed, float init_std = 0.02f);

std::size_t parameter_count(const ModelCheckpoint & ckpt);

/// Checks every tensor against the shape implied by the config.
void validate_shapes(const ModelCheckpoint & ckpt);

struct CaptureRecord {
    int layer = 0;
    Tensor gate_out;  // tokens x d_hidden, post-activation
    Tensor up_out;    // tokens x d_hidden
    Tensor product;   // gate_out .* up_out
};

/// Per-layer override of the hidden product activation:
/// product' = product .* scale + fill. Empty vectors leave the layer alone.
struct UnitIntervention {
    VectorF scale;
    VectorF fill;
};

struct ForwardOptions {
    bool capture = false;
    const std::vector<UnitIntervention> * interventions = nullptr;
};

struct ForwardResult {
    Tensor logits;  // tokens x vocab
    std::optional<std::vector<CaptureRecord>> captures;
};

ForwardResult forward(const ModelCheckpoint & ckpt, std::span<const Token> tokens, const ForwardOptions & options = {});

/// Interventions that zero the listed hidden units of each layer.
std::vector<UnitIntervention> zero_units(const ModelConfig & config, const std::vector<std::vector<int>> & units);

/// Row-wise RMS normalization without the gain: x / sqrt(mean(x^2) + eps).
Tensor rms_normalize(const Tensor & x, float eps);

inline float silu(float x) {
    return x / (1.0f + std::exp(-x));
}

void check_tokens(const ModelConfig & config, std::span<const Token> tokens);

}  // namespace fbnprune::model
