// SPDX-License-Identifier: Apache-2.0
//
// Minimal deterministic trainer: AdamW, linear warmup then cosine decay,
// global-norm gradient clipping, fixed-size batches of random corpus windows.

#pragma once

#include <functional>
#include <span>

#include <nlohmann/json.hpp>

#include "fbnprune/model.hpp"

namespace fbnprune::model {

struct TrainConfig {
    int steps = 600;
    int batch_size = 8;
    double learning_rate = 3e-3;
    double min_lr_ratio = 0.1;
    int warmup_steps = 50;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    double grad_clip = 1.0;
    float init_std = 0.02f;
};

nlohmann::json to_json(const TrainConfig & c);

struct TrainProgress {
    int step = 0;
    double loss = 0.0;  // mean next-token NLL of the step's batch
    double learning_rate = 0.0;
};

using TrainCallback = std::function<void(const TrainProgress &)>;

/// Trains from a seeded initialization. steps == 0 returns the initialization.
/// Throws ErrorKind::Argument when the corpus is shorter than context_len + 1
/// and ErrorKind::Numeric (naming the step) when the loss diverges.
ModelCheckpoint train(const ModelConfig & config, std::span<const Token> corpus, RngSeed seed,
                      const TrainConfig & hyper, const TrainCallback & on_step = {});

/// Summed next-token NLL of `window` (inputs window[0..n-1), targets window[1..n)).
/// When `grads` is non-null, d(loss * grad_scale)/d(weights) is added into it.
double loss_and_grad(const ModelCheckpoint & ckpt, std::span<const Token> window, ModelWeights * grads,
                     float grad_scale);

double learning_rate_at(const TrainConfig & c, int step);

}  // namespace fbnprune::model
