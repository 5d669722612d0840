// SPDX-License-Identifier: Apache-2.0

#include "fbnprune/trainer.hpp"

#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "fbnprune/error.hpp"

namespace fbnprune::model {

nlohmann::json to_json(const TrainConfig & c) {
    return {
        {"steps", c.steps},
        {"batch_size", c.batch_size},
        {"learning_rate", c.learning_rate},
        {"min_lr_ratio", c.min_lr_ratio},
        {"warmup_steps", c.warmup_steps},
        {"weight_decay", c.weight_decay},
        {"beta1", c.beta1},
        {"beta2", c.beta2},
        {"adam_eps", c.adam_eps},
        {"grad_clip", c.grad_clip},
        {"init_std", c.init_std},
    };
}

namespace {

struct RmsCache {
    Tensor normed;  // x * r, before the gain
    VectorF r;      // per-row 1/rms
};

RmsCache rms_forward(const Tensor & x, float eps) {
    RmsCache c;
    c.r.resize(x.rows());
    c.normed.resize(x.rows(), x.cols());
    const float inv_d = 1.0f / static_cast<float>(x.cols());
    for (Index t = 0; t < x.rows(); ++t) {
        c.r(t) = 1.0f / std::sqrt(x.row(t).squaredNorm() * inv_d + eps);
        c.normed.row(t) = x.row(t) * c.r(t);
    }
    return c;
}

// Given d(out) for out = normed .* gain, accumulates d(gain) and returns d(x).
Tensor rms_backward(const Tensor & dout, const RmsCache & c, const VectorF & gain, VectorF & dgain) {
    dgain += (dout.cwiseProduct(c.normed)).colwise().sum().transpose();
    const Tensor dn = dout * gain.asDiagonal();
    const float inv_d = 1.0f / static_cast<float>(dout.cols());
    Tensor dx(dout.rows(), dout.cols());
    for (Index t = 0; t < dout.rows(); ++t) {
        const float proj = dn.row(t).dot(c.normed.row(t)) * inv_d;
        dx.row(t) = c.r(t) * (dn.row(t) - proj * c.normed.row(t));
    }
    return dx;
}

struct LayerCache {
    RmsCache attn_rms;
    Tensor a;
    Tensor q, k, v;
    std::vector<Tensor> probs;  // per head, T x T
    Tensor heads;
    RmsCache mlp_rms;
    Tensor m;
    Tensor sig;   // sigmoid(gate_pre)
    Tensor gpre;  // gate pre-activation
    Tensor act;   // silu(gate_pre)
    Tensor up;
    Tensor prod;
};

}  // namespace

double loss_and_grad(const ModelCheckpoint & ckpt, std::span<const Token> window, ModelWeights * grads,
                     float grad_scale) {
    if (window.size() < 2) {
        fail(ErrorKind::Argument, "loss_and_grad: window needs at least two tokens");
    }
    const ModelConfig & c = ckpt.config;
    const ModelWeights & w = ckpt.weights;
    const std::span<const Token> inputs = window.first(window.size() - 1);
    check_tokens(c, inputs);
    for (Token t : window) {
        if (t < 0 || t >= c.vocab_size) fail(ErrorKind::Argument, "loss_and_grad: target outside vocabulary");
    }

    const Index T = static_cast<Index>(inputs.size());
    const int H = c.n_heads;
    const Index dh = c.d_model / H;
    const float att_scale = 1.0f / std::sqrt(static_cast<float>(dh));

    Tensor x(T, c.d_model);
    for (Index t = 0; t < T; ++t) {
        x.row(t) = w.tok_embedding.row(inputs[static_cast<std::size_t>(t)]) + w.pos_embedding.row(t);
    }

    std::vector<LayerCache> caches(static_cast<std::size_t>(c.n_layers));
    for (int l = 0; l < c.n_layers; ++l) {
        const LayerWeights & L = w.layers[static_cast<std::size_t>(l)];
        LayerCache & C = caches[static_cast<std::size_t>(l)];

        C.attn_rms = rms_forward(x, c.norm_eps);
        C.a = C.attn_rms.normed * L.attn_norm.asDiagonal();
        C.q = C.a * L.attn_q.transpose();
        C.k = C.a * L.attn_k.transpose();
        C.v = C.a * L.attn_v.transpose();
        C.heads.resize(T, c.d_model);
        C.probs.resize(static_cast<std::size_t>(H));
        for (int h = 0; h < H; ++h) {
            const Index c0 = h * dh;
            Tensor & P = C.probs[static_cast<std::size_t>(h)];
            P = C.q.middleCols(c0, dh) * C.k.middleCols(c0, dh).transpose();
            for (Index i = 0; i < T; ++i) {
                float mx = -INFINITY;
                for (Index j = 0; j <= i; ++j) {
                    P(i, j) *= att_scale;
                    mx = std::max(mx, P(i, j));
                }
                float sum = 0.0f;
                for (Index j = 0; j <= i; ++j) {
                    P(i, j) = std::exp(P(i, j) - mx);
                    sum += P(i, j);
                }
                const float inv = 1.0f / sum;
                for (Index j = 0; j <= i; ++j) P(i, j) *= inv;
                for (Index j = i + 1; j < T; ++j) P(i, j) = 0.0f;
            }
            C.heads.middleCols(c0, dh).noalias() = P * C.v.middleCols(c0, dh);
        }
        x += C.heads * L.attn_o.transpose();

        C.mlp_rms = rms_forward(x, c.norm_eps);
        C.m = C.mlp_rms.normed * L.mlp_norm.asDiagonal();
        C.gpre = C.m * L.gate_proj.transpose();
        C.sig = C.gpre.unaryExpr([](float v) { return 1.0f / (1.0f + std::exp(-v)); });
        C.act = C.gpre.cwiseProduct(C.sig);
        C.up = C.m * L.up_proj.transpose();
        C.prod = C.act.cwiseProduct(C.up);
        x += C.prod * L.down_proj.transpose();
        if (L.down_bias) {
            x.rowwise() += L.down_bias->transpose();
        }
    }

    const RmsCache final_rms = rms_forward(x, c.norm_eps);
    const Tensor f = final_rms.normed * w.final_norm.asDiagonal();
    Tensor logits = f * w.lm_head.transpose();

    double nll = 0.0;
    for (Index t = 0; t < T; ++t) {
        const Token target = window[static_cast<std::size_t>(t) + 1];
        const float mx = logits.row(t).maxCoeff();
        double sum = 0.0;
        for (Index j = 0; j < logits.cols(); ++j) {
            sum += std::exp(static_cast<double>(logits(t, j) - mx));
        }
        const double lse = static_cast<double>(mx) + std::log(sum);
        nll += lse - static_cast<double>(logits(t, target));
        if (grads) {
            // reuse the logits row as d(loss)/d(logits)
            for (Index j = 0; j < logits.cols(); ++j) {
                logits(t, j) = static_cast<float>(std::exp(static_cast<double>(logits(t, j)) - lse)) * grad_scale;
            }
            logits(t, target) -= grad_scale;
        }
    }
    if (!grads) {
        return nll;
    }

    ModelWeights & g = *grads;
    const Tensor & dlogits = logits;
    g.lm_head.noalias() += dlogits.transpose() * f;
    Tensor dx = rms_backward(dlogits * w.lm_head, final_rms, w.final_norm, g.final_norm);

    for (int l = c.n_layers - 1; l >= 0; --l) {
        const LayerWeights & L = w.layers[static_cast<std::size_t>(l)];
        LayerWeights & G = g.layers[static_cast<std::size_t>(l)];
        const LayerCache & C = caches[static_cast<std::size_t>(l)];

        // MLP
        if (L.down_bias && G.down_bias) {
            *G.down_bias += dx.colwise().sum().transpose();
        }
        G.down_proj.noalias() += dx.transpose() * C.prod;
        const Tensor dprod = dx * L.down_proj;
        const Tensor dup = dprod.cwiseProduct(C.act);
        Tensor dgpre = dprod.cwiseProduct(C.up);
        dgpre = dgpre.cwiseProduct(
            C.sig.binaryExpr(C.gpre, [](float s, float z) { return s * (1.0f + z * (1.0f - s)); }));
        G.gate_proj.noalias() += dgpre.transpose() * C.m;
        G.up_proj.noalias() += dup.transpose() * C.m;
        const Tensor dm = dgpre * L.gate_proj + dup * L.up_proj;
        dx += rms_backward(dm, C.mlp_rms, L.mlp_norm, G.mlp_norm);

        // attention
        G.attn_o.noalias() += dx.transpose() * C.heads;
        const Tensor dheads = dx * L.attn_o;
        Tensor dq(T, c.d_model), dk(T, c.d_model), dv(T, c.d_model);
        for (int h = 0; h < H; ++h) {
            const Index c0 = h * dh;
            const Tensor & P = C.probs[static_cast<std::size_t>(h)];
            const Tensor dO = dheads.middleCols(c0, dh);
            Tensor dP = dO * C.v.middleCols(c0, dh).transpose();
            dv.middleCols(c0, dh).noalias() = P.transpose() * dO;
            for (Index i = 0; i < T; ++i) {
                const float s = dP.row(i).dot(P.row(i));
                dP.row(i) = P.row(i).cwiseProduct((dP.row(i).array() - s).matrix());
            }
            dq.middleCols(c0, dh).noalias() = (dP * C.k.middleCols(c0, dh)) * att_scale;
            dk.middleCols(c0, dh).noalias() = (dP.transpose() * C.q.middleCols(c0, dh)) * att_scale;
        }
        G.attn_q.noalias() += dq.transpose() * C.a;
        G.attn_k.noalias() += dk.transpose() * C.a;
        G.attn_v.noalias() += dv.transpose() * C.a;
        const Tensor da = dq * L.attn_q + dk * L.attn_k + dv * L.attn_v;
        dx += rms_backward(da, C.attn_rms, L.attn_norm, G.attn_norm);
    }

    for (Index t = 0; t < T; ++t) {
        g.tok_embedding.row(inputs[static_cast<std::size_t>(t)]) += dx.row(t);
        g.pos_embedding.row(t) += dx.row(t);
    }
    return nll;
}

double learning_rate_at(const TrainConfig & c, int step) {
    if (c.warmup_steps > 0 && step < c.warmup_steps) {
        return c.learning_rate * static_cast<double>(step + 1) / static_cast<double>(c.warmup_steps);
    }
    const int decay_steps = std::max(1, c.steps - c.warmup_steps);
    const double progress = std::min(1.0, static_cast<double>(step - c.warmup_steps) / decay_steps);
    const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    return c.learning_rate * (c.min_lr_ratio + (1.0 - c.min_lr_ratio) * cosine);
}

ModelCheckpoint train(const ModelConfig & config, std::span<const Token> corpus, RngSeed seed,
                      const TrainConfig & hyper, const TrainCallback & on_step) {
    config.validate();
    if (hyper.steps < 0 || hyper.batch_size < 1) {
        fail(ErrorKind::Argument, "train: steps must be >= 0 and batch_size >= 1");
    }
    const std::size_t window = static_cast<std::size_t>(config.context_len) + 1;
    if (corpus.size() < window) {
        fail(ErrorKind::Argument, fmt::format("train: corpus has {} tokens, need at least context_len + 1 = {}",
                                              corpus.size(), window));
    }

    ModelCheckpoint ckpt = init_checkpoint(config, derive_seed(seed, {0x1417}), hyper.init_std);
    if (hyper.steps == 0) {
        return ckpt;
    }

    ModelWeights grads = zero_weights(config);
    ModelWeights m1 = zero_weights(config);
    ModelWeights m2 = zero_weights(config);
    std::vector<TensorRef> params = tensors(ckpt.weights);
    std::vector<TensorRef> gref = tensors(grads);
    std::vector<TensorRef> m1ref = tensors(m1);
    std::vector<TensorRef> m2ref = tensors(m2);

    Rng batch_rng(derive_seed(seed, {0xba7c}));
    const std::uint64_t n_offsets = corpus.size() - window + 1;
    const float grad_scale = 1.0f / static_cast<float>(hyper.batch_size * config.context_len);

    for (int step = 0; step < hyper.steps; ++step) {
        for (TensorRef & t : gref) std::fill(t.data.begin(), t.data.end(), 0.0f);

        double nll = 0.0;
        for (int b = 0; b < hyper.batch_size; ++b) {
            const std::size_t off = batch_rng.below(n_offsets);
            nll += loss_and_grad(ckpt, corpus.subspan(off, window), &grads, grad_scale);
        }
        const double loss = nll / static_cast<double>(hyper.batch_size * config.context_len);
        if (!std::isfinite(loss)) {
            fail(ErrorKind::Numeric, fmt::format("train: loss diverged (non-finite) at step {}", step));
        }

        double sq = 0.0;
        for (const TensorRef & t : gref) {
            for (float v : t.data) sq += static_cast<double>(v) * v;
        }
        const double gnorm = std::sqrt(sq);
        if (!std::isfinite(gnorm)) {
            fail(ErrorKind::Numeric, fmt::format("train: gradient diverged (non-finite) at step {}", step));
        }
        const double clip = (hyper.grad_clip > 0.0 && gnorm > hyper.grad_clip) ? hyper.grad_clip / gnorm : 1.0;

        const double lr = learning_rate_at(hyper, step);
        const double bc1 = 1.0 - std::pow(hyper.beta1, step + 1);
        const double bc2 = 1.0 - std::pow(hyper.beta2, step + 1);
        for (std::size_t i = 0; i < params.size(); ++i) {
            const bool decay = !(params[i].name.ends_with("_norm") || params[i].name.ends_with("_bias"));
            std::span<float> p = params[i].data;
            std::span<float> gr = gref[i].data;
            std::span<float> a = m1ref[i].data;
            std::span<float> v = m2ref[i].data;
            for (std::size_t j = 0; j < p.size(); ++j) {
                const double gj = static_cast<double>(gr[j]) * clip;
                const double aj = hyper.beta1 * a[j] + (1.0 - hyper.beta1) * gj;
                const double vj = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * gj * gj;
                a[j] = static_cast<float>(aj);
                v[j] = static_cast<float>(vj);
                double update = (aj / bc1) / (std::sqrt(vj / bc2) + hyper.adam_eps);
                if (decay) update += hyper.weight_decay * p[j];
                p[j] = static_cast<float>(p[j] - lr * update);
            }
        }
        if (on_step) {
            on_step(TrainProgress{step, loss, lr});
        }
    }
    return ckpt;
}

}  // namespace fbnprune::model
