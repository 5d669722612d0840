// SPDX-License-Identifier: Apache-2.0

#include "fbnprune/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "fbnprune/error.hpp"

namespace fbnprune::model {

int ModelConfig::hidden(int layer) const {
    if (layer_hidden.empty()) {
        return d_hidden;
    }
    return layer_hidden.at(static_cast<std::size_t>(layer));
}

void ModelConfig::validate() const {
    auto bad = [](const std::string & what) { fail(ErrorKind::Config, "model config: " + what); };
    if (n_layers < 1) bad("n_layers must be >= 1");
    if (d_model < 1 || n_heads < 1) bad("d_model and n_heads must be >= 1");
    if (d_model % n_heads != 0) bad(fmt::format("d_model {} not divisible by n_heads {}", d_model, n_heads));
    if (d_hidden < 1) bad("d_hidden must be >= 1");
    if (vocab_size < 1) bad("vocab_size must be >= 1");
    if (context_len < 1) bad("context_len must be >= 1");
    if (!(norm_eps > 0.0f)) bad("norm_eps must be positive");
    if (!layer_hidden.empty()) {
        if (static_cast<int>(layer_hidden.size()) != n_layers) {
            bad(fmt::format("layer_hidden has {} entries for {} layers", layer_hidden.size(), n_layers));
        }
        for (int h : layer_hidden) {
            if (h < 1) bad("layer_hidden entries must be >= 1");
        }
    }
}

nlohmann::json to_json(const ModelConfig & c) {
    std::vector<int> hidden(static_cast<std::size_t>(c.n_layers));
    for (int l = 0; l < c.n_layers; ++l) hidden[static_cast<std::size_t>(l)] = c.hidden(l);
    return {
        {"n_layers", c.n_layers},
        {"d_model", c.d_model},
        {"n_heads", c.n_heads},
        {"d_hidden", c.d_hidden},
        {"vocab_size", c.vocab_size},
        {"context_len", c.context_len},
        {"activation", "silu"},
        {"norm_eps", c.norm_eps},
        {"layer_hidden", hidden},
    };
}

ModelConfig model_config_from_json(const nlohmann::json & j) {
    ModelConfig c;
    try {
        c.n_layers = j.at("n_layers").get<int>();
        c.d_model = j.at("d_model").get<int>();
        c.n_heads = j.at("n_heads").get<int>();
        c.d_hidden = j.at("d_hidden").get<int>();
        c.vocab_size = j.at("vocab_size").get<int>();
        c.context_len = j.at("context_len").get<int>();
        if (j.at("activation").get<std::string>() != "silu") {
            fail(ErrorKind::Config, "model config: unsupported activation " + j.at("activation").dump());
        }
        c.norm_eps = j.at("norm_eps").get<float>();
        if (j.contains("layer_hidden")) {
            c.layer_hidden = j.at("layer_hidden").get<std::vector<int>>();
            if (std::all_of(c.layer_hidden.begin(), c.layer_hidden.end(), [&](int h) { return h == c.d_hidden; })) {
                c.layer_hidden.clear();
            }
        }
    } catch (const nlohmann::json::exception & e) {
        fail(ErrorKind::Config, std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

namespace {

std::string layer_name(std::size_t l, const char * leaf) {
    return fmt::format("layers.{}.{}", l, leaf);
}

TensorRef ref(std::string name, Tensor & t) {
    return {std::move(name), {t.rows(), t.cols()}, {t.data(), static_cast<std::size_t>(t.size())}};
}

TensorRef ref(std::string name, VectorF & v) {
    return {std::move(name), {v.size()}, {v.data(), static_cast<std::size_t>(v.size())}};
}

}  // namespace

std::vector<TensorRef> tensors(ModelWeights & w) {
    std::vector<TensorRef> out;
    out.push_back(ref("tok_embedding", w.tok_embedding));
    out.push_back(ref("pos_embedding", w.pos_embedding));
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        LayerWeights & L = w.layers[l];
        out.push_back(ref(layer_name(l, "attn_norm"), L.attn_norm));
        out.push_back(ref(layer_name(l, "attn_q"), L.attn_q));
        out.push_back(ref(layer_name(l, "attn_k"), L.attn_k));
        out.push_back(ref(layer_name(l, "attn_v"), L.attn_v));
        out.push_back(ref(layer_name(l, "attn_o"), L.attn_o));
        out.push_back(ref(layer_name(l, "mlp_norm"), L.mlp_norm));
        out.push_back(ref(layer_name(l, "gate_proj"), L.gate_proj));
        out.push_back(ref(layer_name(l, "up_proj"), L.up_proj));
        out.push_back(ref(layer_name(l, "down_proj"), L.down_proj));
        if (L.down_bias) {
            out.push_back(ref(layer_name(l, "down_bias"), *L.down_bias));
        }
    }
    out.push_back(ref("final_norm", w.final_norm));
    out.push_back(ref("lm_head", w.lm_head));
    return out;
}

std::vector<std::int64_t> tensor_shape(const ModelWeights & w, const std::string & name) {
    for (const TensorRef & t : tensors(const_cast<ModelWeights &>(w))) {
        if (t.name == name) return t.shape;
    }
    fail(ErrorKind::Argument, "no tensor named " + name);
}

ModelWeights zero_weights(const ModelConfig & c) {
    c.validate();
    ModelWeights w;
    w.tok_embedding = Tensor::Zero(c.vocab_size, c.d_model);
    w.pos_embedding = Tensor::Zero(c.context_len, c.d_model);
    w.layers.resize(static_cast<std::size_t>(c.n_layers));
    for (int l = 0; l < c.n_layers; ++l) {
        LayerWeights & L = w.layers[static_cast<std::size_t>(l)];
        const int h = c.hidden(l);
        L.attn_norm = VectorF::Zero(c.d_model);
        L.attn_q = Tensor::Zero(c.d_model, c.d_model);
        L.attn_k = Tensor::Zero(c.d_model, c.d_model);
        L.attn_v = Tensor::Zero(c.d_model, c.d_model);
        L.attn_o = Tensor::Zero(c.d_model, c.d_model);
        L.mlp_norm = VectorF::Zero(c.d_model);
        L.gate_proj = Tensor::Zero(h, c.d_model);
        L.up_proj = Tensor::Zero(h, c.d_model);
        L.down_proj = Tensor::Zero(c.d_model, h);
    }
    w.final_norm = VectorF::Zero(c.d_model);
    w.lm_head = Tensor::Zero(c.vocab_size, c.d_model);
    return w;
}

ModelCheckpoint init_checkpoint(const ModelConfig & config, RngSeed seed, float init_std) {
    ModelCheckpoint ckpt;
    ckpt.config = config;
    ckpt.weights = zero_weights(config);
    Rng rng(seed);
    const float resid_std = init_std / std::sqrt(2.0f * static_cast<float>(config.n_layers));
    for (TensorRef & t : tensors(ckpt.weights)) {
        const bool is_norm = t.name.ends_with("_norm");
        const bool is_resid_out = t.name.ends_with("attn_o") || t.name.ends_with("down_proj");
        for (float & v : t.data) {
            if (is_norm) {
                v = 1.0f;
            } else {
                v = static_cast<float>(rng.normal()) * (is_resid_out ? resid_std : init_std);
            }
        }
    }
    return ckpt;
}

std::size_t parameter_count(const ModelCheckpoint & ckpt) {
    std::size_t n = 0;
    for (const TensorRef & t : tensors(const_cast<ModelWeights &>(ckpt.weights))) {
        n += t.data.size();
    }
    return n;
}

void validate_shapes(const ModelCheckpoint & ckpt) {
    ckpt.config.validate();
    const ModelConfig & c = ckpt.config;
    const ModelWeights & w = ckpt.weights;
    auto expect = [](const std::string & name, Index rows, Index cols, Index er, Index ec) {
        if (rows != er || cols != ec) {
            fail(ErrorKind::Format,
                 fmt::format("tensor {} has shape [{}, {}], expected [{}, {}]", name, rows, cols, er, ec));
        }
    };
    expect("tok_embedding", w.tok_embedding.rows(), w.tok_embedding.cols(), c.vocab_size, c.d_model);
    expect("pos_embedding", w.pos_embedding.rows(), w.pos_embedding.cols(), c.context_len, c.d_model);
    if (static_cast<int>(w.layers.size()) != c.n_layers) {
        fail(ErrorKind::Format, fmt::format("{} layers present, config says {}", w.layers.size(), c.n_layers));
    }
    for (int l = 0; l < c.n_layers; ++l) {
        const LayerWeights & L = w.layers[static_cast<std::size_t>(l)];
        const int h = c.hidden(l);
        const auto n = [l](const char * leaf) { return layer_name(static_cast<std::size_t>(l), leaf); };
        expect(n("attn_norm"), L.attn_norm.size(), 1, c.d_model, 1);
        expect(n("attn_q"), L.attn_q.rows(), L.attn_q.cols(), c.d_model, c.d_model);
        expect(n("attn_k"), L.attn_k.rows(), L.attn_k.cols(), c.d_model, c.d_model);
        expect(n("attn_v"), L.attn_v.rows(), L.attn_v.cols(), c.d_model, c.d_model);
        expect(n("attn_o"), L.attn_o.rows(), L.attn_o.cols(), c.d_model, c.d_model);
        expect(n("mlp_norm"), L.mlp_norm.size(), 1, c.d_model, 1);
        expect(n("gate_proj"), L.gate_proj.rows(), L.gate_proj.cols(), h, c.d_model);
        expect(n("up_proj"), L.up_proj.rows(), L.up_proj.cols(), h, c.d_model);
        expect(n("down_proj"), L.down_proj.rows(), L.down_proj.cols(), c.d_model, h);
        if (L.down_bias) {
            expect(n("down_bias"), L.down_bias->size(), 1, c.d_model, 1);
        }
    }
    expect("final_norm", w.final_norm.size(), 1, c.d_model, 1);
    expect("lm_head", w.lm_head.rows(), w.lm_head.cols(), c.vocab_size, c.d_model);
}

void check_tokens(const ModelConfig & config, std::span<const Token> tokens) {
    if (tokens.empty()) {
        fail(ErrorKind::Argument, "forward: empty token sequence");
    }
    if (static_cast<int>(tokens.size()) > config.context_len) {
        fail(ErrorKind::Argument,
             fmt::format("forward: sequence length {} exceeds context_len {}", tokens.size(), config.context_len));
    }
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] < 0 || tokens[i] >= config.vocab_size) {
            fail(ErrorKind::Argument,
                 fmt::format("forward: token {} at position {} outside vocabulary [0, {})", tokens[i], i,
                             config.vocab_size));
        }
    }
}

Tensor rms_normalize(const Tensor & x, float eps) {
    Tensor out(x.rows(), x.cols());
    const float inv_d = 1.0f / static_cast<float>(x.cols());
    for (Index t = 0; t < x.rows(); ++t) {
        const float ms = x.row(t).squaredNorm() * inv_d;
        out.row(t) = x.row(t) * (1.0f / std::sqrt(ms + eps));
    }
    return out;
}

namespace {

Tensor scale_columns(const Tensor & x, const VectorF & gain) {
    return x * gain.asDiagonal();
}

// Causal multi-head attention on already-normalized input a (T x d).
Tensor attention(const LayerWeights & L, const Tensor & a, int n_heads) {
    const Index T = a.rows();
    const Index d = a.cols();
    const Index dh = d / n_heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
    const Tensor q = a * L.attn_q.transpose();
    const Tensor k = a * L.attn_k.transpose();
    const Tensor v = a * L.attn_v.transpose();
    Tensor heads(T, d);
    Tensor scores(T, T);
    for (int h = 0; h < n_heads; ++h) {
        const Index c0 = h * dh;
        scores.noalias() = q.middleCols(c0, dh) * k.middleCols(c0, dh).transpose();
        for (Index i = 0; i < T; ++i) {
            float mx = -std::numeric_limits<float>::infinity();
            for (Index j = 0; j <= i; ++j) {
                scores(i, j) *= scale;
                mx = std::max(mx, scores(i, j));
            }
            float sum = 0.0f;
            for (Index j = 0; j <= i; ++j) {
                scores(i, j) = std::exp(scores(i, j) - mx);
                sum += scores(i, j);
            }
            const float inv = 1.0f / sum;
            for (Index j = 0; j <= i; ++j) scores(i, j) *= inv;
            for (Index j = i + 1; j < T; ++j) scores(i, j) = 0.0f;
        }
        heads.middleCols(c0, dh).noalias() = scores * v.middleCols(c0, dh);
    }
    return heads * L.attn_o.transpose();
}

}  // namespace

ForwardResult forward(const ModelCheckpoint & ckpt, std::span<const Token> tokens, const ForwardOptions & options) {
    const ModelConfig & c = ckpt.config;
    const ModelWeights & w = ckpt.weights;
    check_tokens(c, tokens);
    if (options.interventions && static_cast<int>(options.interventions->size()) != c.n_layers) {
        fail(ErrorKind::Dimension, "forward: one intervention entry per layer required");
    }

    const Index T = static_cast<Index>(tokens.size());
    Tensor x(T, c.d_model);
    for (Index t = 0; t < T; ++t) {
        x.row(t) = w.tok_embedding.row(tokens[static_cast<std::size_t>(t)]) + w.pos_embedding.row(t);
    }

    ForwardResult result;
    if (options.capture) {
        result.captures.emplace();
        result.captures->reserve(static_cast<std::size_t>(c.n_layers));
    }

    for (int l = 0; l < c.n_layers; ++l) {
        const LayerWeights & L = w.layers[static_cast<std::size_t>(l)];
        const Tensor a = scale_columns(rms_normalize(x, c.norm_eps), L.attn_norm);
        x += attention(L, a, c.n_heads);

        const Tensor m = scale_columns(rms_normalize(x, c.norm_eps), L.mlp_norm);
        // The unit projections are accumulated in double as well, so that a
        // unit's value does not depend on how many other units the layer has.
        const Eigen::MatrixXd md = m.cast<double>();
        Tensor gate = (md * L.gate_proj.transpose().cast<double>()).cast<float>();
        gate = gate.unaryExpr([](float v) { return silu(v); });
        const Tensor up = (md * L.up_proj.transpose().cast<double>()).cast<float>();
        Tensor product = gate.cwiseProduct(up);

        if (options.capture) {
            result.captures->push_back(CaptureRecord{l, gate, up, product});
        }
        if (options.interventions) {
            const UnitIntervention & iv = (*options.interventions)[static_cast<std::size_t>(l)];
            if (iv.scale.size() > 0) {
                if (iv.scale.size() != product.cols() || iv.fill.size() != product.cols()) {
                    fail(ErrorKind::Dimension, fmt::format("forward: intervention width mismatch at layer {}", l));
                }
                product = (product * iv.scale.asDiagonal()).rowwise() + iv.fill.transpose();
            }
        }

        // Removing units and zeroing them must give the same float result: the
        // summation length differs, the rounding should not.
        Eigen::MatrixXd y = product.cast<double>() * L.down_proj.transpose().cast<double>();
        if (L.down_bias) {
            y.rowwise() += L.down_bias->transpose().cast<double>();
        }
        x += y.cast<float>();
    }

    const Tensor f = scale_columns(rms_normalize(x, c.norm_eps), w.final_norm);
    result.logits = f * w.lm_head.transpose();
    return result;
}

std::vector<UnitIntervention> zero_units(const ModelConfig & config, const std::vector<std::vector<int>> & units) {
    if (static_cast<int>(units.size()) != config.n_layers) {
        fail(ErrorKind::Dimension, "zero_units: one unit list per layer required");
    }
    std::vector<UnitIntervention> out(units.size());
    for (int l = 0; l < config.n_layers; ++l) {
        const int h = config.hidden(l);
        UnitIntervention & iv = out[static_cast<std::size_t>(l)];
        iv.scale = VectorF::Ones(h);
        iv.fill = VectorF::Zero(h);
        for (int u : units[static_cast<std::size_t>(l)]) {
            if (u < 0 || u >= h) {
                fail(ErrorKind::Argument, fmt::format("zero_units: unit {} outside layer {} width {}", u, l, h));
            }
            iv.scale(u) = 0.0f;
        }
    }
    return out;
}

}  // namespace fbnprune::model
