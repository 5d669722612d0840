// SPDX-License-Identifier: Apache-2.0

#include "fbnprune/pruning.hpp"

#include <algorithm>

#include <fmt/format.h>

#include "fbnprune/error.hpp"
#include "fbnprune/fbn.hpp"

namespace fbnprune::pruning {

std::string_view to_string(Method m) noexcept {
    switch (m) {
        case Method::Canica: return "canica";
        case Method::Random: return "random";
        case Method::Magnitude: return "magnitude";
        case Method::Fluctuation: return "fluctuation";
    }
    return "canica";
}

Method parse_method(std::string_view name) {
    if (name == "canica") return Method::Canica;
    if (name == "random") return Method::Random;
    if (name == "magnitude") return Method::Magnitude;
    if (name == "fluctuation") return Method::Fluctuation;
    fail(ErrorKind::Config, fmt::format("unknown pruning method '{}' (expected canica, random, magnitude or fluctuation)", name));
}

Vector LayerStats::variance() const {
    if (count == 0) return Vector::Zero(mean.size());
    return (m2 / static_cast<double>(count)).cwiseMax(0.0);
}

void LayerStats::merge(const LayerStats & o) {
    if (o.count == 0) return;
    if (count == 0) {
        *this = o;
        return;
    }
    if (o.mean.size() != mean.size()) fail(ErrorKind::Dimension, "activation stats: layer widths differ");
    const double na = static_cast<double>(count);
    const double nb = static_cast<double>(o.count);
    const double n = na + nb;
    const Vector delta = o.mean - mean;
    mean += delta * (nb / n);
    m2 += o.m2 + delta.cwiseProduct(delta) * (na * nb / n);
    count += o.count;
}

void ActivationStats::add(std::span<const model::CaptureRecord> records) {
    if (layers.empty()) layers.resize(records.size());
    if (layers.size() != records.size()) fail(ErrorKind::Dimension, "activation stats: layer count changed");
    std::size_t tokens = 0;
    for (std::size_t l = 0; l < records.size(); ++l) {
        const Eigen::MatrixXd p = records[l].product.cast<double>();
        LayerStats batch;
        batch.count = static_cast<std::size_t>(p.rows());
        batch.mean = p.colwise().mean().transpose();
        batch.m2 = (p.rowwise() - batch.mean.transpose()).colwise().squaredNorm().transpose();
        layers[l].merge(batch);
        tokens = batch.count;
    }
    token_count += tokens;
}

void ActivationStats::merge(const ActivationStats & o) {
    if (o.layers.empty()) return;
    if (layers.empty()) {
        *this = o;
        return;
    }
    if (layers.size() != o.layers.size()) fail(ErrorKind::Dimension, "activation stats: layer counts differ");
    for (std::size_t l = 0; l < layers.size(); ++l) layers[l].merge(o.layers[l]);
    token_count += o.token_count;
}

ActivationStats collect_stats(const model::ModelCheckpoint & ckpt, std::span<const std::vector<model::Token>> samples) {
    if (samples.empty()) fail(ErrorKind::Argument, "collect_stats: no calibration samples");
    ActivationStats stats;
    for (const auto & s : samples) {
        const model::ForwardResult r = model::forward(ckpt, s, model::ForwardOptions{true, nullptr});
        stats.add(*r.captures);
    }
    return stats;
}

namespace {

void check_scores(const std::vector<Vector> & scores, const model::ModelConfig & config, const char * what) {
    if (static_cast<int>(scores.size()) != config.n_layers) {
        fail(ErrorKind::Dimension, fmt::format("{}: {} layers of scores for {} model layers", what, scores.size(), config.n_layers));
    }
    for (int l = 0; l < config.n_layers; ++l) {
        if (scores[static_cast<std::size_t>(l)].size() != config.hidden(l)) {
            fail(ErrorKind::Dimension, fmt::format("{}: layer {} has {} scores for {} units", what, l,
                                                   scores[static_cast<std::size_t>(l)].size(), config.hidden(l)));
        }
    }
}

Vector row_norms(const model::Tensor & t) {
    return t.cast<double>().rowwise().norm();
}

Vector col_norms(const model::Tensor & t) {
    return t.cast<double>().colwise().norm().transpose();
}

}  // namespace

std::vector<Vector> method_scores(Method method, const model::ModelCheckpoint & ckpt, const PlanInputs & in) {
    const model::ModelConfig & c = ckpt.config;
    std::vector<Vector> out;
    switch (method) {
        case Method::Canica:
            if (!in.canica_scores) fail(ErrorKind::Argument, "build_plan: canica needs functional-network scores");
            check_scores(*in.canica_scores, c, "canica scores");
            return *in.canica_scores;
        case Method::Random:
            for (int l = 0; l < c.n_layers; ++l) {
                Rng rng(derive_seed(in.seed, {0x7a5d, static_cast<std::uint64_t>(l)}));
                Vector s(c.hidden(l));
                for (Eigen::Index i = 0; i < s.size(); ++i) s(i) = rng.uniform();
                out.push_back(std::move(s));
            }
            return out;
        case Method::Magnitude:
            for (const auto & L : ckpt.weights.layers) {
                out.push_back(row_norms(L.gate_proj).cwiseProduct(row_norms(L.up_proj)).cwiseProduct(col_norms(L.down_proj)));
            }
            return out;
        case Method::Fluctuation:
            if (!in.stats) fail(ErrorKind::Argument, "build_plan: fluctuation needs activation statistics");
            if (static_cast<int>(in.stats->layers.size()) != c.n_layers) {
                fail(ErrorKind::Dimension, "build_plan: activation statistics do not cover every layer");
            }
            for (int l = 0; l < c.n_layers; ++l) {
                const auto & L = ckpt.weights.layers[static_cast<std::size_t>(l)];
                const Vector var = in.stats->layers[static_cast<std::size_t>(l)].variance();
                if (var.size() != L.hidden()) fail(ErrorKind::Dimension, "build_plan: statistics width mismatch");
                out.push_back(var.cwiseProduct(col_norms(L.down_proj).cwiseAbs2()));
            }
            return out;
    }
    return out;
}

PruningPlan build_plan(Method method, const model::ModelCheckpoint & ckpt, double rate, const PlanInputs & inputs) {
    const std::vector<Vector> scores = method_scores(method, ckpt, inputs);
    PruningPlan plan;
    plan.method = method;
    plan.rate = rate;
    plan.seed = inputs.seed.value;
    for (const Vector & s : scores) plan.per_layer_kept.push_back(fbn::select_kept(s, rate));
    return plan;
}

std::vector<std::vector<int>> pruned_units(const model::ModelConfig & config, const PruningPlan & plan) {
    if (static_cast<int>(plan.per_layer_kept.size()) != config.n_layers) {
        fail(ErrorKind::Dimension, fmt::format("plan covers {} layers, model has {}", plan.per_layer_kept.size(), config.n_layers));
    }
    std::vector<std::vector<int>> out;
    for (int l = 0; l < config.n_layers; ++l) {
        const auto & kept = plan.per_layer_kept[static_cast<std::size_t>(l)];
        std::vector<bool> keep(static_cast<std::size_t>(config.hidden(l)), false);
        for (int i : kept) {
            if (i < 0 || i >= config.hidden(l)) {
                fail(ErrorKind::Argument, fmt::format("plan: layer {} index {} out of range [0, {})", l, i, config.hidden(l)));
            }
            keep[static_cast<std::size_t>(i)] = true;
        }
        std::vector<int> pruned;
        for (int i = 0; i < config.hidden(l); ++i)
            if (!keep[static_cast<std::size_t>(i)]) pruned.push_back(i);
        out.push_back(std::move(pruned));
    }
    return out;
}

std::vector<Eigen::VectorXf> compute_compensation(const model::ModelCheckpoint & ckpt, const PruningPlan & plan,
                                                  const ActivationStats & stats) {
    const model::ModelConfig & c = ckpt.config;
    if (static_cast<int>(stats.layers.size()) != c.n_layers) {
        fail(ErrorKind::Dimension, "compensation: statistics do not cover every layer");
    }
    const auto pruned = pruned_units(c, plan);
    std::vector<Eigen::VectorXf> out;
    for (int l = 0; l < c.n_layers; ++l) {
        const auto & L = ckpt.weights.layers[static_cast<std::size_t>(l)];
        const Vector & mean = stats.layers[static_cast<std::size_t>(l)].mean;
        if (mean.size() != L.hidden()) {
            fail(ErrorKind::Dimension, fmt::format("compensation: layer {} statistics have {} units, layer has {}", l,
                                                   mean.size(), L.hidden()));
        }
        Vector bias = Vector::Zero(c.d_model);
        for (int j : pruned[static_cast<std::size_t>(l)]) {
            bias += mean(j) * L.down_proj.col(j).cast<double>();
        }
        out.push_back(bias.cast<float>());
    }
    return out;
}

model::ModelCheckpoint apply_plan(const model::ModelCheckpoint & ckpt, const PruningPlan & plan) {
    const model::ModelConfig & c = ckpt.config;
    if (static_cast<int>(plan.per_layer_kept.size()) != c.n_layers) {
        fail(ErrorKind::Dimension, fmt::format("plan covers {} layers, model has {}", plan.per_layer_kept.size(), c.n_layers));
    }
    if (plan.per_layer_bias && static_cast<int>(plan.per_layer_bias->size()) != c.n_layers) {
        fail(ErrorKind::Dimension, "plan: bias list does not cover every layer");
    }
    model::ModelCheckpoint out;
    out.config = c;
    out.meta = ckpt.meta;
    out.weights.tok_embedding = ckpt.weights.tok_embedding;
    out.weights.pos_embedding = ckpt.weights.pos_embedding;
    out.weights.final_norm = ckpt.weights.final_norm;
    out.weights.lm_head = ckpt.weights.lm_head;

    std::vector<int> widths;
    for (int l = 0; l < c.n_layers; ++l) {
        const auto & src = ckpt.weights.layers[static_cast<std::size_t>(l)];
        const auto & kept = plan.per_layer_kept[static_cast<std::size_t>(l)];
        const int d = static_cast<int>(src.hidden());
        if (kept.empty()) fail(ErrorKind::Argument, fmt::format("plan: layer {} keeps no unit", l));
        for (std::size_t i = 0; i < kept.size(); ++i) {
            if (kept[i] < 0 || kept[i] >= d) {
                fail(ErrorKind::Argument, fmt::format("plan: layer {} index {} out of range [0, {})", l, kept[i], d));
            }
            if (i > 0 && kept[i] == kept[i - 1]) {
                fail(ErrorKind::Argument, fmt::format("plan: layer {} duplicate index {}", l, kept[i]));
            }
            if (i > 0 && kept[i] < kept[i - 1]) {
                fail(ErrorKind::Argument, fmt::format("plan: layer {} indices are not increasing", l));
            }
        }
        model::LayerWeights dst;
        dst.attn_norm = src.attn_norm;
        dst.attn_q = src.attn_q;
        dst.attn_k = src.attn_k;
        dst.attn_v = src.attn_v;
        dst.attn_o = src.attn_o;
        dst.mlp_norm = src.mlp_norm;
        const auto n = static_cast<Eigen::Index>(kept.size());
        dst.gate_proj.resize(n, c.d_model);
        dst.up_proj.resize(n, c.d_model);
        dst.down_proj.resize(c.d_model, n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const int u = kept[static_cast<std::size_t>(i)];
            dst.gate_proj.row(i) = src.gate_proj.row(u);
            dst.up_proj.row(i) = src.up_proj.row(u);
            dst.down_proj.col(i) = src.down_proj.col(u);
        }
        dst.down_bias = src.down_bias;
        if (plan.per_layer_bias) {
            const Eigen::VectorXf & b = (*plan.per_layer_bias)[static_cast<std::size_t>(l)];
            if (b.size() != c.d_model) fail(ErrorKind::Dimension, fmt::format("plan: layer {} bias has {} entries", l, b.size()));
            dst.down_bias = dst.down_bias ? Eigen::VectorXf(*dst.down_bias + b) : b;
        }
        widths.push_back(static_cast<int>(n));
        out.weights.layers.push_back(std::move(dst));
    }
    out.config.layer_hidden = widths;
    if (std::all_of(widths.begin(), widths.end(), [&](int w) { return w == c.d_hidden; })) out.config.layer_hidden.clear();
    model::validate_shapes(out);
    return out;
}

nlohmann::json to_json(const PruningPlan & plan) {
    return {
        {"method", std::string(to_string(plan.method))},
        {"rate", plan.rate},
        {"seed", plan.seed},
        {"per_layer_kept", plan.per_layer_kept},
        {"has_bias", plan.per_layer_bias.has_value()},
        {"compensation", plan.compensation},
    };
}

PruningPlan plan_from_json(const nlohmann::json & j) {
    PruningPlan plan;
    try {
        plan.method = parse_method(j.at("method").get<std::string>());
        plan.rate = j.at("rate").get<double>();
        plan.seed = j.at("seed").get<std::uint64_t>();
        plan.per_layer_kept = j.at("per_layer_kept").get<std::vector<std::vector<int>>>();
        plan.compensation = j.value("compensation", false);
    } catch (const nlohmann::json::exception & e) {
        fail(ErrorKind::Format, std::string("plan file: ") + e.what());
    }
    return plan;
}

}  // namespace fbnprune::pruning
