// SPDX-License-Identifier: Apache-2.0
//
// Test-only oracles. Everything here is written with plain loops in double
// precision and shares no code path with the library implementation.

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "fbnprune/model.hpp"

namespace fbnprune::testing {

using Mat = std::vector<std::vector<double>>;

inline Mat zeros(std::size_t r, std::size_t c) {
    return Mat(r, std::vector<double>(c, 0.0));
}

struct ReferenceLayerCapture {
    Mat gate_out, up_out, product;
};

struct ReferenceOutput {
    Mat logits;
    std::vector<ReferenceLayerCapture> captures;
};

// y[t][o] = sum_i x[t][i] * w(o, i)
template <typename W>
Mat linear(const Mat & x, const W & w, std::size_t out_dim) {
    Mat y = zeros(x.size(), out_dim);
    for (std::size_t t = 0; t < x.size(); ++t) {
        for (std::size_t o = 0; o < out_dim; ++o) {
            double s = 0.0;
            for (std::size_t i = 0; i < x[t].size(); ++i) {
                s += x[t][i] * static_cast<double>(w(static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(i)));
            }
            y[t][o] = s;
        }
    }
    return y;
}

inline Mat rmsnorm(const Mat & x, const model::VectorF & gain, double eps) {
    Mat y = x;
    for (std::size_t t = 0; t < x.size(); ++t) {
        double ms = 0.0;
        for (double v : x[t]) ms += v * v;
        ms /= static_cast<double>(x[t].size());
        const double r = 1.0 / std::sqrt(ms + eps);
        for (std::size_t i = 0; i < x[t].size(); ++i) {
            y[t][i] = x[t][i] * r * gain(static_cast<Eigen::Index>(i));
        }
    }
    return y;
}

/// Straight-line forward pass of the gated-MLP transformer; `scale`/`fill`
/// optionally replace product activations (per layer, per unit).
inline ReferenceOutput reference_forward(const model::ModelCheckpoint & ckpt, const std::vector<model::Token> & tokens,
                                         const std::vector<std::vector<double>> * scale = nullptr,
                                         const std::vector<std::vector<double>> * fill = nullptr) {
    const auto & c = ckpt.config;
    const auto & w = ckpt.weights;
    const std::size_t T = tokens.size();
    const std::size_t d = static_cast<std::size_t>(c.d_model);
    const std::size_t H = static_cast<std::size_t>(c.n_heads);
    const std::size_t dh = d / H;

    Mat x = zeros(T, d);
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t i = 0; i < d; ++i) {
            x[t][i] = static_cast<double>(w.tok_embedding(tokens[t], static_cast<Eigen::Index>(i))) +
                      static_cast<double>(w.pos_embedding(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(i)));
        }
    }

    ReferenceOutput out;
    for (std::size_t l = 0; l < static_cast<std::size_t>(c.n_layers); ++l) {
        const auto & L = w.layers[l];
        const Mat a = rmsnorm(x, L.attn_norm, c.norm_eps);
        const Mat q = linear(a, L.attn_q, d);
        const Mat k = linear(a, L.attn_k, d);
        const Mat v = linear(a, L.attn_v, d);
        Mat heads = zeros(T, d);
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = 0; i < T; ++i) {
                std::vector<double> s(i + 1);
                double mx = -1e300;
                for (std::size_t j = 0; j <= i; ++j) {
                    double dot = 0.0;
                    for (std::size_t e = 0; e < dh; ++e) dot += q[i][h * dh + e] * k[j][h * dh + e];
                    s[j] = dot / std::sqrt(static_cast<double>(dh));
                    mx = std::max(mx, s[j]);
                }
                double z = 0.0;
                for (double & sj : s) {
                    sj = std::exp(sj - mx);
                    z += sj;
                }
                for (std::size_t j = 0; j <= i; ++j) {
                    for (std::size_t e = 0; e < dh; ++e) heads[i][h * dh + e] += s[j] / z * v[j][h * dh + e];
                }
            }
        }
        const Mat o = linear(heads, L.attn_o, d);
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t i = 0; i < d; ++i) x[t][i] += o[t][i];

        const Mat m = rmsnorm(x, L.mlp_norm, c.norm_eps);
        const std::size_t hid = static_cast<std::size_t>(L.gate_proj.rows());
        Mat g = linear(m, L.gate_proj, hid);
        const Mat u = linear(m, L.up_proj, hid);
        Mat p = zeros(T, hid);
        for (std::size_t t = 0; t < T; ++t) {
            for (std::size_t j = 0; j < hid; ++j) {
                g[t][j] = g[t][j] / (1.0 + std::exp(-g[t][j]));
                p[t][j] = g[t][j] * u[t][j];
            }
        }
        out.captures.push_back({g, u, p});
        if (scale && fill) {
            for (std::size_t t = 0; t < T; ++t)
                for (std::size_t j = 0; j < hid; ++j) p[t][j] = p[t][j] * (*scale)[l][j] + (*fill)[l][j];
        }
        const Mat y = linear(p, L.down_proj, d);
        for (std::size_t t = 0; t < T; ++t) {
            for (std::size_t i = 0; i < d; ++i) {
                x[t][i] += y[t][i];
                if (L.down_bias) x[t][i] += static_cast<double>((*L.down_bias)(static_cast<Eigen::Index>(i)));
            }
        }
    }
    const Mat f = rmsnorm(x, w.final_norm, c.norm_eps);
    out.logits = linear(f, w.lm_head, static_cast<std::size_t>(c.vocab_size));
    return out;
}

/// Summed next-token NLL computed from the reference logits.
inline double reference_nll(const model::ModelCheckpoint & ckpt, const std::vector<model::Token> & window) {
    std::vector<model::Token> inputs(window.begin(), window.end() - 1);
    const ReferenceOutput r = reference_forward(ckpt, inputs);
    double nll = 0.0;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        const auto & row = r.logits[t];
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (double v : row) z += std::exp(v - mx);
        nll += mx + std::log(z) - row[static_cast<std::size_t>(window[t + 1])];
    }
    return nll;
}

inline double pearson(const Eigen::VectorXd & a, const Eigen::VectorXd & b) {
    const Eigen::VectorXd ca = a.array() - a.mean();
    const Eigen::VectorXd cb = b.array() - b.mean();
    return ca.dot(cb) / std::sqrt(ca.squaredNorm() * cb.squaredNorm());
}

/// Exhaustive assignment of recovered rows to true rows maximizing the summed
/// |correlation|; returns the matched |correlation| per true row.
inline std::vector<double> matched_abs_correlations(const Eigen::MatrixXd & truth, const Eigen::MatrixXd & recovered) {
    const std::size_t k = static_cast<std::size_t>(truth.rows());
    Eigen::MatrixXd corr(truth.rows(), recovered.rows());
    for (Eigen::Index i = 0; i < truth.rows(); ++i)
        for (Eigen::Index j = 0; j < recovered.rows(); ++j)
            corr(i, j) = std::abs(pearson(truth.row(i).transpose(), recovered.row(j).transpose()));
    std::vector<std::size_t> perm(static_cast<std::size_t>(recovered.rows()));
    std::iota(perm.begin(), perm.end(), 0);
    double best = -1.0;
    std::vector<double> best_vals(k, 0.0);
    do {
        double s = 0.0;
        for (std::size_t i = 0; i < k; ++i) s += corr(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(perm[i]));
        if (s > best) {
            best = s;
            for (std::size_t i = 0; i < k; ++i)
                best_vals[i] = corr(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(perm[i]));
        }
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best_vals;
}

/// Greedy max-|corr| matching for larger k (used where exhaustive search is infeasible).
inline std::vector<double> greedy_abs_correlations(const Eigen::MatrixXd & truth, const Eigen::MatrixXd & recovered) {
    Eigen::MatrixXd corr(truth.rows(), recovered.rows());
    for (Eigen::Index i = 0; i < truth.rows(); ++i)
        for (Eigen::Index j = 0; j < recovered.rows(); ++j)
            corr(i, j) = std::abs(pearson(truth.row(i).transpose(), recovered.row(j).transpose()));
    std::vector<double> out(static_cast<std::size_t>(truth.rows()), 0.0);
    std::vector<bool> used_r(static_cast<std::size_t>(truth.rows()), false), used_c(static_cast<std::size_t>(recovered.rows()), false);
    for (Eigen::Index n = 0; n < std::min(truth.rows(), recovered.rows()); ++n) {
        double best = -1.0;
        Eigen::Index bi = 0, bj = 0;
        for (Eigen::Index i = 0; i < truth.rows(); ++i) {
            if (used_r[static_cast<std::size_t>(i)]) continue;
            for (Eigen::Index j = 0; j < recovered.rows(); ++j) {
                if (used_c[static_cast<std::size_t>(j)]) continue;
                if (corr(i, j) > best) {
                    best = corr(i, j);
                    bi = i;
                    bj = j;
                }
            }
        }
        used_r[static_cast<std::size_t>(bi)] = true;
        used_c[static_cast<std::size_t>(bj)] = true;
        out[static_cast<std::size_t>(bi)] = best;
    }
    return out;
}

}  // namespace fbnprune::testing
