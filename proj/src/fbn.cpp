// SPDX-License-Identifier: Apache-2.0

#include "fbnprune/fbn.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <map>
#include <mutex>
#include <numeric>
#include <thread>

#include <fmt/format.h>

#include "fbnprune/binary.hpp"
#include "fbnprune/error.hpp"
#include "fbnprune/io.hpp"
#include "fbnprune/digest.hpp"

namespace fbnprune::fbn {

std::string_view to_string(SignalMode mode) noexcept {
    switch (mode) {
        case SignalMode::Gate: return "gate";
        case SignalMode::Up: return "up";
        case SignalMode::Both: return "both";
        case SignalMode::Product: return "product";
    }
    return "both";
}

SignalMode parse_signal_mode(std::string_view name) {
    if (name == "gate") return SignalMode::Gate;
    if (name == "up") return SignalMode::Up;
    if (name == "both") return SignalMode::Both;
    if (name == "product") return SignalMode::Product;
    fail(ErrorKind::Config, fmt::format("unknown signal_mode '{}' (expected gate, up, both or product)", name));
}

Index signal_width(SignalMode mode, Index d_hidden) noexcept {
    return mode == SignalMode::Both ? 2 * d_hidden : d_hidden;
}

void FbnConfig::validate() const {
    if (n_components < 1) fail(ErrorKind::Config, "fbn: n_components must be >= 1");
    if (!(tau > 0.0)) fail(ErrorKind::Config, "fbn: tau must be > 0");
    if (group_size < 1) fail(ErrorKind::Config, "fbn: group_size must be >= 1");
    if (!(ica.tol > 0.0)) fail(ErrorKind::Config, "fbn: ica.tol must be > 0");
    if (ica.max_iter < 1) fail(ErrorKind::Config, "fbn: ica.max_iter must be >= 1");
    if (ica.restarts < 1) fail(ErrorKind::Config, "fbn: ica.restarts must be >= 1");
}

nlohmann::json to_json(const FbnConfig & c) {
    return {
        {"n_components", c.n_components},
        {"tau", c.tau},
        {"group_size", c.group_size},
        {"signal_mode", std::string(to_string(c.signal_mode))},
        {"seed", c.seed.value},
        {"ica", {{"tol", c.ica.tol}, {"max_iter", c.ica.max_iter}, {"restarts", c.ica.restarts}}},
    };
}

SignalMatrix raw_signals(const model::CaptureRecord & r, SignalMode mode, std::size_t sample_id) {
    if (r.gate_out.rows() != r.up_out.rows() || r.gate_out.cols() != r.up_out.cols() ||
        r.product.rows() != r.gate_out.rows() || r.product.cols() != r.gate_out.cols()) {
        fail(ErrorKind::Dimension, fmt::format("layer {}: capture matrices disagree in shape", r.layer));
    }
    SignalMatrix s;
    s.layer = r.layer;
    s.mode = mode;
    s.sample_id = sample_id;
    const Index t = r.gate_out.rows();
    const Index d = r.gate_out.cols();
    switch (mode) {
        case SignalMode::Gate: s.data = r.gate_out.cast<double>(); break;
        case SignalMode::Up: s.data = r.up_out.cast<double>(); break;
        case SignalMode::Product: s.data = r.product.cast<double>(); break;
        case SignalMode::Both:
            s.data.resize(t, 2 * d);
            s.data.leftCols(d) = r.gate_out.cast<double>();
            s.data.rightCols(d) = r.up_out.cast<double>();
            break;
    }
    return s;
}

void standardize(SignalMatrix & s) {
    if (s.z_scored) return;
    s.data = numerics::z_score_columns(s.data);
    s.z_scored = true;
}

SignalMatrix assemble_signals(const model::CaptureRecord & record, SignalMode mode, std::size_t sample_id) {
    SignalMatrix s = raw_signals(record, mode, sample_id);
    standardize(s);
    return s;
}

SourceDecomposition canica(std::span<const SignalMatrix> group, const FbnConfig & cfg, int layer,
                           std::size_t group_id) {
    cfg.validate();
    if (group.empty()) fail(ErrorKind::Argument, "canica: empty group");
    const Index n = group[0].data.cols();
    const Index k_req = cfg.n_components;

    SourceDecomposition dec;
    dec.layer = layer;
    dec.group_id = group_id;
    dec.k_requested = k_req;

    std::vector<Matrix> reduced;
    reduced.reserve(group.size());
    Index stacked_rows = 0;
    for (const SignalMatrix & subject : group) {
        if (subject.data.cols() != n) {
            fail(ErrorKind::Dimension, fmt::format("canica: subject {} has {} signals, expected {}", subject.sample_id,
                                                   subject.data.cols(), n));
        }
        const Matrix x = subject.z_scored ? subject.data : numerics::z_score_columns(subject.data);
        const Index limit = std::min(x.rows(), x.cols());
        const Index k_s = std::min(k_req, limit);
        if (k_s < k_req && reduced.empty()) {
            dec.warnings.push_back(fmt::format("layer {} group {}: n_components={} exceeds min(tokens, signals)={}",
                                               layer, group_id, k_req, limit));
        }
        numerics::Whitened w = numerics::pca_whiten(x, k_s);
        if (w.projection.k_effective < k_s) {
            dec.warnings.push_back(fmt::format("layer {} group {} sample {}: {}", layer, group_id, subject.sample_id,
                                               fmt::join(w.projection.warnings, "; ")));
        }
        stacked_rows += w.data.rows();
        reduced.push_back(std::move(w.data));
    }

    Matrix stacked(stacked_rows, n);
    Index row = 0;
    for (const Matrix & r : reduced) {
        stacked.middleRows(row, r.rows()) = r;
        row += r.rows();
    }
    reduced.clear();

    const Index k_g = std::min({k_req, stacked.rows(), n});
    numerics::Whitened g = numerics::pca_whiten(stacked, k_g);
    for (const auto & msg : g.projection.warnings) {
        dec.warnings.push_back(fmt::format("layer {} group {} (group level): {}", layer, group_id, msg));
    }
    const Matrix & y = g.data;
    const Index k = y.rows();

    const numerics::FastIcaResult ica =
        numerics::fast_ica(y, derive_seed(cfg.seed, {static_cast<std::uint64_t>(layer), group_id}), cfg.ica);
    if (!ica.converged) {
        dec.warnings.push_back(fmt::format("layer {} group {}: FastICA did not converge in {} iterations", layer,
                                           group_id, cfg.ica.max_iter));
    }

    Matrix s = ica.unmixing * y;
    Vector scale(k);
    for (Index i = 0; i < k; ++i) {
        auto r = s.row(i);
        const double mean = r.mean();
        r.array() -= mean;
        const double sd = std::sqrt(r.squaredNorm() / static_cast<double>(n));
        if (!(sd > 1e-12)) {
            fail(ErrorKind::Numeric, fmt::format("canica: layer {} group {} source {} is degenerate", layer, group_id, i));
        }
        r /= sd;
        Index arg = 0;
        r.cwiseAbs().maxCoeff(&arg);
        const double sign = r(arg) < 0.0 ? -1.0 : 1.0;
        r *= sign;
        scale(i) = sign * sd;
    }
    numerics::require_finite(s, "canica sources");

    dec.sources = std::move(s);
    dec.mixing = ica.unmixing.transpose() * scale.asDiagonal();
    dec.converged = ica.converged;
    dec.iterations = ica.iterations;
    dec.k_effective = k;
    return dec;
}

BoolMatrix threshold_sources(const SourceDecomposition & dec, double tau) {
    return dec.sources.array().abs() > tau;
}

BoolVector aggregate_or(std::span<const BoolMatrix> masks) {
    if (masks.empty()) fail(ErrorKind::Argument, "aggregate_or: empty mask list");
    const Index width = masks[0].cols();
    BoolVector out = BoolVector::Constant(width, false);
    for (const BoolMatrix & m : masks) {
        if (m.cols() != width) {
            fail(ErrorKind::Dimension, fmt::format("aggregate_or: mask width {} differs from {}", m.cols(), width));
        }
        for (Index j = 0; j < width; ++j) {
            if (!out(j) && m.col(j).any()) out(j) = true;
        }
    }
    return out;
}

Vector column_scores(std::span<const SourceDecomposition> decs) {
    if (decs.empty()) fail(ErrorKind::Argument, "neuron_scores: no decompositions");
    const Index width = decs[0].sources.cols();
    Vector out = Vector::Zero(width);
    for (const SourceDecomposition & d : decs) {
        if (d.sources.cols() != width) {
            fail(ErrorKind::Dimension, "neuron_scores: decompositions disagree in signal count");
        }
        if (d.sources.rows() > 0) out = out.cwiseMax(d.sources.cwiseAbs().colwise().maxCoeff().transpose());
    }
    return out;
}

Vector unit_scores(const Vector & column_scores, SignalMode mode, Index d_hidden) {
    if (column_scores.size() != signal_width(mode, d_hidden)) {
        fail(ErrorKind::Dimension, fmt::format("unit_scores: {} columns do not match mode {} with d_hidden {}",
                                               column_scores.size(), to_string(mode), d_hidden));
    }
    if (mode != SignalMode::Both) return column_scores;
    return column_scores.head(d_hidden).cwiseMax(column_scores.tail(d_hidden));
}

BoolVector unit_mask(const BoolVector & column_mask, SignalMode mode, Index d_hidden) {
    if (column_mask.size() != signal_width(mode, d_hidden)) {
        fail(ErrorKind::Dimension, "unit_mask: column count does not match mode and d_hidden");
    }
    if (mode != SignalMode::Both) return column_mask;
    return column_mask.head(d_hidden) || column_mask.tail(d_hidden);
}

Vector neuron_scores(std::span<const SourceDecomposition> decs, SignalMode mode, Index d_hidden) {
    return unit_scores(column_scores(decs), mode, d_hidden);
}

Index keep_count(Index d_hidden, double rate) {
    if (!(rate >= 0.0 && rate < 1.0)) {
        fail(ErrorKind::Argument, fmt::format("pruning rate {} outside [0, 1)", rate));
    }
    const double exact = (1.0 - rate) * static_cast<double>(d_hidden);
    const Index keep = static_cast<Index>(std::floor(exact + 0.5 + 1e-9));
    if (keep < 1) {
        fail(ErrorKind::Argument, fmt::format("pruning rate {} keeps no unit of {}", rate, d_hidden));
    }
    return std::min(keep, d_hidden);
}

std::vector<int> select_kept(const Vector & scores, double rate) {
    const Index d = scores.size();
    if (d == 0) fail(ErrorKind::Argument, "select_kept: empty score vector");
    if (!scores.allFinite()) fail(ErrorKind::Numeric, "select_kept: non-finite score");
    const Index keep = keep_count(d, rate);
    std::vector<int> order(static_cast<std::size_t>(d));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores(a) > scores(b); });
    order.resize(static_cast<std::size_t>(keep));
    std::sort(order.begin(), order.end());
    return order;
}

LayerMaskSet::LayerMaskSet(int layer_, Index d_hidden_, SignalMode mode_, double tau_, Index k_requested_)
    : layer(layer_), d_hidden(d_hidden_), mode(mode_), tau(tau_), k_requested(k_requested_),
      global_mask(BoolVector::Constant(signal_width(mode_, d_hidden_), false)),
      scores(Vector::Zero(signal_width(mode_, d_hidden_))) {}

void LayerMaskSet::add(const SourceDecomposition & dec, bool keep_group_mask) {
    if (dec.sources.cols() != global_mask.size()) {
        fail(ErrorKind::Dimension, fmt::format("layer {}: decomposition has {} signals, mask set expects {}", layer,
                                               dec.sources.cols(), global_mask.size()));
    }
    BoolMatrix m = threshold_sources(dec, tau);
    global_mask = global_mask || m.colwise().any().transpose();
    if (dec.sources.rows() > 0) scores = scores.cwiseMax(dec.sources.cwiseAbs().colwise().maxCoeff().transpose());
    k_effective_min = group_count == 0 ? dec.k_effective : std::min(k_effective_min, dec.k_effective);
    k_effective_max = std::max(k_effective_max, dec.k_effective);
    ++group_count;
    if (dec.converged) ++converged_count;
    if (keep_group_mask) per_group_masks.push_back(std::move(m));
}

void LayerMaskSet::merge(const LayerMaskSet & o) {
    if (o.group_count == 0) return;
    if (o.global_mask.size() != global_mask.size()) fail(ErrorKind::Dimension, "merge: mask widths differ");
    global_mask = global_mask || o.global_mask;
    scores = scores.cwiseMax(o.scores);
    k_effective_min = group_count == 0 ? o.k_effective_min : std::min(k_effective_min, o.k_effective_min);
    k_effective_max = std::max(k_effective_max, o.k_effective_max);
    group_count += o.group_count;
    converged_count += o.converged_count;
    per_group_masks.insert(per_group_masks.end(), o.per_group_masks.begin(), o.per_group_masks.end());
}

Vector LayerMaskSet::unit_scores() const {
    return fbn::unit_scores(scores, mode, d_hidden);
}

BoolVector LayerMaskSet::unit_mask() const {
    return fbn::unit_mask(global_mask, mode, d_hidden);
}

double LayerMaskSet::converged_fraction() const {
    return group_count == 0 ? 0.0 : static_cast<double>(converged_count) / static_cast<double>(group_count);
}

namespace {

std::vector<Index> true_indices(const BoolVector & m) {
    std::vector<Index> out;
    for (Index i = 0; i < m.size(); ++i)
        if (m(i)) out.push_back(i);
    return out;
}

std::vector<double> to_std(const Vector & v) {
    return {v.data(), v.data() + v.size()};
}

}  // namespace

nlohmann::json masks_to_json(std::span<const LayerMaskSet> layers, const nlohmann::json & meta) {
    nlohmann::json out = nlohmann::json::object();
    for (const LayerMaskSet & m : layers) {
        out[std::to_string(m.layer)] = {
            {"kept_indices", true_indices(m.unit_mask())},
            {"scores", to_std(m.unit_scores())},
            {"tau", m.tau},
            {"k", m.k_requested},
            {"k_effective", {m.k_effective_min, m.k_effective_max}},
            {"group_count", m.group_count},
            {"converged_count", m.converged_count},
            {"converged_fraction", m.converged_fraction()},
            {"signal_mode", std::string(to_string(m.mode))},
            {"d_hidden", m.d_hidden},
            {"column_scores", to_std(m.scores)},
            {"global_mask", true_indices(m.global_mask)},
        };
    }
    out["meta"] = meta;
    return out;
}

std::vector<LayerMaskSet> masks_from_json(const nlohmann::json & j) {
    std::map<int, LayerMaskSet> by_layer;
    try {
        for (const auto & [key, v] : j.items()) {
            if (key == "meta") continue;
            const int layer = std::stoi(key);
            LayerMaskSet m(layer, v.at("d_hidden").get<Index>(), parse_signal_mode(v.at("signal_mode").get<std::string>()),
                           v.at("tau").get<double>(), v.at("k").get<Index>());
            const auto ke = v.at("k_effective").get<std::vector<Index>>();
            if (ke.size() != 2) fail(ErrorKind::Format, "mask file: k_effective must have two entries");
            m.k_effective_min = ke[0];
            m.k_effective_max = ke[1];
            m.group_count = v.at("group_count").get<std::size_t>();
            m.converged_count = v.at("converged_count").get<std::size_t>();
            const auto cs = v.at("column_scores").get<std::vector<double>>();
            if (static_cast<Index>(cs.size()) != m.scores.size()) {
                fail(ErrorKind::Format, fmt::format("mask file: layer {} has {} column scores", layer, cs.size()));
            }
            m.scores = Eigen::Map<const Vector>(cs.data(), static_cast<Index>(cs.size()));
            for (Index i : v.at("global_mask").get<std::vector<Index>>()) {
                if (i < 0 || i >= m.global_mask.size()) fail(ErrorKind::Format, "mask file: mask index out of range");
                m.global_mask(i) = true;
            }
            by_layer.emplace(layer, std::move(m));
        }
    } catch (const nlohmann::json::exception & e) {
        fail(ErrorKind::Format, std::string("mask file: ") + e.what());
    } catch (const std::logic_error & e) {
        fail(ErrorKind::Format, std::string("mask file: bad layer key: ") + e.what());
    }
    std::vector<LayerMaskSet> out;
    for (auto & [layer, m] : by_layer) {
        if (layer != static_cast<int>(out.size())) fail(ErrorKind::Format, "mask file: layers are not contiguous from 0");
        out.push_back(std::move(m));
    }
    return out;
}

std::string serialize_signals(const SignalMatrix & s) {
    const nlohmann::json header = {
        {"layer", s.layer},
        {"mode", std::string(to_string(s.mode))},
        {"shape", {s.data.rows(), s.data.cols()}},
        {"sample_id", s.sample_id},
        {"z_scored", s.z_scored},
    };
    const std::string text = canonical_json(header);
    std::string out;
    out.append(kSignalMagic, 4);
    binary::put<std::uint32_t>(out, kSignalVersion);
    binary::put<std::uint64_t>(out, text.size());
    out += text;
    const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> f = s.data.cast<float>();
    binary::put_floats(out, {f.data(), static_cast<std::size_t>(f.size())});
    return out;
}

SignalMatrix deserialize_signals(std::string_view bytes) {
    binary::Reader in(bytes, "signal dump");
    if (in.take(4) != std::string_view(kSignalMagic, 4)) fail(ErrorKind::Format, "signal dump: bad magic");
    const auto version = in.get<std::uint32_t>();
    if (version != kSignalVersion) {
        fail(ErrorKind::Format, fmt::format("signal dump: unsupported format version {}", version));
    }
    const auto len = in.get<std::uint64_t>();
    if (len > in.remaining()) fail(ErrorKind::Format, "signal dump: truncated header");
    SignalMatrix s;
    Index rows = 0, cols = 0;
    try {
        const auto header = nlohmann::json::parse(in.take(static_cast<std::size_t>(len)));
        s.layer = header.at("layer").get<int>();
        s.mode = parse_signal_mode(header.at("mode").get<std::string>());
        const auto shape = header.at("shape").get<std::vector<Index>>();
        if (shape.size() != 2 || shape[0] < 0 || shape[1] < 0) fail(ErrorKind::Format, "signal dump: bad shape");
        rows = shape[0];
        cols = shape[1];
        s.sample_id = header.at("sample_id").get<std::size_t>();
        s.z_scored = header.at("z_scored").get<bool>();
    } catch (const nlohmann::json::exception & e) {
        fail(ErrorKind::Format, std::string("signal dump: malformed header: ") + e.what());
    } catch (const Error & e) {
        fail(ErrorKind::Format, std::string("signal dump: ") + e.what());
    }
    if (in.remaining() != static_cast<std::size_t>(rows * cols) * sizeof(float)) {
        fail(ErrorKind::Format, "signal dump: payload size does not match the header shape");
    }
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> f(rows, cols);
    in.get_floats({f.data(), static_cast<std::size_t>(f.size())});
    s.data = f.cast<double>();
    return s;
}

void save_signals(const SignalMatrix & s, const std::filesystem::path & path) {
    io::write_bytes_atomic(path, serialize_signals(s));
}

SignalMatrix load_signals(const std::filesystem::path & path) {
    return deserialize_signals(io::read_text(path));
}

std::vector<SignalMatrix> capture_signals(const model::ModelCheckpoint & ckpt, std::span<const model::Token> tokens,
                                          SignalMode mode, std::size_t sample_id) {
    model::ForwardResult r = model::forward(ckpt, tokens, model::ForwardOptions{true, nullptr});
    std::vector<SignalMatrix> out;
    out.reserve(r.captures->size());
    for (const model::CaptureRecord & rec : *r.captures) out.push_back(raw_signals(rec, mode, sample_id));
    return out;
}

std::vector<LayerMaskSet> decompose(const model::ModelConfig & config, const calibration::GroupPlan & plan,
                                    const SignalSource & signals, const FbnConfig & cfg,
                                    const DecomposeOptions & options) {
    cfg.validate();
    const std::size_t n_groups = plan.groups.size();
    if (n_groups == 0) fail(ErrorKind::Argument, "decompose: group plan is empty");
    const int n_layers = config.n_layers;

    auto fresh = [&] {
        std::vector<LayerMaskSet> sets;
        for (int l = 0; l < n_layers; ++l) sets.emplace_back(l, config.hidden(l), cfg.signal_mode, cfg.tau, cfg.n_components);
        return sets;
    };

    std::vector<LayerMaskSet> total = fresh();
    std::vector<std::optional<std::vector<LayerMaskSet>>> pending(n_groups);
    std::size_t next_flush = 0;
    std::mutex mu;
    std::atomic<std::size_t> next_group{0};
    std::exception_ptr first_error;

    auto run_group = [&](std::size_t g) {
        const auto & members = plan.groups[g];
        std::vector<std::vector<SignalMatrix>> per_layer(static_cast<std::size_t>(n_layers));
        for (std::size_t id : members) {
            std::vector<SignalMatrix> layers = signals(id);
            if (static_cast<int>(layers.size()) != n_layers) {
                fail(ErrorKind::Dimension, fmt::format("decompose: sample {} produced {} layers", id, layers.size()));
            }
            for (int l = 0; l < n_layers; ++l) {
                SignalMatrix & s = layers[static_cast<std::size_t>(l)];
                if (s.mode != cfg.signal_mode) {
                    fail(ErrorKind::Argument, fmt::format("decompose: sample {} signals are '{}', config wants '{}'", id,
                                                          to_string(s.mode), to_string(cfg.signal_mode)));
                }
                standardize(s);
                per_layer[static_cast<std::size_t>(l)].push_back(std::move(s));
            }
        }
        std::vector<LayerMaskSet> partial = fresh();
        for (int l = 0; l < n_layers; ++l) {
            auto & subjects = per_layer[static_cast<std::size_t>(l)];
            const SourceDecomposition dec = canica(subjects, cfg, l, g);
            subjects.clear();
            subjects.shrink_to_fit();
            partial[static_cast<std::size_t>(l)].add(dec, options.keep_group_masks);
            if (options.on_cell) {
                std::lock_guard<std::mutex> lock(mu);
                options.on_cell({g, n_groups, l, &dec});
            }
        }
        std::lock_guard<std::mutex> lock(mu);
        pending[g] = std::move(partial);
        while (next_flush < n_groups && pending[next_flush]) {
            for (int l = 0; l < n_layers; ++l) {
                total[static_cast<std::size_t>(l)].merge((*pending[next_flush])[static_cast<std::size_t>(l)]);
            }
            pending[next_flush].reset();
            ++next_flush;
            if (options.on_prefix) options.on_prefix(next_flush, total);
        }
    };

    auto worker = [&] {
        for (;;) {
            {
                std::lock_guard<std::mutex> lock(mu);
                if (first_error) return;
            }
            const std::size_t g = next_group.fetch_add(1);
            if (g >= n_groups) return;
            try {
                run_group(g);
            } catch (...) {
                std::lock_guard<std::mutex> lock(mu);
                if (!first_error) first_error = std::current_exception();
                return;
            }
        }
    };

    const int n_workers = std::max(1, std::min<int>(options.workers, static_cast<int>(n_groups)));
    if (n_workers == 1) {
        worker();
    } else {
        std::vector<std::thread> threads;
        for (int w = 0; w < n_workers; ++w) threads.emplace_back(worker);
        for (auto & t : threads) t.join();
    }
    if (first_error) std::rethrow_exception(first_error);
    return total;
}

}  // namespace fbnprune::fbn
