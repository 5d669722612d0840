// SPDX-License-Identifier: Apache-2.0

#include "fbnprune/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <fmt/format.h>

#include "fbnprune/checkpoint.hpp"
#include "fbnprune/digest.hpp"
#include "fbnprune/error.hpp"

namespace fbnprune::evalkit {

nlohmann::json to_json(const EvalReport & r) {
    return {
        {"model_digest", r.model_digest},
        {"dataset_digest", r.dataset_digest},
        {"token_count", r.token_count},
        {"nll_sum", r.nll_sum},
        {"perplexity", r.perplexity},
        {"method", r.method},
        {"rate", r.rate},
        {"config", r.config},
    };
}

double nll_from_logits(const model::Tensor & logits, std::span<const Token> targets) {
    if (static_cast<std::size_t>(logits.rows()) != targets.size()) {
        fail(ErrorKind::Dimension, "nll_from_logits: one target per logits row required");
    }
    double total = 0.0;
    for (Eigen::Index t = 0; t < logits.rows(); ++t) {
        const Token y = targets[static_cast<std::size_t>(t)];
        if (y < 0 || y >= logits.cols()) fail(ErrorKind::Argument, fmt::format("target token {} out of range", y));
        const Eigen::VectorXd row = logits.row(t).cast<double>().transpose();
        const double mx = row.maxCoeff();
        const double lse = mx + std::log((row.array() - mx).exp().sum());
        total += lse - row(y);
    }
    if (!std::isfinite(total)) fail(ErrorKind::Numeric, "nll_from_logits: non-finite loss");
    return total;
}

EvalReport perplexity(const model::ModelCheckpoint & ckpt, std::span<const Token> heldout, std::size_t max_tokens) {
    if (max_tokens > 0 && heldout.size() > max_tokens) heldout = heldout.first(max_tokens);
    if (heldout.size() < 2) fail(ErrorKind::Argument, "perplexity: held-out stream needs at least 2 tokens");
    const std::size_t len = static_cast<std::size_t>(ckpt.config.context_len);

    EvalReport r;
    for (std::size_t start = 0; start + 1 < heldout.size(); start += len) {
        const std::size_t end = std::min(start + len + 1, heldout.size());
        const auto window = heldout.subspan(start, end - start);
        const model::ForwardResult f = model::forward(ckpt, window.first(window.size() - 1));
        r.nll_sum += nll_from_logits(f.logits, window.subspan(1));
        r.token_count += window.size() - 1;
    }
    r.perplexity = std::exp(r.nll_sum / static_cast<double>(r.token_count));
    r.model_digest = sha256_hex(model::serialize_checkpoint(ckpt));
    std::string bytes(heldout.size(), '\0');
    for (std::size_t i = 0; i < heldout.size(); ++i) bytes[i] = static_cast<char>(static_cast<std::uint8_t>(heldout[i]));
    r.dataset_digest = sha256_hex(bytes);
    return r;
}

std::string_view to_string(Axis a) noexcept {
    switch (a) {
        case Axis::None: return "none";
        case Axis::NComponents: return "n_components";
        case Axis::CalibrationSize: return "calibration_size";
        case Axis::PruningRate: return "pruning_rate";
    }
    return "none";
}

Axis parse_axis(std::string_view name) {
    if (name == "n_components") return Axis::NComponents;
    if (name == "calibration_size") return Axis::CalibrationSize;
    if (name == "pruning_rate") return Axis::PruningRate;
    fail(ErrorKind::Config, fmt::format("unknown sweep axis '{}' (expected n_components, calibration_size or pruning_rate)", name));
}

nlohmann::json to_json(const ExperimentConfig & c) {
    nlohmann::json f = fbn::to_json(c.fbn);
    f.erase("seed");
    return {
        {"fbn", f},
        {"calibration_samples", c.calibration_samples},
        {"compensation", c.compensation},
        {"eval_max_tokens", c.eval_max_tokens},
    };
}

namespace {

void check_inputs(const ExperimentInputs & in) {
    if (!in.ckpt || !in.calibration_source || !in.heldout) {
        fail(ErrorKind::Argument, "experiment: checkpoint, calibration source and held-out corpus are required");
    }
}

bool needs(std::span<const pruning::Method> methods, pruning::Method m) {
    return std::find(methods.begin(), methods.end(), m) != methods.end();
}

struct Decomposition {
    std::vector<pruning::Vector> scores;
    nlohmann::json extras;
};

Decomposition summarize(const std::vector<fbn::LayerMaskSet> & layers) {
    Decomposition d;
    Eigen::Index kmin = -1, kmax = 0;
    double conv = 0.0;
    std::size_t groups = 0;
    for (const auto & m : layers) {
        d.scores.push_back(m.unit_scores());
        kmin = kmin < 0 ? m.k_effective_min : std::min(kmin, m.k_effective_min);
        kmax = std::max(kmax, m.k_effective_max);
        conv += m.converged_fraction();
        groups = m.group_count;
    }
    conv /= static_cast<double>(std::max<std::size_t>(1, layers.size()));
    d.extras = {
        {"k_effective_min", kmin},
        {"k_effective_max", kmax},
        {"converged_fraction", conv},
        {"nonconverged", conv < 1.0},
        {"group_count", groups},
    };
    return d;
}

std::vector<fbn::LayerMaskSet> run_decomposition(const model::ModelCheckpoint & ckpt, const calibration::CalibrationSet & set,
                                                 const calibration::GroupPlan & plan, const fbn::FbnConfig & fcfg,
                                                 int workers, const std::function<void(std::size_t, const std::vector<fbn::LayerMaskSet> &)> & on_prefix,
                                                 const Log & log) {
    fbn::DecomposeOptions opt;
    opt.workers = workers;
    opt.on_prefix = on_prefix;
    if (log) {
        opt.on_cell = [&](const fbn::DecomposeProgress & p) {
            log(fmt::format("canica k={} group {}/{} layer {}: k_eff={} converged={} iterations={}", fcfg.n_components,
                            p.group_index + 1, p.groups_total, p.layer, p.decomposition->k_effective,
                            p.decomposition->converged, p.decomposition->iterations));
        };
    }
    const fbn::SignalSource source = [&](std::size_t id) {
        return fbn::capture_signals(ckpt, set.samples[id], fcfg.signal_mode, id);
    };
    return fbn::decompose(ckpt.config, plan, source, fcfg, opt);
}

struct Cell {
    pruning::Method method;
    double rate;
    std::uint64_t seed;
    const std::vector<pruning::Vector> * canica_scores;
    const pruning::ActivationStats * stats;
    nlohmann::json extras;
};

ResultRow evaluate_cell(const ExperimentInputs & in, const ExperimentConfig & cfg, const Cell & cell) {
    const pruning::PlanInputs pin{cell.canica_scores, cell.stats, RngSeed{cell.seed}};
    pruning::PruningPlan plan = pruning::build_plan(cell.method, *in.ckpt, cell.rate, pin);
    if (cfg.compensation) {
        if (!cell.stats) fail(ErrorKind::Argument, "compensation requires activation statistics");
        plan.compensation = true;
        plan.per_layer_bias = pruning::compute_compensation(*in.ckpt, plan, *cell.stats);
    }
    const model::ModelCheckpoint pruned = pruning::apply_plan(*in.ckpt, plan);
    const EvalReport rep = perplexity(pruned, in.heldout->tokens, cfg.eval_max_tokens);
    ResultRow row;
    row.method = std::string(pruning::to_string(cell.method));
    row.rate = cell.rate;
    row.seed = cell.seed;
    row.perplexity = rep.perplexity;
    row.tokens = rep.token_count;
    row.extras = cell.extras;
    row.extras["nll_sum"] = rep.nll_sum;
    row.extras["model_digest"] = rep.model_digest;
    row.extras["parameters"] = model::parameter_count(pruned);
    std::vector<std::size_t> kept;
    for (const auto & k : plan.per_layer_kept) kept.push_back(k.size());
    row.extras["kept_per_layer"] = kept;
    return row;
}

ResultRow baseline_row(const ExperimentInputs & in, const ExperimentConfig & cfg, const std::string & axis) {
    const EvalReport rep = perplexity(*in.ckpt, in.heldout->tokens, cfg.eval_max_tokens);
    ResultRow row;
    row.method = "none";
    row.axis = axis;
    row.perplexity = rep.perplexity;
    row.tokens = rep.token_count;
    row.extras = {{"nll_sum", rep.nll_sum}, {"model_digest", rep.model_digest}, {"parameters", model::parameter_count(*in.ckpt)}};
    return row;
}

void check_increasing(std::span<const double> values, const char * axis) {
    if (values.empty()) fail(ErrorKind::Argument, fmt::format("sweep {}: no values", axis));
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (!(values[i] > values[i - 1])) {
            fail(ErrorKind::Argument, fmt::format("sweep {}: values must be strictly increasing", axis));
        }
    }
}

}  // namespace

SweepResult compare_methods(const ExperimentInputs & in, std::span<const pruning::Method> methods,
                            std::span<const double> rates, std::span<const std::uint64_t> seeds,
                            const ExperimentConfig & cfg, const Log & log) {
    check_inputs(in);
    if (methods.empty() || rates.empty() || seeds.empty()) {
        fail(ErrorKind::Argument, "compare_methods: methods, rates and seeds must be nonempty");
    }
    for (double p : rates) fbn::keep_count(in.ckpt->config.d_hidden, p);

    SweepResult result;
    result.axis = "none";
    result.baselines.push_back(baseline_row(in, cfg, result.axis));
    const bool need_stats = cfg.compensation || needs(methods, pruning::Method::Fluctuation);

    for (std::uint64_t seed : seeds) {
        const calibration::CalibrationSet set =
            calibration::ingest(*in.calibration_source, in.ckpt->config.context_len, cfg.calibration_samples, RngSeed{seed});
        std::optional<pruning::ActivationStats> stats;
        if (need_stats) stats = pruning::collect_stats(*in.ckpt, set.samples);
        std::optional<Decomposition> dec;
        if (needs(methods, pruning::Method::Canica)) {
            fbn::FbnConfig fcfg = cfg.fbn;
            fcfg.seed = RngSeed{seed};
            const calibration::GroupPlan plan = calibration::plan_groups(set, fcfg.group_size);
            dec = summarize(run_decomposition(*in.ckpt, set, plan, fcfg, cfg.workers, {}, log));
        }
        for (pruning::Method m : methods) {
            for (double p : rates) {
                const bool canica = m == pruning::Method::Canica;
                ResultRow row = evaluate_cell(
                    in, cfg,
                    {m, p, seed, canica ? &dec->scores : nullptr, stats ? &*stats : nullptr,
                     canica ? dec->extras : nlohmann::json::object()});
                row.axis = result.axis;
                if (log) log(fmt::format("seed {} {} p={}: perplexity {:.4f}", seed, row.method, p, row.perplexity));
                result.rows.push_back(std::move(row));
            }
        }
    }
    return result;
}

SweepResult sweep(const ExperimentInputs & in, Axis axis, std::span<const double> values,
                  std::span<const pruning::Method> methods, double rate, std::span<const std::uint64_t> seeds,
                  const ExperimentConfig & cfg, const Log & log) {
    check_inputs(in);
    if (methods.empty() || seeds.empty()) fail(ErrorKind::Argument, "sweep: methods and seeds must be nonempty");
    const std::string axis_name(to_string(axis));
    check_increasing(values, axis_name.c_str());
    const model::ModelConfig & mc = in.ckpt->config;
    const std::size_t g = cfg.fbn.group_size;

    switch (axis) {
        case Axis::NComponents:
            for (double v : values) {
                if (v < 1 || v != std::floor(v)) fail(ErrorKind::Argument, fmt::format("sweep n_components: invalid value {}", v));
            }
            fbn::keep_count(mc.d_hidden, rate);
            break;
        case Axis::CalibrationSize:
            for (double v : values) {
                if (v < static_cast<double>(g) || v != std::floor(v) || std::fmod(v, static_cast<double>(g)) != 0.0) {
                    fail(ErrorKind::Argument,
                         fmt::format("sweep calibration_size: value {} is not a positive multiple of group_size {}", v, g));
                }
            }
            fbn::keep_count(mc.d_hidden, rate);
            break;
        case Axis::PruningRate:
            for (double v : values) fbn::keep_count(mc.d_hidden, v);
            break;
        case Axis::None: fail(ErrorKind::Argument, "sweep: an axis is required");
    }

    SweepResult result;
    result.axis = axis_name;
    result.baselines.push_back(baseline_row(in, cfg, axis_name));
    const bool need_stats = cfg.compensation || needs(methods, pruning::Method::Fluctuation);
    const bool need_canica = needs(methods, pruning::Method::Canica);

    auto emit = [&](ResultRow row, double x) {
        row.axis = axis_name;
        row.x = x;
        if (log) log(fmt::format("{}={} seed {} {} p={}: perplexity {:.4f}", axis_name, x, row.seed, row.method, row.rate, row.perplexity));
        result.rows.push_back(std::move(row));
    };

    for (std::uint64_t seed : seeds) {
        fbn::FbnConfig fcfg = cfg.fbn;
        fcfg.seed = RngSeed{seed};

        if (axis == Axis::CalibrationSize) {
            const std::size_t max_n = static_cast<std::size_t>(values.back());
            const calibration::CalibrationSet set = calibration::ingest(*in.calibration_source, mc.context_len, max_n, RngSeed{seed});
            const calibration::GroupPlan plan = calibration::plan_groups(set, g);
            std::map<std::size_t, std::vector<fbn::LayerMaskSet>> snapshots;
            std::vector<std::size_t> wanted;
            for (double v : values) wanted.push_back(static_cast<std::size_t>(v) / g);
            if (need_canica) {
                run_decomposition(*in.ckpt, set, plan, fcfg, cfg.workers,
                                  [&](std::size_t done, const std::vector<fbn::LayerMaskSet> & sofar) {
                                      if (std::find(wanted.begin(), wanted.end(), done) != wanted.end()) snapshots[done] = sofar;
                                  },
                                  log);
            }
            pruning::ActivationStats stats;
            std::size_t stats_groups = 0;
            std::map<pruning::Method, ResultRow> fixed;
            for (std::size_t vi = 0; vi < values.size(); ++vi) {
                const std::size_t n_groups = wanted[vi];
                if (need_stats) {
                    for (; stats_groups < n_groups; ++stats_groups) {
                        for (std::size_t id : plan.groups[stats_groups]) {
                            const auto r = model::forward(*in.ckpt, set.samples[id], model::ForwardOptions{true, nullptr});
                            stats.add(*r.captures);
                        }
                    }
                }
                std::optional<Decomposition> dec;
                if (need_canica) dec = summarize(snapshots.at(n_groups));
                for (pruning::Method m : methods) {
                    const bool canica = m == pruning::Method::Canica;
                    const bool depends = canica || m == pruning::Method::Fluctuation || cfg.compensation;
                    if (!depends && fixed.count(m)) {
                        emit(fixed.at(m), values[vi]);
                        continue;
                    }
                    ResultRow row = evaluate_cell(in, cfg,
                                                  {m, rate, seed, canica ? &dec->scores : nullptr, need_stats ? &stats : nullptr,
                                                   canica ? dec->extras : nlohmann::json::object()});
                    if (!depends) fixed.emplace(m, row);
                    emit(std::move(row), values[vi]);
                }
            }
            continue;
        }

        const calibration::CalibrationSet set =
            calibration::ingest(*in.calibration_source, mc.context_len, cfg.calibration_samples, RngSeed{seed});
        const calibration::GroupPlan plan = calibration::plan_groups(set, g);
        std::optional<pruning::ActivationStats> stats;
        if (need_stats) stats = pruning::collect_stats(*in.ckpt, set.samples);

        if (axis == Axis::NComponents) {
            std::map<pruning::Method, ResultRow> fixed;
            for (double v : values) {
                std::optional<Decomposition> dec;
                if (need_canica) {
                    fbn::FbnConfig vcfg = fcfg;
                    vcfg.n_components = static_cast<Eigen::Index>(v);
                    dec = summarize(run_decomposition(*in.ckpt, set, plan, vcfg, cfg.workers, {}, log));
                }
                for (pruning::Method m : methods) {
                    const bool canica = m == pruning::Method::Canica;
                    if (!canica && fixed.count(m)) {
                        emit(fixed.at(m), v);
                        continue;
                    }
                    ResultRow row = evaluate_cell(in, cfg,
                                                  {m, rate, seed, canica ? &dec->scores : nullptr, stats ? &*stats : nullptr,
                                                   canica ? dec->extras : nlohmann::json::object()});
                    if (!canica) fixed.emplace(m, row);
                    emit(std::move(row), v);
                }
            }
        } else {
            std::optional<Decomposition> dec;
            if (need_canica) dec = summarize(run_decomposition(*in.ckpt, set, plan, fcfg, cfg.workers, {}, log));
            for (double v : values) {
                for (pruning::Method m : methods) {
                    const bool canica = m == pruning::Method::Canica;
                    emit(evaluate_cell(in, cfg,
                                       {m, v, seed, canica ? &dec->scores : nullptr, stats ? &*stats : nullptr,
                                        canica ? dec->extras : nlohmann::json::object()}),
                         v);
                }
            }
        }
    }
    return result;
}

namespace {

std::string csv_row(const ResultRow & r) {
    return fmt::format("{},{},{},{},{},{},{}\n", r.method, r.rate, r.seed, r.axis, r.x ? fmt::format("{}", *r.x) : "",
                       r.perplexity, r.tokens);
}

nlohmann::json row_json(const ResultRow & r) {
    return {
        {"method", r.method},
        {"rate", r.rate},
        {"seed", r.seed},
        {"axis", r.axis},
        {"x", r.x ? nlohmann::json(*r.x) : nlohmann::json(nullptr)},
        {"perplexity", r.perplexity},
        {"tokens", r.tokens},
        {"extras", r.extras},
    };
}

}  // namespace

std::string to_csv(const SweepResult & r) {
    std::string out = "method,rate,seed,axis,x,perplexity,tokens\n";
    for (const auto & row : r.baselines) out += csv_row(row);
    for (const auto & row : r.rows) out += csv_row(row);
    return out;
}

nlohmann::json to_json(const SweepResult & r) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto & row : r.rows) rows.push_back(row_json(row));
    nlohmann::json base = nlohmann::json::array();
    for (const auto & row : r.baselines) base.push_back(row_json(row));
    return {{"axis", r.axis}, {"rows", rows}, {"baselines", base}};
}

}  // namespace fbnprune::evalkit
