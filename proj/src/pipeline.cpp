// SPDX-License-Identifier: Apache-2.0

#include "fbnprune/pipeline.hpp"

#include <map>
#include <vector>

#include <fmt/format.h>

#include "fbnprune/calibration.hpp"
#include "fbnprune/checkpoint.hpp"
#include "fbnprune/digest.hpp"
#include "fbnprune/error.hpp"
#include "fbnprune/evalkit.hpp"
#include "fbnprune/fbn.hpp"
#include "fbnprune/io.hpp"
#include "fbnprune/pruning.hpp"
#include "fbnprune/trainer.hpp"

namespace fbnprune::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char * kCheckpoint = "checkpoint.fbnp";
constexpr const char * kCalibration = "calibration.json";
constexpr const char * kMasks = "masks.json";
constexpr const char * kPlan = "plan.json";
constexpr const char * kPruned = "pruned.fbnp";
constexpr const char * kReportJson = "report.json";
constexpr const char * kReportCsv = "report.csv";
constexpr const char * kSweepJson = "sweep.json";
constexpr const char * kSweepCsv = "sweep.csv";

void say(const StageContext & ctx, const std::string & msg) {
    if (ctx.log) ctx.log(msg);
}

/// Tracks the files a stage writes; removes them unless the stage commits.
class Outputs {
public:
    Outputs(const StageContext & ctx, std::string stage) : ctx_(ctx), stage_(std::move(stage)), dir_(ctx.config.out_dir) {
        fs::create_directories(dir_);
    }
    Outputs(const Outputs &) = delete;
    Outputs & operator=(const Outputs &) = delete;

    ~Outputs() {
        if (committed_) return;
        std::error_code ec;
        for (const fs::path & p : written_) fs::remove(p, ec);
    }

    fs::path path(const std::string & rel) const { return dir_ / rel; }

    void bytes(const std::string & rel, std::string_view data) {
        const fs::path p = path(rel);
        if (p.has_parent_path()) fs::create_directories(p.parent_path());
        // Drop any previous manifest first so a crash never pairs it with new outputs.
        if (written_.empty()) {
            std::error_code ec;
            fs::remove(path(stage_ + ".manifest.json"), ec);
        }
        io::write_bytes_atomic(p, data);
        written_.push_back(p);
        digests_[rel] = sha256_hex(data);
    }

    void text_json(const std::string & rel, const json & j) { bytes(rel, canonical_json(j) + "\n"); }

    json commit(const json & inputs, const json & summary) {
        json outputs = json::object();
        for (const auto & [rel, digest] : digests_) outputs[rel] = digest;
        const json manifest = {
            {"stage", stage_},
            {"config", ctx_.config.json},
            {"config_digest", ctx_.config.digest()},
            {"inputs", inputs},
            {"outputs", outputs},
            {"summary", summary},
        };
        io::write_bytes_atomic(path(stage_ + ".manifest.json"), canonical_json(manifest) + "\n");
        committed_ = true;
        say(ctx_, fmt::format("{}: wrote {} artifact(s) to {}", stage_, digests_.size(), dir_.string()));
        return manifest;
    }

private:
    const StageContext & ctx_;
    std::string stage_;
    fs::path dir_;
    std::vector<fs::path> written_;
    std::map<std::string, std::string> digests_;
    bool committed_ = false;
};

json run_block(const StageContext & ctx, const json & inputs) {
    return {{"config", ctx.config.json}, {"config_digest", ctx.config.digest()}, {"inputs", inputs}};
}

fs::path artifact(const StageContext & ctx, const char * name) {
    return ctx.config.out_dir / name;
}

void require(const fs::path & p, const char * producer) {
    if (!fs::exists(p)) fail(ErrorKind::Io, fmt::format("{} not found; run `fbnprune {}` first", p.string(), producer));
}

struct Data {
    calibration::Corpus corpus;
    calibration::CorpusSplit split;
};

Data load_data(const RunConfig & c) {
    Data d;
    d.corpus = calibration::load_corpus(c.corpus);
    d.split = calibration::split_corpus(d.corpus, c.heldout_bytes);
    return d;
}

json corpus_input(const RunConfig & c, const Data & d) {
    return {{"path", c.corpus.generic_string()}, {"sha256", d.corpus.digest}};
}

/// The trained checkpoint; its architecture must match the configured one.
model::ModelCheckpoint load_base(const StageContext & ctx, std::string & digest) {
    const fs::path p = artifact(ctx, kCheckpoint);
    require(p, "train");
    model::ModelCheckpoint ckpt = model::load_checkpoint(p);
    model::ModelConfig expected = ctx.config.model;
    model::ModelConfig got = ckpt.config;
    got.layer_hidden.clear();
    if (!(got == expected)) {
        fail(ErrorKind::Config, fmt::format("{} was trained with a different model config; rerun `fbnprune train`", p.string()));
    }
    digest = sha256_file(p);
    return ckpt;
}

json capture_settings(const RunConfig & c, const std::string & ckpt_digest, const std::string & corpus_digest) {
    return {
        {"checkpoint", ckpt_digest},
        {"corpus", corpus_digest},
        {"heldout_bytes", c.heldout_bytes},
        {"seed", c.seed},
        {"n_samples", c.calibration_samples},
        {"group_size", c.fbn.group_size},
        {"signal_mode", std::string(fbn::to_string(c.fbn.signal_mode))},
        {"dump_signals", c.dump_signals},
    };
}

std::string signal_file(std::size_t sample, int layer) {
    return fmt::format("signals/sample_{:05d}_layer_{}.fbns", sample, layer);
}

void check_settings(const json & stored, const json & expected, const fs::path & file, const char * producer) {
    for (const auto & [key, value] : expected.items()) {
        if (!stored.contains(key) || stored.at(key) != value) {
            fail(ErrorKind::Config, fmt::format("{} was produced with a different '{}'; rerun `fbnprune {}`", file.string(), key,
                                                producer));
        }
    }
}

struct Calibration {
    calibration::CalibrationSet set;
    calibration::GroupPlan plan;
    bool dumped = false;
    std::string digest;
};

/// Loads calibration.json, capturing first when it is absent.
Calibration load_calibration(const StageContext & ctx, const Data & data, const std::string & ckpt_digest) {
    const fs::path p = artifact(ctx, kCalibration);
    if (!fs::exists(p)) {
        say(ctx, "calibration.json is absent; running capture");
        run_capture(ctx);
    }
    const json j = io::read_json(p);
    check_settings(j.value("settings", json::object()), capture_settings(ctx.config, ckpt_digest, data.corpus.digest), p, "capture");
    Calibration c;
    c.set = calibration::from_manifest(data.split.train, j.at("calibration"));
    c.plan = calibration::plan_groups(c.set, ctx.config.fbn.group_size);
    c.dumped = j.value("dumped", false);
    c.digest = sha256_file(p);
    return c;
}

json decompose_settings(const RunConfig & c, const std::string & ckpt_digest, const std::string & calib_digest) {
    return {{"checkpoint", ckpt_digest}, {"calibration", calib_digest}, {"fbn", fbn::to_json(c.fbn)}};
}

std::vector<std::size_t> kept_sizes(const pruning::PruningPlan & plan) {
    std::vector<std::size_t> out;
    for (const auto & k : plan.per_layer_kept) out.push_back(k.size());
    return out;
}

}  // namespace

json run_train(const StageContext & ctx) {
    const RunConfig & c = ctx.config;
    const Data data = load_data(c);
    Outputs out(ctx, "train");
    say(ctx, fmt::format("train: {} steps of batch {} on {} tokens", c.train.steps, c.train.batch_size,
                         data.split.train.tokens.size()));
    const int every = std::max(1, c.train.steps / 20);
    std::vector<double> losses;
    model::ModelCheckpoint ckpt = model::train(c.model, data.split.train.tokens, RngSeed{c.seed}, c.train,
                                               [&](const model::TrainProgress & p) {
                                                   losses.push_back(p.loss);
                                                   if (p.step % every == 0 || p.step + 1 == c.train.steps) {
                                                       say(ctx, fmt::format("train: step {} loss {:.4f} lr {:.2e}", p.step,
                                                                            p.loss, p.learning_rate));
                                                   }
                                               });
    const json inputs = {{"corpus", corpus_input(c, data)}};
    ckpt.meta = {{"stage", "train"}, {"run", run_block(ctx, inputs)}};
    out.bytes(kCheckpoint, model::serialize_checkpoint(ckpt));
    return out.commit(inputs, {{"steps", c.train.steps},
                               {"parameters", model::parameter_count(ckpt)},
                               {"final_loss", losses.empty() ? 0.0 : losses.back()},
                               {"losses", losses}});
}

json run_capture(const StageContext & ctx) {
    const RunConfig & c = ctx.config;
    const Data data = load_data(c);
    std::string ckpt_digest;
    const model::ModelCheckpoint ckpt = load_base(ctx, ckpt_digest);
    Outputs out(ctx, "capture");

    const calibration::CalibrationSet set = calibration::ingest(data.split.train, ckpt.config.context_len, c.calibration_samples,
                                                                RngSeed{c.seed});
    const calibration::GroupPlan plan = calibration::plan_groups(set, c.fbn.group_size);
    say(ctx, fmt::format("capture: {} samples of {} tokens, {} group(s) of {}, {} left over", set.size(), set.context_len,
                         plan.n_groups(), plan.group_size, plan.leftovers.size()));

    if (c.dump_signals) {
        for (std::size_t i = 0; i < set.size(); ++i) {
            const auto signals = fbn::capture_signals(ckpt, set.samples[i], c.fbn.signal_mode, i);
            for (const fbn::SignalMatrix & s : signals) out.bytes(signal_file(i, s.layer), fbn::serialize_signals(s));
        }
        say(ctx, fmt::format("capture: dumped signals of {} samples x {} layers", set.size(), ckpt.config.n_layers));
    }

    const json inputs = {{"corpus", corpus_input(c, data)}, {kCheckpoint, ckpt_digest}};
    const json doc = {
        {"calibration", calibration::manifest(set)},
        {"groups", calibration::to_json(plan)},
        {"dumped", c.dump_signals},
        {"settings", capture_settings(c, ckpt_digest, data.corpus.digest)},
        {"run", run_block(ctx, inputs)},
    };
    out.text_json(kCalibration, doc);
    return out.commit(inputs, {{"samples", set.size()}, {"groups", plan.n_groups()}, {"leftovers", plan.leftovers.size()}});
}

json run_decompose(const StageContext & ctx) {
    const RunConfig & c = ctx.config;
    const Data data = load_data(c);
    std::string ckpt_digest;
    const model::ModelCheckpoint ckpt = load_base(ctx, ckpt_digest);
    const Calibration cal = load_calibration(ctx, data, ckpt_digest);
    Outputs out(ctx, "decompose");

    const fs::path dir = c.out_dir;
    const fbn::SignalSource source = [&](std::size_t id) {
        if (!cal.dumped) return fbn::capture_signals(ckpt, cal.set.samples[id], c.fbn.signal_mode, id);
        std::vector<fbn::SignalMatrix> layers;
        for (int l = 0; l < ckpt.config.n_layers; ++l) layers.push_back(fbn::load_signals(dir / signal_file(id, l)));
        return layers;
    };

    std::size_t warnings = 0;
    std::vector<std::string> first_warnings;
    fbn::DecomposeOptions opt;
    opt.workers = c.workers;
    opt.on_cell = [&](const fbn::DecomposeProgress & p) {
        const fbn::SourceDecomposition & d = *p.decomposition;
        warnings += d.warnings.size();
        for (const auto & w : d.warnings) {
            if (first_warnings.size() < 20) first_warnings.push_back(w);
        }
        say(ctx, fmt::format("decompose: group {}/{} layer {}: k_eff={} converged={} iterations={}", p.group_index + 1,
                             p.groups_total, p.layer, d.k_effective, d.converged, d.iterations));
    };
    say(ctx, fmt::format("decompose: {} group(s) x {} layers, k={}, workers={}", cal.plan.n_groups(), ckpt.config.n_layers,
                         c.fbn.n_components, c.workers));
    const std::vector<fbn::LayerMaskSet> layers = fbn::decompose(ckpt.config, cal.plan, source, c.fbn, opt);
    if (warnings > 0) say(ctx, fmt::format("decompose: {} warning(s), e.g. {}", warnings, first_warnings.front()));

    const json inputs = {{kCheckpoint, ckpt_digest}, {kCalibration, cal.digest}};
    json summary = json::array();
    for (const auto & m : layers) {
        summary.push_back({{"layer", m.layer},
                           {"k_effective", {m.k_effective_min, m.k_effective_max}},
                           {"converged_fraction", m.converged_fraction()},
                           {"mask_size", m.unit_mask().count()}});
    }
    const json meta = {
        {"settings", decompose_settings(c, ckpt_digest, cal.digest)},
        {"group_count", cal.plan.n_groups()},
        {"n_samples", cal.set.size()},
        {"warning_count", warnings},
        {"warnings", first_warnings},
        {"run", run_block(ctx, inputs)},
    };
    out.text_json(kMasks, fbn::masks_to_json(layers, meta));
    return out.commit(inputs, {{"layers", summary}, {"warning_count", warnings}});
}

json run_prune(const StageContext & ctx) {
    const RunConfig & c = ctx.config;
    const Data data = load_data(c);
    std::string ckpt_digest;
    const model::ModelCheckpoint ckpt = load_base(ctx, ckpt_digest);
    json inputs = {{kCheckpoint, ckpt_digest}};

    std::vector<pruning::Vector> scores;
    if (c.method == pruning::Method::Canica) {
        const fs::path masks_path = artifact(ctx, kMasks);
        if (!fs::exists(masks_path)) {
            say(ctx, "masks.json is absent; running decompose");
            run_decompose(ctx);
        }
        const json masks = io::read_json(masks_path);
        const std::string calib_digest = sha256_file(artifact(ctx, kCalibration));
        check_settings(masks.at("meta").value("settings", json::object()), decompose_settings(c, ckpt_digest, calib_digest),
                       masks_path, "decompose");
        for (const auto & m : fbn::masks_from_json(masks)) scores.push_back(m.unit_scores());
        inputs[kMasks] = sha256_file(masks_path);
    }

    std::optional<pruning::ActivationStats> stats;
    if (c.compensation || c.method == pruning::Method::Fluctuation) {
        const Calibration cal = load_calibration(ctx, data, ckpt_digest);
        say(ctx, fmt::format("prune: collecting activation statistics over {} samples", cal.set.size()));
        stats = pruning::collect_stats(ckpt, cal.set.samples);
        inputs[kCalibration] = cal.digest;
    }

    Outputs out(ctx, "prune");
    const pruning::PlanInputs pin{scores.empty() ? nullptr : &scores, stats ? &*stats : nullptr, RngSeed{c.seed}};
    pruning::PruningPlan plan = pruning::build_plan(c.method, ckpt, c.rate, pin);
    if (c.compensation) {
        plan.compensation = true;
        plan.per_layer_bias = pruning::compute_compensation(ckpt, plan, *stats);
    }
    model::ModelCheckpoint pruned = pruning::apply_plan(ckpt, plan);
    pruned.meta = {{"stage", "prune"}, {"pruning", pruning::to_json(plan)}, {"run", run_block(ctx, inputs)}};

    json plan_doc = pruning::to_json(plan);
    plan_doc["run"] = run_block(ctx, inputs);
    out.text_json(kPlan, plan_doc);
    out.bytes(kPruned, model::serialize_checkpoint(pruned));
    say(ctx, fmt::format("prune: {} at rate {} keeps {} of {} units per layer", pruning::to_string(c.method), c.rate,
                         kept_sizes(plan).front(), ckpt.config.hidden(0)));
    return out.commit(inputs, {{"method", std::string(pruning::to_string(c.method))},
                               {"rate", c.rate},
                               {"kept_per_layer", kept_sizes(plan)},
                               {"parameters_before", model::parameter_count(ckpt)},
                               {"parameters_after", model::parameter_count(pruned)}});
}

json run_eval(const StageContext & ctx, const std::optional<fs::path> & checkpoint) {
    const RunConfig & c = ctx.config;
    const Data data = load_data(c);
    fs::path p;
    if (checkpoint) {
        p = *checkpoint;
    } else {
        p = fs::exists(artifact(ctx, kPruned)) ? artifact(ctx, kPruned) : artifact(ctx, kCheckpoint);
    }
    require(p, "train");
    const model::ModelCheckpoint ckpt = model::load_checkpoint(p);
    const std::string digest = sha256_file(p);

    Outputs out(ctx, "eval");
    evalkit::EvalReport rep = evalkit::perplexity(ckpt, data.split.heldout.tokens, c.eval_max_tokens);
    if (ckpt.meta.contains("pruning")) {
        rep.method = ckpt.meta["pruning"].value("method", "none");
        rep.rate = ckpt.meta["pruning"].value("rate", 0.0);
    }
    rep.config = c.json;
    say(ctx, fmt::format("eval: {} ({} at rate {}) perplexity {:.4f} over {} tokens", p.filename().string(), rep.method,
                         rep.rate, rep.perplexity, rep.token_count));

    const json inputs = {{"model", {{"path", p.filename().string()}, {"sha256", digest}}}, {"heldout", data.split.heldout.digest}};
    json doc = evalkit::to_json(rep);
    doc["parameters"] = model::parameter_count(ckpt);
    doc["run"] = run_block(ctx, inputs);
    out.text_json(kReportJson, doc);
    out.bytes(kReportCsv, fmt::format("method,rate,perplexity,tokens,parameters,model_digest\n{},{},{},{},{},{}\n", rep.method,
                                      rep.rate, rep.perplexity, rep.token_count, model::parameter_count(ckpt),
                                      rep.model_digest));
    return out.commit(inputs, {{"perplexity", rep.perplexity}, {"tokens", rep.token_count}, {"method", rep.method}, {"rate", rep.rate}});
}

json run_sweep(const StageContext & ctx) {
    const RunConfig & c = ctx.config;
    const Data data = load_data(c);
    std::string ckpt_digest;
    const model::ModelCheckpoint ckpt = load_base(ctx, ckpt_digest);
    Outputs out(ctx, "sweep");

    const evalkit::ExperimentInputs in{&ckpt, &data.split.train, &data.split.heldout};
    const evalkit::Log log = [&](const std::string & m) { say(ctx, "sweep: " + m); };
    evalkit::SweepResult result;
    if (c.sweep.axis == evalkit::Axis::None) {
        result = evalkit::compare_methods(in, c.sweep.methods, c.sweep.rates, c.sweep.seeds, c.experiment(), log);
    } else {
        result = evalkit::sweep(in, c.sweep.axis, c.sweep.values, c.sweep.methods, c.sweep.rate, c.sweep.seeds, c.experiment(), log);
    }

    const json inputs = {{kCheckpoint, ckpt_digest}, {"corpus", corpus_input(c, data)}};
    json doc = evalkit::to_json(result);
    doc["run"] = run_block(ctx, inputs);
    out.text_json(kSweepJson, doc);
    out.bytes(kSweepCsv, evalkit::to_csv(result));
    return out.commit(inputs, {{"axis", result.axis}, {"rows", result.rows.size()}});
}

}  // namespace fbnprune::cli
