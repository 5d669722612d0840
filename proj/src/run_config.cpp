// SPDX-License-Identifier: Apache-2.0

#include "fbnprune/run_config.hpp"

#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "fbnprune/digest.hpp"
#include "fbnprune/error.hpp"
#include "fbnprune/io.hpp"

namespace fbnprune::cli {

using nlohmann::json;

json default_config() {
    const model::ModelConfig m;
    const model::TrainConfig t;
    const fbn::FbnConfig f;
    return {
        {"seed", 1},
        {"workers", 1},
        {"paths", {{"corpus", "data/corpus.txt"}, {"out_dir", "runs/default"}}},
        {"data", {{"heldout_bytes", 131072}}},
        {"model",
         {{"n_layers", m.n_layers},
          {"d_model", m.d_model},
          {"n_heads", m.n_heads},
          {"d_hidden", m.d_hidden},
          {"vocab_size", m.vocab_size},
          {"context_len", m.context_len},
          {"norm_eps", m.norm_eps}}},
        {"train", model::to_json(t)},
        {"calibration", {{"n_samples", 3200}, {"dump_signals", false}}},
        {"fbn",
         {{"n_components", f.n_components},
          {"tau", f.tau},
          {"group_size", f.group_size},
          {"signal_mode", std::string(fbn::to_string(f.signal_mode))},
          {"ica", {{"tol", f.ica.tol}, {"max_iter", f.ica.max_iter}, {"restarts", f.ica.restarts}}}}},
        {"prune", {{"method", "canica"}, {"rate", 0.2}, {"compensation", true}}},
        {"eval", {{"max_tokens", 0}}},
        {"sweep",
         {{"axis", "n_components"},
          {"values", {10, 20, 64, 128, 256, 512}},
          {"methods", {"canica"}},
          {"rates", {0.1, 0.2, 0.3}},
          {"rate", 0.2},
          {"seeds", {1}}}},
    };
}

namespace {

std::string join_key(const std::string & prefix, const std::string & key) {
    return prefix.empty() ? key : prefix + "." + key;
}

bool same_kind(const json & a, const json & b) {
    if (a.is_number() && b.is_number()) return true;
    return a.type() == b.type();
}

}  // namespace

void merge_config(json & tree, const json & patch, const std::string & prefix) {
    if (!patch.is_object()) fail(ErrorKind::Config, fmt::format("config {}: expected an object", prefix.empty() ? "root" : prefix));
    for (const auto & [key, value] : patch.items()) {
        const std::string name = join_key(prefix, key);
        if (!tree.contains(key)) fail(ErrorKind::Config, fmt::format("unknown config key '{}'", name));
        json & slot = tree[key];
        if (slot.is_object()) {
            merge_config(slot, value, name);
        } else {
            if (!same_kind(slot, value)) {
                fail(ErrorKind::Config, fmt::format("config key '{}' expects a {} value, got {}", name, slot.type_name(),
                                                    value.type_name()));
            }
            slot = value;
        }
    }
}

void apply_override(json & tree, const std::string & dotted_key, const std::string & value) {
    if (dotted_key.empty()) fail(ErrorKind::Config, "empty override key");
    json parsed = json::parse(value, nullptr, false);
    if (parsed.is_discarded()) parsed = value;

    json patch = parsed;
    std::string rest = dotted_key;
    for (std::size_t dot; (dot = rest.rfind('.')) != std::string::npos; rest = rest.substr(0, dot)) {
        patch = json{{rest.substr(dot + 1), patch}};
    }
    patch = json{{rest, patch}};
    merge_config(tree, patch);
}

namespace {

class Reader {
public:
    explicit Reader(const json & tree) : tree_(tree) {}

    const json & at(const std::string & dotted) const {
        const json * node = &tree_;
        std::size_t start = 0;
        while (true) {
            const std::size_t dot = dotted.find('.', start);
            const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
            if (!node->is_object() || !node->contains(key)) fail(ErrorKind::Config, fmt::format("missing config key '{}'", dotted));
            node = &(*node)[key];
            if (dot == std::string::npos) return *node;
            start = dot + 1;
        }
    }

    double number(const std::string & key) const {
        const json & v = at(key);
        if (!v.is_number()) fail(ErrorKind::Config, fmt::format("config key '{}' must be a number", key));
        const double d = v.get<double>();
        if (!std::isfinite(d)) fail(ErrorKind::Config, fmt::format("config key '{}' must be finite", key));
        return d;
    }

    std::int64_t integer(const std::string & key, std::int64_t lo, std::int64_t hi = std::numeric_limits<std::int64_t>::max()) const {
        const json & v = at(key);
        std::int64_t out = 0;
        if (v.is_number_integer()) {
            out = v.get<std::int64_t>();
        } else if (v.is_number_float() && std::floor(v.get<double>()) == v.get<double>() && std::abs(v.get<double>()) < 9e15) {
            out = static_cast<std::int64_t>(v.get<double>());
        } else {
            fail(ErrorKind::Config, fmt::format("config key '{}' must be an integer", key));
        }
        if (out < lo || out > hi) fail(ErrorKind::Config, fmt::format("config key '{}' = {} is out of range [{}, {}]", key, out, lo, hi));
        return out;
    }

    std::uint64_t seed(const std::string & key) const {
        const json & v = at(key);
        if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
            fail(ErrorKind::Config, fmt::format("config key '{}' must be a nonnegative integer", key));
        }
        return v.get<std::uint64_t>();
    }

    bool boolean(const std::string & key) const {
        const json & v = at(key);
        if (!v.is_boolean()) fail(ErrorKind::Config, fmt::format("config key '{}' must be true or false", key));
        return v.get<bool>();
    }

    std::string string(const std::string & key) const {
        const json & v = at(key);
        if (!v.is_string()) fail(ErrorKind::Config, fmt::format("config key '{}' must be a string", key));
        return v.get<std::string>();
    }

    const json & array(const std::string & key) const {
        const json & v = at(key);
        if (!v.is_array()) fail(ErrorKind::Config, fmt::format("config key '{}' must be a list", key));
        return v;
    }

private:
    const json & tree_;
};

template <typename F>
auto config_guard(const std::string & key, F && f) {
    try {
        return f();
    } catch (const Error & e) {
        if (e.kind() == ErrorKind::Config) throw;
        throw Error(ErrorKind::Config, fmt::format("config key '{}': {}", key, e.what()));
    }
}

double rate_value(const std::string & key, double v) {
    if (!(v >= 0.0 && v < 1.0)) fail(ErrorKind::Config, fmt::format("config key '{}' must lie in [0, 1), got {}", key, v));
    return v;
}

}  // namespace

RunConfig parse_run_config(const json & tree) {
    // Reject keys outside the defaults before reading anything.
    json check = default_config();
    merge_config(check, tree);

    const Reader r(tree);
    RunConfig c;
    c.json = tree;
    c.seed = r.seed("seed");
    c.workers = static_cast<int>(r.integer("workers", 1, 1024));
    c.corpus = r.string("paths.corpus");
    c.out_dir = r.string("paths.out_dir");
    if (c.out_dir.empty()) fail(ErrorKind::Config, "config key 'paths.out_dir' must not be empty");
    c.heldout_bytes = static_cast<std::size_t>(r.integer("data.heldout_bytes", 2));

    c.model.n_layers = static_cast<int>(r.integer("model.n_layers", 1, 1 << 16));
    c.model.d_model = static_cast<int>(r.integer("model.d_model", 1, 1 << 20));
    c.model.n_heads = static_cast<int>(r.integer("model.n_heads", 1, 1 << 16));
    c.model.d_hidden = static_cast<int>(r.integer("model.d_hidden", 1, 1 << 20));
    c.model.vocab_size = static_cast<int>(r.integer("model.vocab_size", 1, 256));
    c.model.context_len = static_cast<int>(r.integer("model.context_len", 1, 1 << 20));
    c.model.norm_eps = static_cast<float>(r.number("model.norm_eps"));
    config_guard("model", [&] { c.model.validate(); return 0; });

    c.train.steps = static_cast<int>(r.integer("train.steps", 0, 1 << 30));
    c.train.batch_size = static_cast<int>(r.integer("train.batch_size", 1, 1 << 20));
    c.train.learning_rate = r.number("train.learning_rate");
    c.train.min_lr_ratio = r.number("train.min_lr_ratio");
    c.train.warmup_steps = static_cast<int>(r.integer("train.warmup_steps", 0, 1 << 30));
    c.train.weight_decay = r.number("train.weight_decay");
    c.train.beta1 = r.number("train.beta1");
    c.train.beta2 = r.number("train.beta2");
    c.train.adam_eps = r.number("train.adam_eps");
    c.train.grad_clip = r.number("train.grad_clip");
    c.train.init_std = static_cast<float>(r.number("train.init_std"));
    if (!(c.train.learning_rate > 0.0)) fail(ErrorKind::Config, "config key 'train.learning_rate' must be > 0");

    c.calibration_samples = static_cast<std::size_t>(r.integer("calibration.n_samples", 1));
    c.dump_signals = r.boolean("calibration.dump_signals");

    c.fbn.n_components = r.integer("fbn.n_components", 1);
    c.fbn.tau = r.number("fbn.tau");
    c.fbn.group_size = static_cast<std::size_t>(r.integer("fbn.group_size", 1));
    c.fbn.signal_mode = config_guard("fbn.signal_mode", [&] { return fbn::parse_signal_mode(r.string("fbn.signal_mode")); });
    c.fbn.ica.tol = r.number("fbn.ica.tol");
    c.fbn.ica.max_iter = static_cast<int>(r.integer("fbn.ica.max_iter", 1, 1 << 30));
    c.fbn.ica.restarts = static_cast<int>(r.integer("fbn.ica.restarts", 1, 1 << 16));
    c.fbn.seed = RngSeed{c.seed};
    c.fbn.validate();
    if (c.fbn.group_size > c.calibration_samples) {
        fail(ErrorKind::Config, fmt::format("config key 'fbn.group_size' = {} exceeds calibration.n_samples = {}",
                                            c.fbn.group_size, c.calibration_samples));
    }

    c.method = config_guard("prune.method", [&] { return pruning::parse_method(r.string("prune.method")); });
    c.rate = rate_value("prune.rate", r.number("prune.rate"));
    c.compensation = r.boolean("prune.compensation");

    c.eval_max_tokens = static_cast<std::size_t>(r.integer("eval.max_tokens", 0));

    // "none" compares methods across sweep.rates instead of sweeping an axis.
    const std::string axis = r.string("sweep.axis");
    c.sweep.axis = axis == "none" ? evalkit::Axis::None : config_guard("sweep.axis", [&] { return evalkit::parse_axis(axis); });
    for (const json & v : r.array("sweep.values")) {
        if (!v.is_number()) fail(ErrorKind::Config, "config key 'sweep.values' must hold numbers");
        c.sweep.values.push_back(v.get<double>());
    }
    for (const json & v : r.array("sweep.methods")) {
        if (!v.is_string()) fail(ErrorKind::Config, "config key 'sweep.methods' must hold method names");
        c.sweep.methods.push_back(config_guard("sweep.methods", [&] { return pruning::parse_method(v.get<std::string>()); }));
    }
    for (const json & v : r.array("sweep.rates")) {
        if (!v.is_number()) fail(ErrorKind::Config, "config key 'sweep.rates' must hold numbers");
        c.sweep.rates.push_back(rate_value("sweep.rates", v.get<double>()));
    }
    c.sweep.rate = rate_value("sweep.rate", r.number("sweep.rate"));
    for (const json & v : r.array("sweep.seeds")) {
        if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
            fail(ErrorKind::Config, "config key 'sweep.seeds' must hold nonnegative integers");
        }
        c.sweep.seeds.push_back(v.get<std::uint64_t>());
    }
    if (c.sweep.methods.empty()) fail(ErrorKind::Config, "config key 'sweep.methods' must not be empty");
    if (c.sweep.seeds.empty()) fail(ErrorKind::Config, "config key 'sweep.seeds' must not be empty");
    return c;
}

RunConfig load_run_config(const std::optional<std::filesystem::path> & file, const std::vector<std::string> & overrides) {
    json tree = default_config();
    if (file) {
        json patch;
        try {
            patch = io::read_json(*file);
        } catch (const Error & e) {
            throw Error(ErrorKind::Config, fmt::format("config file {}: {}", file->string(), e.what()));
        }
        merge_config(tree, patch);
    }
    for (const std::string & o : overrides) {
        const std::size_t eq = o.find('=');
        if (eq == std::string::npos) fail(ErrorKind::Config, fmt::format("override '{}' is not key=value", o));
        apply_override(tree, o.substr(0, eq), o.substr(eq + 1));
    }
    return parse_run_config(tree);
}

evalkit::ExperimentConfig RunConfig::experiment() const {
    evalkit::ExperimentConfig e;
    e.fbn = fbn;
    e.calibration_samples = calibration_samples;
    e.compensation = compensation;
    e.workers = workers;
    e.eval_max_tokens = eval_max_tokens;
    return e;
}

std::string RunConfig::digest() const {
    return sha256_hex(canonical_json(json));
}

}  // namespace fbnprune::cli
