// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "fbnprune/checkpoint.hpp"
#include "fbnprune/error.hpp"
#include "fbnprune/fbn.hpp"
#include "fbnprune/pruning.hpp"
#include "support/fixtures.hpp"

using namespace fbnprune;
using namespace fbnprune::pruning;
using model::Tensor;

namespace {

std::vector<std::vector<model::Token>> samples_for(const model::ModelConfig & c, std::size_t n, std::uint64_t seed) {
    std::vector<std::vector<model::Token>> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(testing::random_tokens(c.vocab_size, static_cast<std::size_t>(c.context_len), seed + i));
    return out;
}

PruningPlan random_plan(const model::ModelConfig & c, double rate, std::uint64_t seed) {
    const model::ModelCheckpoint dummy = model::init_checkpoint(c, RngSeed{1});
    return build_plan(Method::Random, dummy, rate, PlanInputs{nullptr, nullptr, RngSeed{seed}});
}

// Interventions replacing pruned units' product with `fill` (or zero).
std::vector<model::UnitIntervention> replace_pruned(const model::ModelConfig & c, const PruningPlan & plan,
                                                    const ActivationStats * stats) {
    const auto pruned = pruned_units(c, plan);
    std::vector<model::UnitIntervention> iv(static_cast<std::size_t>(c.n_layers));
    for (int l = 0; l < c.n_layers; ++l) {
        auto & u = iv[static_cast<std::size_t>(l)];
        u.scale = Eigen::VectorXf::Ones(c.hidden(l));
        u.fill = Eigen::VectorXf::Zero(c.hidden(l));
        for (int j : pruned[static_cast<std::size_t>(l)]) {
            u.scale(j) = 0.0f;
            if (stats) u.fill(j) = static_cast<float>(stats->layers[static_cast<std::size_t>(l)].mean(j));
        }
    }
    return iv;
}

}  // namespace

TEST_CASE("stats: single token gives the value and zero variance") {
    model::CaptureRecord r;
    r.gate_out = Tensor::Constant(1, 2, 1.5f);
    r.up_out = Tensor::Constant(1, 2, 2.0f);
    r.product = r.gate_out.cwiseProduct(r.up_out);
    ActivationStats s;
    s.add(std::span(&r, 1));
    CHECK(s.token_count == 1);
    CHECK(s.layers[0].mean(0) == 3.0);
    CHECK(s.layers[0].variance()(1) == 0.0);
}

TEST_CASE("stats: streaming moments match a materialized average") {
    const model::ModelConfig c = testing::tiny_config();
    const model::ModelCheckpoint ckpt = testing::random_checkpoint(c, 4);
    const auto samples = samples_for(c, 10, 100);
    const ActivationStats s = collect_stats(ckpt, samples);
    CHECK(s.token_count == 10 * static_cast<std::size_t>(c.context_len));

    for (int l = 0; l < c.n_layers; ++l) {
        std::vector<std::vector<long double>> values(static_cast<std::size_t>(c.d_hidden));
        for (const auto & tokens : samples) {
            const auto f = model::forward(ckpt, tokens, model::ForwardOptions{true, nullptr});
            const Tensor & p = (*f.captures)[static_cast<std::size_t>(l)].product;
            for (Eigen::Index t = 0; t < p.rows(); ++t)
                for (Eigen::Index j = 0; j < p.cols(); ++j) values[static_cast<std::size_t>(j)].push_back(p(t, j));
        }
        for (int j = 0; j < c.d_hidden; ++j) {
            const auto & v = values[static_cast<std::size_t>(j)];
            long double mean = 0;
            for (long double x : v) mean += x;
            mean /= static_cast<long double>(v.size());
            long double var = 0;
            for (long double x : v) var += (x - mean) * (x - mean);
            var /= static_cast<long double>(v.size());
            CHECK(std::abs(s.layers[static_cast<std::size_t>(l)].mean(j) - static_cast<double>(mean)) < 1e-6);
            CHECK(std::abs(s.layers[static_cast<std::size_t>(l)].variance()(j) - static_cast<double>(var)) < 1e-6);
        }
    }
}

TEST_CASE("stats: merging shards equals one pass") {
    const model::ModelConfig c = testing::tiny_config();
    const model::ModelCheckpoint ckpt = testing::random_checkpoint(c, 5);
    const auto samples = samples_for(c, 6, 7);
    const ActivationStats whole = collect_stats(ckpt, samples);
    ActivationStats a = collect_stats(ckpt, std::span(samples).first(2));
    a.merge(collect_stats(ckpt, std::span(samples).last(4)));
    CHECK(a.token_count == whole.token_count);
    CHECK((a.layers[1].mean - whole.layers[1].mean).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((a.layers[1].variance() - whole.layers[1].variance()).cwiseAbs().maxCoeff() < 1e-10);
    std::vector<std::vector<model::Token>> none;
    CHECK_THROWS_AS(collect_stats(ckpt, none), Error);
}

TEST_CASE("build_plan: random plans") {
    const model::ModelConfig c = testing::tiny_config();
    const PruningPlan identity = random_plan(c, 0.0, 3);
    for (const auto & kept : identity.per_layer_kept) CHECK(kept.size() == 24);
    CHECK(random_plan(c, 0.3, 1).per_layer_kept == random_plan(c, 0.3, 1).per_layer_kept);
    CHECK(random_plan(c, 0.3, 1).per_layer_kept != random_plan(c, 0.3, 2).per_layer_kept);
}

TEST_CASE("build_plan: magnitude prunes a dead unit first") {
    const model::ModelConfig c = testing::tiny_config();
    model::ModelCheckpoint ckpt = testing::random_checkpoint(c, 6);
    auto & L = ckpt.weights.layers[0];
    L.gate_proj.row(7).setZero();
    L.up_proj.row(7).setZero();
    L.down_proj.col(7).setZero();
    const PruningPlan plan = build_plan(Method::Magnitude, ckpt, 1.0 / 24.0, {});
    const auto & kept = plan.per_layer_kept[0];
    CHECK(kept.size() == 23);
    CHECK(std::find(kept.begin(), kept.end(), 7) == kept.end());
}

TEST_CASE("build_plan: every method keeps the same count per rate") {
    const model::ModelConfig c;  // default widths
    const model::ModelCheckpoint ckpt = model::init_checkpoint(c, RngSeed{1});
    Rng rng(RngSeed{2});
    std::vector<Vector> scores;
    ActivationStats stats;
    for (int l = 0; l < c.n_layers; ++l) {
        Vector s(c.d_hidden);
        LayerStats ls;
        ls.mean = Vector::Zero(c.d_hidden);
        ls.m2 = Vector::Zero(c.d_hidden);
        ls.count = 10;
        for (int j = 0; j < c.d_hidden; ++j) {
            s(j) = rng.uniform();
            ls.m2(j) = rng.uniform();
        }
        scores.push_back(s);
        stats.layers.push_back(ls);
    }
    stats.token_count = 10;
    const PlanInputs in{&scores, &stats, RngSeed{3}};
    const std::pair<double, std::size_t> expected[] = {{0.1, 310}, {0.2, 275}, {0.3, 241}};
    for (auto [rate, count] : expected) {
        for (Method m : {Method::Canica, Method::Random, Method::Magnitude, Method::Fluctuation}) {
            const PruningPlan plan = build_plan(m, ckpt, rate, in);
            for (const auto & kept : plan.per_layer_kept) {
                CHECK(kept.size() == count);
                CHECK(std::is_sorted(kept.begin(), kept.end()));
            }
        }
    }
    CHECK_THROWS_AS(build_plan(Method::Canica, ckpt, 0.2, {}), Error);
    CHECK_THROWS_AS(build_plan(Method::Fluctuation, ckpt, 0.2, {}), Error);
}

TEST_CASE("apply_plan: forced shapes and parameter count") {
    const model::ModelConfig c;
    const model::ModelCheckpoint ckpt = model::init_checkpoint(c, RngSeed{4});
    const PruningPlan plan = random_plan(c, 0.2, 9);
    const model::ModelCheckpoint pruned = apply_plan(ckpt, plan);
    for (const auto & L : pruned.weights.layers) {
        CHECK(L.gate_proj.rows() == 275);
        CHECK(L.gate_proj.cols() == 128);
        CHECK(L.up_proj.rows() == 275);
        CHECK(L.down_proj.rows() == 128);
        CHECK(L.down_proj.cols() == 275);
    }
    CHECK(pruned.config.hidden(2) == 275);
    CHECK(model::parameter_count(pruned) < model::parameter_count(ckpt));
    CHECK(pruned.weights.lm_head == ckpt.weights.lm_head);
}

TEST_CASE("apply_plan: identity plan is byte-identical and idempotent") {
    const model::ModelConfig c = testing::tiny_config();
    model::ModelCheckpoint ckpt = testing::random_checkpoint(c, 5);
    ckpt.meta = {{"k", 1}};
    const PruningPlan id = random_plan(c, 0.0, 1);
    const model::ModelCheckpoint same = apply_plan(ckpt, id);
    CHECK(model::serialize_checkpoint(same) == model::serialize_checkpoint(ckpt));

    const model::ModelCheckpoint pruned = apply_plan(ckpt, random_plan(c, 0.25, 2));
    PruningPlan keep_all;
    for (int l = 0; l < c.n_layers; ++l) {
        std::vector<int> all(static_cast<std::size_t>(pruned.config.hidden(l)));
        std::iota(all.begin(), all.end(), 0);
        keep_all.per_layer_kept.push_back(all);
    }
    CHECK(model::serialize_checkpoint(apply_plan(pruned, keep_all)) == model::serialize_checkpoint(pruned));
}

TEST_CASE("apply_plan: uneven per-layer widths round-trip through a checkpoint") {
    const model::ModelConfig c;
    const model::ModelCheckpoint ckpt = model::init_checkpoint(c, RngSeed{6});
    PruningPlan plan = random_plan(c, 0.2, 3);
    std::vector<int> wider = fbn::select_kept(Vector::LinSpaced(c.d_hidden, 0.0, 1.0), 1.0 - 276.0 / 344.0);
    REQUIRE(wider.size() == 276);
    plan.per_layer_kept[2] = wider;
    const model::ModelCheckpoint pruned = apply_plan(ckpt, plan);
    CHECK(pruned.config.layer_hidden == std::vector<int>{275, 275, 276, 275});
    const auto path = std::filesystem::temp_directory_path() / "fbnprune_test_pruned.fbnp";
    model::save_checkpoint(pruned, path);
    const model::ModelCheckpoint back = model::load_checkpoint(path);
    std::filesystem::remove(path);
    CHECK(back.config.layer_hidden == pruned.config.layer_hidden);
    CHECK(model::serialize_checkpoint(back) == model::serialize_checkpoint(pruned));
}

TEST_CASE("apply_plan: invalid plans") {
    const model::ModelConfig c = testing::tiny_config();
    const model::ModelCheckpoint ckpt = testing::random_checkpoint(c, 7);
    PruningPlan plan = random_plan(c, 0.5, 1);
    PruningPlan out_of_range = plan;
    out_of_range.per_layer_kept[0].back() = 24;
    CHECK_THROWS_AS(apply_plan(ckpt, out_of_range), Error);
    PruningPlan dup = plan;
    dup.per_layer_kept[1][1] = dup.per_layer_kept[1][0];
    CHECK_THROWS_AS(apply_plan(ckpt, dup), Error);
    PruningPlan unsorted = plan;
    std::swap(unsorted.per_layer_kept[0][0], unsorted.per_layer_kept[0][1]);
    CHECK_THROWS_AS(apply_plan(ckpt, unsorted), Error);
    PruningPlan short_plan = plan;
    short_plan.per_layer_kept.pop_back();
    CHECK_THROWS_AS(apply_plan(ckpt, short_plan), Error);
}

TEST_CASE("apply_plan: pruned logits equal zero-masked full logits") {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        const model::ModelConfig c = seed < 3 ? testing::tiny_config() : model::ModelConfig{};
        const model::ModelCheckpoint ckpt = testing::random_checkpoint(c, 10 + seed, seed < 3 ? 0.3f : 0.05f);
        const PruningPlan plan = random_plan(c, 0.3, seed);
        const model::ModelCheckpoint pruned = apply_plan(ckpt, plan);
        const auto iv = replace_pruned(c, plan, nullptr);
        for (int trial = 0; trial < 5; ++trial) {
            const auto tokens = testing::random_tokens(c.vocab_size, 1 + static_cast<std::size_t>(trial * 2), seed * 31 + static_cast<std::uint64_t>(trial));
            const Tensor a = model::forward(pruned, tokens).logits;
            const Tensor b = model::forward(ckpt, tokens, model::ForwardOptions{false, &iv}).logits;
            CHECK(testing::max_abs_diff(a, b) <= 1e-5);
        }
    }
}

TEST_CASE("compensation: empty pruned set gives a zero bias") {
    const model::ModelConfig c = testing::tiny_config();
    const model::ModelCheckpoint ckpt = testing::random_checkpoint(c, 11);
    const ActivationStats stats = collect_stats(ckpt, samples_for(c, 2, 1));
    const auto bias = compute_compensation(ckpt, random_plan(c, 0.0, 1), stats);
    for (const auto & b : bias) CHECK(b.isZero(0.0));
}

TEST_CASE("compensation: matches the removed units' average contribution") {
    const model::ModelConfig c = testing::tiny_config();
    const model::ModelCheckpoint ckpt = testing::random_checkpoint(c, 12);
    const auto samples = samples_for(c, 8, 50);
    const ActivationStats stats = collect_stats(ckpt, samples);
    const PruningPlan plan = random_plan(c, 0.4, 5);
    const auto bias = compute_compensation(ckpt, plan, stats);
    const auto pruned = pruned_units(c, plan);

    // brute force: average over every calibration token of the removed units' down-projected output
    for (int l = 0; l < c.n_layers; ++l) {
        std::vector<long double> acc(static_cast<std::size_t>(c.d_model), 0.0L);
        std::size_t n = 0;
        for (const auto & tokens : samples) {
            const auto f = model::forward(ckpt, tokens, model::ForwardOptions{true, nullptr});
            const Tensor & p = (*f.captures)[static_cast<std::size_t>(l)].product;
            const Tensor & down = ckpt.weights.layers[static_cast<std::size_t>(l)].down_proj;
            for (Eigen::Index t = 0; t < p.rows(); ++t, ++n)
                for (int j : pruned[static_cast<std::size_t>(l)])
                    for (int o = 0; o < c.d_model; ++o) acc[static_cast<std::size_t>(o)] += static_cast<long double>(p(t, j)) * down(o, j);
        }
        for (int o = 0; o < c.d_model; ++o) {
            CHECK(std::abs(static_cast<double>(acc[static_cast<std::size_t>(o)] / static_cast<long double>(n)) - bias[static_cast<std::size_t>(l)](o)) < 1e-6);
        }
    }
}

TEST_CASE("compensation: pruned model equals mean replacement in the full model") {
    const model::ModelConfig c = testing::tiny_config();
    const model::ModelCheckpoint ckpt = testing::random_checkpoint(c, 13);
    const ActivationStats stats = collect_stats(ckpt, samples_for(c, 6, 70));
    PruningPlan plan = random_plan(c, 0.3, 7);
    plan.compensation = true;
    plan.per_layer_bias = compute_compensation(ckpt, plan, stats);
    const model::ModelCheckpoint pruned = apply_plan(ckpt, plan);
    const auto iv = replace_pruned(c, plan, &stats);
    for (int trial = 0; trial < 10; ++trial) {
        const auto tokens = testing::random_tokens(c.vocab_size, 12, 900 + static_cast<std::uint64_t>(trial));
        const Tensor a = model::forward(pruned, tokens).logits;
        const Tensor b = model::forward(ckpt, tokens, model::ForwardOptions{false, &iv}).logits;
        CHECK(testing::max_abs_diff(a, b) <= 1e-5);
    }
}

TEST_CASE("plan JSON round trip") {
    const model::ModelConfig c = testing::tiny_config();
    PruningPlan plan = random_plan(c, 0.25, 8);
    plan.compensation = true;
    const nlohmann::json j = to_json(plan);
    CHECK(j.at("method") == "random");
    CHECK(j.at("has_bias") == false);
    const PruningPlan back = plan_from_json(j);
    CHECK(back.per_layer_kept == plan.per_layer_kept);
    CHECK(back.rate == plan.rate);
    CHECK(back.seed == plan.seed);
    CHECK(back.compensation);
    CHECK_THROWS_AS(plan_from_json({{"method", "nope"}}), Error);
    CHECK(parse_method("fluctuation") == Method::Fluctuation);
}

TEST_CASE("compensation: constant units are restored exactly") {
    const model::ModelConfig c = testing::tiny_config();
    model::ModelCheckpoint ckpt = testing::random_checkpoint(c, 14);
    const std::vector<int> constant = {2, 9, 17};
    testing::make_constant_units(ckpt, constant, 15);
    const auto samples = samples_for(c, 3, 300);
    const ActivationStats stats = collect_stats(ckpt, samples);
    for (int j : constant) CHECK(stats.layers[0].variance()(j) < 1e-10);

    PruningPlan plan;
    for (int l = 0; l < c.n_layers; ++l) {
        std::vector<int> kept;
        for (int j = 0; j < c.d_hidden; ++j)
            if (l != 0 || std::find(constant.begin(), constant.end(), j) == constant.end()) kept.push_back(j);
        plan.per_layer_kept.push_back(kept);
    }
    plan.compensation = true;
    plan.per_layer_bias = compute_compensation(ckpt, plan, stats);
    Eigen::VectorXd expected = Eigen::VectorXd::Zero(c.d_model);
    for (int j : constant) expected += stats.layers[0].mean(j) * ckpt.weights.layers[0].down_proj.col(j).cast<double>();
    CHECK(((*plan.per_layer_bias)[0].cast<double>() - expected).cwiseAbs().maxCoeff() < 1e-6);
    CHECK((*plan.per_layer_bias)[1].isZero(0.0));

    const model::ModelCheckpoint pruned = apply_plan(ckpt, plan);
    for (int trial = 0; trial < 10; ++trial) {
        const auto tokens = testing::random_tokens(c.vocab_size, 12, 500 + static_cast<std::uint64_t>(trial));
        CHECK(testing::max_abs_diff(model::forward(pruned, tokens).logits, model::forward(ckpt, tokens).logits) <= 1e-5);
    }
}
