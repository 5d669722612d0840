// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"

#include <cmath>

#include "fbnprune/error.hpp"
#include "fbnprune/evalkit.hpp"
#include "fbnprune/trainer.hpp"
#include "support/fixtures.hpp"
#include "support/reference.hpp"

using namespace fbnprune;
using namespace fbnprune::evalkit;
using pruning::Method;

namespace {

struct Toy {
    model::ModelCheckpoint ckpt;
    calibration::CorpusSplit split;
};

const Toy & toy() {
    static const Toy t = [] {
        Toy out;
        const model::ModelConfig c = testing::tiny_config();
        const calibration::Corpus corpus = testing::patterned_corpus(6000, c.vocab_size, 1);
        out.split = calibration::split_corpus(corpus, 600);
        model::TrainConfig h;
        h.steps = 30;
        h.batch_size = 4;
        h.warmup_steps = 5;
        h.learning_rate = 1e-2;
        out.ckpt = model::train(c, out.split.train.tokens, RngSeed{2}, h);
        return out;
    }();
    return t;
}

ExperimentConfig toy_cfg() {
    ExperimentConfig cfg;
    cfg.fbn.n_components = 4;
    cfg.fbn.group_size = 4;
    cfg.calibration_samples = 8;
    return cfg;
}

ExperimentInputs inputs() {
    return {&toy().ckpt, &toy().split.train, &toy().split.heldout};
}

}  // namespace

TEST_CASE("perplexity: uniform logits give the vocabulary size") {
    model::ModelConfig c;
    c.n_layers = 1;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_hidden = 4;
    c.vocab_size = 256;
    c.context_len = 16;
    model::ModelCheckpoint ckpt = model::init_checkpoint(c, RngSeed{1});
    ckpt.weights.lm_head.setZero();
    const auto tokens = testing::random_tokens(256, 100, 3);
    const EvalReport r = perplexity(ckpt, tokens);
    CHECK(r.token_count == 99);
    CHECK(std::abs(r.perplexity - 256.0) < 1e-6);
}

TEST_CASE("nll_from_logits: certain predictions and a hand-computed case") {
    model::Tensor sure = model::Tensor::Zero(3, 5);
    const std::vector<model::Token> targets = {4, 0, 2};
    for (int t = 0; t < 3; ++t) sure(t, targets[static_cast<std::size_t>(t)]) = 1000.0f;
    CHECK(std::exp(nll_from_logits(sure, targets) / 3.0) == doctest::Approx(1.0).epsilon(1e-12));

    // sequence (a, b, c): two predicted positions
    model::Tensor logits(2, 3);
    logits << 1.0f, 2.0f, 3.0f, 0.0f, static_cast<float>(std::log(2.0)), 0.0f;
    const std::vector<model::Token> next = {2, 1};
    const double nll = nll_from_logits(logits, next);
    CHECK(std::abs(std::exp(nll / 2.0) - 1.733905836202217) < 1e-7);
    CHECK(std::abs(nll - (0.40760596444438013 + 0.6931471805599453)) < 1e-7);
}

TEST_CASE("perplexity: windowing covers every predictable position once") {
    const model::ModelConfig c = testing::tiny_config();
    const model::ModelCheckpoint ckpt = testing::random_checkpoint(c, 5);
    const std::size_t L = static_cast<std::size_t>(c.context_len);
    for (std::size_t n : {std::size_t{2}, L, L + 1, L + 2, 3 * L, 3 * L + 5}) {
        const auto tokens = testing::random_tokens(c.vocab_size, n, n);
        const EvalReport r = perplexity(ckpt, tokens);
        CHECK(r.token_count == n - 1);
        double oracle = 0.0;
        for (std::size_t start = 0; start + 1 < n; start += L) {
            const std::size_t end = std::min(start + L + 1, n);
            oracle += testing::reference_nll(ckpt, std::vector<model::Token>(tokens.begin() + static_cast<std::ptrdiff_t>(start),
                                                                              tokens.begin() + static_cast<std::ptrdiff_t>(end)));
        }
        CHECK(r.nll_sum == doctest::Approx(oracle).epsilon(1e-5));
        CHECK(r.perplexity >= 1.0);
    }
    const std::vector<model::Token> one = {1};
    CHECK_THROWS_AS(perplexity(ckpt, one), Error);
}

TEST_CASE("compare_methods: rate zero rows equal the unpruned model") {
    const std::vector<Method> methods = {Method::Canica, Method::Random, Method::Magnitude, Method::Fluctuation};
    const std::vector<double> rates = {0.0};
    const std::vector<std::uint64_t> seeds = {1};
    const SweepResult r = compare_methods(inputs(), methods, rates, seeds, toy_cfg());
    REQUIRE(r.baselines.size() == 1);
    REQUIRE(r.rows.size() == 4);
    for (const auto & row : r.rows) CHECK(row.perplexity == r.baselines[0].perplexity);
}

TEST_CASE("compare_methods: reproducible, random varies with the seed") {
    const std::vector<Method> methods = {Method::Random, Method::Canica};
    const std::vector<double> rates = {0.3};
    const std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
    const SweepResult a = compare_methods(inputs(), methods, rates, seeds, toy_cfg());
    const SweepResult b = compare_methods(inputs(), methods, rates, seeds, toy_cfg());
    CHECK(to_csv(a) == to_csv(b));
    CHECK(to_json(a) == to_json(b));
    std::vector<double> random_ppl;
    for (const auto & row : a.rows) {
        if (row.method == "random") random_ppl.push_back(row.perplexity);
        if (row.method == "canica") CHECK(row.extras.contains("converged_fraction"));
        CHECK(row.extras.at("kept_per_layer") == std::vector<int>{17, 17});
    }
    REQUIRE(random_ppl.size() == 5);
    double mean = 0.0, var = 0.0;
    for (double p : random_ppl) mean += p / 5.0;
    for (double p : random_ppl) var += (p - mean) * (p - mean) / 5.0;
    CHECK(var > 0.0);
    CHECK(to_csv(a).rfind("method,rate,seed,axis,x,perplexity,tokens\n", 0) == 0);
}

TEST_CASE("sweep: single value equals the compare_methods cell") {
    const std::vector<Method> methods = {Method::Canica};
    const std::vector<double> rates = {0.2};
    const std::vector<std::uint64_t> seeds = {7};
    const SweepResult cell = compare_methods(inputs(), methods, rates, seeds, toy_cfg());
    const std::vector<double> k = {4};
    const SweepResult s = sweep(inputs(), Axis::NComponents, k, methods, 0.2, seeds, toy_cfg());
    REQUIRE(s.rows.size() == 1);
    CHECK(s.rows[0].perplexity == cell.rows[0].perplexity);
    CHECK(s.rows[0].x == 4.0);
    const std::vector<double> sizes = {8};
    const SweepResult c = sweep(inputs(), Axis::CalibrationSize, sizes, methods, 0.2, seeds, toy_cfg());
    CHECK(c.rows[0].perplexity == cell.rows[0].perplexity);
    const SweepResult p = sweep(inputs(), Axis::PruningRate, rates, methods, 0.0, seeds, toy_cfg());
    CHECK(p.rows[0].perplexity == cell.rows[0].perplexity);
}

TEST_CASE("sweep: calibration-size prefixes and row layout") {
    const std::vector<Method> methods = {Method::Canica, Method::Magnitude};
    const std::vector<double> sizes = {4, 8, 16};
    const std::vector<std::uint64_t> seeds = {1, 2};
    ExperimentConfig cfg = toy_cfg();
    const SweepResult r = sweep(inputs(), Axis::CalibrationSize, sizes, methods, 0.25, seeds, cfg);
    CHECK(r.rows.size() == 12);
    for (const auto & row : r.rows) {
        CHECK(row.axis == "calibration_size");
        REQUIRE(row.x.has_value());
        if (row.method == "canica") CHECK(row.extras.at("group_count") == static_cast<std::size_t>(*row.x) / 4);
    }
    const std::string csv = to_csv(r);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 1 + 12);
}

TEST_CASE("sweep: invalid axis values") {
    const std::vector<Method> methods = {Method::Canica};
    const std::vector<std::uint64_t> seeds = {1};
    const std::vector<double> not_multiple = {6};
    CHECK_THROWS_AS(sweep(inputs(), Axis::CalibrationSize, not_multiple, methods, 0.2, seeds, toy_cfg()), Error);
    const std::vector<double> decreasing = {8, 4};
    CHECK_THROWS_AS(sweep(inputs(), Axis::NComponents, decreasing, methods, 0.2, seeds, toy_cfg()), Error);
    const std::vector<double> bad_rate = {0.5, 1.0};
    CHECK_THROWS_AS(sweep(inputs(), Axis::PruningRate, bad_rate, methods, 0.2, seeds, toy_cfg()), Error);
    const std::vector<double> fractional = {2.5};
    CHECK_THROWS_AS(sweep(inputs(), Axis::NComponents, fractional, methods, 0.2, seeds, toy_cfg()), Error);
    CHECK_THROWS_AS(parse_axis("depth"), Error);
}
