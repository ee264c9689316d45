// Copyright (C) 2026 ProxyKV Contributors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "proxykv/common.hpp"
#include "proxykv/loss.hpp"
#include "proxykv/ops.hpp"
#include "testutil.hpp"

using namespace proxykv;

TEST_CASE("dual heads share one logit") {
    Tensor z = Tensor::from_data({1, 1}, {0.0});
    auto [prob, mag] = dual_heads(z, 2.0);
    CHECK(prob.item() == doctest::Approx(0.5));
    CHECK(mag.item() == doctest::Approx(1.0));

    Tensor big = Tensor::from_data({1, 1}, {40.0});
    auto [p2, m2] = dual_heads(big, 3.0);
    CHECK(p2.item() == doctest::Approx(1.0));
    CHECK(m2.item() == doctest::Approx(3.0));

    Tensor neg = Tensor::from_data({1, 1}, {-2.0});
    auto [p3, m3] = dual_heads(neg, 1.0);
    CHECK(p3.item() == doctest::Approx(0.11920292202211755).epsilon(1e-9));
    CHECK(m3.item() == doctest::Approx(0.11920292202211755).epsilon(1e-9));

    CHECK_THROWS_AS(dual_heads(z, 0.0), ValueError);
    CHECK_THROWS_AS(dual_heads(z, -1.0), ValueError);
}

TEST_CASE("ground-truth top-k masks") {
    Tensor y = Tensor::from_data({1, 5}, {0.5, 0.1, 0.4, 0.2, 0.3});
    PruneMask m = topk_mask_gt(y, 0.4);
    CHECK(m.k == 2);
    CHECK(m.bits == std::vector<uint8_t>{1, 0, 1, 0, 0});

    PruneMask all = topk_mask_gt(y, 1.0);
    CHECK(all.bits == std::vector<uint8_t>(5, 1));

    // adding a positive constant leaves the mask unchanged
    Tensor shifted = add_scalar(y, 3.0);
    CHECK(topk_mask_gt(shifted, 0.4).bits == m.bits);
}

TEST_CASE("loss_bin power-law ratio weights") {
    LossConfig cfg;
    cfg.ratios = {0.05, 0.1, 0.5};
    // BCE(sigma(0), anything) = ln 2 per element, so the loss isolates the
    // ratio weights (r_min/r)^gamma = 1.0, 0.5, 0.1
    Rng rng(1);
    Tensor y = pkvtest::random_tensor({2, 20}, rng, 0.0, 1.0);
    Tensor z = Tensor::zeros({2, 20}, true);
    const double expect = std::log(2.0) * (1.0 + 0.5 + 0.1);
    CHECK(loss_bin(z, y, cfg).item() == doctest::Approx(expect).epsilon(1e-12));

    LossConfig full;  // default seven-ratio set
    const double weights = 1.0 + 0.5 + 1.0 / 3.0 + 0.25 + 1.0 / 6.0 + 0.125 + 0.1;
    CHECK(loss_bin(z, y, full).item() == doctest::Approx(std::log(2.0) * weights).epsilon(1e-12));
}

TEST_CASE("loss_bin saturates to zero on perfectly separated logits") {
    // with N=2 every ratio in the default set keeps exactly one token, so a
    // single +-40 logit pattern satisfies all masks at once
    LossConfig cfg;
    Tensor y = Tensor::from_data({1, 2}, {1.0, 0.25});
    Tensor z = Tensor::from_data({1, 2}, {40.0, -40.0});
    CHECK(loss_bin(z, y, cfg).item() < 1e-10);
}

TEST_CASE("loss_mse value weighting") {
    LossConfig cfg;

    // magnitude head equal to the oracle everywhere -> 0
    Rng rng(2);
    Tensor z = pkvtest::random_tensor({2, 6}, rng, -2.0, 2.0);
    std::vector<double> y(z.data().size());
    for (size_t i = 0; i < y.size(); ++i) {
        y[i] = 2.0 / (1.0 + std::exp(-z.data()[i]));
    }
    CHECK(loss_mse(z, Tensor::from_data({2, 6}, y), 2.0, cfg).item() == doctest::Approx(0.0));

    // single element, Y = 0, magnitude 0.1: w = 0.1^1.5, loss = w * 0.01
    const double logit = std::log(0.05 / 0.95);  // sigma = 0.05, s_max = 2
    Tensor z1 = Tensor::from_data({1, 1}, {logit});
    Tensor y0 = Tensor::from_data({1, 1}, {0.0});
    CHECK(loss_mse(z1, y0, 2.0, cfg).item() ==
          doctest::Approx(std::pow(0.1, 1.5) * 0.01).epsilon(1e-9));

    // w at Y = 0.9 with eps = 0.1 is exactly 1: loss = (0.5 - 0.9)^2
    Tensor z0 = Tensor::from_data({1, 1}, {0.0});
    Tensor y9 = Tensor::from_data({1, 1}, {0.9});
    CHECK(loss_mse(z0, y9, 1.0, cfg).item() == doctest::Approx(0.16).epsilon(1e-12));
}

TEST_CASE("loss_fine softplus pairs") {
    LossConfig cfg;
    cfg.topk_ratio_for_rank = 0.75;  // K=3 of 4: pairs (0,1), (0,2), (1,2)

    // equal logits: every pair contributes w * ln 2 and the weights average
    // to 1, so the loss is exactly ln 2
    Tensor y = Tensor::from_data({1, 4}, {3.0, 2.0, 1.0, 0.5});
    Tensor z = Tensor::zeros({1, 4}, true);
    PairCounts counts;
    CHECK(loss_fine(z, y, cfg, 7, &counts).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(counts.used == 3);

    // a widely correct ordering drives every pair's softplus tail to zero
    Tensor zgood = Tensor::from_data({1, 4}, {80.0, 40.0, 0.0, 0.0});
    CHECK(loss_fine(zgood, y, cfg, 7).item() < 1e-10);

    // strictly decreasing in the logit gap of a correctly ordered pair,
    // everything else held fixed
    double prev = 1e9;
    for (double gap : {0.0, 0.5, 1.0, 2.0}) {
        Tensor zg = Tensor::from_data({1, 4}, {gap, 0.0, 0.0, 0.0});
        const double v = loss_fine(zg, y, cfg, 7).item();
        CHECK(v < prev);
        prev = v;
    }
}

TEST_CASE("loss_fine weight normalization averages to one") {
    LossConfig cfg;
    cfg.topk_ratio_for_rank = 0.5;
    Rng rng(3);
    // equal logits isolate mean(w) * ln2 == ln2 for any oracle with pairs
    for (int trial = 0; trial < 10; ++trial) {
        Tensor y = pkvtest::random_tensor({2, 3, 12}, rng, 0.0, 4.0);
        Tensor z = Tensor::zeros({2, 3, 12}, true);
        CHECK(loss_fine(z, y, cfg, 11).item() == doctest::Approx(std::log(2.0)).epsilon(1e-9));
    }
}

TEST_CASE("loss_fine degenerate pair sets return zero with zero counts") {
    LossConfig cfg;
    cfg.topk_ratio_for_rank = 0.5;
    Tensor y = Tensor::from_data({1, 2}, {1.0, 0.5});  // K=1: no pairs
    Tensor z = Tensor::zeros({1, 2}, true);
    PairCounts counts;
    CHECK(loss_fine(z, y, cfg, 1, &counts).item() == 0.0);
    CHECK(counts.used == 0);

    // a single retained pair is below the two-pair minimum
    Tensor y4 = Tensor::from_data({1, 4}, {3.0, 2.0, 1.0, 0.5});
    Tensor z4 = Tensor::zeros({1, 4}, true);
    cfg.topk_ratio_for_rank = 0.5;  // K=2: one pair
    CHECK(loss_fine(z4, y4, cfg, 1, &counts).item() == 0.0);
    CHECK(counts.used == 0);
}

TEST_CASE("loss_global hinge contracts") {
    LossConfig cfg;
    cfg.topk_ratio_for_rank = 0.2;

    // satisfied margins on every cross pair -> 0
    Tensor y = Tensor::from_data({1, 5}, {1.0, 0.8, 0.2, 0.1, 0.05});
    Tensor z = Tensor::from_data({1, 5}, {10.0, 0.0, 0.0, 0.0, 0.0});
    CHECK(loss_global(z, y, cfg, 5).item() == 0.0);

    // equal logits and tied scores: per-pair weight 1, hinge 1
    LossConfig nofilter = cfg;
    nofilter.pair_filter_frac = 0.0;
    Tensor ytie = Tensor::from_data({1, 2}, {0.5, 0.5});
    Tensor z0 = Tensor::zeros({1, 2}, true);
    PairCounts counts;
    CHECK(loss_global(z0, ytie, nofilter, 5, &counts).item() == doctest::Approx(1.0));
    CHECK(counts.used == 1);

    // y_norm gap 0.5 with logit gap 0.2: pair value 1.5 * 0.8 = 1.2; the
    // second pair is driven to exact zero hinge, so 2 * mean == 1.2
    LossConfig two = cfg;
    two.topk_ratio_for_rank = 0.67;  // K=2 of 3
    Tensor y3 = Tensor::from_data({1, 3}, {1.0, 0.5, 0.0});
    Tensor z3 = Tensor::from_data({1, 3}, {10.0, 0.2, 0.0});
    PairCounts c3;
    const double got = loss_global(z3, y3, two, 5, &c3).item();
    CHECK(c3.used == 2);
    CHECK(2.0 * got == doctest::Approx(1.2).epsilon(1e-12));
}

TEST_CASE("loss_global empty side returns zero with zero counts") {
    LossConfig cfg;
    cfg.topk_ratio_for_rank = 1.0;  // complement empty
    Tensor y = Tensor::from_data({1, 4}, {1.0, 0.5, 0.2, 0.1});
    Tensor z = Tensor::zeros({1, 4}, true);
    PairCounts counts;
    CHECK(loss_global(z, y, cfg, 9, &counts).item() == 0.0);
    CHECK(counts.used == 0);
}

TEST_CASE("loss_cos endpoints and scale invariance") {
    Tensor y = Tensor::from_data({1, 3}, {1.0, 2.0, 2.0});

    Tensor prop = Tensor::from_data({1, 3}, {0.5, 1.0, 1.0}, true);
    CHECK(loss_cos(prop, y).item() == doctest::Approx(0.0).epsilon(1e-12));

    Tensor ortho = Tensor::from_data({1, 3}, {2.0, -1.0, 0.0}, true);
    CHECK(loss_cos(ortho, y).item() == doctest::Approx(1.0).epsilon(1e-12));

    Tensor anti = Tensor::from_data({1, 3}, {-1.0, -2.0, -2.0}, true);
    CHECK(loss_cos(anti, y).item() == doctest::Approx(2.0).epsilon(1e-12));

    // invariance under positive rescaling of the prediction
    Rng rng(5);
    Tensor v = pkvtest::random_tensor({2, 6}, rng, -1.0, 2.0);
    Tensor t = pkvtest::random_tensor({2, 6}, rng, 0.0, 2.0);
    const double base = loss_cos(v, t).item();
    for (double alpha : {0.25, 3.0, 17.0}) {
        Tensor scaled = scale(v, alpha);
        CHECK(loss_cos(scaled, t).item() == doctest::Approx(base).epsilon(1e-10));
    }

    // zero-norm prediction hits the guard and reports it
    int64_t hits = 0;
    Tensor zeros = Tensor::zeros({1, 3}, true);
    loss_cos(zeros, y, &hits);
    CHECK(hits == 1);
}

TEST_CASE("loss_total composes the five terms") {
    Rng rng(6);
    Tensor y = pkvtest::random_tensor({2, 3, 10}, rng, 0.0, 1.0);
    Tensor z = pkvtest::random_tensor({2, 3, 10}, rng, -1.0, 1.0, true);

    LossConfig cfg;
    LossReport report = loss_total(z, y, cfg, 42);

    const double recomposed = cfg.lambda_bin * report.bin + cfg.lambda_mse * report.mse +
                              cfg.lambda_fine * report.fine + cfg.lambda_global * report.global +
                              cfg.lambda_cos * report.cos;
    CHECK(std::abs(report.total - recomposed) < 1e-12);
    CHECK(report.s_max == doctest::Approx(vmax(y)));

    // matches the individually computed terms on the same seed
    CHECK(report.bin == doctest::Approx(loss_bin(z, y, cfg).item()));
    CHECK(report.mse == doctest::Approx(loss_mse(z, y, report.s_max, cfg).item()));
    CHECK(report.fine == doctest::Approx(loss_fine(z, y, cfg, 42).item()));
    CHECK(report.global == doctest::Approx(loss_global(z, y, cfg, 42).item()));

    // zero lambdas remove terms exactly
    LossConfig off;
    off.lambda_bin = off.lambda_mse = off.lambda_fine = off.lambda_global = off.lambda_cos = 0.0;
    LossReport zero = loss_total(z, y, off, 42);
    CHECK(zero.total == 0.0);
    CHECK(!zero.total_tensor.defined());

    LossConfig loo = cfg;
    loo.lambda_fine = 0.0;
    LossReport ablated = loss_total(z, y, loo, 42);
    CHECK(ablated.total ==
          doctest::Approx(report.total - cfg.lambda_fine * report.fine).epsilon(1e-12));
}

TEST_CASE("loss_total rejects a degenerate oracle") {
    Tensor y = Tensor::zeros({1, 4});
    Tensor z = Tensor::zeros({1, 4}, true);
    LossConfig cfg;
    CHECK_THROWS_AS(loss_total(z, y, cfg, 1), ValueError);
}

TEST_CASE("loss_total gradient passes finite differences") {
    Rng rng(8);
    Tensor y = pkvtest::random_tensor({2, 2, 8}, rng, 0.0, 1.0);
    Tensor z = pkvtest::random_tensor({2, 2, 8}, rng, -1.0, 1.0, true);
    LossConfig cfg;
    auto build = [&] { return loss_total(z, y, cfg, 99).total_tensor; };
    auto rep = pkvtest::gradcheck(build, {{"z", z}});
    CHECK_MESSAGE(rep.max_rel_err < 1e-5, "worst at ", rep.worst, " err ", rep.max_rel_err);
}

TEST_CASE("hand-built 1x1x4 case matches term-by-term composition") {
    Tensor y = Tensor::from_data({1, 1, 4}, {0.9, 0.4, 0.1, 0.0});
    Tensor z = Tensor::from_data({1, 1, 4}, {1.2, 0.3, -0.5, -1.0}, true);
    LossConfig cfg;
    cfg.topk_ratio_for_rank = 0.5;
    LossReport r = loss_total(z, y, cfg, 3);
    const double by_hand = cfg.lambda_bin * loss_bin(z, y, cfg).item() +
                           cfg.lambda_mse * loss_mse(z, y, 0.9, cfg).item() +
                           cfg.lambda_fine * loss_fine(z, y, cfg, 3).item() +
                           cfg.lambda_global * loss_global(z, y, cfg, 3).item() +
                           cfg.lambda_cos * loss_cos(dual_heads(z, 0.9).second, y).item();
    CHECK(r.total == doctest::Approx(by_hand).epsilon(1e-12));
}
