// Copyright (C) 2026 ProxyKV Contributors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <vector>

#include "proxykv/common.hpp"
#include "proxykv/pruning.hpp"
#include "testutil.hpp"

using namespace proxykv;

namespace {

// Descending-sort oracle with the same lower-index tie rule; test-only.
std::vector<int64_t> sort_oracle(const std::vector<double>& v, int64_t k) {
    std::vector<int64_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
        if (v[static_cast<size_t>(a)] != v[static_cast<size_t>(b)]) {
            return v[static_cast<size_t>(a)] > v[static_cast<size_t>(b)];
        }
        return a < b;
    });
    idx.resize(static_cast<size_t>(k));
    std::sort(idx.begin(), idx.end());
    return idx;
}

std::vector<int64_t> selected(const PruneMask& mask, int64_t slice = 0) {
    std::vector<int64_t> out;
    const int64_t n = mask.token_count();
    for (int64_t i = 0; i < n; ++i) {
        if (mask.bits[static_cast<size_t>(slice * n + i)]) {
            out.push_back(i);
        }
    }
    return out;
}

}  // namespace

TEST_CASE("topk_mask basic selections") {
    Tensor y = Tensor::from_data({1, 1, 3}, {3, 1, 2});
    PruneMask m = topk_mask(y, 0.34);  // ceil(0.34*3) = 2
    CHECK(m.k == 2);
    CHECK(selected(m) == std::vector<int64_t>{0, 2});

    PruneMask all = topk_mask(y, 1.0);
    CHECK(selected(all) == std::vector<int64_t>{0, 1, 2});

    Tensor tie = Tensor::from_data({1, 1, 3}, {0.3, 0.3, 0.1});
    PruneMask t = topk_mask(tie, 0.3);
    CHECK(t.k == 1);
    CHECK(selected(t) == std::vector<int64_t>{0});

    CHECK_THROWS_AS(topk_mask(y, 0.0), ValueError);
    CHECK_THROWS_AS(topk_mask(y, 1.5), ValueError);
}

TEST_CASE("topk_mask equals the sort oracle exhaustively on 3^8 vectors") {
    const double alphabet[3] = {0.1, 0.2, 0.3};
    std::vector<double> v(8);
    for (int code = 0; code < 6561; ++code) {
        int c = code;
        for (int i = 0; i < 8; ++i) {
            v[static_cast<size_t>(i)] = alphabet[c % 3];
            c /= 3;
        }
        Tensor y = Tensor::from_data({1, 1, 8}, v);
        for (int64_t k = 1; k <= 8; ++k) {
            const double rho = static_cast<double>(k) / 8.0;
            PruneMask m = topk_mask(y, rho);
            REQUIRE(m.k == k);
            CHECK(selected(m) == sort_oracle(v, k));
        }
    }
}

TEST_CASE("topk_mask equals the sort oracle on random length-32 vectors") {
    Rng rng(99);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> v(32);
        for (auto& x : v) {
            // coarse grid to provoke ties
            x = std::floor(rng.uniform(0.0, 8.0)) / 8.0;
        }
        Tensor y = Tensor::from_data({1, 1, 32}, v);
        const int64_t k = 1 + static_cast<int64_t>(rng.below(32));
        PruneMask m = topk_mask(y, static_cast<double>(k) / 32.0);
        REQUIRE(m.k == k);
        CHECK(selected(m) == sort_oracle(v, k));
    }
}

TEST_CASE("topk selection is invariant to positive affine rescaling") {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor y = pkvtest::random_tensor({2, 3, 16}, rng, 0.0, 4.0);
        const double alpha = rng.uniform(0.1, 5.0);
        const double c = rng.uniform(-3.0, 3.0);
        std::vector<double> scaled(y.data().size());
        for (size_t i = 0; i < scaled.size(); ++i) {
            scaled[i] = alpha * y.data()[i] + c;
        }
        Tensor y2 = Tensor::from_data(y.shape(), scaled);
        CHECK(topk_mask(y, 0.25).bits == topk_mask(y2, 0.25).bits);
    }
}

TEST_CASE("captured_mass_ratio contracts") {
    Tensor y = Tensor::from_data({1, 1, 3}, {0.5, 0.3, 0.2});

    PruneMask oracle = topk_mask(y, 1.0 / 3.0);
    CHECK(captured_mass_ratio(oracle, y) == doctest::Approx(1.0));

    PruneMask keep1 = oracle;
    keep1.bits = {0, 1, 0};
    CHECK(captured_mass_ratio(keep1, y) == doctest::Approx(0.6));

    Tensor zeros_tail = Tensor::from_data({1, 1, 3}, {0.7, 0.0, 0.0});
    PruneMask keep_zero = topk_mask(zeros_tail, 1.0 / 3.0);
    keep_zero.bits = {0, 0, 1};
    CHECK(captured_mass_ratio(keep_zero, zeros_tail) == doctest::Approx(0.0));

    // identical mask on any nonnegative scores captures everything
    Rng rng(3);
    Tensor r = pkvtest::random_tensor({2, 2, 8}, rng, 0.0, 2.0);
    CHECK(captured_mass_ratio(topk_mask(r, 0.5), r) == doctest::Approx(1.0));
}

TEST_CASE("captured_mass_ratio defines zero oracle mass as 1") {
    Tensor y = Tensor::from_data({1, 1, 4}, {0, 0, 0, 0});
    CHECK(captured_mass_ratio(topk_mask(y, 0.5), y) == doctest::Approx(1.0));
}

TEST_CASE("topk_overlap is symmetric and 1 iff masks match") {
    Tensor a = Tensor::from_data({1, 1, 4}, {4, 3, 2, 1});
    Tensor b = Tensor::from_data({1, 1, 4}, {1, 2, 3, 4});
    PruneMask ma = topk_mask(a, 0.5);
    PruneMask mb = topk_mask(b, 0.5);
    CHECK(topk_overlap(ma, ma) == doctest::Approx(1.0));
    CHECK(topk_overlap(ma, mb) == doctest::Approx(0.0));
    CHECK(topk_overlap(ma, mb) == doctest::Approx(topk_overlap(mb, ma)));

    PruneMask bad = mb;
    bad.k += 1;
    CHECK_THROWS_AS(topk_overlap(ma, bad), ValueError);
}

TEST_CASE("spearman rank correlation") {
    Tensor y = Tensor::from_data({1, 1, 5}, {0.1, 0.9, 0.3, 0.7, 0.5});
    CHECK(spearman(y, y) == doctest::Approx(1.0));

    Tensor rev = Tensor::from_data({1, 1, 5}, {0.9, 0.1, 0.7, 0.3, 0.5});
    CHECK(spearman(y, rev) == doctest::Approx(-1.0));

    // average ranks on ties: a=[1,2,2,3] -> ranks [1, 2.5, 2.5, 4]
    Tensor a = Tensor::from_data({1, 1, 4}, {1, 2, 2, 3});
    Tensor b = Tensor::from_data({1, 1, 4}, {1, 2, 3, 4});
    // hand Pearson of [1,2.5,2.5,4] vs [1,2,3,4]
    CHECK(spearman(a, b) == doctest::Approx(0.9486832980505138));
}

TEST_CASE("apply_mask reports retained indices and byte savings") {
    Tensor y = Tensor::from_data({1, 1, 5}, {0.5, 0.1, 0.4, 0.2, 0.3});
    PruneMask m = topk_mask(y, 0.4);
    REQUIRE(m.k == 2);
    MaskApplication app = apply_mask(m, 128, 2);
    CHECK(app.retained[0] == std::vector<int64_t>{0, 2});

    Rng rng(1);
    Tensor big = pkvtest::random_tensor({1, 1, 1024}, rng, 0.0, 1.0);
    MaskApplication half = apply_mask(topk_mask(big, 0.5), 128, 2);
    CHECK(half.bytes_saved_per_head == 262144);

    MaskApplication none = apply_mask(topk_mask(big, 1.0), 128, 2);
    CHECK(none.bytes_saved_per_head == 0);
}

TEST_CASE("metric accumulator aggregates per (layer, head) over batch and samples") {
    Rng rng(7);
    MetricAccumulator acc(0.5);
    Tensor y1 = pkvtest::random_tensor({2, 2, 3, 8}, rng, 0.0, 1.0);
    Tensor y2 = pkvtest::random_tensor({2, 2, 3, 8}, rng, 0.0, 1.0);
    acc.add(y1, y1);
    acc.add(y2, y2);
    MetricReport r = acc.report();
    CHECK(r.per_slice_mass.size() == 6);
    CHECK(r.captured_mass == doctest::Approx(1.0));
    CHECK(r.topk_overlap == doctest::Approx(1.0));
    CHECK(r.spearman == doctest::Approx(1.0));
}
