// Copyright (C) 2026 ProxyKV Contributors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "proxykv/common.hpp"
#include "proxykv/ops.hpp"
#include "proxykv/tensor.hpp"
#include "testutil.hpp"

using namespace proxykv;

TEST_CASE("construction and invariants") {
    Tensor t = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.numel() == 6);
    CHECK(t.at({1, 2}) == 6.0);
    CHECK(t.dim() == 2);
    CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1.0}), ShapeError);
    CHECK_THROWS_AS(Tensor::from_data({0, 2}, {}), ShapeError);
    CHECK_THROWS_AS(t.item(), ShapeError);
}

TEST_CASE("gradient accumulates across consumers") {
    Tensor x = Tensor::from_data({3}, {1, 2, 3}, true);
    Tensor loss = add(sum(x), sum(x));
    loss.backward();
    for (double g : x.grad()) {
        CHECK(g == doctest::Approx(2.0));
    }
}

TEST_CASE("diamond graph doubles the gradient versus single consumption") {
    Tensor x = Tensor::from_data({4}, {0.5, -1.0, 2.0, 3.0}, true);

    Tensor single = sum(mul(x, x));
    single.backward();
    std::vector<double> g1 = x.grad();

    x.zero_grad();
    Tensor y = mul(x, x);
    Tensor diamond = add(sum(y), sum(y));  // y consumed twice
    diamond.backward();
    const auto& g2 = x.grad();
    for (size_t i = 0; i < g1.size(); ++i) {
        CHECK(g2[i] == doctest::Approx(2.0 * g1[i]));
    }
}

TEST_CASE("reshape/transpose round-trip is bit-exact") {
    Rng rng(7);
    Tensor t = pkvtest::random_tensor({2, 3, 5}, rng);
    Tensor rt = reshape(reshape(t, {5, 6}), {2, 3, 5});
    CHECK(rt.data() == t.data());

    Tensor tt = transpose(transpose(t, {2, 0, 1}), {1, 2, 0});
    CHECK(tt.shape() == t.shape());
    CHECK(tt.data() == t.data());
}

TEST_CASE("backward needs a scalar root") {
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(y.backward(), ShapeError);
}

TEST_CASE("requires_grad propagation and leaf-only toggling") {
    Tensor a = Tensor::from_data({2}, {1, 2}, true);
    Tensor b = Tensor::from_data({2}, {3, 4});
    Tensor c = add(a, b);
    CHECK(c.requires_grad());
    CHECK_THROWS_AS(c.set_requires_grad(false), ValueError);

    Tensor d = add(b, b);
    CHECK(!d.requires_grad());
}
