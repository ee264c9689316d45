// Copyright (C) 2026 ProxyKV Contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "proxykv/tensor.hpp"

namespace proxykv {

// Numpy-style broadcast of two shapes; throws ShapeError when incompatible.
Shape broadcast_shapes(const Shape& a, const Shape& b);

// Elementwise binary ops with numpy broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);

// Elementwise unary ops.
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor clamp_min(const Tensor& a, double floor);

// Reductions.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum(const Tensor& a, int64_t axis, bool keepdim);
Tensor mean(const Tensor& a, int64_t axis, bool keepdim);

// Shape ops. transpose takes a full axis permutation; round-trips with the
// inverse permutation are bit-exact.
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a, std::vector<int64_t> perm);
Tensor slice(const Tensor& a, int64_t axis, int64_t start, int64_t length);
Tensor concat(const std::vector<Tensor>& parts, int64_t axis);
Tensor stack(const std::vector<Tensor>& parts);

// Gather over the flattened tensor; backward scatter-adds.
Tensor take(const Tensor& a, std::vector<int64_t> flat_indices);

// Batched matrix product with broadcasting over leading axes.
// a: [..., m, k], b: [..., k, n] -> [..., m, n].
Tensor matmul(const Tensor& a, const Tensor& b);

// Cross-correlation Conv1D with zero padding.
// x: [B, C_in, N], w: [C_out, C_in, k], bias: [C_out] -> [B, C_out, N_out].
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, int64_t padding);

Tensor softmax(const Tensor& x, int64_t axis);

// Normalizes the last axis.
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

struct BatchNormState {
    Tensor running_mean;
    Tensor running_var;

    static BatchNormState fresh(int64_t channels);
};

// x: [B, C, N]; train mode normalizes with batch statistics over (B, N) and
// updates the running stats by EMA; eval mode uses the running stats.
Tensor batchnorm1d(const Tensor& x,
                   const Tensor& gamma,
                   const Tensor& beta,
                   BatchNormState& state,
                   bool training,
                   double eps = 1e-5,
                   double momentum = 0.1);

// Non-differentiating helpers on raw values.
double vmax(const Tensor& a);
double vmin(const Tensor& a);
bool all_finite(const Tensor& a);

}  // namespace proxykv
