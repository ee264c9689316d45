// Copyright (C) 2026 ProxyKV Contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "proxykv/pruning.hpp"
#include "proxykv/tensor.hpp"

namespace proxykv {

struct LossConfig {
    double lambda_mse = 20.0;
    double lambda_bin = 10.0;
    double lambda_fine = 3.0;
    double lambda_global = 2.0;
    double lambda_cos = 0.5;
    std::vector<double> ratios = {0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5};
    double gamma = 1.0;
    double epsilon = 0.1;        // additive offset in the mse weight
    double mse_exponent = 1.5;
    double margin = 1.0;
    double clip_lo = 1.0;
    double clip_hi = 5.0;
    double pair_filter_frac = 0.01;
    double topk_ratio_for_rank = 0.2;
    int64_t max_pairs = 4096;  // sampling cap per (batch, head) slice

    double r_min() const;
    void validate() const;
    bool operator==(const LossConfig&) const = default;
};

struct PairCounts {
    int64_t used = 0;
    int64_t filtered = 0;
};

struct LossReport {
    double bin = 0.0, mse = 0.0, fine = 0.0, global = 0.0, cos = 0.0;
    double weighted_bin = 0.0, weighted_mse = 0.0, weighted_fine = 0.0, weighted_global = 0.0,
           weighted_cos = 0.0;
    double total = 0.0;
    PairCounts fine_pairs;
    PairCounts global_pairs;
    int64_t cos_floor_hits = 0;
    double s_max = 0.0;
    Tensor total_tensor;  // graph root; undefined when no term carries gradient
};

// Shared-logit dual heads: probability head and magnitude head.
std::pair<Tensor, Tensor> dual_heads(const Tensor& logits, double s_max);

// Ground-truth Top-K mask at ratio r; selection and tie rules shared with
// pruning::topk_mask.
PruneMask topk_mask_gt(const ScoreTensor& y, double ratio);

// Multi-ratio BCE on the probability head, power-law weighted over the
// configured ratio set. Computed from logits in log-sum-exp form.
Tensor loss_bin(const Tensor& logits, const ScoreTensor& y, const LossConfig& cfg);

// Value-weighted MSE on the magnitude head, weights (y + eps)^alpha.
Tensor loss_mse(const Tensor& logits, const ScoreTensor& y, double s_max, const LossConfig& cfg);

// Pairwise softplus ranking loss within the Top-K set of each slice.
Tensor loss_fine(const Tensor& logits, const ScoreTensor& y, const LossConfig& cfg,
                 uint64_t seed, PairCounts* counts = nullptr);

// Margin hinge over (Top-K, complement) cross pairs with clipped
// min-max-normalized weights.
Tensor loss_global(const Tensor& logits, const ScoreTensor& y, const LossConfig& cfg,
                   uint64_t seed, PairCounts* counts = nullptr);

// 1 - cosine similarity, per axis-0 sample, averaged. Norms are floored at
// 1e-12; hits are reported through `floor_hits`.
Tensor loss_cos(const Tensor& pred, const Tensor& target, int64_t* floor_hits = nullptr);

// All five terms combined: bin on the probability head, mse and cos on the
// magnitude head, fine and global on raw logits. A zero lambda removes the
// term from the total exactly.
LossReport loss_total(const Tensor& logits, const ScoreTensor& y, const LossConfig& cfg,
                      uint64_t seed);

}  // namespace proxykv
