// Copyright (C) 2026 ProxyKV Contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "proxykv/tensor.hpp"

namespace proxykv {

// Retained entries per token axis of length n at retention ratio rho.
int64_t retention_count(double rho, int64_t n);

// Indices of the k largest values; ties broken toward the lower index.
// Quickselect-based; the descending-sort oracle lives in the tests.
std::vector<int64_t> topk_indices(const double* values, int64_t n, int64_t k);

// Binary mask aligned to a score tensor, one Top-K selection per slice over
// the token (last) axis.
struct PruneMask {
    Shape shape;
    std::vector<uint8_t> bits;
    double retention_ratio = 1.0;
    int64_t k = 0;

    int64_t token_count() const { return shape.back(); }
    int64_t slice_count() const { return shape_numel(shape) / shape.back(); }
};

PruneMask topk_mask(const ScoreTensor& scores, double rho);

// Oracle mass captured by the predicted mask: per slice, sum of y over the
// predicted positions divided by the sum over y's own Top-K at the same K.
// Slices with zero oracle mass count as 1.
std::vector<double> captured_mass_per_slice(const PruneMask& mask_pred, const ScoreTensor& y);
double captured_mass_ratio(const PruneMask& mask_pred, const ScoreTensor& y);

std::vector<double> topk_overlap_per_slice(const PruneMask& a, const PruneMask& b);
double topk_overlap(const PruneMask& a, const PruneMask& b);

// Rank correlation per slice with average ranks on ties; aggregate is the
// unweighted slice mean.
std::vector<double> spearman_per_slice(const ScoreTensor& a, const ScoreTensor& b);
double spearman(const ScoreTensor& a, const ScoreTensor& b);

struct MaskApplication {
    std::vector<std::vector<int64_t>> retained;  // per slice, ascending indices
    int64_t dropped_per_slice = 0;
    int64_t bytes_saved_per_head = 0;  // K and V tensors together
    int64_t bytes_saved_total = 0;
};

// Reporting-only accounting of what pruning would evict from a KV cache with
// head dimension `head_dim` and `bytes_per_elem`-wide elements.
MaskApplication apply_mask(const PruneMask& mask, int64_t head_dim, int64_t bytes_per_elem = 2);

// Ranking-quality metrics at one retention ratio. Per-slice entries follow
// (layer, head) order and are averaged over batch entries and samples.
struct MetricReport {
    double rho = 0.0;
    double captured_mass = 0.0;
    double topk_overlap = 0.0;
    double spearman = 0.0;
    std::vector<double> per_slice_mass;
    std::vector<double> per_slice_overlap;
    std::vector<double> per_slice_spearman;
};

// Streams (prediction, oracle) pairs shaped [B, L, H, N] or [L, H, N] and
// reduces to one MetricReport; every added pair must share (L, H).
class MetricAccumulator {
public:
    explicit MetricAccumulator(double rho) : rho_(rho) {}

    void add(const ScoreTensor& y_pred, const ScoreTensor& y_true);
    MetricReport report() const;

private:
    double rho_;
    int64_t slices_ = 0;
    std::vector<double> mass_sum_, overlap_sum_, spearman_sum_;
    std::vector<int64_t> counts_;
};

}  // namespace proxykv
