// Copyright (C) 2026 ProxyKV Contributors
// SPDX-License-Identifier: Apache-2.0

#include "proxykv/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "proxykv/common.hpp"

namespace proxykv {

int64_t retention_count(double rho, int64_t n) {
    PKV_CHECK_VALUE(rho > 0.0 && rho <= 1.0, "retention ratio must be in (0, 1], got ", rho);
    PKV_CHECK_VALUE(n > 0, "empty token axis");
    return static_cast<int64_t>(std::ceil(rho * static_cast<double>(n)));
}

std::vector<int64_t> topk_indices(const double* values, int64_t n, int64_t k) {
    PKV_CHECK_VALUE(k >= 1 && k <= n, "top-k count ", k, " out of range for length ", n);
    std::vector<int64_t> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    const auto better = [values](int64_t a, int64_t b) {
        if (values[a] != values[b]) {
            return values[a] > values[b];
        }
        return a < b;
    };
    if (k < n) {
        std::nth_element(idx.begin(), idx.begin() + (k - 1), idx.end(), better);
    }
    idx.resize(static_cast<size_t>(k));
    return idx;
}

PruneMask topk_mask(const ScoreTensor& scores, double rho) {
    const Shape& s = scores.shape();
    PKV_CHECK_SHAPE(!s.empty(), "topk_mask needs a shaped tensor");
    const int64_t n = s.back();
    const int64_t k = retention_count(rho, n);

    PruneMask mask;
    mask.shape = s;
    mask.retention_ratio = rho;
    mask.k = k;
    mask.bits.assign(scores.data().size(), 0);
    const int64_t slices = mask.slice_count();
    const double* v = scores.data().data();
    for (int64_t slice = 0; slice < slices; ++slice) {
        for (int64_t i : topk_indices(v + slice * n, n, k)) {
            mask.bits[static_cast<size_t>(slice * n + i)] = 1;
        }
    }
    return mask;
}

std::vector<double> captured_mass_per_slice(const PruneMask& mask_pred, const ScoreTensor& y) {
    PKV_CHECK_SHAPE(mask_pred.shape == y.shape(), "mask shape ", shape_str(mask_pred.shape),
                    " does not match scores ", shape_str(y.shape()));
    const int64_t n = mask_pred.token_count();
    const int64_t slices = mask_pred.slice_count();
    const double* yv = y.data().data();
    std::vector<double> out(static_cast<size_t>(slices));
    for (int64_t slice = 0; slice < slices; ++slice) {
        const double* row = yv + slice * n;
        double captured = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            if (mask_pred.bits[static_cast<size_t>(slice * n + i)]) {
                captured += row[i];
            }
        }
        double oracle = 0.0;
        for (int64_t i : topk_indices(row, n, mask_pred.k)) {
            oracle += row[i];
        }
        out[static_cast<size_t>(slice)] = oracle > 0.0 ? captured / oracle : 1.0;
    }
    return out;
}

double captured_mass_ratio(const PruneMask& mask_pred, const ScoreTensor& y) {
    const auto per_slice = captured_mass_per_slice(mask_pred, y);
    double acc = 0.0;
    for (double v : per_slice) {
        acc += v;
    }
    return acc / static_cast<double>(per_slice.size());
}

std::vector<double> topk_overlap_per_slice(const PruneMask& a, const PruneMask& b) {
    PKV_CHECK_SHAPE(a.shape == b.shape, "mask shapes differ: ", shape_str(a.shape), " vs ",
                    shape_str(b.shape));
    PKV_CHECK_VALUE(a.k == b.k, "topk_overlap needs equal per-slice counts, got ", a.k, " and ",
                    b.k);
    const int64_t n = a.token_count();
    const int64_t slices = a.slice_count();
    std::vector<double> out(static_cast<size_t>(slices));
    for (int64_t slice = 0; slice < slices; ++slice) {
        int64_t both = 0;
        for (int64_t i = 0; i < n; ++i) {
            const size_t p = static_cast<size_t>(slice * n + i);
            both += (a.bits[p] && b.bits[p]) ? 1 : 0;
        }
        out[static_cast<size_t>(slice)] = static_cast<double>(both) / static_cast<double>(a.k);
    }
    return out;
}

double topk_overlap(const PruneMask& a, const PruneMask& b) {
    const auto per_slice = topk_overlap_per_slice(a, b);
    double acc = 0.0;
    for (double v : per_slice) {
        acc += v;
    }
    return acc / static_cast<double>(per_slice.size());
}

namespace {

// Average ranks (1-based) with ties sharing the mean of their positions.
std::vector<double> average_ranks(const double* v, int64_t n) {
    std::vector<int64_t> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [v](int64_t a, int64_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(static_cast<size_t>(n));
    int64_t i = 0;
    while (i < n) {
        int64_t j = i;
        while (j + 1 < n && v[idx[static_cast<size_t>(j + 1)]] == v[idx[static_cast<size_t>(i)]]) {
            ++j;
        }
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (int64_t t = i; t <= j; ++t) {
            ranks[static_cast<size_t>(idx[static_cast<size_t>(t)])] = r;
        }
        i = j + 1;
    }
    return ranks;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const size_t n = a.size();
    double ma = 0.0;
    double mb = 0.0;
    for (size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double sab = 0.0;
    double saa = 0.0;
    double sbb = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double da = a[i] - ma;
        const double db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa == 0.0 && sbb == 0.0) {
        return 1.0;  // both constant: identical orderings
    }
    if (saa == 0.0 || sbb == 0.0) {
        return 0.0;
    }
    return sab / std::sqrt(saa * sbb);
}

}  // namespace

std::vector<double> spearman_per_slice(const ScoreTensor& a, const ScoreTensor& b) {
    PKV_CHECK_SHAPE(a.shape() == b.shape(), "spearman shapes differ: ", shape_str(a.shape()),
                    " vs ", shape_str(b.shape()));
    const int64_t n = a.shape().back();
    PKV_CHECK_VALUE(n >= 2, "spearman needs at least two tokens per slice");
    const int64_t slices = a.numel() / n;
    std::vector<double> out(static_cast<size_t>(slices));
    for (int64_t slice = 0; slice < slices; ++slice) {
        const auto ra = average_ranks(a.data().data() + slice * n, n);
        const auto rb = average_ranks(b.data().data() + slice * n, n);
        out[static_cast<size_t>(slice)] = pearson(ra, rb);
    }
    return out;
}

double spearman(const ScoreTensor& a, const ScoreTensor& b) {
    const auto per_slice = spearman_per_slice(a, b);
    double acc = 0.0;
    for (double v : per_slice) {
        acc += v;
    }
    return acc / static_cast<double>(per_slice.size());
}

MaskApplication apply_mask(const PruneMask& mask, int64_t head_dim, int64_t bytes_per_elem) {
    const int64_t n = mask.token_count();
    const int64_t slices = mask.slice_count();
    MaskApplication result;
    result.retained.resize(static_cast<size_t>(slices));
    for (int64_t slice = 0; slice < slices; ++slice) {
        auto& list = result.retained[static_cast<size_t>(slice)];
        list.reserve(static_cast<size_t>(mask.k));
        for (int64_t i = 0; i < n; ++i) {
            if (mask.bits[static_cast<size_t>(slice * n + i)]) {
                list.push_back(i);
            }
        }
    }
    result.dropped_per_slice = n - mask.k;
    result.bytes_saved_per_head = result.dropped_per_slice * head_dim * bytes_per_elem * 2;
    result.bytes_saved_total = result.bytes_saved_per_head * slices;
    return result;
}

void MetricAccumulator::add(const ScoreTensor& y_pred, const ScoreTensor& y_true) {
    PKV_CHECK_SHAPE(y_pred.shape() == y_true.shape(), "metric shapes differ: ",
                    shape_str(y_pred.shape()), " vs ", shape_str(y_true.shape()));
    PKV_CHECK_SHAPE(y_pred.dim() == 3 || y_pred.dim() == 4,
                    "metrics expect [B, L, H, N] or [L, H, N], got ", shape_str(y_pred.shape()));
    const bool batched = y_pred.dim() == 4;
    const int64_t b = batched ? y_pred.size(0) : 1;
    const int64_t lh = y_pred.numel() / y_pred.shape().back() / b;
    if (slices_ == 0) {
        slices_ = lh;
        mass_sum_.assign(static_cast<size_t>(lh), 0.0);
        overlap_sum_.assign(static_cast<size_t>(lh), 0.0);
        spearman_sum_.assign(static_cast<size_t>(lh), 0.0);
        counts_.assign(static_cast<size_t>(lh), 0);
    }
    PKV_CHECK_SHAPE(lh == slices_, "inconsistent (layer, head) slice count across samples");

    const PruneMask pred_mask = topk_mask(y_pred, rho_);
    const PruneMask true_mask = topk_mask(y_true, rho_);
    const auto mass = captured_mass_per_slice(pred_mask, y_true);
    const auto overlap = topk_overlap_per_slice(pred_mask, true_mask);
    const auto rho_s = spearman_per_slice(y_pred, y_true);
    for (int64_t i = 0; i < b * lh; ++i) {
        const size_t key = static_cast<size_t>(i % lh);
        mass_sum_[key] += mass[static_cast<size_t>(i)];
        overlap_sum_[key] += overlap[static_cast<size_t>(i)];
        spearman_sum_[key] += rho_s[static_cast<size_t>(i)];
        counts_[key] += 1;
    }
}

MetricReport MetricAccumulator::report() const {
    PKV_CHECK_VALUE(slices_ > 0, "no samples accumulated");
    MetricReport r;
    r.rho = rho_;
    r.per_slice_mass.resize(static_cast<size_t>(slices_));
    r.per_slice_overlap.resize(static_cast<size_t>(slices_));
    r.per_slice_spearman.resize(static_cast<size_t>(slices_));
    for (int64_t i = 0; i < slices_; ++i) {
        const size_t k = static_cast<size_t>(i);
        const double c = static_cast<double>(counts_[k]);
        r.per_slice_mass[k] = mass_sum_[k] / c;
        r.per_slice_overlap[k] = overlap_sum_[k] / c;
        r.per_slice_spearman[k] = spearman_sum_[k] / c;
        r.captured_mass += r.per_slice_mass[k];
        r.topk_overlap += r.per_slice_overlap[k];
        r.spearman += r.per_slice_spearman[k];
    }
    r.captured_mass /= static_cast<double>(slices_);
    r.topk_overlap /= static_cast<double>(slices_);
    r.spearman /= static_cast<double>(slices_);
    return r;
}

}  // namespace proxykv
