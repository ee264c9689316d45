// Copyright (C) 2026 ProxyKV Contributors
// SPDX-License-Identifier: Apache-2.0

#include "proxykv/loss.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "proxykv/common.hpp"
#include "proxykv/ops.hpp"
#include "proxykv/rng.hpp"

namespace proxykv {

namespace {

constexpr double kNormFloor = 1e-12;
constexpr uint64_t kFineStream = 0x66696e65ull;
constexpr uint64_t kGlobalStream = 0x676c6f62ull;

}  // namespace

double LossConfig::r_min() const {
    PKV_CHECK_VALUE(!ratios.empty(), "ratio set must not be empty");
    return *std::min_element(ratios.begin(), ratios.end());
}

void LossConfig::validate() const {
    PKV_CHECK_VALUE(lambda_mse >= 0 && lambda_bin >= 0 && lambda_fine >= 0 &&
                        lambda_global >= 0 && lambda_cos >= 0,
                    "loss coefficients must be nonnegative");
    PKV_CHECK_VALUE(!ratios.empty(), "ratio set must not be empty");
    for (double r : ratios) {
        PKV_CHECK_VALUE(r > 0.0 && r <= 1.0, "ratio ", r, " out of (0, 1]");
    }
    PKV_CHECK_VALUE(clip_lo <= clip_hi, "clip bounds out of order: [", clip_lo, ", ", clip_hi,
                    "]");
    PKV_CHECK_VALUE(topk_ratio_for_rank > 0.0 && topk_ratio_for_rank <= 1.0,
                    "topk_ratio_for_rank out of (0, 1]");
    PKV_CHECK_VALUE(pair_filter_frac >= 0.0, "pair_filter_frac must be nonnegative");
    PKV_CHECK_VALUE(max_pairs > 0, "max_pairs must be positive");
    PKV_CHECK_VALUE(mse_exponent > 0.0 && epsilon >= 0.0, "mse weight parameters invalid");
}

std::pair<Tensor, Tensor> dual_heads(const Tensor& logits, double s_max) {
    PKV_CHECK_VALUE(s_max > 0.0, "degenerate oracle: s_max must be positive, got ", s_max);
    Tensor prob = sigmoid(logits);
    Tensor magnitude = scale(prob, s_max);
    return {prob, magnitude};
}

PruneMask topk_mask_gt(const ScoreTensor& y, double ratio) {
    return topk_mask(y, ratio);
}

Tensor loss_bin(const Tensor& logits, const ScoreTensor& y, const LossConfig& cfg) {
    PKV_CHECK_SHAPE(logits.shape() == y.shape(), "loss_bin shapes differ: ",
                    shape_str(logits.shape()), " vs ", shape_str(y.shape()));
    const double rmin = cfg.r_min();
    Tensor total;
    for (double r : cfg.ratios) {
        const PruneMask mask = topk_mask_gt(y, r);
        std::vector<double> m(mask.bits.begin(), mask.bits.end());
        Tensor target = Tensor::from_data(y.shape(), std::move(m));
        // BCE(sigma(z), t) == softplus(z) - z*t, elementwise, in stable form
        Tensor bce = mean(sub(softplus(logits), mul(logits, target)));
        Tensor term = scale(bce, std::pow(rmin / r, cfg.gamma));
        total = total.defined() ? add(total, term) : term;
    }
    return total;
}

Tensor loss_mse(const Tensor& logits, const ScoreTensor& y, double s_max,
                const LossConfig& cfg) {
    PKV_CHECK_SHAPE(logits.shape() == y.shape(), "loss_mse shapes differ: ",
                    shape_str(logits.shape()), " vs ", shape_str(y.shape()));
    std::vector<double> w(y.data().size());
    for (size_t i = 0; i < w.size(); ++i) {
        w[i] = std::pow(y.data()[i] + cfg.epsilon, cfg.mse_exponent);
    }
    Tensor weights = Tensor::from_data(y.shape(), std::move(w));
    Tensor magnitude = dual_heads(logits, s_max).second;
    Tensor diff = sub(magnitude, y);
    return mean(mul(weights, mul(diff, diff)));
}

namespace {

struct PairList {
    std::vector<int64_t> idx_i, idx_j;
    std::vector<double> dy;      // y_i - y_j
    std::vector<double> w_norm;  // |y_norm_i - y_norm_j| (global only)
    int64_t filtered = 0;
};

// Candidate pairs within the Top-K set of every slice, capped per slice by
// uniform sampling without replacement, then filtered by the 1%-of-max rule.
PairList fine_pairs(const ScoreTensor& y, const LossConfig& cfg, uint64_t seed) {
    const int64_t n = y.shape().back();
    const int64_t slices = y.numel() / n;
    const int64_t k = retention_count(cfg.topk_ratio_for_rank, n);
    PairList out;
    for (int64_t s = 0; s < slices; ++s) {
        const double* row = y.data().data() + s * n;
        auto top = topk_indices(row, n, k);
        std::sort(top.begin(), top.end());
        std::vector<std::pair<int64_t, int64_t>> cand;
        cand.reserve(static_cast<size_t>(k * (k - 1) / 2));
        for (size_t a = 0; a < top.size(); ++a) {
            for (size_t b = a + 1; b < top.size(); ++b) {
                cand.emplace_back(top[a], top[b]);
            }
        }
        if (static_cast<int64_t>(cand.size()) > cfg.max_pairs) {
            Rng rng(derive_seed(derive_seed(seed, kFineStream), static_cast<uint64_t>(s)));
            for (int64_t i = 0; i < cfg.max_pairs; ++i) {
                const int64_t j =
                    i + static_cast<int64_t>(rng.below(static_cast<uint64_t>(cand.size() - i)));
                std::swap(cand[static_cast<size_t>(i)], cand[static_cast<size_t>(j)]);
            }
            cand.resize(static_cast<size_t>(cfg.max_pairs));
        }
        double row_max = row[0];
        for (int64_t i = 1; i < n; ++i) {
            row_max = std::max(row_max, row[i]);
        }
        const double threshold = cfg.pair_filter_frac * row_max;
        for (auto [a, b] : cand) {
            const double d = row[a] - row[b];
            if (std::abs(d) < threshold) {
                ++out.filtered;
                continue;
            }
            out.idx_i.push_back(s * n + a);
            out.idx_j.push_back(s * n + b);
            out.dy.push_back(d);
        }
    }
    return out;
}

// (Top-K, complement) cross pairs per slice with the same cap and filter.
PairList global_pairs(const ScoreTensor& y, const LossConfig& cfg, uint64_t seed) {
    const int64_t n = y.shape().back();
    const int64_t slices = y.numel() / n;
    const int64_t k = retention_count(cfg.topk_ratio_for_rank, n);
    PairList out;
    if (k >= n) {
        return out;  // complement empty
    }
    for (int64_t s = 0; s < slices; ++s) {
        const double* row = y.data().data() + s * n;
        auto top = topk_indices(row, n, k);
        std::sort(top.begin(), top.end());
        std::vector<uint8_t> in_top(static_cast<size_t>(n), 0);
        for (int64_t i : top) {
            in_top[static_cast<size_t>(i)] = 1;
        }
        std::vector<int64_t> rest;
        rest.reserve(static_cast<size_t>(n - k));
        for (int64_t i = 0; i < n; ++i) {
            if (!in_top[static_cast<size_t>(i)]) {
                rest.push_back(i);
            }
        }
        double row_max = row[0];
        double row_min = row[0];
        for (int64_t i = 1; i < n; ++i) {
            row_max = std::max(row_max, row[i]);
            row_min = std::min(row_min, row[i]);
        }
        const double span = row_max - row_min;
        const double threshold = cfg.pair_filter_frac * row_max;
        auto norm = [&](double v) { return span > 0.0 ? (v - row_min) / span : 0.0; };

        const int64_t total = static_cast<int64_t>(top.size()) *
                              static_cast<int64_t>(rest.size());
        auto emit = [&](int64_t a, int64_t b) {
            const double d = row[a] - row[b];
            if (std::abs(d) < threshold) {
                ++out.filtered;
                return;
            }
            out.idx_i.push_back(s * n + a);
            out.idx_j.push_back(s * n + b);
            out.dy.push_back(d);
            out.w_norm.push_back(std::abs(norm(row[a]) - norm(row[b])));
        };
        if (total <= cfg.max_pairs) {
            for (int64_t a : top) {
                for (int64_t b : rest) {
                    emit(a, b);
                }
            }
        } else {
            // Floyd's sampling of distinct pair ranks over [0, total); rank r
            // maps to (top[r / |rest|], rest[r % |rest|]).
            Rng rng(derive_seed(derive_seed(seed, kGlobalStream), static_cast<uint64_t>(s)));
            std::unordered_set<int64_t> chosen;
            chosen.reserve(static_cast<size_t>(cfg.max_pairs) * 2);
            for (int64_t i = total - cfg.max_pairs; i < total; ++i) {
                const int64_t r = static_cast<int64_t>(rng.below(static_cast<uint64_t>(i + 1)));
                chosen.insert(chosen.count(r) ? i : r);
            }
            std::vector<int64_t> ranks(chosen.begin(), chosen.end());
            std::sort(ranks.begin(), ranks.end());
            const int64_t m = static_cast<int64_t>(rest.size());
            for (int64_t r : ranks) {
                emit(top[static_cast<size_t>(r / m)], rest[static_cast<size_t>(r % m)]);
            }
        }
    }
    return out;
}

}  // namespace

Tensor loss_fine(const Tensor& logits, const ScoreTensor& y, const LossConfig& cfg,
                 uint64_t seed, PairCounts* counts) {
    PKV_CHECK_SHAPE(logits.shape() == y.shape(), "loss_fine shapes differ: ",
                    shape_str(logits.shape()), " vs ", shape_str(y.shape()));
    PairList pairs = fine_pairs(y, cfg, seed);
    const int64_t used = static_cast<int64_t>(pairs.idx_i.size());
    if (counts) {
        counts->filtered = pairs.filtered;
    }
    if (used < 2) {
        if (counts) {
            counts->used = 0;
        }
        return Tensor::scalar(0.0);
    }
    double mean_abs = 0.0;
    for (double d : pairs.dy) {
        mean_abs += std::abs(d);
    }
    mean_abs /= static_cast<double>(used);
    if (mean_abs <= 0.0) {
        if (counts) {
            counts->used = 0;
        }
        return Tensor::scalar(0.0);
    }
    if (counts) {
        counts->used = used;
    }
    std::vector<double> neg_sign(static_cast<size_t>(used));
    std::vector<double> weight(static_cast<size_t>(used));
    for (int64_t p = 0; p < used; ++p) {
        const double d = pairs.dy[static_cast<size_t>(p)];
        neg_sign[static_cast<size_t>(p)] = d > 0.0 ? -1.0 : (d < 0.0 ? 1.0 : 0.0);
        weight[static_cast<size_t>(p)] = std::abs(d) / mean_abs;
    }
    Tensor zi = take(logits, pairs.idx_i);
    Tensor zj = take(logits, pairs.idx_j);
    Tensor arg = mul(sub(zi, zj), Tensor::from_data({used}, std::move(neg_sign)));
    Tensor per_pair = mul(softplus(arg), Tensor::from_data({used}, std::move(weight)));
    return mean(per_pair);
}

Tensor loss_global(const Tensor& logits, const ScoreTensor& y, const LossConfig& cfg,
                   uint64_t seed, PairCounts* counts) {
    PKV_CHECK_SHAPE(logits.shape() == y.shape(), "loss_global shapes differ: ",
                    shape_str(logits.shape()), " vs ", shape_str(y.shape()));
    PairList pairs = global_pairs(y, cfg, seed);
    const int64_t used = static_cast<int64_t>(pairs.idx_i.size());
    if (counts) {
        counts->filtered = pairs.filtered;
    }
    if (used == 0) {
        if (counts) {
            counts->used = 0;
        }
        return Tensor::scalar(0.0);
    }
    if (counts) {
        counts->used = used;
    }
    std::vector<double> weight(static_cast<size_t>(used));
    for (int64_t p = 0; p < used; ++p) {
        weight[static_cast<size_t>(p)] =
            std::clamp(1.0 + pairs.w_norm[static_cast<size_t>(p)], cfg.clip_lo, cfg.clip_hi);
    }
    Tensor zi = take(logits, pairs.idx_i);
    Tensor zj = take(logits, pairs.idx_j);
    Tensor hinge = relu(add_scalar(neg(sub(zi, zj)), cfg.margin));
    return mean(mul(hinge, Tensor::from_data({used}, std::move(weight))));
}

Tensor loss_cos(const Tensor& pred, const Tensor& target, int64_t* floor_hits) {
    PKV_CHECK_SHAPE(pred.shape() == target.shape(), "loss_cos shapes differ: ",
                    shape_str(pred.shape()), " vs ", shape_str(target.shape()));
    const int64_t batch = pred.dim() >= 2 ? pred.size(0) : 1;
    const int64_t m = pred.numel() / batch;
    Tensor acc;
    for (int64_t b = 0; b < batch; ++b) {
        Tensor pb = pred.dim() >= 2 ? reshape(slice(pred, 0, b, 1), {m}) : pred;
        Tensor tb = target.dim() >= 2 ? reshape(slice(target, 0, b, 1), {m}) : target;
        double t_norm_sq = 0.0;
        for (double v : tb.data()) {
            t_norm_sq += v * v;
        }
        double p_norm_sq = 0.0;
        for (double v : pb.data()) {
            p_norm_sq += v * v;
        }
        const double t_norm = std::sqrt(t_norm_sq);
        if (floor_hits && t_norm < kNormFloor) {
            ++*floor_hits;
        }
        if (floor_hits && std::sqrt(p_norm_sq) < kNormFloor) {
            ++*floor_hits;
        }
        Tensor dot = sum(mul(pb, tb));
        Tensor p_norm = clamp_min(sqrt(sum(mul(pb, pb))), kNormFloor);
        Tensor cos_b = div(dot, scale(p_norm, std::max(t_norm, kNormFloor)));
        Tensor term = add_scalar(neg(cos_b), 1.0);
        acc = acc.defined() ? add(acc, term) : term;
    }
    return scale(acc, 1.0 / static_cast<double>(batch));
}

LossReport loss_total(const Tensor& logits, const ScoreTensor& y, const LossConfig& cfg,
                      uint64_t seed) {
    PKV_CHECK_SHAPE(logits.shape() == y.shape(), "loss_total shapes differ: ",
                    shape_str(logits.shape()), " vs ", shape_str(y.shape()));
    cfg.validate();
    LossReport report;
    report.s_max = vmax(y);
    PKV_CHECK_VALUE(report.s_max > 0.0,
                    "degenerate oracle: batch ground-truth maximum must be positive, got ",
                    report.s_max);

    Tensor bin = loss_bin(logits, y, cfg);
    Tensor mse = loss_mse(logits, y, report.s_max, cfg);
    Tensor fine = loss_fine(logits, y, cfg, seed, &report.fine_pairs);
    Tensor global = loss_global(logits, y, cfg, seed, &report.global_pairs);
    Tensor magnitude = dual_heads(logits, report.s_max).second;
    Tensor cos = loss_cos(magnitude, y, &report.cos_floor_hits);

    report.bin = bin.item();
    report.mse = mse.item();
    report.fine = fine.item();
    report.global = global.item();
    report.cos = cos.item();
    report.weighted_bin = cfg.lambda_bin * report.bin;
    report.weighted_mse = cfg.lambda_mse * report.mse;
    report.weighted_fine = cfg.lambda_fine * report.fine;
    report.weighted_global = cfg.lambda_global * report.global;
    report.weighted_cos = cfg.lambda_cos * report.cos;

    Tensor total;
    auto accumulate = [&total](const Tensor& term, double lambda) {
        if (lambda == 0.0) {
            return;  // exact removal for leave-one-out ablations
        }
        Tensor weighted = scale(term, lambda);
        total = total.defined() ? add(total, weighted) : weighted;
    };
    accumulate(bin, cfg.lambda_bin);
    accumulate(mse, cfg.lambda_mse);
    accumulate(fine, cfg.lambda_fine);
    accumulate(global, cfg.lambda_global);
    accumulate(cos, cfg.lambda_cos);

    if (total.defined()) {
        report.total = total.item();
        report.total_tensor = total;
    } else {
        report.total = 0.0;
    }
    return report;
}

}  // namespace proxykv
