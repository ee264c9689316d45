// Copyright (C) 2026 ProxyKV Contributors
// SPDX-License-Identifier: Apache-2.0

#include "proxykv/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <utility>

#include "proxykv/common.hpp"

namespace proxykv {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

// Walks the flat indices of `out` together with broadcast-aware offsets into
// two operands whose strides carry 0 on broadcast axes.
template <typename F>
void for_each_offset(const Shape& out,
                     const std::vector<int64_t>& sa,
                     const std::vector<int64_t>& sb,
                     F&& f) {
    const int64_t n = shape_numel(out);
    const int64_t rank = static_cast<int64_t>(out.size());
    std::vector<int64_t> coord(out.size(), 0);
    int64_t ao = 0;
    int64_t bo = 0;
    for (int64_t i = 0; i < n; ++i) {
        f(i, ao, bo);
        for (int64_t ax = rank - 1; ax >= 0; --ax) {
            ++coord[ax];
            ao += sa[ax];
            bo += sb[ax];
            if (coord[ax] < out[ax]) {
                break;
            }
            coord[ax] = 0;
            ao -= sa[ax] * out[ax];
            bo -= sb[ax] * out[ax];
        }
    }
}

struct BinaryPlan {
    Shape out;
    std::vector<int64_t> sa;
    std::vector<int64_t> sb;
    bool same_shape;
};

// Aligns `shape` to `rank` axes and zeroes strides where the extent is 1.
std::vector<int64_t> broadcast_strides(const Shape& shape, const Shape& out) {
    const auto strides = row_major_strides(shape);
    std::vector<int64_t> result(out.size(), 0);
    const size_t pad = out.size() - shape.size();
    for (size_t d = 0; d < shape.size(); ++d) {
        result[pad + d] = (shape[d] == 1 && out[pad + d] != 1) ? 0 : strides[d];
    }
    return result;
}

BinaryPlan plan_binary(const Tensor& a, const Tensor& b) {
    BinaryPlan plan;
    plan.out = broadcast_shapes(a.shape(), b.shape());
    plan.same_shape = a.shape() == b.shape();
    plan.sa = broadcast_strides(a.shape(), plan.out);
    plan.sb = broadcast_strides(b.shape(), plan.out);
    return plan;
}

template <typename Fwd, typename Bwd>
Tensor binary_op(const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
    const BinaryPlan plan = plan_binary(a, b);
    std::vector<double> value(static_cast<size_t>(shape_numel(plan.out)));
    const auto& av = a.data();
    const auto& bv = b.data();
    if (plan.same_shape) {
        for (size_t i = 0; i < value.size(); ++i) {
            value[i] = fwd(av[i], bv[i]);
        }
    } else {
        for_each_offset(plan.out, plan.sa, plan.sb, [&](int64_t i, int64_t ao, int64_t bo) {
            value[static_cast<size_t>(i)] = fwd(av[static_cast<size_t>(ao)], bv[static_cast<size_t>(bo)]);
        });
    }
    return detail::make_result(
        plan.out, std::move(value), {a, b}, [a, b, plan, bwd](TensorNode& node) {
            const bool need_a = a.requires_grad();
            const bool need_b = b.requires_grad();
            const auto& av = a.data();
            const auto& bv = b.data();
            auto* ag = need_a ? a.node()->grad.data() : nullptr;
            auto* bg = need_b ? b.node()->grad.data() : nullptr;
            for_each_offset(plan.out, plan.sa, plan.sb, [&](int64_t i, int64_t ao, int64_t bo) {
                double da = 0.0;
                double db = 0.0;
                bwd(node.grad[static_cast<size_t>(i)], av[static_cast<size_t>(ao)],
                    bv[static_cast<size_t>(bo)], da, db);
                if (need_a) {
                    ag[ao] += da;
                }
                if (need_b) {
                    bg[bo] += db;
                }
            });
        });
}

template <typename Fwd, typename Dfdx>
Tensor unary_op(const Tensor& a, Fwd fwd, Dfdx dfdx) {
    std::vector<double> value(a.data().size());
    const auto& av = a.data();
    for (size_t i = 0; i < value.size(); ++i) {
        value[i] = fwd(av[i]);
    }
    return detail::make_result(a.shape(), std::move(value), {a}, [a, dfdx](TensorNode& node) {
        auto& ag = a.node()->grad;
        const auto& av = a.data();
        for (size_t i = 0; i < node.grad.size(); ++i) {
            ag[i] += node.grad[i] * dfdx(av[i], node.value[i]);
        }
    });
}

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b) {
    const size_t rank = std::max(a.size(), b.size());
    Shape out(rank, 1);
    for (size_t i = 0; i < rank; ++i) {
        const int64_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        const int64_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        PKV_CHECK_SHAPE(ea == eb || ea == 1 || eb == 1, "cannot broadcast shapes ", shape_str(a),
                        " and ", shape_str(b));
        out[i] = std::max(ea, eb);
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, [](double x, double y) { return x + y; },
        [](double g, double, double, double& da, double& db) {
            da = g;
            db = g;
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, [](double x, double y) { return x - y; },
        [](double g, double, double, double& da, double& db) {
            da = g;
            db = -g;
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, [](double x, double y) { return x * y; },
        [](double g, double x, double y, double& da, double& db) {
            da = g * y;
            db = g * x;
        });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, [](double x, double y) { return x / y; },
        [](double g, double x, double y, double& da, double& db) {
            da = g / y;
            db = -g * x / (y * y);
        });
}

Tensor neg(const Tensor& a) {
    return scale(a, -1.0);
}

Tensor scale(const Tensor& a, double c) {
    return unary_op(
        a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
    return unary_op(
        a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::sqrt(x); },
        [](double, double y) { return 0.5 / y; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(
        a,
        [](double x) {
            return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& a) {
    // Exact Gaussian-CDF form.
    return unary_op(
        a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
        [](double x, double) {
            const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
            return cdf + x * pdf;
        });
}

Tensor relu(const Tensor& a) {
    return unary_op(
        a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor softplus(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
        [](double x, double) {
            return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        });
}

Tensor clamp_min(const Tensor& a, double floor) {
    return unary_op(
        a, [floor](double x) { return std::max(x, floor); },
        [floor](double x, double) { return x > floor ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) {
        acc += v;
    }
    return detail::make_result({1}, {acc}, {a}, [a](TensorNode& node) {
        const double g = node.grad[0];
        auto& ag = a.node()->grad;
        for (double& v : ag) {
            v += g;
        }
    });
}

Tensor mean(const Tensor& a) {
    return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum(const Tensor& a, int64_t axis, bool keepdim) {
    const Shape& s = a.shape();
    if (axis < 0) {
        axis += a.dim();
    }
    PKV_CHECK_SHAPE(axis >= 0 && axis < a.dim(), "sum axis ", axis, " out of range for ",
                    shape_str(s));
    Shape out = s;
    if (keepdim) {
        out[static_cast<size_t>(axis)] = 1;
    } else {
        out.erase(out.begin() + axis);
        if (out.empty()) {
            out = {1};
        }
    }
    const int64_t outer = shape_numel(Shape(s.begin(), s.begin() + axis));
    const int64_t extent = s[static_cast<size_t>(axis)];
    const int64_t inner = shape_numel(Shape(s.begin() + axis + 1, s.end()));

    std::vector<double> value(static_cast<size_t>(outer * inner), 0.0);
    const auto& av = a.data();
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t j = 0; j < extent; ++j) {
            const double* src = av.data() + (o * extent + j) * inner;
            double* dst = value.data() + o * inner;
            for (int64_t i = 0; i < inner; ++i) {
                dst[i] += src[i];
            }
        }
    }
    return detail::make_result(out, std::move(value), {a},
                               [a, outer, extent, inner](TensorNode& node) {
                                   auto& ag = a.node()->grad;
                                   for (int64_t o = 0; o < outer; ++o) {
                                       const double* g = node.grad.data() + o * inner;
                                       for (int64_t j = 0; j < extent; ++j) {
                                           double* dst = ag.data() + (o * extent + j) * inner;
                                           for (int64_t i = 0; i < inner; ++i) {
                                               dst[i] += g[i];
                                           }
                                       }
                                   }
                               });
}

Tensor mean(const Tensor& a, int64_t axis, bool keepdim) {
    if (axis < 0) {
        axis += a.dim();
    }
    return scale(sum(a, axis, keepdim), 1.0 / static_cast<double>(a.size(axis)));
}

Tensor reshape(const Tensor& a, Shape shape) {
    PKV_CHECK_SHAPE(shape_numel(shape) == a.numel(), "cannot reshape ", shape_str(a.shape()),
                    " into ", shape_str(shape));
    std::vector<double> value = a.data();
    return detail::make_result(std::move(shape), std::move(value), {a}, [a](TensorNode& node) {
        auto& ag = a.node()->grad;
        for (size_t i = 0; i < node.grad.size(); ++i) {
            ag[i] += node.grad[i];
        }
    });
}

Tensor transpose(const Tensor& a, std::vector<int64_t> perm) {
    const Shape& s = a.shape();
    PKV_CHECK_SHAPE(perm.size() == s.size(), "permutation rank ", perm.size(),
                    " does not match tensor rank ", s.size());
    std::vector<bool> seen(perm.size(), false);
    Shape out(perm.size());
    for (size_t d = 0; d < perm.size(); ++d) {
        PKV_CHECK_SHAPE(perm[d] >= 0 && perm[d] < static_cast<int64_t>(perm.size()) &&
                            !seen[static_cast<size_t>(perm[d])],
                        "invalid axis permutation");
        seen[static_cast<size_t>(perm[d])] = true;
        out[d] = s[static_cast<size_t>(perm[d])];
    }
    const auto in_strides = row_major_strides(s);
    std::vector<int64_t> walk(perm.size());
    for (size_t d = 0; d < perm.size(); ++d) {
        walk[d] = in_strides[static_cast<size_t>(perm[d])];
    }

    std::vector<double> value(a.data().size());
    const auto& av = a.data();
    const std::vector<int64_t> zero(out.size(), 0);
    for_each_offset(out, walk, zero, [&](int64_t i, int64_t ao, int64_t) {
        value[static_cast<size_t>(i)] = av[static_cast<size_t>(ao)];
    });
    return detail::make_result(out, std::move(value), {a}, [a, out, walk, zero](TensorNode& node) {
        auto& ag = a.node()->grad;
        for_each_offset(out, walk, zero, [&](int64_t i, int64_t ao, int64_t) {
            ag[static_cast<size_t>(ao)] += node.grad[static_cast<size_t>(i)];
        });
    });
}

Tensor slice(const Tensor& a, int64_t axis, int64_t start, int64_t length) {
    const Shape& s = a.shape();
    if (axis < 0) {
        axis += a.dim();
    }
    PKV_CHECK_SHAPE(axis >= 0 && axis < a.dim(), "slice axis out of range for ", shape_str(s));
    PKV_CHECK_SHAPE(start >= 0 && length > 0 && start + length <= s[static_cast<size_t>(axis)],
                    "slice [", start, ", ", start + length, ") out of range for axis ", axis,
                    " of ", shape_str(s));
    Shape out = s;
    out[static_cast<size_t>(axis)] = length;

    const auto in_strides = row_major_strides(s);
    const int64_t base = start * in_strides[static_cast<size_t>(axis)];
    const std::vector<int64_t> zero(out.size(), 0);
    std::vector<double> value(static_cast<size_t>(shape_numel(out)));
    const auto& av = a.data();
    for_each_offset(out, in_strides, zero, [&](int64_t i, int64_t ao, int64_t) {
        value[static_cast<size_t>(i)] = av[static_cast<size_t>(base + ao)];
    });
    return detail::make_result(out, std::move(value), {a},
                               [a, out, in_strides, zero, base](TensorNode& node) {
                                   auto& ag = a.node()->grad;
                                   for_each_offset(out, in_strides, zero,
                                                   [&](int64_t i, int64_t ao, int64_t) {
                                                       ag[static_cast<size_t>(base + ao)] +=
                                                           node.grad[static_cast<size_t>(i)];
                                                   });
                               });
}

Tensor concat(const std::vector<Tensor>& parts, int64_t axis) {
    PKV_CHECK_VALUE(!parts.empty(), "concat needs at least one tensor");
    const Shape& first = parts[0].shape();
    if (axis < 0) {
        axis += static_cast<int64_t>(first.size());
    }
    PKV_CHECK_SHAPE(axis >= 0 && axis < static_cast<int64_t>(first.size()),
                    "concat axis out of range");
    Shape out = first;
    int64_t total = 0;
    for (const Tensor& p : parts) {
        PKV_CHECK_SHAPE(p.dim() == static_cast<int64_t>(first.size()),
                        "concat rank mismatch");
        for (int64_t d = 0; d < p.dim(); ++d) {
            PKV_CHECK_SHAPE(d == axis || p.shape()[static_cast<size_t>(d)] == first[static_cast<size_t>(d)],
                            "concat shape mismatch: ", shape_str(p.shape()), " vs ",
                            shape_str(first));
        }
        total += p.size(axis);
    }
    out[static_cast<size_t>(axis)] = total;

    const int64_t outer = shape_numel(Shape(out.begin(), out.begin() + axis));
    const int64_t inner = shape_numel(Shape(out.begin() + axis + 1, out.end()));
    std::vector<double> value(static_cast<size_t>(shape_numel(out)));
    std::vector<int64_t> offsets(parts.size());
    int64_t off = 0;
    for (size_t p = 0; p < parts.size(); ++p) {
        offsets[p] = off;
        const int64_t extent = parts[p].size(axis);
        const auto& pv = parts[p].data();
        for (int64_t o = 0; o < outer; ++o) {
            std::copy(pv.data() + o * extent * inner, pv.data() + (o + 1) * extent * inner,
                      value.data() + (o * total + off) * inner);
        }
        off += extent;
    }
    return detail::make_result(
        out, std::move(value), parts, [parts, offsets, outer, inner, total, axis](TensorNode& node) {
            for (size_t p = 0; p < parts.size(); ++p) {
                if (!parts[p].requires_grad()) {
                    continue;
                }
                auto& pg = parts[p].node()->grad;
                const int64_t extent = parts[p].size(axis);
                for (int64_t o = 0; o < outer; ++o) {
                    const double* src = node.grad.data() + (o * total + offsets[p]) * inner;
                    double* dst = pg.data() + o * extent * inner;
                    for (int64_t i = 0; i < extent * inner; ++i) {
                        dst[i] += src[i];
                    }
                }
            }
        });
}

Tensor stack(const std::vector<Tensor>& parts) {
    PKV_CHECK_VALUE(!parts.empty(), "stack needs at least one tensor");
    std::vector<Tensor> reshaped;
    reshaped.reserve(parts.size());
    for (const Tensor& p : parts) {
        Shape s = p.shape();
        s.insert(s.begin(), 1);
        reshaped.push_back(reshape(p, s));
    }
    return concat(reshaped, 0);
}

Tensor take(const Tensor& a, std::vector<int64_t> flat_indices) {
    const int64_t n = a.numel();
    for (int64_t idx : flat_indices) {
        PKV_CHECK_SHAPE(idx >= 0 && idx < n, "take index ", idx, " out of range for ", n,
                        " elements");
    }
    std::vector<double> value(flat_indices.size());
    const auto& av = a.data();
    for (size_t i = 0; i < flat_indices.size(); ++i) {
        value[i] = av[static_cast<size_t>(flat_indices[i])];
    }
    const Shape out = {static_cast<int64_t>(flat_indices.size())};
    return detail::make_result(out, std::move(value), {a},
                               [a, idx = std::move(flat_indices)](TensorNode& node) {
                                   auto& ag = a.node()->grad;
                                   for (size_t i = 0; i < idx.size(); ++i) {
                                       ag[static_cast<size_t>(idx[i])] += node.grad[i];
                                   }
                               });
}

namespace {

struct MatmulPlan {
    Shape lead;
    std::vector<int64_t> sa;
    std::vector<int64_t> sb;
    int64_t m = 0, k = 0, n = 0;
    int64_t batches = 1;
};

MatmulPlan plan_matmul(const Tensor& a, const Tensor& b) {
    PKV_CHECK_SHAPE(a.dim() >= 2 && b.dim() >= 2, "matmul needs rank >= 2 operands, got ",
                    shape_str(a.shape()), " and ", shape_str(b.shape()));
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    MatmulPlan plan;
    plan.m = sa[sa.size() - 2];
    plan.k = sa[sa.size() - 1];
    const int64_t kb = sb[sb.size() - 2];
    plan.n = sb[sb.size() - 1];
    PKV_CHECK_SHAPE(plan.k == kb, "matmul inner extents disagree: ", shape_str(sa), " x ",
                    shape_str(sb));
    const Shape lead_a(sa.begin(), sa.end() - 2);
    const Shape lead_b(sb.begin(), sb.end() - 2);
    plan.lead = broadcast_shapes(lead_a, lead_b);
    plan.batches = shape_numel(plan.lead);
    auto sa_lead = broadcast_strides(lead_a, plan.lead);
    auto sb_lead = broadcast_strides(lead_b, plan.lead);
    for (auto& v : sa_lead) {
        v *= plan.m * plan.k;
    }
    for (auto& v : sb_lead) {
        v *= plan.k * plan.n;
    }
    plan.sa = std::move(sa_lead);
    plan.sb = std::move(sb_lead);
    return plan;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    const MatmulPlan plan = plan_matmul(a, b);
    Shape out = plan.lead;
    out.push_back(plan.m);
    out.push_back(plan.n);

    std::vector<double> value(static_cast<size_t>(shape_numel(out)));
    const auto& av = a.data();
    const auto& bv = b.data();
    if (plan.lead.empty()) {
        MapConstMat A(av.data(), plan.m, plan.k);
        MapConstMat B(bv.data(), plan.k, plan.n);
        MapMat C(value.data(), plan.m, plan.n);
        C.noalias() = A * B;
    } else {
        for_each_offset(plan.lead, plan.sa, plan.sb, [&](int64_t i, int64_t ao, int64_t bo) {
            MapConstMat A(av.data() + ao, plan.m, plan.k);
            MapConstMat B(bv.data() + bo, plan.k, plan.n);
            MapMat C(value.data() + i * plan.m * plan.n, plan.m, plan.n);
            C.noalias() = A * B;
        });
    }

    return detail::make_result(out, std::move(value), {a, b}, [a, b, plan](TensorNode& node) {
        const bool need_a = a.requires_grad();
        const bool need_b = b.requires_grad();
        const auto& av = a.data();
        const auto& bv = b.data();
        auto run = [&](int64_t i, int64_t ao, int64_t bo) {
            MapConstMat G(node.grad.data() + i * plan.m * plan.n, plan.m, plan.n);
            if (need_a) {
                MapConstMat B(bv.data() + bo, plan.k, plan.n);
                MapMat dA(a.node()->grad.data() + ao, plan.m, plan.k);
                dA.noalias() += G * B.transpose();
            }
            if (need_b) {
                MapConstMat A(av.data() + ao, plan.m, plan.k);
                MapMat dB(b.node()->grad.data() + bo, plan.k, plan.n);
                dB.noalias() += A.transpose() * G;
            }
        };
        if (plan.lead.empty()) {
            run(0, 0, 0);
        } else {
            for_each_offset(plan.lead, plan.sa, plan.sb, run);
        }
    });
}

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, int64_t padding) {
    PKV_CHECK_SHAPE(x.dim() == 3, "conv1d input must be [B, C_in, N], got ", shape_str(x.shape()));
    PKV_CHECK_SHAPE(w.dim() == 3, "conv1d kernel must be [C_out, C_in, k], got ",
                    shape_str(w.shape()));
    PKV_CHECK_SHAPE(bias.dim() == 1, "conv1d bias must be [C_out]");
    const int64_t batch = x.size(0);
    const int64_t c_in = x.size(1);
    const int64_t n = x.size(2);
    const int64_t c_out = w.size(0);
    const int64_t k = w.size(2);
    PKV_CHECK_SHAPE(w.size(1) == c_in, "conv1d channel mismatch: input has C_in=", c_in,
                    " but kernel expects C_in=", w.size(1));
    PKV_CHECK_SHAPE(bias.size(0) == c_out, "conv1d bias length mismatch");
    PKV_CHECK_SHAPE(padding >= 0, "conv1d padding must be nonnegative");
    const int64_t n_out = n + 2 * padding - k + 1;
    PKV_CHECK_SHAPE(n_out >= 1, "conv1d kernel of width ", k, " does not fit input of length ", n,
                    " with padding ", padding);

    // im2col once, shared between forward and backward.
    const int64_t col_rows = c_in * k;
    auto cols = std::make_shared<std::vector<double>>(
        static_cast<size_t>(batch * col_rows * n_out), 0.0);
    const auto& xv = x.data();
    for (int64_t b = 0; b < batch; ++b) {
        double* col = cols->data() + b * col_rows * n_out;
        for (int64_t c = 0; c < c_in; ++c) {
            const double* src = xv.data() + (b * c_in + c) * n;
            for (int64_t t = 0; t < k; ++t) {
                double* dst = col + (c * k + t) * n_out;
                for (int64_t j = 0; j < n_out; ++j) {
                    const int64_t p = j + t - padding;
                    dst[j] = (p >= 0 && p < n) ? src[p] : 0.0;
                }
            }
        }
    }

    std::vector<double> value(static_cast<size_t>(batch * c_out * n_out));
    MapConstMat W(w.data().data(), c_out, col_rows);
    for (int64_t b = 0; b < batch; ++b) {
        MapConstMat col(cols->data() + b * col_rows * n_out, col_rows, n_out);
        MapMat out(value.data() + b * c_out * n_out, c_out, n_out);
        out.noalias() = W * col;
        for (int64_t c = 0; c < c_out; ++c) {
            out.row(c).array() += bias.data()[static_cast<size_t>(c)];
        }
    }

    const Shape out_shape = {batch, c_out, n_out};
    return detail::make_result(
        out_shape, std::move(value), {x, w, bias},
        [x, w, bias, cols, batch, c_in, c_out, k, n, n_out, padding, col_rows](TensorNode& node) {
            const bool need_x = x.requires_grad();
            const bool need_w = w.requires_grad();
            const bool need_b = bias.requires_grad();
            MapConstMat W(w.data().data(), c_out, col_rows);
            RowMat dcol(col_rows, n_out);
            for (int64_t b = 0; b < batch; ++b) {
                MapConstMat G(node.grad.data() + b * c_out * n_out, c_out, n_out);
                if (need_w) {
                    MapConstMat col(cols->data() + b * col_rows * n_out, col_rows, n_out);
                    MapMat dW(w.node()->grad.data(), c_out, col_rows);
                    dW.noalias() += G * col.transpose();
                }
                if (need_b) {
                    for (int64_t c = 0; c < c_out; ++c) {
                        bias.node()->grad[static_cast<size_t>(c)] += G.row(c).sum();
                    }
                }
                if (need_x) {
                    dcol.noalias() = W.transpose() * G;
                    double* dx = x.node()->grad.data() + b * c_in * n;
                    for (int64_t c = 0; c < c_in; ++c) {
                        for (int64_t t = 0; t < k; ++t) {
                            const double* src = dcol.data() + (c * k + t) * n_out;
                            for (int64_t j = 0; j < n_out; ++j) {
                                const int64_t p = j + t - padding;
                                if (p >= 0 && p < n) {
                                    dx[c * n + p] += src[j];
                                }
                            }
                        }
                    }
                }
            }
        });
}

Tensor softmax(const Tensor& x, int64_t axis) {
    const Shape& s = x.shape();
    if (axis < 0) {
        axis += x.dim();
    }
    PKV_CHECK_SHAPE(axis >= 0 && axis < x.dim(), "softmax axis ", axis, " out of range for ",
                    shape_str(s));
    const int64_t outer = shape_numel(Shape(s.begin(), s.begin() + axis));
    const int64_t extent = s[static_cast<size_t>(axis)];
    const int64_t inner = shape_numel(Shape(s.begin() + axis + 1, s.end()));

    std::vector<double> value(x.data().size());
    const auto& xv = x.data();
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t i = 0; i < inner; ++i) {
            const int64_t base = o * extent * inner + i;
            double mx = -std::numeric_limits<double>::infinity();
            for (int64_t j = 0; j < extent; ++j) {
                mx = std::max(mx, xv[static_cast<size_t>(base + j * inner)]);
            }
            double z = 0.0;
            for (int64_t j = 0; j < extent; ++j) {
                const double e = std::exp(xv[static_cast<size_t>(base + j * inner)] - mx);
                value[static_cast<size_t>(base + j * inner)] = e;
                z += e;
            }
            for (int64_t j = 0; j < extent; ++j) {
                value[static_cast<size_t>(base + j * inner)] /= z;
            }
        }
    }
    return detail::make_result(s, std::move(value), {x},
                               [x, outer, extent, inner](TensorNode& node) {
                                   auto& xg = x.node()->grad;
                                   for (int64_t o = 0; o < outer; ++o) {
                                       for (int64_t i = 0; i < inner; ++i) {
                                           const int64_t base = o * extent * inner + i;
                                           double dot = 0.0;
                                           for (int64_t j = 0; j < extent; ++j) {
                                               const size_t p = static_cast<size_t>(base + j * inner);
                                               dot += node.grad[p] * node.value[p];
                                           }
                                           for (int64_t j = 0; j < extent; ++j) {
                                               const size_t p = static_cast<size_t>(base + j * inner);
                                               xg[p] += node.value[p] * (node.grad[p] - dot);
                                           }
                                       }
                                   }
                               });
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const Shape& s = x.shape();
    const int64_t d = s.back();
    PKV_CHECK_SHAPE(gamma.dim() == 1 && gamma.size(0) == d, "layernorm gamma must be [", d, "]");
    PKV_CHECK_SHAPE(beta.dim() == 1 && beta.size(0) == d, "layernorm beta must be [", d, "]");
    const int64_t rows = x.numel() / d;

    auto xhat = std::make_shared<std::vector<double>>(x.data().size());
    auto inv = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    std::vector<double> value(x.data().size());
    const auto& xv = x.data();
    const auto& gv = gamma.data();
    const auto& bv = beta.data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* row = xv.data() + r * d;
        double mu = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            mu += row[j];
        }
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            const double c = row[j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv)[static_cast<size_t>(r)] = is;
        for (int64_t j = 0; j < d; ++j) {
            const double h = (row[j] - mu) * is;
            (*xhat)[static_cast<size_t>(r * d + j)] = h;
            value[static_cast<size_t>(r * d + j)] = gv[static_cast<size_t>(j)] * h + bv[static_cast<size_t>(j)];
        }
    }
    return detail::make_result(
        s, std::move(value), {x, gamma, beta}, [x, gamma, beta, xhat, inv, rows, d](TensorNode& node) {
            const bool need_x = x.requires_grad();
            const bool need_g = gamma.requires_grad();
            const bool need_b = beta.requires_grad();
            const auto& gv = gamma.data();
            for (int64_t r = 0; r < rows; ++r) {
                const double* g = node.grad.data() + r * d;
                const double* h = xhat->data() + r * d;
                const double is = (*inv)[static_cast<size_t>(r)];
                if (need_g || need_b) {
                    for (int64_t j = 0; j < d; ++j) {
                        if (need_g) {
                            gamma.node()->grad[static_cast<size_t>(j)] += g[j] * h[j];
                        }
                        if (need_b) {
                            beta.node()->grad[static_cast<size_t>(j)] += g[j];
                        }
                    }
                }
                if (need_x) {
                    double mean_gy = 0.0;
                    double mean_gyh = 0.0;
                    for (int64_t j = 0; j < d; ++j) {
                        const double gy = g[j] * gv[static_cast<size_t>(j)];
                        mean_gy += gy;
                        mean_gyh += gy * h[j];
                    }
                    mean_gy /= static_cast<double>(d);
                    mean_gyh /= static_cast<double>(d);
                    double* xg = x.node()->grad.data() + r * d;
                    for (int64_t j = 0; j < d; ++j) {
                        const double gy = g[j] * gv[static_cast<size_t>(j)];
                        xg[j] += is * (gy - mean_gy - h[j] * mean_gyh);
                    }
                }
            }
        });
}

BatchNormState BatchNormState::fresh(int64_t channels) {
    BatchNormState s;
    s.running_mean = Tensor::zeros({channels});
    s.running_var = Tensor::full({channels}, 1.0);
    return s;
}

Tensor batchnorm1d(const Tensor& x,
                   const Tensor& gamma,
                   const Tensor& beta,
                   BatchNormState& state,
                   bool training,
                   double eps,
                   double momentum) {
    PKV_CHECK_SHAPE(x.dim() == 3, "batchnorm1d input must be [B, C, N], got ",
                    shape_str(x.shape()));
    const int64_t batch = x.size(0);
    const int64_t channels = x.size(1);
    const int64_t n = x.size(2);
    PKV_CHECK_SHAPE(gamma.dim() == 1 && gamma.size(0) == channels, "batchnorm gamma must be [",
                    channels, "]");
    PKV_CHECK_SHAPE(beta.dim() == 1 && beta.size(0) == channels, "batchnorm beta must be [",
                    channels, "]");
    const int64_t m = batch * n;

    auto mu = std::make_shared<std::vector<double>>(static_cast<size_t>(channels));
    auto inv = std::make_shared<std::vector<double>>(static_cast<size_t>(channels));
    const auto& xv = x.data();
    if (training) {
        PKV_CHECK_VALUE(m >= 2, "batchnorm1d in train mode needs B*N >= 2 per channel, got ", m);
        for (int64_t c = 0; c < channels; ++c) {
            double s1 = 0.0;
            for (int64_t b = 0; b < batch; ++b) {
                const double* row = xv.data() + (b * channels + c) * n;
                for (int64_t j = 0; j < n; ++j) {
                    s1 += row[j];
                }
            }
            const double mean_c = s1 / static_cast<double>(m);
            double s2 = 0.0;
            for (int64_t b = 0; b < batch; ++b) {
                const double* row = xv.data() + (b * channels + c) * n;
                for (int64_t j = 0; j < n; ++j) {
                    const double d = row[j] - mean_c;
                    s2 += d * d;
                }
            }
            const double var_c = s2 / static_cast<double>(m);
            (*mu)[static_cast<size_t>(c)] = mean_c;
            (*inv)[static_cast<size_t>(c)] = 1.0 / std::sqrt(var_c + eps);
            // EMA update; running variance uses the unbiased estimate.
            auto& rm = state.running_mean.raw_data()[static_cast<size_t>(c)];
            auto& rv = state.running_var.raw_data()[static_cast<size_t>(c)];
            rm = (1.0 - momentum) * rm + momentum * mean_c;
            rv = (1.0 - momentum) * rv +
                 momentum * var_c * static_cast<double>(m) / static_cast<double>(m - 1);
        }
    } else {
        for (int64_t c = 0; c < channels; ++c) {
            (*mu)[static_cast<size_t>(c)] = state.running_mean.data()[static_cast<size_t>(c)];
            (*inv)[static_cast<size_t>(c)] =
                1.0 / std::sqrt(state.running_var.data()[static_cast<size_t>(c)] + eps);
        }
    }

    std::vector<double> value(x.data().size());
    const auto& gv = gamma.data();
    const auto& bv = beta.data();
    for (int64_t b = 0; b < batch; ++b) {
        for (int64_t c = 0; c < channels; ++c) {
            const double* row = xv.data() + (b * channels + c) * n;
            double* out = value.data() + (b * channels + c) * n;
            const double mc = (*mu)[static_cast<size_t>(c)];
            const double ic = (*inv)[static_cast<size_t>(c)];
            const double g = gv[static_cast<size_t>(c)];
            const double be = bv[static_cast<size_t>(c)];
            for (int64_t j = 0; j < n; ++j) {
                out[j] = (row[j] - mc) * ic * g + be;
            }
        }
    }

    return detail::make_result(
        x.shape(), std::move(value), {x, gamma, beta},
        [x, gamma, beta, mu, inv, batch, channels, n, m, training](TensorNode& node) {
            const bool need_x = x.requires_grad();
            const bool need_g = gamma.requires_grad();
            const bool need_b = beta.requires_grad();
            const auto& xv = x.data();
            const auto& gv = gamma.data();
            for (int64_t c = 0; c < channels; ++c) {
                const double mc = (*mu)[static_cast<size_t>(c)];
                const double ic = (*inv)[static_cast<size_t>(c)];
                double dg = 0.0;
                double db = 0.0;
                for (int64_t b = 0; b < batch; ++b) {
                    const double* g = node.grad.data() + (b * channels + c) * n;
                    const double* row = xv.data() + (b * channels + c) * n;
                    for (int64_t j = 0; j < n; ++j) {
                        dg += g[j] * (row[j] - mc) * ic;
                        db += g[j];
                    }
                }
                if (need_g) {
                    gamma.node()->grad[static_cast<size_t>(c)] += dg;
                }
                if (need_b) {
                    beta.node()->grad[static_cast<size_t>(c)] += db;
                }
                if (need_x) {
                    const double gc = gv[static_cast<size_t>(c)];
                    for (int64_t b = 0; b < batch; ++b) {
                        const double* g = node.grad.data() + (b * channels + c) * n;
                        const double* row = xv.data() + (b * channels + c) * n;
                        double* xg = x.node()->grad.data() + (b * channels + c) * n;
                        for (int64_t j = 0; j < n; ++j) {
                            if (training) {
                                const double h = (row[j] - mc) * ic;
                                xg[j] += gc * ic *
                                         (g[j] - db / static_cast<double>(m) -
                                          h * dg / static_cast<double>(m));
                            } else {
                                xg[j] += gc * ic * g[j];
                            }
                        }
                    }
                }
            }
        });
}

double vmax(const Tensor& a) {
    double m = -std::numeric_limits<double>::infinity();
    for (double v : a.data()) {
        m = std::max(m, v);
    }
    return m;
}

double vmin(const Tensor& a) {
    double m = std::numeric_limits<double>::infinity();
    for (double v : a.data()) {
        m = std::min(m, v);
    }
    return m;
}

bool all_finite(const Tensor& a) {
    for (double v : a.data()) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

}  // namespace proxykv
