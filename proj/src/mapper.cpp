// Copyright (C) 2026 ProxyKV Contributors
// SPDX-License-Identifier: Apache-2.0

#include "proxykv/mapper.hpp"

#include <cmath>

#include "proxykv/common.hpp"
#include "proxykv/rng.hpp"

namespace proxykv {

void ModelGeometry::validate() const {
    PKV_CHECK_VALUE(target_layers > 0 && target_heads > 0 && proxy_layers > 0 &&
                        proxy_heads > 0 && head_dim > 0,
                    "model geometry extents must be positive");
}

StageMode stage_mode_from_string(const std::string& s) {
    if (s == "active") {
        return StageMode::kActive;
    }
    if (s == "bypass") {
        return StageMode::kBypass;
    }
    throw ConfigError(msg_cat("unknown stage mode '", s, "' (expected active|bypass)"));
}

std::string to_string(StageMode mode) {
    return mode == StageMode::kActive ? "active" : "bypass";
}

void MapperConfig::validate() const {
    PKV_CHECK_VALUE(d_time > 0 && encoder_layers >= 0 && encoder_heads > 0 && ffn_mult > 0 &&
                        d_head > 0 && crop_len > 0 && stride > 0,
                    "mapper config extents must be positive");
    PKV_CHECK_VALUE(stride <= crop_len, "stride ", stride, " must not exceed crop_len ",
                    crop_len);
    PKV_CHECK_VALUE(d_time % encoder_heads == 0, "d_time ", d_time,
                    " must be divisible by encoder_heads ", encoder_heads);
    PKV_CHECK_VALUE(d_time % 2 == 0, "d_time must be even for the positional encoding");
}

int64_t layer_pair(int64_t target_layer, const ModelGeometry& geom) {
    PKV_CHECK_VALUE(target_layer >= 1 && target_layer <= geom.target_layers, "target layer ",
                    target_layer, " out of range [1, ", geom.target_layers, "]");
    // ceil(l_l * L_s / L_l) in exact integer arithmetic
    return (target_layer * geom.proxy_layers + geom.target_layers - 1) / geom.target_layers;
}

Tensor sinusoidal_pe(int64_t n, int64_t d_time) {
    PKV_CHECK_VALUE(d_time > 0 && d_time % 2 == 0, "positional encoding width must be even, got ",
                    d_time);
    std::vector<double> pe(static_cast<size_t>(n * d_time));
    for (int64_t pos = 0; pos < n; ++pos) {
        for (int64_t i = 0; i < d_time / 2; ++i) {
            const double omega =
                std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(d_time));
            pe[static_cast<size_t>(pos * d_time + 2 * i)] = std::sin(pos * omega);
            pe[static_cast<size_t>(pos * d_time + 2 * i + 1)] = std::cos(pos * omega);
        }
    }
    return Tensor::from_data({n, d_time}, std::move(pe));
}

std::vector<int64_t> window_offsets(int64_t n, int64_t crop, int64_t stride) {
    PKV_CHECK_VALUE(n > 0 && crop > 0 && stride > 0, "window parameters must be positive");
    if (n <= crop) {
        return {0};
    }
    std::vector<int64_t> offsets;
    for (int64_t off = 0; off + crop <= n; off += stride) {
        offsets.push_back(off);
    }
    if (offsets.back() + crop < n) {
        offsets.push_back(n - crop);  // right-aligned tail window
    }
    return offsets;
}

namespace {

Tensor uniform_init(Shape shape, double bound, Rng& rng) {
    std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
    for (auto& v : data) {
        v = rng.uniform(-bound, bound);
    }
    return Tensor::from_data(std::move(shape), std::move(data), true);
}

Tensor linear_init(int64_t fan_in, Shape shape, Rng& rng) {
    return uniform_init(std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

}  // namespace

MapperParams MapperParams::init(const ModelGeometry& geom, const MapperConfig& config,
                                uint64_t seed) {
    geom.validate();
    config.validate();
    MapperParams p;
    p.geometry = geom;
    p.config = config;
    Rng rng(derive_seed(seed, 0x6d617070ull));  // independent init stream

    const int64_t hs = geom.proxy_heads;
    const int64_t dt = config.d_time;
    const int64_t mid = config.conv_mid();
    if (config.stage_conv == StageMode::kActive) {
        p.conv1_w = linear_init(hs * 3, {mid, hs, 3}, rng);
        p.conv1_b = linear_init(hs * 3, {mid}, rng);
        p.bn1_g = Tensor::full({mid}, 1.0, true);
        p.bn1_b = Tensor::zeros({mid}, true);
        p.bn1_state = BatchNormState::fresh(mid);
        p.conv2_w = linear_init(mid * 3, {dt, mid, 3}, rng);
        p.conv2_b = linear_init(mid * 3, {dt}, rng);
        p.bn2_g = Tensor::full({dt}, 1.0, true);
        p.bn2_b = Tensor::zeros({dt}, true);
        p.bn2_state = BatchNormState::fresh(dt);
    } else {
        p.bypass_w = linear_init(hs, {dt, hs, 1}, rng);
        p.bypass_b = linear_init(hs, {dt}, rng);
    }

    if (config.stage_encoder == StageMode::kActive) {
        p.blocks.resize(static_cast<size_t>(config.encoder_layers));
        const int64_t ffn = config.ffn_mult * dt;
        for (auto& blk : p.blocks) {
            blk.wq = linear_init(dt, {dt, dt}, rng);
            blk.bq = linear_init(dt, {dt}, rng);
            blk.wk = linear_init(dt, {dt, dt}, rng);
            blk.bk = linear_init(dt, {dt}, rng);
            blk.wv = linear_init(dt, {dt, dt}, rng);
            blk.bv = linear_init(dt, {dt}, rng);
            blk.wo = linear_init(dt, {dt, dt}, rng);
            blk.bo = linear_init(dt, {dt}, rng);
            blk.ln1_g = Tensor::full({dt}, 1.0, true);
            blk.ln1_b = Tensor::zeros({dt}, true);
            blk.ln2_g = Tensor::full({dt}, 1.0, true);
            blk.ln2_b = Tensor::zeros({dt}, true);
            blk.ffn1_w = linear_init(dt, {dt, ffn}, rng);
            blk.ffn1_b = linear_init(dt, {ffn}, rng);
            blk.ffn2_w = linear_init(ffn, {ffn, dt}, rng);
            blk.ffn2_b = linear_init(ffn, {dt}, rng);
        }
    }

    const int64_t syn = config.synthetic_head_count(geom);
    const int64_t dh = config.d_head;
    if (config.stage_cross == StageMode::kActive) {
        p.key_w = linear_init(dt, {dt, syn * dh}, rng);
        p.key_b = linear_init(dt, {syn * dh}, rng);
        std::vector<double> q(static_cast<size_t>(geom.target_heads * dh));
        for (auto& v : q) {
            v = rng.normal() / std::sqrt(static_cast<double>(dh));
        }
        p.target_queries = Tensor::from_data({geom.target_heads, dh}, std::move(q), true);
    }
    p.value_w = linear_init(dt, {dt, syn * dh}, rng);
    p.value_b = linear_init(dt, {syn * dh}, rng);
    p.out_w = linear_init(dh, {dh, 1}, rng);
    p.out_b = linear_init(dh, {1}, rng);
    return p;
}

std::vector<std::pair<std::string, Tensor>> MapperParams::named_parameters() {
    std::vector<std::pair<std::string, Tensor>> out;
    auto push = [&out](const std::string& name, const Tensor& t) {
        if (t.defined()) {
            out.emplace_back(name, t);
        }
    };
    push("stem.conv1.w", conv1_w);
    push("stem.conv1.b", conv1_b);
    push("stem.bn1.gamma", bn1_g);
    push("stem.bn1.beta", bn1_b);
    push("stem.conv2.w", conv2_w);
    push("stem.conv2.b", conv2_b);
    push("stem.bn2.gamma", bn2_g);
    push("stem.bn2.beta", bn2_b);
    push("stem.bypass.w", bypass_w);
    push("stem.bypass.b", bypass_b);
    for (size_t i = 0; i < blocks.size(); ++i) {
        const std::string prefix = "encoder." + std::to_string(i) + ".";
        auto& blk = blocks[i];
        push(prefix + "attn.wq", blk.wq);
        push(prefix + "attn.bq", blk.bq);
        push(prefix + "attn.wk", blk.wk);
        push(prefix + "attn.bk", blk.bk);
        push(prefix + "attn.wv", blk.wv);
        push(prefix + "attn.bv", blk.bv);
        push(prefix + "attn.wo", blk.wo);
        push(prefix + "attn.bo", blk.bo);
        push(prefix + "ln1.gamma", blk.ln1_g);
        push(prefix + "ln1.beta", blk.ln1_b);
        push(prefix + "ln2.gamma", blk.ln2_g);
        push(prefix + "ln2.beta", blk.ln2_b);
        push(prefix + "ffn1.w", blk.ffn1_w);
        push(prefix + "ffn1.b", blk.ffn1_b);
        push(prefix + "ffn2.w", blk.ffn2_w);
        push(prefix + "ffn2.b", blk.ffn2_b);
    }
    push("cross.key.w", key_w);
    push("cross.key.b", key_b);
    push("cross.value.w", value_w);
    push("cross.value.b", value_b);
    push("cross.queries", target_queries);
    push("cross.out.w", out_w);
    push("cross.out.b", out_b);
    return out;
}

std::vector<std::pair<std::string, Tensor>> MapperParams::named_buffers() {
    std::vector<std::pair<std::string, Tensor>> out;
    auto push = [&out](const std::string& name, const Tensor& t) {
        if (t.defined()) {
            out.emplace_back(name, t);
        }
    };
    push("stem.bn1.running_mean", bn1_state.running_mean);
    push("stem.bn1.running_var", bn1_state.running_var);
    push("stem.bn2.running_mean", bn2_state.running_mean);
    push("stem.bn2.running_var", bn2_state.running_var);
    return out;
}

void MapperParams::set_trainable(bool trainable) {
    for (auto& [name, t] : named_parameters()) {
        t.set_requires_grad(trainable);
    }
}

ParamCensus param_census(MapperParams& params) {
    ParamCensus census;
    for (auto& [name, t] : params.named_parameters()) {
        if (name.rfind("stem.", 0) == 0) {
            census.conv_stem += t.numel();
        } else if (name.rfind("encoder.", 0) == 0) {
            census.encoder += t.numel();
        } else {
            census.cross_attention += t.numel();
        }
    }
    return census;
}

namespace {

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add(matmul(x, w), b);
}

// Self-attention with enc_heads heads over [B, N, D].
Tensor encoder_attention(const Tensor& h, const EncoderBlockParams& blk, int64_t heads) {
    const int64_t b = h.size(0);
    const int64_t n = h.size(1);
    const int64_t d = h.size(2);
    const int64_t dh = d / heads;
    auto split = [&](const Tensor& t) {
        return transpose(reshape(t, {b, n, heads, dh}), {0, 2, 1, 3});
    };
    Tensor q = split(linear(h, blk.wq, blk.bq));
    Tensor k = split(linear(h, blk.wk, blk.bk));
    Tensor v = split(linear(h, blk.wv, blk.bv));
    Tensor scores = scale(matmul(q, transpose(k, {0, 1, 3, 2})),
                          1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor attn = softmax(scores, 3);
    Tensor ctx = reshape(transpose(matmul(attn, v), {0, 2, 1, 3}), {b, n, d});
    return linear(ctx, blk.wo, blk.bo);
}

}  // namespace

Tensor forward_pair(const Tensor& x, MapperParams& params, bool training, StageTrace* trace) {
    const ModelGeometry& geom = params.geometry;
    const MapperConfig& cfg = params.config;
    PKV_CHECK_SHAPE(x.dim() == 3, "forward_pair input must be [B, H_s, N], got ",
                    shape_str(x.shape()));
    PKV_CHECK_SHAPE(x.size(1) == geom.proxy_heads, "input has ", x.size(1),
                    " proxy heads, geometry expects ", geom.proxy_heads);
    PKV_CHECK_VALUE(x.size(2) <= cfg.crop_len, "input length ", x.size(2), " exceeds crop_len ",
                    cfg.crop_len, "; long inputs go through sliding_forward");

    const int64_t b = x.size(0);
    const int64_t n = x.size(2);

    Tensor in = x;
    if (cfg.normalize_input) {
        // per-(batch, head) rescale to mean 1 over the token axis
        Tensor m = clamp_min(mean(in, 2, true), 1e-12);
        in = div(in, m);
    }

    // Stage 1: temporal feature extraction, [B, H_s, N] -> [B, D_time, N].
    Tensor z;
    if (cfg.stage_conv == StageMode::kActive) {
        z = gelu(batchnorm1d(conv1d(in, params.conv1_w, params.conv1_b, 1), params.bn1_g,
                             params.bn1_b, params.bn1_state, training));
        z = gelu(batchnorm1d(conv1d(z, params.conv2_w, params.conv2_b, 1), params.bn2_g,
                             params.bn2_b, params.bn2_state, training));
    } else {
        z = conv1d(in, params.bypass_w, params.bypass_b, 0);
    }

    // Stage 2: time-axis context, [B, D_time, N] -> [B, N, D_time].
    z = transpose(z, {0, 2, 1});
    if (cfg.stage_encoder == StageMode::kActive) {
        z = add(z, sinusoidal_pe(n, cfg.d_time));
        for (const auto& blk : params.blocks) {
            z = add(z, encoder_attention(layernorm(z, blk.ln1_g, blk.ln1_b), blk,
                                         cfg.encoder_heads));
            Tensor hidden = layernorm(z, blk.ln2_g, blk.ln2_b);
            Tensor ffn = linear(gelu(linear(hidden, blk.ffn1_w, blk.ffn1_b)), blk.ffn2_w,
                                blk.ffn2_b);
            z = add(z, ffn);
        }
    } else {
        z = add(z, mean(z, 1, true));  // position-wise pass-through + global mean
    }

    // Stage 3: head-axis aggregation into target heads.
    const int64_t syn = cfg.synthetic_head_count(geom);
    const int64_t dh = cfg.d_head;
    Tensor values = reshape(linear(z, params.value_w, params.value_b), {b, n, syn, dh});
    Tensor heads;  // [B, N, H_l, dh]
    if (cfg.stage_cross == StageMode::kActive) {
        Tensor keys = reshape(linear(z, params.key_w, params.key_b), {b, n, syn, dh});
        Tensor scores = scale(matmul(params.target_queries, transpose(keys, {0, 1, 3, 2})),
                              1.0 / std::sqrt(static_cast<double>(dh)));
        Tensor attn = softmax(scores, 3);  // [B, N, H_l, syn]
        if (trace) {
            trace->cross_attention = attn;
        }
        heads = matmul(attn, values);
    } else {
        Tensor pooled = mean(values, 2, true);  // [B, N, 1, dh]
        heads = add(pooled, Tensor::zeros({b, n, geom.target_heads, dh}));
    }
    Tensor logits = reshape(linear(heads, params.out_w, params.out_b),
                            {b, n, geom.target_heads});
    return transpose(logits, {0, 2, 1});  // [B, H_l, N]
}

Tensor sliding_forward(const Tensor& x, MapperParams& params) {
    const MapperConfig& cfg = params.config;
    PKV_CHECK_SHAPE(x.dim() == 3, "sliding_forward input must be [B, H_s, N]");
    const int64_t n = x.size(2);
    if (n <= cfg.crop_len) {
        return forward_pair(x, params, false);
    }
    const int64_t b = x.size(0);
    const int64_t hl = params.geometry.target_heads;

    std::vector<double> acc(static_cast<size_t>(b * hl * n), 0.0);
    std::vector<double> counts(static_cast<size_t>(n), 0.0);
    for (int64_t off : window_offsets(n, cfg.crop_len, cfg.stride)) {
        Tensor piece = slice(x, 2, off, cfg.crop_len);
        Tensor logits = forward_pair(piece, params, false);
        const auto& lv = logits.data();
        for (int64_t i = 0; i < b * hl; ++i) {
            const double* src = lv.data() + i * cfg.crop_len;
            double* dst = acc.data() + i * n + off;
            for (int64_t j = 0; j < cfg.crop_len; ++j) {
                dst[j] += src[j];
            }
        }
        for (int64_t j = 0; j < cfg.crop_len; ++j) {
            counts[static_cast<size_t>(off + j)] += 1.0;
        }
    }
    for (int64_t i = 0; i < b * hl; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            acc[static_cast<size_t>(i * n + j)] /= counts[static_cast<size_t>(j)];
        }
    }
    return Tensor::from_data({b, hl, n}, std::move(acc));
}

Tensor forward_full(const Tensor& x_all, MapperParams& params) {
    const ModelGeometry& geom = params.geometry;
    PKV_CHECK_SHAPE(x_all.dim() == 4, "forward_full input must be [B, L_s, H_s, N], got ",
                    shape_str(x_all.shape()));
    PKV_CHECK_SHAPE(x_all.size(1) == geom.proxy_layers, "input has ", x_all.size(1),
                    " proxy layers, geometry expects ", geom.proxy_layers);
    PKV_CHECK_SHAPE(x_all.size(2) == geom.proxy_heads, "input has ", x_all.size(2),
                    " proxy heads, geometry expects ", geom.proxy_heads);
    const int64_t b = x_all.size(0);
    const int64_t n = x_all.size(3);

    std::vector<Tensor> layers;
    layers.reserve(static_cast<size_t>(geom.target_layers));
    for (int64_t ll = 1; ll <= geom.target_layers; ++ll) {
        const int64_t ls = layer_pair(ll, geom);
        Tensor x = reshape(slice(x_all, 1, ls - 1, 1), {b, geom.proxy_heads, n});
        layers.push_back(sliding_forward(x, params));
    }
    return transpose(stack(layers), {1, 0, 2, 3});  // [B, L_l, H_l, N]
}

}  // namespace proxykv
