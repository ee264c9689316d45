// Copyright (C) 2026 ProxyKV Contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "proxykv/ops.hpp"
#include "proxykv/tensor.hpp"

namespace proxykv {

struct ModelGeometry {
    int64_t target_layers = 32;
    int64_t target_heads = 32;
    int64_t proxy_layers = 16;
    int64_t proxy_heads = 32;
    int64_t head_dim = 128;  // attention head width of the underlying LLM

    void validate() const;
    bool operator==(const ModelGeometry&) const = default;
};

// Stage behavior for component leave-one-out runs. Bypass replaces the conv
// stem with a learned 1x1 projection, the time encoder with a global-mean
// broadcast add, and the cross-attention with a mean over synthetic heads.
enum class StageMode { kActive, kBypass };

StageMode stage_mode_from_string(const std::string& s);
std::string to_string(StageMode mode);

struct MapperConfig {
    int64_t d_time = 512;
    int64_t encoder_layers = 6;
    int64_t encoder_heads = 8;
    int64_t ffn_mult = 4;
    int64_t d_head = 64;
    int64_t crop_len = 2048;
    int64_t stride = 1024;
    int64_t synthetic_heads = 0;  // 0: use the proxy head count
    StageMode stage_conv = StageMode::kActive;
    StageMode stage_encoder = StageMode::kActive;
    StageMode stage_cross = StageMode::kActive;
    bool normalize_input = false;

    void validate() const;
    int64_t conv_mid() const { return d_time / 2 > 0 ? d_time / 2 : 1; }
    int64_t synthetic_head_count(const ModelGeometry& geom) const {
        return synthetic_heads > 0 ? synthetic_heads : geom.proxy_heads;
    }
    bool operator==(const MapperConfig&) const = default;
};

// Depth-proportional pairing: target layer (1-based) -> proxy layer.
int64_t layer_pair(int64_t target_layer, const ModelGeometry& geom);

// Interleaved sin/cos positional encoding with base 10000, shape [n, d_time].
Tensor sinusoidal_pe(int64_t n, int64_t d_time);

// Sliding-window placement: start offsets of length-`crop` windows covering
// [0, n) at the given stride, with the final window right-aligned.
std::vector<int64_t> window_offsets(int64_t n, int64_t crop, int64_t stride);

struct EncoderBlockParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
    Tensor ffn1_w, ffn1_b, ffn2_w, ffn2_b;
};

struct MapperParams {
    ModelGeometry geometry;
    MapperConfig config;

    // Stage 1: conv stem (active) or 1x1 projection (bypass).
    Tensor conv1_w, conv1_b, bn1_g, bn1_b;
    Tensor conv2_w, conv2_b, bn2_g, bn2_b;
    BatchNormState bn1_state, bn2_state;
    Tensor bypass_w, bypass_b;

    // Stage 2: pre-norm encoder blocks.
    std::vector<EncoderBlockParams> blocks;

    // Stage 3: latent keys/values, target query bank, output projection.
    Tensor key_w, key_b, value_w, value_b;
    Tensor target_queries;  // the only H_l-dependent tensor
    Tensor out_w, out_b;

    // Magnitude-head scale captured from the last training batch.
    double s_max = 1.0;

    static MapperParams init(const ModelGeometry& geom, const MapperConfig& config,
                             uint64_t seed);

    std::vector<std::pair<std::string, Tensor>> named_parameters();
    std::vector<std::pair<std::string, Tensor>> named_buffers();
    void set_trainable(bool trainable);
};

struct ParamCensus {
    int64_t conv_stem = 0;
    int64_t encoder = 0;
    int64_t cross_attention = 0;
    int64_t total() const { return conv_stem + encoder + cross_attention; }
};

ParamCensus param_census(MapperParams& params);

// Optional inspection of the Stage-3 attention, [B, N, H_l, H_syn].
struct StageTrace {
    Tensor cross_attention;
};

// One layer pair: x [B, H_s, N] -> raw logits [B, H_l, N]. Requires
// N <= crop_len; longer inputs go through sliding_forward.
Tensor forward_pair(const Tensor& x, MapperParams& params, bool training,
                    StageTrace* trace = nullptr);

// Overlap-averaged windows, eval mode. Identical to forward_pair when the
// input fits a single window.
Tensor sliding_forward(const Tensor& x, MapperParams& params);

// All layer pairs: x_all [B, L_s, H_s, N] -> [B, L_l, H_l, N], eval mode.
Tensor forward_full(const Tensor& x_all, MapperParams& params);

}  // namespace proxykv
