// SPDX-License-Identifier: Apache-2.0
//
// Adaptive feature alignment (1x1 channel projection + adaptive max pooling
// to a target spatial size) and learnable weighted feature fusion (per-input
// channel gates from pooled statistics, concat, 1x1 merge), plus the plain
// sum/concat fusion baselines the ablations swap in.
#pragma once

#include <vector>

#include "meddet/errors.hpp"
#include "meddet/tensor.hpp"

namespace meddet::fusion {

template <typename T>
struct AlignSpec {
    int in_channels = 0;
    int out_channels = 0;
    int out_h = 0;
    int out_w = 0;
    TensorT<T> conv_weight;  // [out_channels, in_channels, 1, 1]
    TensorT<T> conv_bias;    // [out_channels]
};

// align = adaptive_max_pool(conv1x1(feat)); pooling cannot upsample.
template <typename T>
TensorT<T> afa_apply(const TensorT<T>& feat, const AlignSpec<T>& spec) {
    if (feat.rank() != 4 || feat.dim(1) != spec.in_channels)
        throw ShapeError("afa_apply: feature " + shape_str(feat.shape()) + " vs in_channels " +
                         std::to_string(spec.in_channels));
    if (feat.dim(2) < spec.out_h || feat.dim(3) < spec.out_w)
        throw ShapeError("afa_apply: alignment target " + std::to_string(spec.out_h) + "x" + std::to_string(spec.out_w) +
                         " exceeds input " + std::to_string(feat.dim(2)) + "x" + std::to_string(feat.dim(3)) +
                         " (pooling cannot upsample)");
    TensorT<T> projected = conv2d(feat, spec.conv_weight, spec.conv_bias, 1, 0);
    return adaptive_max_pool(projected, spec.out_h, spec.out_w);
}

// The per-input gate head of the fusion: alpha = sigmoid(conv1x1(global(x))).
template <typename T>
struct WeightHead {
    TensorT<T> conv_weight;  // [C, C, 1, 1]
    TensorT<T> conv_bias;    // [C]
};

template <typename T>
TensorT<T> lwff_weight(const TensorT<T>& feat, const WeightHead<T>& head) {
    TensorT<T> pooled = global_avg_pool(feat);
    TensorT<T> logits = conv2d(pooled, head.conv_weight, head.conv_bias, 1, 0);
    return sigmoid(logits);
}

template <typename T>
struct FusionParams {
    int k = 0;  // number of fused inputs
    std::vector<WeightHead<T>> heads;
    TensorT<T> merge_weight;  // [C, k*C, 1, 1]
    TensorT<T> merge_bias;    // [C]
};

// F'_j = alpha_j(F_j) * F_j; out = conv1x1(cat(F'_1..F'_k)).
template <typename T>
TensorT<T> lwff_fuse(const std::vector<TensorT<T>>& feats, const FusionParams<T>& params) {
    if (static_cast<int>(feats.size()) != params.k || params.k == 0)
        throw ContractError("lwff_fuse: expected " + std::to_string(params.k) + " inputs, got " +
                            std::to_string(feats.size()));
    if (static_cast<int>(params.heads.size()) != params.k)
        throw ContractError("lwff_fuse: fusion params carry " + std::to_string(params.heads.size()) + " weight heads");
    for (const auto& f : feats)
        if (f.shape() != feats[0].shape())
            throw ShapeError("lwff_fuse: input shapes differ: " + shape_str(f.shape()) + " vs " +
                             shape_str(feats[0].shape()));
    std::vector<TensorT<T>> weighted;
    weighted.reserve(feats.size());
    for (size_t j = 0; j < feats.size(); ++j) {
        TensorT<T> alpha = lwff_weight(feats[j], params.heads[j]);
        weighted.push_back(scale_channels(feats[j], alpha));
    }
    TensorT<T> cat = concat_channels(weighted);
    return conv2d(cat, params.merge_weight, params.merge_bias, 1, 0);
}

enum class BaselineFuse { sum, concat };

// Fixed unweighted merge for the concat baseline: each output channel is the
// mean of that channel across the k inputs.
template <typename T>
TensorT<T> concat_mean_merge_weight(int k, int c) {
    std::vector<T> w(static_cast<size_t>(c) * k * c, T(0));
    for (int j = 0; j < k; ++j)
        for (int ch = 0; ch < c; ++ch) w[static_cast<size_t>(ch) * (k * c) + j * c + ch] = T(1) / static_cast<T>(k);
    return TensorT<T>::from({c, k * c, 1, 1}, std::move(w));
}

template <typename T>
TensorT<T> fuse_baselines(const std::vector<TensorT<T>>& feats, BaselineFuse mode) {
    if (feats.empty()) throw ContractError("fuse_baselines: empty input list");
    for (const auto& f : feats)
        if (f.shape() != feats[0].shape())
            throw ShapeError("fuse_baselines: input shapes differ: " + shape_str(f.shape()) + " vs " +
                             shape_str(feats[0].shape()));
    if (mode == BaselineFuse::sum) {
        TensorT<T> acc = feats[0];
        for (size_t j = 1; j < feats.size(); ++j) acc = add(acc, feats[j]);
        return acc;
    }
    const int k = static_cast<int>(feats.size());
    const int c = feats[0].dim(1);
    TensorT<T> cat = concat_channels(feats);
    return conv2d(cat, concat_mean_merge_weight<T>(k, c), TensorT<T>::zeros({c}), 1, 0);
}

}  // namespace meddet::fusion
