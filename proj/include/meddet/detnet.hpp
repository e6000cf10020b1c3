// SPDX-License-Identifier: Apache-2.0
//
// Configurable small detector: plain conv backbone with stride-2 stages, a
// top-down feature pyramid, and a GFL-style head (class logits + discrete
// box-distance distributions) shared across levels. nmODE2 blocks can be
// inserted after the deepest backbone stage, after each pyramid level, or in
// the head towers. Parameter and FLOP counters are analytic.
#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "meddet/boxes.hpp"
#include "meddet/errors.hpp"
#include "meddet/init.hpp"
#include "meddet/losses.hpp"
#include "meddet/nmode.hpp"
#include "meddet/tensor.hpp"

namespace meddet::detnet {

enum class Role { teacher_small, teacher_mid, teacher_large, student };

inline const char* role_name(Role r) {
    switch (r) {
        case Role::teacher_small: return "teacher_small";
        case Role::teacher_mid: return "teacher_mid";
        case Role::teacher_large: return "teacher_large";
        default: return "student";
    }
}

struct Placement {
    bool backbone = false;
    bool fpn = false;
    bool head = false;
    bool any() const { return backbone || fpn || head; }
};

struct NetConfig {
    Role role = Role::student;
    int stem_channels = 8;
    std::vector<int> stage_widths;  // stage j halves resolution; needs pyramid_levels + 1 entries
    int pyramid_levels = 3;         // level k has stride 8 * 2^k
    int pyramid_channels = 10;
    int head_tower_depth = 1;
    int num_classes = 2;
    int reg_bins = 8;
    Placement nmode2_placement{false, false, true};
    nmode::SolverSpec solver = nmode::default_block_solver();

    int stride_of(int level) const { return 8 << level; }
    int max_stride() const { return stride_of(pyramid_levels - 1); }

    void validate() const {
        if (pyramid_levels < 2 || pyramid_levels > 5)
            throw ConfigError(std::string(role_name(role)) + ": pyramid_levels must be in [2,5]");
        if (static_cast<int>(stage_widths.size()) != pyramid_levels + 1)
            throw ConfigError(std::string(role_name(role)) + ": need pyramid_levels+1 stage widths, got " +
                              std::to_string(stage_widths.size()));
        if (stem_channels < 1) throw ConfigError("stem_channels must be >= 1");
        for (int w : stage_widths)
            if (w < 1) throw ConfigError("stage widths must be >= 1");
        if (pyramid_channels < 1 || head_tower_depth < 1)
            throw ConfigError("pyramid_channels and head_tower_depth must be >= 1");
        if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
        if (reg_bins < 1 || reg_bins > 63) throw ConfigError("reg_bins must be in [1,63]");
        solver.steps();
    }
};

// teacher capacities must strictly increase and strictly dominate the student
inline void validate_family(const NetConfig& student, const NetConfig& small, const NetConfig& mid,
                            const NetConfig& large) {
    auto dominated = [](const NetConfig& lo, const NetConfig& hi, const std::string& what) {
        if (lo.stage_widths.size() != hi.stage_widths.size())
            throw ConfigError(what + ": stage counts differ");
        bool strict = lo.stem_channels < hi.stem_channels && lo.pyramid_channels <= hi.pyramid_channels;
        for (size_t i = 0; i < lo.stage_widths.size(); ++i) strict = strict && lo.stage_widths[i] < hi.stage_widths[i];
        if (!strict) throw ConfigError(what + ": widths must strictly increase");
    };
    dominated(student, small, "student vs teacher_small");
    dominated(small, mid, "teacher_small vs teacher_mid");
    dominated(mid, large, "teacher_mid vs teacher_large");
}

template <typename T>
struct ConvLayer {
    TensorT<T> w, b;
    int stride = 1, pad = 1;
};

template <typename T>
using PyramidFeatures = std::vector<TensorT<T>>;

template <typename T>
struct Network {
    NetConfig config;
    ConvLayer<T> stem;
    std::vector<std::array<ConvLayer<T>, 2>> stages;  // [stride-2 down, stride-1 refine]
    nmode::PerceptualMap<T> backbone_block;           // when placement.backbone
    std::vector<ConvLayer<T>> laterals;               // 1x1 per level
    std::vector<ConvLayer<T>> fpn_out;                // 3x3 per level
    std::vector<nmode::PerceptualMap<T>> fpn_blocks;  // when placement.fpn
    std::vector<ConvLayer<T>> cls_tower, reg_tower;   // shared across levels
    nmode::PerceptualMap<T> cls_block, reg_block;     // when placement.head
    ConvLayer<T> cls_pred, reg_pred;

    std::vector<std::pair<std::string, TensorT<T>*>> named_params() {
        std::vector<std::pair<std::string, TensorT<T>*>> out;
        auto conv = [&out](const std::string& name, ConvLayer<T>& c) {
            out.emplace_back(name + ".w", &c.w);
            out.emplace_back(name + ".b", &c.b);
        };
        auto block = [&out](const std::string& name, nmode::PerceptualMap<T>& m) {
            out.emplace_back(name + ".w", &m.weight);
            out.emplace_back(name + ".b", &m.bias);
        };
        conv("stem", stem);
        for (size_t j = 0; j < stages.size(); ++j) {
            conv("stage" + std::to_string(j) + ".down", stages[j][0]);
            conv("stage" + std::to_string(j) + ".refine", stages[j][1]);
        }
        if (config.nmode2_placement.backbone) block("backbone_block", backbone_block);
        for (size_t k = 0; k < laterals.size(); ++k) {
            conv("lateral" + std::to_string(k), laterals[k]);
            conv("fpn_out" + std::to_string(k), fpn_out[k]);
        }
        if (config.nmode2_placement.fpn)
            for (size_t k = 0; k < fpn_blocks.size(); ++k) block("fpn_block" + std::to_string(k), fpn_blocks[k]);
        for (size_t d = 0; d < cls_tower.size(); ++d) {
            conv("cls_tower" + std::to_string(d), cls_tower[d]);
            conv("reg_tower" + std::to_string(d), reg_tower[d]);
        }
        if (config.nmode2_placement.head) {
            block("cls_block", cls_block);
            block("reg_block", reg_block);
        }
        conv("cls_pred", cls_pred);
        conv("reg_pred", reg_pred);
        return out;
    }
};

// Deterministic parameter initialization: He fan-in conv weights, zero biases,
// one rng stream per parameter keyed by creation order.
template <typename T>
Network<T> build(const NetConfig& config, uint64_t seed) {
    config.validate();
    Network<T> net;
    net.config = config;
    uint64_t next = 0;
    auto conv = [&](int cin, int cout, int k, int stride) {
        CounterRng rng(seed, next++, 7);
        ConvLayer<T> c;
        c.w = init::he_normal<T>({cout, cin, k, k}, rng);
        c.b = init::zero_param<T>({cout});
        c.stride = stride;
        c.pad = k / 2;
        return c;
    };
    auto block = [&](int channels) {
        CounterRng rng(seed, next++, 7);
        nmode::PerceptualMap<T> m;
        m.kind = nmode::PerceptualMap<T>::Kind::conv1x1;
        m.weight = init::he_normal<T>({channels, channels, 1, 1}, rng);
        m.bias = init::zero_param<T>({channels});
        return m;
    };

    // all convs run stride-1 same-padding; downsampling is a 2x max pool so
    // every conv output size is exactly integral
    net.stem = conv(1, config.stem_channels, 3, 1);
    int cin = config.stem_channels;
    for (int w : config.stage_widths) {
        net.stages.push_back({conv(cin, w, 3, 1), conv(w, w, 3, 1)});
        cin = w;
    }
    if (config.nmode2_placement.backbone) net.backbone_block = block(config.stage_widths.back());
    const int L = config.pyramid_levels;
    const int P = config.pyramid_channels;
    for (int k = 0; k < L; ++k) {
        const int cw = config.stage_widths[static_cast<size_t>(k + 1)];
        ConvLayer<T> lat = conv(cw, P, 1, 1);
        lat.pad = 0;
        net.laterals.push_back(lat);
        net.fpn_out.push_back(conv(P, P, 3, 1));
        if (config.nmode2_placement.fpn) net.fpn_blocks.push_back(block(P));
    }
    for (int d = 0; d < config.head_tower_depth; ++d) {
        net.cls_tower.push_back(conv(P, P, 3, 1));
        net.reg_tower.push_back(conv(P, P, 3, 1));
    }
    if (config.nmode2_placement.head) {
        net.cls_block = block(P);
        net.reg_block = block(P);
    }
    net.cls_pred = conv(P, config.num_classes, 3, 1);
    net.reg_pred = conv(P, 4 * (config.reg_bins + 1), 3, 1);
    return net;
}

template <typename T>
TensorT<T> apply(const ConvLayer<T>& c, const TensorT<T>& x) {
    return conv2d(x, c.w, c.b, c.stride, c.pad);
}

// Tower activations captured for boundedness checks.
template <typename T>
struct ForwardTrace {
    std::vector<TensorT<T>> cls_tower_out;  // per level, post-tower (and post-block when present)
};

template <typename T>
struct ForwardResult {
    PyramidFeatures<T> pyramid;
    losses::HeadOutput<T> head;
};

template <typename T>
ForwardResult<T> forward(const Network<T>& net, const TensorT<T>& images, ForwardTrace<T>* trace = nullptr) {
    const NetConfig& cfg = net.config;
    if (images.rank() != 4 || images.dim(1) != 1)
        throw ShapeError("forward: expected N,1,H,W grayscale batch, got " + shape_str(images.shape()));
    if (images.dim(2) % cfg.max_stride() != 0 || images.dim(3) % cfg.max_stride() != 0)
        throw ShapeError("forward: input " + std::to_string(images.dim(2)) + "x" + std::to_string(images.dim(3)) +
                         " not divisible by the largest stride " + std::to_string(cfg.max_stride()));

    TensorT<T> x = relu(apply(net.stem, images));
    x = adaptive_max_pool(x, images.dim(2) / 2, images.dim(3) / 2);
    std::vector<TensorT<T>> stage_out;
    for (const auto& st : net.stages) {
        x = adaptive_max_pool(x, x.shape()[2] / 2, x.shape()[3] / 2);
        x = relu(apply(st[0], x));
        x = relu(apply(st[1], x));
        stage_out.push_back(x);
    }
    if (cfg.nmode2_placement.backbone)
        stage_out.back() = nmode::nmode2_block(stage_out.back(), net.backbone_block, cfg.solver);

    const int L = cfg.pyramid_levels;
    // laterals on stages 1..L (stride 8..), then top-down accumulation
    std::vector<TensorT<T>> lat(static_cast<size_t>(L));
    for (int k = 0; k < L; ++k) lat[static_cast<size_t>(k)] = apply(net.laterals[static_cast<size_t>(k)], stage_out[static_cast<size_t>(k + 1)]);
    std::vector<TensorT<T>> merged(static_cast<size_t>(L));
    merged[static_cast<size_t>(L - 1)] = lat[static_cast<size_t>(L - 1)];
    for (int k = L - 2; k >= 0; --k)
        merged[static_cast<size_t>(k)] = add(lat[static_cast<size_t>(k)], upsample_nearest2x(merged[static_cast<size_t>(k + 1)]));

    ForwardResult<T> out;
    for (int k = 0; k < L; ++k) {
        TensorT<T> level = relu(apply(net.fpn_out[static_cast<size_t>(k)], merged[static_cast<size_t>(k)]));
        if (cfg.nmode2_placement.fpn)
            level = nmode::nmode2_block(level, net.fpn_blocks[static_cast<size_t>(k)], cfg.solver);
        out.pyramid.push_back(level);

        TensorT<T> tc = level;
        for (const auto& c : net.cls_tower) tc = relu(apply(c, tc));
        if (cfg.nmode2_placement.head) tc = nmode::nmode2_block(tc, net.cls_block, cfg.solver);
        if (trace) trace->cls_tower_out.push_back(tc);
        TensorT<T> tr = level;
        for (const auto& c : net.reg_tower) tr = relu(apply(c, tr));
        if (cfg.nmode2_placement.head) tr = nmode::nmode2_block(tr, net.reg_block, cfg.solver);

        losses::HeadLevel<T> hl;
        hl.class_logits = apply(net.cls_pred, tc);
        hl.box_dist = apply(net.reg_pred, tr);
        hl.stride = cfg.stride_of(k);
        out.head.push_back(hl);
    }
    return out;
}

// Per-location decode: side distance = expectation of the softmaxed bins in
// stride units; score = class sigmoid; keep score >= score_thresh.
template <typename T>
DetectionSet decode_boxes(const losses::HeadOutput<T>& head, double score_thresh) {
    if (score_thresh < 0.0 || score_thresh > 1.0) throw ContractError("decode_boxes: score_thresh in [0,1]");
    if (head.empty()) return {};
    const int n_imgs = head[0].class_logits.dim(0);
    DetectionSet out(static_cast<size_t>(n_imgs));
    for (const auto& lv : head) {
        const int ncls = lv.class_logits.dim(1);
        const int h = lv.class_logits.dim(2), w = lv.class_logits.dim(3);
        const int nb = lv.box_dist.dim(1) / 4;
        const auto& cls = lv.class_logits.data();
        const auto& dist = lv.box_dist.data();
        for (int img = 0; img < n_imgs; ++img)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    std::array<double, 4> d{};
                    bool decoded = false;
                    for (int c = 0; c < ncls; ++c) {
                        const double logit =
                            cls[((static_cast<size_t>(img) * ncls + c) * h + y) * w + x];
                        const double score = 1.0 / (1.0 + std::exp(-logit));
                        if (score < score_thresh) continue;
                        if (!decoded) {
                            for (int side = 0; side < 4; ++side) {
                                double mx = -1e30;
                                for (int bb = 0; bb < nb; ++bb)
                                    mx = std::max(mx, static_cast<double>(
                                                          dist[((static_cast<size_t>(img) * 4 * nb + side * nb + bb) * h + y) * w + x]));
                                double z = 0, acc = 0;
                                for (int bb = 0; bb < nb; ++bb) {
                                    const double e = std::exp(
                                        dist[((static_cast<size_t>(img) * 4 * nb + side * nb + bb) * h + y) * w + x] - mx);
                                    z += e;
                                    acc += e * bb;
                                }
                                d[static_cast<size_t>(side)] = acc / z;
                            }
                            decoded = true;
                        }
                        const double px = (x + 0.5) * lv.stride, py = (y + 0.5) * lv.stride;
                        out[static_cast<size_t>(img)].push_back(
                            {{px - d[0] * lv.stride, py - d[1] * lv.stride, px + d[2] * lv.stride, py + d[3] * lv.stride},
                             c,
                             score});
                    }
                }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Analytic counters. Conv: params Cin*Cout*k^2 + Cout, FLOPs 2*Cin*Cout*k^2
// per output element (one image). An nmODE2 block counts its 1x1 map once for
// parameters and solver-steps times for FLOPs.

inline int64_t conv_params(int cin, int cout, int k) { return static_cast<int64_t>(cin) * cout * k * k + cout; }
inline int64_t fc_params(int d, int m) { return static_cast<int64_t>(d) * m + m; }
inline int64_t conv_flops(int cin, int cout, int k, int oh, int ow) {
    return 2LL * cin * cout * k * k * oh * ow;
}

struct CostBreakdown {
    int64_t params = 0;
    int64_t flops = 0;  // per image
};

inline CostBreakdown count_cost(const NetConfig& cfg, int img_h, int img_w) {
    cfg.validate();
    CostBreakdown c;
    const int steps = cfg.solver.steps();
    c.params += conv_params(1, cfg.stem_channels, 3);
    c.flops += conv_flops(1, cfg.stem_channels, 3, img_h, img_w);  // stem runs at full resolution
    int h = img_h / 2, w = img_w / 2;
    int cin = cfg.stem_channels;
    std::vector<std::pair<int, int>> stage_dims;
    for (int sw : cfg.stage_widths) {
        h /= 2;
        w /= 2;
        c.params += conv_params(cin, sw, 3) + conv_params(sw, sw, 3);
        c.flops += conv_flops(cin, sw, 3, h, w) + conv_flops(sw, sw, 3, h, w);
        stage_dims.emplace_back(h, w);
        cin = sw;
    }
    if (cfg.nmode2_placement.backbone) {
        const int cw = cfg.stage_widths.back();
        c.params += conv_params(cw, cw, 1);
        c.flops += conv_flops(cw, cw, 1, stage_dims.back().first, stage_dims.back().second) * steps;
    }
    const int L = cfg.pyramid_levels, P = cfg.pyramid_channels;
    for (int k = 0; k < L; ++k) {
        const auto [lh, lw] = stage_dims[static_cast<size_t>(k + 1)];
        const int cw = cfg.stage_widths[static_cast<size_t>(k + 1)];
        c.params += conv_params(cw, P, 1) + conv_params(P, P, 3);
        c.flops += conv_flops(cw, P, 1, lh, lw) + conv_flops(P, P, 3, lh, lw);
        if (cfg.nmode2_placement.fpn) {
            c.params += conv_params(P, P, 1);
            c.flops += conv_flops(P, P, 1, lh, lw) * steps;
        }
        // shared head applied per level
        c.flops += 2LL * cfg.head_tower_depth * conv_flops(P, P, 3, lh, lw);
        if (cfg.nmode2_placement.head) c.flops += 2LL * conv_flops(P, P, 1, lh, lw) * steps;
        c.flops += conv_flops(P, cfg.num_classes, 3, lh, lw) + conv_flops(P, 4 * (cfg.reg_bins + 1), 3, lh, lw);
    }
    c.params += 2LL * cfg.head_tower_depth * conv_params(P, P, 3);
    if (cfg.nmode2_placement.head) c.params += 2LL * conv_params(P, P, 1);
    c.params += conv_params(P, cfg.num_classes, 3) + conv_params(P, 4 * (cfg.reg_bins + 1), 3);
    return c;
}

template <typename T>
int64_t param_count(Network<T>& net) {
    int64_t total = 0;
    for (auto& [name, t] : net.named_params()) total += t->size();
    return total;
}

inline int64_t flop_count(const NetConfig& cfg, int img_h, int img_w) { return count_cost(cfg, img_h, img_w).flops; }

// ---------------------------------------------------------------------------
// Shipped default configurations (capacity ordering mirrors three ResNet-tier
// teachers against one lightweight student).

inline NetConfig default_config(Role role) {
    NetConfig c;
    c.role = role;
    switch (role) {
        case Role::student:
            c.stem_channels = 8;
            c.stage_widths = {10, 12, 12, 14};
            c.pyramid_channels = 10;
            c.head_tower_depth = 1;
            break;
        case Role::teacher_small:
            c.stem_channels = 10;
            c.stage_widths = {12, 18, 24, 32};
            c.pyramid_channels = 16;
            c.head_tower_depth = 2;
            break;
        case Role::teacher_mid:
            c.stem_channels = 12;
            c.stage_widths = {16, 24, 32, 40};
            c.pyramid_channels = 20;
            c.head_tower_depth = 2;
            break;
        case Role::teacher_large:
            c.stem_channels = 14;
            c.stage_widths = {20, 30, 40, 50};
            c.pyramid_channels = 24;
            c.head_tower_depth = 2;
            break;
    }
    return c;
}

}  // namespace meddet::detnet
