// SPDX-License-Identifier: Apache-2.0
//
// Training objectives: quality focal loss, distribution focal loss, GIoU loss,
// their detection combination with center-inside-box target assignment, the
// feature distillation loss, and the weighted total.
//
// Reductions inside det_loss: QFL is summed over every location and class,
// DFL over all four sides of each positive, GIoU over positives; each sum is
// normalized by the batch-level positive count (sides count 4x for DFL).
#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "meddet/aatm.hpp"
#include "meddet/alignfuse.hpp"
#include "meddet/boxes.hpp"
#include "meddet/errors.hpp"
#include "meddet/tensor.hpp"

namespace meddet::losses {

inline constexpr double kProbClamp = 1e-7;

struct LossWeights {
    double lambda = 0.4;  // QFL weight
    double mu = 0.3;      // DFL weight; GIoU gets 1 - lambda - mu
    double sigma = 0.6;   // detection weight
    double tau = 0.3;     // distillation weight; adversarial gets 1 - sigma - tau
    double beta = 2.0;    // QFL focusing exponent

    void validate() const {
        if (lambda < 0 || mu < 0 || lambda + mu > 1.0 + 1e-12)
            throw ConfigError("loss weights: need 0 <= lambda, mu and lambda + mu <= 1");
        if (sigma < 0 || tau < 0 || sigma + tau > 1.0 + 1e-12)
            throw ConfigError("loss weights: need 0 <= sigma, tau and sigma + tau <= 1");
        if (beta < 0) throw ConfigError("loss weights: beta must be >= 0");
    }
};

// ---------------------------------------------------------------------------
// Elementwise QFL: |y - p|^beta * BCE(p, y), p clamped away from {0,1}.
// target entries are soft labels in [0,1].

template <typename T>
TensorT<T> qfl(const TensorT<T>& pred_score, const TensorT<T>& target_quality, T beta) {
    if (pred_score.shape() != target_quality.shape())
        throw ShapeError("qfl: pred " + shape_str(pred_score.shape()) + " vs target " +
                         shape_str(target_quality.shape()));
    const T lo = static_cast<T>(kProbClamp), hi = T(1) - static_cast<T>(kProbClamp);
    TensorT<T> p = clamp(pred_score, lo, hi);
    TensorT<T> one = TensorT<T>::filled(p.shape(), T(1));
    TensorT<T> bce = neg(add(mul(sub(one, target_quality), log(sub(one, p))), mul(target_quality, log(p))));
    return mul(pow_abs(sub(target_quality, p), beta), bce);
}

template <typename T>
T qfl_scalar(T pred, T target, T beta) {
    return qfl(TensorT<T>::scalar(pred), TensorT<T>::scalar(target), beta).item();
}

// ---------------------------------------------------------------------------
// DFL on one discrete distribution over n+1 bins for a target in [0,n]:
// -[(floor+1-t) log S_floor + (t-floor) log S_floor+1].

template <typename T>
TensorT<T> dfl(const TensorT<T>& bin_probs, double target) {
    if (bin_probs.rank() != 1) throw ShapeError("dfl: expected a rank-1 bin distribution");
    const int n = bin_probs.dim(0) - 1;
    if (target < 0.0 || target > static_cast<double>(n))
        throw ContractError("dfl: target " + std::to_string(target) + " outside [0," + std::to_string(n) + "]");
    const int lo_bin = std::min(static_cast<int>(std::floor(target)), n);
    const double w_hi = target - lo_bin;
    const double w_lo = 1.0 - w_hi;
    TensorT<T> logp = log(clamp(bin_probs, static_cast<T>(kProbClamp), T(1)));
    TensorT<T> loss = mul_scalar(gather(logp, {lo_bin}), static_cast<T>(-w_lo));
    if (w_hi > 0.0) loss = add(loss, mul_scalar(gather(logp, {lo_bin + 1}), static_cast<T>(-w_hi)));
    return reshape(loss, {1});
}

// ---------------------------------------------------------------------------
// GIoU loss = 1 - [IoU - |hull \ union| / |hull|], in [0,2].

inline double giou_loss(const Box& a, const Box& b, double eps = 1e-9) {
    if (!a.well_ordered() || !b.well_ordered()) throw ContractError("giou_loss: boxes must satisfy x1<=x2, y1<=y2");
    const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    const double hull = (std::max(a.x2, b.x2) - std::min(a.x1, b.x1)) * (std::max(a.y2, b.y2) - std::min(a.y1, b.y1));
    const double giou = inter / std::max(uni, eps) - (hull - uni) / std::max(hull, eps);
    return 1.0 - giou;
}

// Differentiable batch form over P box pairs given as coordinate columns.
template <typename T>
TensorT<T> giou_loss_columns(const TensorT<T>& px1, const TensorT<T>& py1, const TensorT<T>& px2,
                             const TensorT<T>& py2, const TensorT<T>& gx1, const TensorT<T>& gy1,
                             const TensorT<T>& gx2, const TensorT<T>& gy2) {
    auto iw = relu(sub(min2(px2, gx2), max2(px1, gx1)));
    auto ih = relu(sub(min2(py2, gy2), max2(py1, gy1)));
    auto inter = mul(iw, ih);
    auto area_p = mul(sub(px2, px1), sub(py2, py1));
    auto area_g = mul(sub(gx2, gx1), sub(gy2, gy1));
    auto uni = sub(add(area_p, area_g), inter);
    auto hull = mul(sub(max2(px2, gx2), min2(px1, gx1)), sub(max2(py2, gy2), min2(py1, gy1)));
    auto giou = sub(div(inter, uni), div(sub(hull, uni), hull));
    return sub(TensorT<T>::filled(giou.shape(), T(1)), giou);
}

// ---------------------------------------------------------------------------
// Head tensors and target assignment

template <typename T>
struct HeadLevel {
    TensorT<T> class_logits;  // [N, num_classes, H, W]
    TensorT<T> box_dist;      // [N, 4*(n+1), H, W]
    int stride = 8;
};

template <typename T>
using HeadOutput = std::vector<HeadLevel<T>>;

struct LevelAssignment {
    // flat location index n*H*W + y*W + x per positive
    std::vector<int64_t> pos_loc;
    std::vector<int> pos_class;
    std::vector<Box> pos_gt;
    std::vector<std::array<double, 2>> pos_center;           // pixel coords
    std::vector<std::array<double, 4>> side_targets;         // l,t,r,b in stride units, clamped [0,n]
};

// A location is positive when its center falls inside a ground-truth box and
// the box's longer side lies in the level's scale range; ranges double with
// the stride ([0,4s0), [4s0? ...)). Overlaps resolve to the smallest box,
// then the lowest ground-truth index.
inline std::pair<double, double> level_scale_range(int level, int levels, const std::vector<int>& strides) {
    const double lo = level == 0 ? 0.0 : 2.0 * strides[static_cast<size_t>(level)];
    const double hi = level == levels - 1 ? 1e30 : 2.0 * strides[static_cast<size_t>(level) + 1];
    return {lo, hi};
}

inline LevelAssignment assign_level(const GroundTruthSet& truth, int level, int levels, int n_imgs, int h, int w,
                                    const std::vector<int>& strides, int reg_bins) {
    LevelAssignment out;
    const double s = strides[static_cast<size_t>(level)];
    const auto [lo, hi] = level_scale_range(level, levels, strides);
    for (int img = 0; img < n_imgs; ++img) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double px = (x + 0.5) * s;
                const double py = (y + 0.5) * s;
                int best = -1;
                double best_area = 1e30;
                const auto& objs = truth[static_cast<size_t>(img)];
                for (size_t j = 0; j < objs.size(); ++j) {
                    const Box& b = objs[j].box;
                    const double side = b.longer_side();
                    if (side < lo || side >= hi) continue;
                    if (!b.contains(px, py)) continue;
                    if (b.area() < best_area) {
                        best_area = b.area();
                        best = static_cast<int>(j);
                    }
                }
                if (best < 0) continue;
                const Box& b = objs[static_cast<size_t>(best)].box;
                out.pos_loc.push_back((static_cast<int64_t>(img) * h + y) * w + x);
                out.pos_class.push_back(objs[static_cast<size_t>(best)].cls);
                out.pos_gt.push_back(b);
                out.pos_center.push_back({px, py});
                auto cl = [reg_bins](double v) { return std::clamp(v, 0.0, static_cast<double>(reg_bins)); };
                out.side_targets.push_back({cl((px - b.x1) / s), cl((py - b.y1) / s), cl((b.x2 - px) / s), cl((b.y2 - py) / s)});
            }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Detection loss: lambda*QFL + mu*DFL + (1-lambda-mu)*GIoU

template <typename T>
struct DetLossParts {
    TensorT<T> total, qfl_term, dfl_term, giou_term;
    int positives = 0;
};

template <typename T>
DetLossParts<T> det_loss_parts(const HeadOutput<T>& head, const GroundTruthSet& truth, const LossWeights& w,
                               int reg_bins) {
    w.validate();
    if (reg_bins < 1 || reg_bins > 63) throw ConfigError("det_loss: reg_bins must be in [1,63]");
    const int levels = static_cast<int>(head.size());
    std::vector<int> strides;
    for (const auto& lv : head) strides.push_back(lv.stride);

    TensorT<T> qfl_sum = TensorT<T>::zeros({1});
    TensorT<T> dfl_sum = TensorT<T>::zeros({1});
    TensorT<T> giou_sum = TensorT<T>::zeros({1});
    int total_pos = 0;
    const int nb = reg_bins + 1;

    for (int li = 0; li < levels; ++li) {
        const auto& lv = head[static_cast<size_t>(li)];
        const int n = lv.class_logits.dim(0), ncls = lv.class_logits.dim(1);
        const int h = lv.class_logits.dim(2), wd = lv.class_logits.dim(3);
        if (lv.box_dist.dim(1) != 4 * nb)
            throw ShapeError("det_loss: box_dist channels " + std::to_string(lv.box_dist.dim(1)) + " vs 4*(n+1)=" +
                             std::to_string(4 * nb));
        LevelAssignment asg = assign_level(truth, li, levels, n, h, wd, strides, reg_bins);
        const int pos = static_cast<int>(asg.pos_loc.size());
        total_pos += pos;

        // --- QFL over every location/class; soft target = IoU of the decoded
        // box at positives, 0 elsewhere.
        TensorT<T> scores = sigmoid(lv.class_logits);
        std::vector<T> target(static_cast<size_t>(scores.size()), T(0));
        if (pos > 0) {
            // decode distances from the current (detached) distributions
            NoGradGuard ng;
            TensorT<T> dist_detached = lv.box_dist.detach();
            for (int p = 0; p < pos; ++p) {
                const int64_t loc = asg.pos_loc[static_cast<size_t>(p)];
                const int img = static_cast<int>(loc / (h * wd));
                const int64_t yx = loc % (h * wd);
                std::array<double, 4> d{};
                for (int side = 0; side < 4; ++side) {
                    // softmax expectation over this side's bins
                    double mx = -1e30;
                    std::array<double, 64> e{};
                    for (int bb = 0; bb < nb; ++bb) {
                        const int64_t idx = ((static_cast<int64_t>(img) * 4 * nb + side * nb + bb) * h * wd) + yx;
                        e[static_cast<size_t>(bb)] = static_cast<double>(dist_detached.data()[static_cast<size_t>(idx)]);
                        mx = std::max(mx, e[static_cast<size_t>(bb)]);
                    }
                    double z = 0, acc = 0;
                    for (int bb = 0; bb < nb; ++bb) {
                        const double q = std::exp(e[static_cast<size_t>(bb)] - mx);
                        z += q;
                        acc += q * bb;
                    }
                    d[static_cast<size_t>(side)] = acc / z;
                }
                const double s = strides[static_cast<size_t>(li)];
                const double px = asg.pos_center[static_cast<size_t>(p)][0];
                const double py = asg.pos_center[static_cast<size_t>(p)][1];
                Box pred{px - d[0] * s, py - d[1] * s, px + d[2] * s, py + d[3] * s};
                const double q = iou(pred, asg.pos_gt[static_cast<size_t>(p)]);
                const int cls = asg.pos_class[static_cast<size_t>(p)];
                const int64_t tidx = ((static_cast<int64_t>(img) * ncls + cls) * h * wd) + yx;
                target[static_cast<size_t>(tidx)] = static_cast<T>(q);
            }
        }
        qfl_sum = add(qfl_sum, sum(qfl(scores, TensorT<T>::from(scores.shape(), std::move(target)),
                                       static_cast<T>(w.beta))));

        if (pos > 0) {
            // --- gather per-positive per-side bin rows
            std::vector<int64_t> row_idx;
            row_idx.reserve(static_cast<size_t>(pos) * 4 * nb);
            for (int p = 0; p < pos; ++p) {
                const int64_t loc = asg.pos_loc[static_cast<size_t>(p)];
                const int img = static_cast<int>(loc / (h * wd));
                const int64_t yx = loc % (h * wd);
                for (int side = 0; side < 4; ++side)
                    for (int bb = 0; bb < nb; ++bb)
                        row_idx.push_back(((static_cast<int64_t>(img) * 4 * nb + side * nb + bb) * h * wd) + yx);
            }
            TensorT<T> rows = reshape(gather(lv.box_dist, row_idx), {pos * 4, nb});
            TensorT<T> probs = softmax_rows(rows);

            // --- DFL via a constant coefficient matrix on log-probs
            std::vector<T> coef(static_cast<size_t>(pos) * 4 * nb, T(0));
            for (int p = 0; p < pos; ++p)
                for (int side = 0; side < 4; ++side) {
                    const double t = asg.side_targets[static_cast<size_t>(p)][static_cast<size_t>(side)];
                    const int lo_bin = std::min(static_cast<int>(std::floor(t)), reg_bins);
                    const double w_hi = t - lo_bin;
                    coef[(static_cast<size_t>(p) * 4 + side) * nb + lo_bin] = static_cast<T>(-(1.0 - w_hi));
                    if (w_hi > 0)
                        coef[(static_cast<size_t>(p) * 4 + side) * nb + lo_bin + 1] = static_cast<T>(-w_hi);
                }
            TensorT<T> logp = log(clamp(probs, static_cast<T>(kProbClamp), T(1)));
            dfl_sum = add(dfl_sum, sum(mul(logp, TensorT<T>::from({pos * 4, nb}, std::move(coef)))));

            // --- GIoU on differentiably decoded boxes
            std::vector<T> binvals(static_cast<size_t>(nb));
            for (int bb = 0; bb < nb; ++bb) binvals[static_cast<size_t>(bb)] = static_cast<T>(bb);
            TensorT<T> dists = matmul(probs, TensorT<T>::from({nb, 1}, std::move(binvals)));  // [pos*4, 1]
            TensorT<T> flat = reshape(dists, {pos * 4});
            std::vector<int64_t> il, it, ir, ib;
            for (int p = 0; p < pos; ++p) {
                il.push_back(p * 4 + 0);
                it.push_back(p * 4 + 1);
                ir.push_back(p * 4 + 2);
                ib.push_back(p * 4 + 3);
            }
            const T s = static_cast<T>(strides[static_cast<size_t>(li)]);
            std::vector<T> cx(static_cast<size_t>(pos)), cy(static_cast<size_t>(pos));
            std::vector<T> gx1(static_cast<size_t>(pos)), gy1(static_cast<size_t>(pos)), gx2(static_cast<size_t>(pos)),
                gy2(static_cast<size_t>(pos));
            for (int p = 0; p < pos; ++p) {
                cx[static_cast<size_t>(p)] = static_cast<T>(asg.pos_center[static_cast<size_t>(p)][0]);
                cy[static_cast<size_t>(p)] = static_cast<T>(asg.pos_center[static_cast<size_t>(p)][1]);
                gx1[static_cast<size_t>(p)] = static_cast<T>(asg.pos_gt[static_cast<size_t>(p)].x1);
                gy1[static_cast<size_t>(p)] = static_cast<T>(asg.pos_gt[static_cast<size_t>(p)].y1);
                gx2[static_cast<size_t>(p)] = static_cast<T>(asg.pos_gt[static_cast<size_t>(p)].x2);
                gy2[static_cast<size_t>(p)] = static_cast<T>(asg.pos_gt[static_cast<size_t>(p)].y2);
            }
            auto cxs = TensorT<T>::from({pos}, cx);
            auto cys = TensorT<T>::from({pos}, cy);
            auto px1 = sub(cxs, mul_scalar(gather(flat, il), s));
            auto py1 = sub(cys, mul_scalar(gather(flat, it), s));
            auto px2 = add(cxs, mul_scalar(gather(flat, ir), s));
            auto py2 = add(cys, mul_scalar(gather(flat, ib), s));
            auto gl = giou_loss_columns(px1, py1, px2, py2, TensorT<T>::from({pos}, gx1), TensorT<T>::from({pos}, gy1),
                                        TensorT<T>::from({pos}, gx2), TensorT<T>::from({pos}, gy2));
            giou_sum = add(giou_sum, sum(gl));
        }
    }

    const T norm = static_cast<T>(std::max(1, total_pos));
    DetLossParts<T> parts;
    parts.positives = total_pos;
    parts.qfl_term = mul_scalar(qfl_sum, T(1) / norm);
    parts.dfl_term = mul_scalar(dfl_sum, T(1) / (T(4) * norm));
    parts.giou_term = mul_scalar(giou_sum, T(1) / norm);
    parts.total = add(add(mul_scalar(parts.qfl_term, static_cast<T>(w.lambda)),
                          mul_scalar(parts.dfl_term, static_cast<T>(w.mu))),
                      mul_scalar(parts.giou_term, static_cast<T>(1.0 - w.lambda - w.mu)));
    return parts;
}

template <typename T>
TensorT<T> det_loss(const HeadOutput<T>& head, const GroundTruthSet& truth, const LossWeights& w, int reg_bins) {
    return det_loss_parts(head, truth, w, reg_bins).total;
}

// ---------------------------------------------------------------------------
// Distillation loss, sum over levels of mean((T_i - G[align(S_i)])^2).
// Fused teacher maps are detached here; gradients reach the student, its
// alignment, and the generator only.

template <typename T>
TensorT<T> dist_loss_pregenerated(const std::vector<TensorT<T>>& fused_teacher,
                                  const std::vector<TensorT<T>>& generated) {
    if (fused_teacher.size() != generated.size())
        throw ShapeError("dist_loss: level counts disagree (teacher " + std::to_string(fused_teacher.size()) +
                         " vs generated " + std::to_string(generated.size()) + ")");
    TensorT<T> total = TensorT<T>::zeros({1});
    for (size_t i = 0; i < fused_teacher.size(); ++i) {
        if (generated[i].shape() != fused_teacher[i].shape())
            throw ShapeError("dist_loss: level " + std::to_string(i) + " aligned student " +
                             shape_str(generated[i].shape()) + " vs fused teacher " +
                             shape_str(fused_teacher[i].shape()));
        total = add(total, mean(square(sub(fused_teacher[i].detach(), generated[i]))));
    }
    return total;
}

template <typename T>
TensorT<T> dist_loss(const std::vector<TensorT<T>>& fused_teacher, const std::vector<TensorT<T>>& student_feats,
                     const aatm::Generator<T>& g, const std::vector<fusion::AlignSpec<T>>& align) {
    if (student_feats.size() != align.size())
        throw ShapeError("dist_loss: student levels " + std::to_string(student_feats.size()) + " vs align " +
                         std::to_string(align.size()));
    std::vector<TensorT<T>> generated;
    generated.reserve(student_feats.size());
    for (size_t i = 0; i < student_feats.size(); ++i)
        generated.push_back(generate(g, fusion::afa_apply(student_feats[i], align[i])));
    return dist_loss_pregenerated(fused_teacher, generated);
}

// ---------------------------------------------------------------------------
// Total: sigma*L_det + tau*L_dist + (1-sigma-tau)*L_adv

template <typename T>
struct TotalLoss {
    TensorT<T> total;
    T det, dist, adv;  // logged component values
};

template <typename T>
TotalLoss<T> total_loss(const TensorT<T>& l_det, const TensorT<T>& l_dist, const TensorT<T>& l_adv,
                        const LossWeights& w) {
    w.validate();
    TotalLoss<T> out;
    out.det = l_det.item();
    out.dist = l_dist.item();
    out.adv = l_adv.item();
    out.total = add(add(mul_scalar(l_det, static_cast<T>(w.sigma)), mul_scalar(l_dist, static_cast<T>(w.tau))),
                    mul_scalar(l_adv, static_cast<T>(1.0 - w.sigma - w.tau)));
    return out;
}

}  // namespace meddet::losses
