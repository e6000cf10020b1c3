// SPDX-License-Identifier: Apache-2.0
//
// Detection evaluation: greedy class-wise NMS, 101-point interpolated average
// precision, mAP at IoU 0.5 and averaged over 0.50:0.05:0.95, and recall with
// TP/FP/FN counts at IoU 0.5. All tie-breaking is content-keyed so reports
// are invariant to input ordering.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "meddet/boxes.hpp"
#include "meddet/errors.hpp"

namespace meddet::evalm {

struct EvalReport {
    double map_50 = 0;
    double map_50_95 = 0;
    double recall = 0;
    std::vector<double> per_class_ap;  // at IoU 0.5
    int64_t tp = 0, fp = 0, fn = 0;    // at IoU 0.5 and the report's score threshold
};

namespace detail {

// score desc, then smaller x1, then smaller y1; deterministic under permutation
inline bool det_before(const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.box.x1 != b.box.x1) return a.box.x1 < b.box.x1;
    if (a.box.y1 != b.box.y1) return a.box.y1 < b.box.y1;
    return a.box.x2 < b.box.x2;
}

}  // namespace detail

// Greedy per-class suppression within each image.
inline DetectionSet nms(const DetectionSet& dets, double iou_thresh) {
    if (iou_thresh <= 0.0 || iou_thresh > 1.0) throw ContractError("nms: iou_thresh must be in (0,1]");
    DetectionSet out(dets.size());
    for (size_t img = 0; img < dets.size(); ++img) {
        std::vector<Detection> sorted = dets[img];
        std::stable_sort(sorted.begin(), sorted.end(), detail::det_before);
        std::vector<bool> kept(sorted.size(), false);
        for (size_t i = 0; i < sorted.size(); ++i) {
            bool suppressed = false;
            for (size_t j = 0; j < i && !suppressed; ++j)
                if (kept[j] && sorted[j].cls == sorted[i].cls && iou(sorted[j].box, sorted[i].box) >= iou_thresh)
                    suppressed = true;
            if (!suppressed) {
                kept[i] = true;
                out[img].push_back(sorted[i]);
            }
        }
    }
    return out;
}

namespace detail {

struct Flagged {
    double score;
    bool tp;
    double x1, y1;  // for deterministic ordering only
};

// Greedy score-ordered matching of one class: every truth matched at most
// once, a detection matches the unmatched truth of highest IoU >= thresh.
inline std::pair<std::vector<Flagged>, int> match_class(const DetectionSet& dets, const GroundTruthSet& truth,
                                                        int class_id, double iou_thresh) {
    std::vector<Flagged> flags;
    int total_gt = 0;
    struct Ref {
        size_t img;
        Detection det;
    };
    std::vector<Ref> all;
    for (size_t img = 0; img < dets.size(); ++img)
        for (const auto& d : dets[img])
            if (d.cls == class_id) all.push_back({img, d});
    std::stable_sort(all.begin(), all.end(), [](const Ref& a, const Ref& b) {
        if (a.det.score != b.det.score) return a.det.score > b.det.score;
        if (a.det.box.x1 != b.det.box.x1) return a.det.box.x1 < b.det.box.x1;
        if (a.det.box.y1 != b.det.box.y1) return a.det.box.y1 < b.det.box.y1;
        return a.img < b.img;
    });
    std::vector<std::vector<bool>> used(truth.size());
    for (size_t img = 0; img < truth.size(); ++img) {
        used[img].assign(truth[img].size(), false);
        for (const auto& g : truth[img])
            if (g.cls == class_id) ++total_gt;
    }
    for (const auto& r : all) {
        double best_iou = 0;
        int best = -1;
        if (r.img < truth.size()) {
            const auto& objs = truth[r.img];
            for (size_t j = 0; j < objs.size(); ++j) {
                if (objs[j].cls != class_id || used[r.img][j]) continue;
                const double v = iou(r.det.box, objs[j].box);
                if (v > best_iou) {
                    best_iou = v;
                    best = static_cast<int>(j);
                }
            }
        }
        const bool tp = best >= 0 && best_iou >= iou_thresh;
        if (tp) used[r.img][static_cast<size_t>(best)] = true;
        flags.push_back({r.det.score, tp, r.det.box.x1, r.det.box.y1});
    }
    return {flags, total_gt};
}

}  // namespace detail

// 101-point interpolated AP for one class at one IoU threshold.
inline double average_precision(const DetectionSet& dets, const GroundTruthSet& truth, int class_id,
                                double iou_thresh) {
    auto [flags, total_gt] = detail::match_class(dets, truth, class_id, iou_thresh);
    if (total_gt == 0) return flags.empty() ? 1.0 : 0.0;
    std::vector<double> recalls, precisions;
    int tp = 0, fp = 0;
    for (const auto& f : flags) {
        f.tp ? ++tp : ++fp;
        recalls.push_back(static_cast<double>(tp) / total_gt);
        precisions.push_back(static_cast<double>(tp) / (tp + fp));
    }
    double ap = 0;
    for (int i = 0; i <= 100; ++i) {
        const double r = i / 100.0;
        double best = 0;
        for (size_t j = 0; j < recalls.size(); ++j)
            if (recalls[j] >= r - 1e-12) best = std::max(best, precisions[j]);
        ap += best;
    }
    return ap / 101.0;
}

// Full report. Detections should already be NMS-filtered; counts and recall
// apply score_thresh, AP uses every detection.
inline EvalReport evaluate(const DetectionSet& dets, const GroundTruthSet& truth, int num_classes,
                           double score_thresh) {
    if (dets.size() != truth.size())
        throw ContractError("evaluate: detection and truth sets index different image counts (" +
                            std::to_string(dets.size()) + " vs " + std::to_string(truth.size()) + ")");
    EvalReport rep;
    double map5095 = 0;
    for (int pass = 0; pass < 10; ++pass) {
        const double thresh = 0.5 + 0.05 * pass;
        double mean_ap = 0;
        int classes = 0;
        for (int c = 0; c < num_classes; ++c) {
            const double ap = average_precision(dets, truth, c, thresh);
            if (pass == 0) rep.per_class_ap.push_back(ap);
            mean_ap += ap;
            ++classes;
        }
        mean_ap /= std::max(1, classes);
        if (pass == 0) rep.map_50 = mean_ap;
        map5095 += mean_ap;
    }
    rep.map_50_95 = map5095 / 10.0;

    // thresholded counts at IoU 0.5
    DetectionSet filtered(dets.size());
    for (size_t img = 0; img < dets.size(); ++img)
        for (const auto& d : dets[img])
            if (d.score >= score_thresh) filtered[img].push_back(d);
    int64_t total_gt = 0;
    for (const auto& objs : truth) total_gt += static_cast<int64_t>(objs.size());
    for (int c = 0; c < num_classes; ++c) {
        auto [flags, gt_c] = detail::match_class(filtered, truth, c, 0.5);
        for (const auto& f : flags) f.tp ? ++rep.tp : ++rep.fp;
    }
    rep.fn = total_gt - rep.tp;
    rep.recall = total_gt == 0 ? 1.0 : static_cast<double>(rep.tp) / static_cast<double>(total_gt);
    return rep;
}

inline std::string csv_header() { return "run_id,variant,map50,map5095,recall,tp,fp,fn"; }

inline std::string csv_row(const std::string& run_id, const std::string& variant, const EvalReport& r) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s,%s,%.6f,%.6f,%.6f,%lld,%lld,%lld", run_id.c_str(), variant.c_str(), r.map_50,
                  r.map_50_95, r.recall, static_cast<long long>(r.tp), static_cast<long long>(r.fp),
                  static_cast<long long>(r.fn));
    return buf;
}

}  // namespace meddet::evalm
