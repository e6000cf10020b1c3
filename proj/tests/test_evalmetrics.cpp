// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "meddet/evalmetrics.hpp"
#include "meddet/rng.hpp"
#include "meddet/synthdata.hpp"

using meddet::Box;
using meddet::Detection;
using meddet::DetectionSet;
using meddet::GroundTruthSet;
namespace md = meddet;
namespace ev = meddet::evalm;

namespace {

// Independent brute-force AP oracle: explicit match walk plus a quadratic
// scan for the interpolated precision envelope.
double ap_oracle(const DetectionSet& dets, const GroundTruthSet& truth, int cls, double thr) {
    struct D {
        double score;
        size_t img;
        Box box;
    };
    std::vector<D> all;
    for (size_t img = 0; img < dets.size(); ++img)
        for (const auto& d : dets[img])
            if (d.cls == cls) all.push_back({d.score, img, d.box});
    std::sort(all.begin(), all.end(), [](const D& a, const D& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.box.x1 != b.box.x1) return a.box.x1 < b.box.x1;
        if (a.box.y1 != b.box.y1) return a.box.y1 < b.box.y1;
        return a.img < b.img;
    });
    int total_gt = 0;
    std::vector<std::vector<bool>> used(truth.size());
    for (size_t img = 0; img < truth.size(); ++img) {
        used[img].assign(truth[img].size(), false);
        for (const auto& g : truth[img]) total_gt += g.cls == cls ? 1 : 0;
    }
    if (total_gt == 0) return all.empty() ? 1.0 : 0.0;
    std::vector<double> rec, prec;
    int tp = 0, fp = 0;
    for (const auto& d : all) {
        int best = -1;
        double best_iou = 0;
        for (size_t j = 0; j < truth[d.img].size(); ++j) {
            if (truth[d.img][j].cls != cls || used[d.img][j]) continue;
            const double v = md::iou(d.box, truth[d.img][j].box);
            if (v > best_iou) {
                best_iou = v;
                best = static_cast<int>(j);
            }
        }
        if (best >= 0 && best_iou >= thr) {
            used[d.img][static_cast<size_t>(best)] = true;
            ++tp;
        } else {
            ++fp;
        }
        rec.push_back(double(tp) / total_gt);
        prec.push_back(double(tp) / (tp + fp));
    }
    double ap = 0;
    for (int i = 0; i <= 100; ++i) {
        double best = 0;
        for (size_t j = 0; j < rec.size(); ++j)
            if (rec[j] >= i / 100.0 - 1e-12) best = std::max(best, prec[j]);
        ap += best;
    }
    return ap / 101.0;
}

Detection det(double x1, double y1, double x2, double y2, int cls, double score) {
    return {{x1, y1, x2, y2}, cls, score};
}

}  // namespace

TEST_CASE("iou cases") {
    REQUIRE(md::iou({0, 0, 2, 2}, {0, 0, 2, 2}) == 1.0);
    REQUIRE(md::iou({0, 0, 1, 1}, {3, 3, 4, 4}) == 0.0);
    REQUIRE(md::iou({0, 0, 2, 2}, {1, 1, 3, 3}) == Catch::Approx(1.0 / 7.0).margin(1e-12));
}

TEST_CASE("nms") {
    // single detection unchanged
    DetectionSet one = {{det(0, 0, 2, 2, 0, 0.8)}};
    auto kept = ev::nms(one, 0.6);
    REQUIRE(kept[0].size() == 1);

    // duplicate boxes keep the higher score
    DetectionSet dup = {{det(0, 0, 2, 2, 0, 0.8), det(0, 0, 2, 2, 0, 0.9)}};
    auto k2 = ev::nms(dup, 0.6);
    REQUIRE(k2[0].size() == 1);
    REQUIRE(k2[0][0].score == 0.9);

    // crafted 4-box scene against the greedy walk:
    // a(0.9) suppresses b(0.8, IoU 1.0); c overlaps a below threshold and
    // survives; d is another class and always survives.
    DetectionSet four = {{det(0, 0, 4, 4, 0, 0.9), det(0, 0, 4, 4, 0, 0.8), det(3, 0, 7, 4, 0, 0.7),
                          det(0, 0, 4, 4, 1, 0.6)}};
    auto k4 = ev::nms(four, 0.5);
    REQUIRE(k4[0].size() == 3);
    REQUIRE(k4[0][0].score == 0.9);
    REQUIRE(k4[0][1].score == 0.7);
    REQUIRE(k4[0][2].cls == 1);

    // tie on score resolves by smaller x1 then y1
    DetectionSet tie = {{det(1, 0, 3, 2, 0, 0.5), det(0, 0, 2, 2, 0, 0.5)}};
    auto kt = ev::nms(tie, 0.9);
    REQUIRE(kt[0][0].box.x1 == 0.0);

    REQUIRE_THROWS_AS(ev::nms(one, 0.0), md::ContractError);
}

TEST_CASE("average precision hand cases") {
    GroundTruthSet truth = {{{{0, 0, 4, 4}, 0}, {{10, 10, 14, 14}, 0}}};

    // one truth, one matching detection
    GroundTruthSet t1 = {{{{0, 0, 4, 4}, 0}}};
    DetectionSet d1 = {{det(0, 0, 4, 4, 0, 0.9)}};
    REQUIRE(ev::average_precision(d1, t1, 0, 0.5) == 1.0);

    // no detections
    DetectionSet d0 = {{}};
    REQUIRE(ev::average_precision(d0, t1, 0, 0.5) == 0.0);

    // 2 truths, detections hit(0.9), miss(0.8), hit(0.7): cumulative PR walk
    // (0.5,1.0), (0.5,0.5), (1.0,2/3); the 101-point rule integrates to
    // (51*1 + 50*(2/3))/101.
    DetectionSet d3 = {{det(0, 0, 4, 4, 0, 0.9), det(20, 20, 24, 24, 0, 0.8), det(10, 10, 14, 14, 0, 0.7)}};
    const double want = (51.0 * 1.0 + 50.0 * (2.0 / 3.0)) / 101.0;
    REQUIRE(ev::average_precision(d3, truth, 0, 0.5) == Catch::Approx(want).margin(1e-9));
    REQUIRE(ev::average_precision(d3, truth, 0, 0.5) == Catch::Approx(0.834983498).margin(1e-6));
    REQUIRE(ev::average_precision(d3, truth, 0, 0.5) == Catch::Approx(ap_oracle(d3, truth, 0, 0.5)).margin(1e-12));
}

TEST_CASE("ap is monotone when a false positive is removed") {
    md::CounterRng rng(61, 0, 0);
    GroundTruthSet truth = {{{{0, 0, 4, 4}, 0}, {{10, 0, 14, 4}, 0}, {{20, 0, 24, 4}, 0}}};
    DetectionSet dets = {{det(0, 0, 4, 4, 0, 0.9), det(40, 0, 44, 4, 0, 0.85), det(10, 0, 14, 4, 0, 0.8),
                          det(50, 0, 54, 4, 0, 0.75), det(20, 0, 24, 4, 0, 0.7)}};
    const double base = ev::average_precision(dets, truth, 0, 0.5);
    // removing either false positive (index 1 or 3) cannot lower AP
    for (size_t drop : {1u, 3u}) {
        DetectionSet fewer = dets;
        fewer[0].erase(fewer[0].begin() + static_cast<long>(drop));
        REQUIRE(ev::average_precision(fewer, truth, 0, 0.5) >= base - 1e-12);
    }
}

TEST_CASE("evaluate on a synthetic fixture matches the scripted oracle") {
    // pseudo-detector: ground truth boxes jittered, plus noise detections
    auto spec = meddet::synth::SceneSpec{};
    spec.seed = 62;
    GroundTruthSet truth;
    DetectionSet dets;
    md::CounterRng rng(63, 0, 0);
    for (int img = 0; img < 20; ++img) {
        auto sc = meddet::synth::render<float>(spec, img);
        truth.push_back(sc.truth);
        std::vector<Detection> ds;
        for (const auto& obj : sc.truth) {
            if (rng.next_double() < 0.85) {
                const double j = rng.uniform(-1.5, 1.5);
                ds.push_back({{obj.box.x1 + j, obj.box.y1 + j, obj.box.x2 + j, obj.box.y2 + j},
                              rng.next_double() < 0.9 ? obj.cls : 1 - obj.cls,
                              rng.uniform(0.3, 1.0)});
            }
        }
        for (int extra = 0; extra < 2; ++extra)
            if (rng.next_double() < 0.4) {
                const double x = rng.uniform(4, 50), y = rng.uniform(4, 50);
                ds.push_back({{x, y, x + rng.uniform(4, 10), y + rng.uniform(4, 10)},
                              static_cast<int>(rng.uniform_int(0, 1)), rng.uniform(0.05, 0.6)});
            }
        dets.push_back(ds);
    }

    auto rep = ev::evaluate(dets, truth, 2, 0.05);
    for (int c = 0; c < 2; ++c) {
        REQUIRE(rep.per_class_ap[static_cast<size_t>(c)] ==
                Catch::Approx(ap_oracle(dets, truth, c, 0.5)).margin(1e-6));
    }
    const double want50 = (ap_oracle(dets, truth, 0, 0.5) + ap_oracle(dets, truth, 1, 0.5)) / 2;
    REQUIRE(rep.map_50 == Catch::Approx(want50).margin(1e-6));
    double acc = 0;
    for (int p = 0; p < 10; ++p)
        acc += (ap_oracle(dets, truth, 0, 0.5 + 0.05 * p) + ap_oracle(dets, truth, 1, 0.5 + 0.05 * p)) / 2;
    REQUIRE(rep.map_50_95 == Catch::Approx(acc / 10).margin(1e-6));
    REQUIRE(rep.map_50 >= rep.map_50_95);
    REQUIRE(rep.tp + rep.fn == 20 * 0 + [&] {  // total ground truth
                int64_t t = 0;
                for (const auto& o : truth) t += static_cast<int64_t>(o.size());
                return t;
            }());

    // permutation invariance
    DetectionSet shuffled = dets;
    for (auto& v : shuffled) std::reverse(v.begin(), v.end());
    auto rep2 = ev::evaluate(shuffled, truth, 2, 0.05);
    REQUIRE(rep2.map_50 == rep.map_50);
    REQUIRE(rep2.map_50_95 == rep.map_50_95);
    REQUIRE(rep2.recall == rep.recall);
    REQUIRE(rep2.tp == rep.tp);
}

TEST_CASE("evaluate edge cases") {
    // perfect detector
    GroundTruthSet truth = {{{{0, 0, 4, 4}, 0}, {{8, 8, 12, 12}, 1}}, {{{2, 2, 6, 6}, 1}}};
    DetectionSet perfect;
    for (const auto& objs : truth) {
        std::vector<Detection> ds;
        for (const auto& o : objs) ds.push_back({o.box, o.cls, 1.0});
        perfect.push_back(ds);
    }
    auto rep = ev::evaluate(perfect, truth, 2, 0.05);
    REQUIRE(rep.map_50 == 1.0);
    REQUIRE(rep.map_50_95 == 1.0);
    REQUIRE(rep.recall == 1.0);
    REQUIRE(rep.fp == 0);
    REQUIRE(rep.fn == 0);

    // empty detections on non-empty truth
    DetectionSet none(truth.size());
    auto rep0 = ev::evaluate(none, truth, 2, 0.05);
    REQUIRE(rep0.map_50 == 0.0);
    REQUIRE(rep0.recall == 0.0);

    // empty truth: recall defined as 1
    GroundTruthSet notruth = {{}, {}};
    auto repn = ev::evaluate(none, notruth, 2, 0.05);
    REQUIRE(repn.recall == 1.0);

    REQUIRE_THROWS_AS(ev::evaluate(none, GroundTruthSet{{}}, 2, 0.05), md::ContractError);
}

TEST_CASE("csv schema") {
    ev::EvalReport r;
    r.map_50 = 0.5;
    r.map_50_95 = 0.25;
    r.recall = 0.75;
    r.tp = 10;
    r.fp = 3;
    r.fn = 2;
    REQUIRE(ev::csv_header() == "run_id,variant,map50,map5095,recall,tp,fp,fn");
    REQUIRE(ev::csv_row("run1", "full", r) == "run1,full,0.500000,0.250000,0.750000,10,3,2");
}
