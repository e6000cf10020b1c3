// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: ten gated criteria, one [PASS]/[FAIL] line each, nonzero
// exit if any fail. Criteria 7 and 8 run the full desk-scale benchmark and
// dominate the runtime; pass specific criterion numbers as arguments to run a
// subset.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "meddet/gradcheck.hpp"
#include "meddet/pipeline.hpp"

using namespace meddet;
using clk = std::chrono::steady_clock;

namespace {

double secs(clk::time_point a, clk::time_point b) { return std::chrono::duration<double>(b - a).count(); }

struct Criterion {
    bool pass = true;
    std::string detail;

    void require(bool ok, const std::string& why) {
        if (!ok) {
            pass = false;
            if (!detail.empty()) detail += "; ";
            detail += why;
        }
    }
    void note(const std::string& info) {
        if (!detail.empty()) detail += "; ";
        detail += info;
    }
};

std::vector<double> rvec(CounterRng& rng, int64_t n, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(static_cast<size_t>(n));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return v;
}

// ---------------------------------------------------------------------------
// 1. gradient suite

Criterion criterion1() {
    Criterion c;
    const auto t0 = clk::now();
    auto results = gradcheck::run_suite<double>(100, 1e-4);
    const double elapsed = secs(t0, clk::now());
    for (const auto& r : results)
        c.require(r.pass, r.name + " max rel err " + std::to_string(r.max_err));
    c.require(elapsed < 300.0, "suite exceeded 5 minutes");
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%zu ops x 100 trials in %.1fs", results.size(), elapsed);
    c.note(buf);
    return c;
}

// ---------------------------------------------------------------------------
// 2. dynamics suite

Criterion criterion2() {
    Criterion c;
    // (a) trapping region from 50 random starts
    CounterRng rng(2024, 0, 0);
    nmode::SolverSpec spec = nmode::default_block_solver();
    spec.t_end = 10.0;
    for (int trial = 0; trial < 50; ++trial) {
        auto y0 = Tensor64::scalar(rng.uniform(-3.0, 3.0));
        bool inside = true;
        nmode::integrate(nmode::OdeState<double>{y0, 0.0, Tensor64::scalar(0.0)}, nmode::Deriv::nmode2, spec,
                         [&](double t, const Tensor64& y) {
                             if (t >= 5.0 && (y.item() < -0.05 || y.item() > 1.05)) inside = false;
                         });
        c.require(inside, "trajectory left [-0.05,1.05] after t=5 (trial " + std::to_string(trial) + ")");
    }

    // (b) gamma=0 fixed point vs bisection oracle
    auto g0 = [](double y) {
        const double s = std::sin(y + std::cos(y) * std::cos(y));
        return s * s - y;
    };
    double lo = 0.0, hi = 1.0;
    for (int i = 0; i < 80; ++i) {
        const double mid = 0.5 * (lo + hi);
        (g0(mid) > 0 ? lo : hi) = mid;
    }
    const double ystar = 0.5 * (lo + hi);
    auto end = nmode::integrate(nmode::OdeState<double>{Tensor64::scalar(0.0), 0.0, Tensor64::scalar(0.0)},
                                nmode::Deriv::nmode2, nmode::analysis_solver());
    c.require(std::abs(end.y.item() - ystar) < 1e-3,
              "integrated fixed point " + std::to_string(end.y.item()) + " vs bisection " + std::to_string(ystar));

    // (c) RK4 order ratio on ydot = -y
    auto exp_err = [](double h) {
        nmode::SolverSpec s{nmode::Method::rk4, h, 1.0};
        nmode::DerivFn<double> f = [](const Tensor64& y, const Tensor64&) { return mul_scalar(y, -1.0); };
        auto out =
            nmode::integrate_with(nmode::OdeState<double>{Tensor64::scalar(1.0), 0.0, Tensor64::scalar(0.0)}, f, s);
        return std::abs(out.y.item() - 0.36787944117144233);
    };
    const double ratio = exp_err(0.125) / exp_err(0.0625);
    c.require(ratio > 14.0 && ratio < 18.0, "step-halving ratio " + std::to_string(ratio) + " outside 16 +/- 2");
    char buf[96];
    std::snprintf(buf, sizeof(buf), "y*=%.6f, order ratio %.2f", ystar, ratio);
    c.note(buf);
    return c;
}

// ---------------------------------------------------------------------------
// 3. oracle equivalence

Criterion criterion3() {
    Criterion c;
    CounterRng rng(3030, 0, 0);

    // adaptive max pooling, exhaustive dims <= 8
    for (int h = 1; h <= 8; ++h)
        for (int w = 1; w <= 8; ++w)
            for (int oh = 1; oh <= h; ++oh)
                for (int ow = 1; ow <= w; ++ow) {
                    auto v = rvec(rng, h * w);
                    auto got = adaptive_max_pool(Tensor64::from({1, 1, h, w}, v), oh, ow);
                    for (int oy = 0; oy < oh; ++oy)
                        for (int ox = 0; ox < ow; ++ox) {
                            const int y0 = (oy * h) / oh, y1 = static_cast<int>(std::ceil(double(oy + 1) * h / oh));
                            const int x0 = (ox * w) / ow, x1 = static_cast<int>(std::ceil(double(ox + 1) * w / ow));
                            double best = -1e300;
                            for (int iy = y0; iy < y1; ++iy)
                                for (int ix = x0; ix < x1; ++ix)
                                    best = std::max(best, v[static_cast<size_t>(iy) * w + ix]);
                            if (got.data()[static_cast<size_t>(oy * ow + ox)] != best)
                                c.require(false, "pooling mismatch at " + std::to_string(h) + "x" + std::to_string(w));
                        }
                }

    // LWFF vs the literal formula walk, 100 random cases
    const int n = 1, ch = 3, hh = 2, ww = 2, k = 3;
    (void)n;
    double worst_lwff = 0;
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<Tensor64> feats;
        std::vector<std::vector<double>> xs, hw_, hb_;
        fusion::FusionParams<double> params;
        params.k = k;
        for (int j = 0; j < k; ++j) {
            xs.push_back(rvec(rng, ch * hh * ww));
            hw_.push_back(rvec(rng, ch * ch));
            hb_.push_back(rvec(rng, ch));
            feats.push_back(Tensor64::from({1, ch, hh, ww}, xs.back()));
            params.heads.push_back({Tensor64::from({ch, ch, 1, 1}, hw_.back()), Tensor64::from({ch}, hb_.back())});
        }
        auto mw = rvec(rng, ch * k * ch);
        auto mb = rvec(rng, ch);
        params.merge_weight = Tensor64::from({ch, k * ch, 1, 1}, mw);
        params.merge_bias = Tensor64::from({ch}, mb);
        auto got = fusion::lwff_fuse(feats, params);

        // literal walk of the weighting, concatenation and merge equations
        std::vector<double> cat(static_cast<size_t>(k) * ch * hh * ww);
        for (int j = 0; j < k; ++j) {
            std::vector<double> pooled(static_cast<size_t>(ch));
            for (int cc = 0; cc < ch; ++cc) {
                double s = 0;
                for (int i = 0; i < hh * ww; ++i)
                    s += xs[static_cast<size_t>(j)][static_cast<size_t>(cc) * hh * ww + i];
                pooled[static_cast<size_t>(cc)] = s / (hh * ww);
            }
            for (int cc = 0; cc < ch; ++cc) {
                double logit = hb_[static_cast<size_t>(j)][static_cast<size_t>(cc)];
                for (int ic = 0; ic < ch; ++ic)
                    logit += hw_[static_cast<size_t>(j)][static_cast<size_t>(cc) * ch + ic] *
                             pooled[static_cast<size_t>(ic)];
                const double alpha = 1.0 / (1.0 + std::exp(-logit));
                for (int i = 0; i < hh * ww; ++i)
                    cat[(static_cast<size_t>(j) * ch + cc) * hh * ww + i] =
                        alpha * xs[static_cast<size_t>(j)][static_cast<size_t>(cc) * hh * ww + i];
            }
        }
        for (int cc = 0; cc < ch; ++cc)
            for (int i = 0; i < hh * ww; ++i) {
                double acc = mb[static_cast<size_t>(cc)];
                for (int ic = 0; ic < k * ch; ++ic)
                    acc += mw[static_cast<size_t>(cc) * k * ch + ic] * cat[static_cast<size_t>(ic) * hh * ww + i];
                worst_lwff =
                    std::max(worst_lwff, std::abs(acc - got.data()[static_cast<size_t>(cc) * hh * ww + i]));
            }
    }
    c.require(worst_lwff <= 1e-6, "LWFF vs literal oracle err " + std::to_string(worst_lwff));

    // NMS crafted fixture vs greedy walk
    DetectionSet four = {
        {{{0, 0, 4, 4}, 0, 0.9}, {{0, 0, 4, 4}, 0, 0.8}, {{3, 0, 7, 4}, 0, 0.7}, {{0, 0, 4, 4}, 1, 0.6}}};
    auto kept = evalm::nms(four, 0.5);
    c.require(kept[0].size() == 3 && kept[0][0].score == 0.9 && kept[0][1].score == 0.7 && kept[0][2].cls == 1,
              "NMS crafted fixture mismatch");

    // AP crafted fixture vs enumerated interpolation oracle
    GroundTruthSet truth = {{{{0, 0, 4, 4}, 0}, {{10, 10, 14, 14}, 0}}};
    DetectionSet d3 = {{{{0, 0, 4, 4}, 0, 0.9}, {{20, 20, 24, 24}, 0, 0.8}, {{10, 10, 14, 14}, 0, 0.7}}};
    const double want_ap = (51.0 + 50.0 * (2.0 / 3.0)) / 101.0;
    const double got_ap = evalm::average_precision(d3, truth, 0, 0.5);
    c.require(std::abs(got_ap - want_ap) <= 1e-6,
              "AP fixture " + std::to_string(got_ap) + " vs " + std::to_string(want_ap));

    // GIoU hand cases
    c.require(std::abs(losses::giou_loss({0, 0, 1, 1}, {0, 0, 1, 1}) - 0.0) <= 1e-6, "GIoU identity case");
    c.require(std::abs(losses::giou_loss({0, 0, 1, 1}, {2, 0, 3, 1}) - 4.0 / 3.0) <= 1e-6, "GIoU disjoint case");
    c.require(std::abs(losses::giou_loss({0, 0, 2, 2}, {1, 1, 3, 3}) - 1.0793650793650793) <= 1e-6,
              "GIoU overlap case");
    return c;
}

// ---------------------------------------------------------------------------
// 4. loss identities

Criterion criterion4() {
    Criterion c;
    c.require(losses::qfl_scalar(0.37, 0.37, 2.0) == 0.0, "QFL(p=y) != 0");

    std::vector<double> split(9, 0.0);
    split[3] = split[4] = 0.5;
    c.require(std::abs(losses::dfl(Tensor64::from({9}, split), 3.5).item() - std::log(2.0)) <= 1e-9,
              "DFL symmetric case != ln 2");

    CounterRng rng(4040, 0, 0);
    aatm::Discriminator<double> d0;
    d0.input_dim = 4;
    d0.fc1_w = Tensor64::zeros({4, 128});
    d0.fc1_b = Tensor64::zeros({128});
    d0.fc2_w = Tensor64::zeros({128, 64});
    d0.fc2_b = Tensor64::zeros({64});
    d0.fc3_w = Tensor64::zeros({64, 1});
    d0.fc3_b = Tensor64::zeros({1});
    aatm::AdversarialBatch<double> b{0, Tensor64::from({3, 1, 2, 2}, rvec(rng, 12)),
                                     Tensor64::from({3, 1, 2, 2}, rvec(rng, 12))};
    c.require(std::abs(aatm::d_loss(b, d0).item() - 2.0 * std::log(2.0)) <= 1e-9, "d_loss at D=0.5 != 2 ln 2");

    // dist zero on equality
    aatm::Generator<double> gz{Tensor64::zeros({1, 1, 3, 3}), Tensor64::zeros({1}), Tensor64::zeros({1, 1, 3, 3}),
                               Tensor64::zeros({1})};
    std::vector<fusion::AlignSpec<double>> a1 = {
        {1, 1, 1, 1, Tensor64::from({1, 1, 1, 1}, {1.0}), Tensor64::zeros({1})}};
    std::vector<Tensor64> tt = {Tensor64::zeros({1, 1, 1, 1})};
    std::vector<Tensor64> ss = {Tensor64::filled({1, 1, 1, 1}, 0.9)};
    c.require(losses::dist_loss(tt, ss, gz, a1).item() == 0.0, "dist_loss not exactly zero on equality");

    losses::LossWeights w;
    w.sigma = 0.6;
    w.tau = 0.3;
    auto out = losses::total_loss(Tensor64::scalar(1.0), Tensor64::scalar(2.0), Tensor64::scalar(3.0), w);
    c.require(std::abs(out.total.item() - 1.5) <= 1e-12, "total_loss arithmetic off");
    c.require(
        std::abs(out.total.item() - (w.sigma * out.det + w.tau * out.dist + (1 - w.sigma - w.tau) * out.adv)) <= 1e-12,
        "logged components disagree with the combination");
    return c;
}

// ---------------------------------------------------------------------------
// 5. adversarial isolation (+ frozen teachers on a miniature run)

config::DistillConfig miniature_config() {
    config::DistillConfig c;
    c.seed = 7;
    c.student.stem_channels = 2;
    c.student.stage_widths = {3, 4, 5};
    c.student.pyramid_levels = 2;
    c.student.pyramid_channels = 4;
    c.student.head_tower_depth = 1;
    c.teacher_small.stem_channels = 3;
    c.teacher_small.stage_widths = {4, 6, 7};
    c.teacher_small.pyramid_levels = 2;
    c.teacher_small.pyramid_channels = 6;
    c.teacher_small.head_tower_depth = 1;
    c.teacher_mid.stem_channels = 4;
    c.teacher_mid.stage_widths = {5, 7, 9};
    c.teacher_mid.pyramid_levels = 2;
    c.teacher_mid.pyramid_channels = 6;
    c.teacher_mid.head_tower_depth = 1;
    c.teacher_large.stem_channels = 5;
    c.teacher_large.stage_widths = {6, 8, 10};
    c.teacher_large.pyramid_levels = 2;
    c.teacher_large.pyramid_channels = 8;
    c.teacher_large.head_tower_depth = 1;
    c.scene.image_size = 32;
    c.scene.discs_min = 2;
    c.scene.discs_max = 3;
    c.scene.radius_min = 3.0;
    c.scene.radius_max = 4.5;
    c.scene.noise.gaussian_sigma = 0.05;
    c.train.batch_size = 4;
    c.train.teacher_epochs = 1;
    c.train.distill_epochs = 1;
    c.train.n_train = 8;
    c.train.n_val = 4;
    c.train.n_test = 4;
    c.validate();
    return c;
}

Criterion criterion5() {
    Criterion c;
    CounterRng rng(5050, 0, 0);
    const int ch = 2, n = 3;
    auto student = Tensor64::param({n, ch, 2, 2}, rvec(rng, n * ch * 4));
    auto G = aatm::Generator<double>::make(ch, rng);
    auto D = aatm::Discriminator<double>::make(ch * 4, rng);
    auto teacher = Tensor64::from({n, ch, 2, 2}, rvec(rng, n * ch * 4));

    {
        aatm::AdversarialBatch<double> b{0, teacher, aatm::generate(G, student)};
        backward(aatm::d_loss(b, D));
        for (auto* p : G.params())
            if (p->has_grad())
                for (double g : p->grad()) c.require(g == 0.0, "generator grad nonzero after d_loss");
        c.require(!student.has_grad(), "student grad materialized by d_loss");
    }
    {
        student.zero_grad();
        for (auto* p : D.params()) p->zero_grad();
        aatm::AdversarialBatch<double> b{0, teacher, aatm::generate(G, student)};
        backward(aatm::g_loss(b, D));
        for (auto* p : D.params())
            for (double g : p->grad()) c.require(g == 0.0, "discriminator grad nonzero after g_loss");
    }
    // frozen teachers across a full (miniature) distillation run
    auto cfg = miniature_config();
    auto teachers = pipeline::train_teachers(cfg, 7);
    auto res = pipeline::distill(cfg, teachers, "iso", 7);
    c.require(res.teacher_checksum_before == res.teacher_checksum_after, "teacher checksum changed during distill");
    return c;
}

// ---------------------------------------------------------------------------
// 6. compression analogue

Criterion criterion6() {
    Criterion c;
    auto student = detnet::default_config(detnet::Role::student);
    auto small = detnet::default_config(detnet::Role::teacher_small);
    auto cs = detnet::count_cost(student, 64, 64);
    auto ct = detnet::count_cost(small, 64, 64);
    const double pr = double(cs.params) / double(ct.params);
    const double fr = double(cs.flops) / double(ct.flops);
    c.require(pr <= 0.35, "param ratio " + std::to_string(pr) + " > 0.35");
    c.require(fr <= 0.65, "FLOP ratio " + std::to_string(fr) + " > 0.65");

    // counters vs an independent per-layer tally and the real tensor sizes
    for (auto role : {detnet::Role::student, detnet::Role::teacher_small}) {
        auto cfg = detnet::default_config(role);
        auto cp = [](int ci, int co, int k) { return int64_t(ci) * co * k * k + co; };
        auto cf = [](int ci, int co, int k, int h, int w) { return 2LL * ci * co * k * k * h * w; };
        int64_t p = cp(1, cfg.stem_channels, 3);
        int64_t f = cf(1, cfg.stem_channels, 3, 64, 64);
        int h = 32, w = 32, ci = cfg.stem_channels;
        std::vector<std::pair<int, int>> dims;
        for (int sw : cfg.stage_widths) {
            h /= 2;
            w /= 2;
            p += cp(ci, sw, 3) + cp(sw, sw, 3);
            f += cf(ci, sw, 3, h, w) + cf(sw, sw, 3, h, w);
            dims.push_back({h, w});
            ci = sw;
        }
        const int steps = cfg.solver.steps();
        const int P = cfg.pyramid_channels;
        for (int k = 0; k < cfg.pyramid_levels; ++k) {
            auto [lh, lw] = dims[static_cast<size_t>(k + 1)];
            const int cw = cfg.stage_widths[static_cast<size_t>(k + 1)];
            p += cp(cw, P, 1) + cp(P, P, 3);
            f += cf(cw, P, 1, lh, lw) + cf(P, P, 3, lh, lw);
            f += 2LL * cfg.head_tower_depth * cf(P, P, 3, lh, lw);
            if (cfg.nmode2_placement.head) f += 2LL * cf(P, P, 1, lh, lw) * steps;
            f += cf(P, cfg.num_classes, 3, lh, lw) + cf(P, 4 * (cfg.reg_bins + 1), 3, lh, lw);
        }
        p += 2LL * cfg.head_tower_depth * cp(P, P, 3);
        if (cfg.nmode2_placement.head) p += 2LL * cp(P, P, 1);
        p += cp(P, cfg.num_classes, 3) + cp(P, 4 * (cfg.reg_bins + 1), 3);
        auto cost = detnet::count_cost(cfg, 64, 64);
        c.require(cost.params == p, std::string(role_name(role)) + " param counter vs tally");
        c.require(cost.flops == f, std::string(role_name(role)) + " FLOP counter vs tally");
        auto net = detnet::build<float>(cfg, 3);
        c.require(detnet::param_count(net) == p, std::string(role_name(role)) + " tensor sizes vs tally");
    }
    char buf[96];
    std::snprintf(buf, sizeof(buf), "param ratio %.3f, FLOP ratio %.3f", pr, fr);
    c.note(buf);
    return c;
}

// ---------------------------------------------------------------------------
// 7 + 8: desk-scale benchmark (shared frozen teachers, paired seeds)

struct BenchmarkOutcome {
    double mean_full = 0, mean_alone = 0, mean_backbone = 0;
    double elapsed = 0;
};

BenchmarkOutcome run_benchmark() {
    BenchmarkOutcome out;
    const auto t0 = clk::now();
    config::DistillConfig cfg;  // shipped defaults
    cfg.validate();
    auto splits = synth::make_split(cfg.scene, cfg.train.n_train, cfg.train.n_val, cfg.train.n_test);
    auto teachers = pipeline::train_teachers(cfg, 1001);
    std::fprintf(stderr, "  [bench] teachers ready after %.0fs\n", secs(t0, clk::now()));

    const std::vector<uint64_t> seeds = {1, 2, 3};
    for (uint64_t seed : seeds) {
        auto full = pipeline::distill(cfg, teachers, "full-s" + std::to_string(seed), seed);
        auto rep_full = pipeline::evaluate_checkpoint(cfg, cfg.student_as_built(), full.best, splits.test, "student/");
        out.mean_full += rep_full.map_50 / seeds.size();

        config::DistillConfig back = cfg;
        back.student.nmode2_placement = {true, false, false};
        auto bb = pipeline::distill(back, teachers, "backbone-s" + std::to_string(seed), seed);
        auto rep_bb = pipeline::evaluate_checkpoint(back, back.student_as_built(), bb.best, splits.test, "student/");
        out.mean_backbone += rep_bb.map_50 / seeds.size();

        config::DistillConfig alone = cfg;
        alone.use_nmode2 = false;
        auto solo = pipeline::train_detector(alone.student_as_built(), alone, "alone-s" + std::to_string(seed), seed,
                                             nullptr, cfg.train.distill_epochs);
        auto rep_solo = pipeline::evaluate_checkpoint(alone, alone.student_as_built(), solo.best, splits.test);
        out.mean_alone += rep_solo.map_50 / seeds.size();
        std::fprintf(stderr, "  [bench] seed %llu: full %.4f backbone %.4f alone %.4f (t=%.0fs)\n",
                     static_cast<unsigned long long>(seed), rep_full.map_50, rep_bb.map_50, rep_solo.map_50,
                     secs(t0, clk::now()));
    }
    out.elapsed = secs(t0, clk::now());
    return out;
}

Criterion criterion7(const BenchmarkOutcome& b) {
    Criterion c;
    const double uplift = 100.0 * (b.mean_full - b.mean_alone);
    c.require(uplift >= 1.0, "uplift " + std::to_string(uplift) + " mAP points < 1.0");
    c.require(b.elapsed <= 4500.0, "benchmark exceeded the runtime budget");
    char buf[128];
    std::snprintf(buf, sizeof(buf), "full %.2f vs alone %.2f mAP (uplift %+.2f points) in %.0fs", 100 * b.mean_full,
                  100 * b.mean_alone, uplift, b.elapsed);
    c.note(buf);
    return c;
}

Criterion criterion8(const BenchmarkOutcome& b) {
    Criterion c;
    c.require(b.mean_full >= b.mean_backbone, "head placement " + std::to_string(100 * b.mean_full) +
                                                  " < backbone placement " + std::to_string(100 * b.mean_backbone));
    char buf[96];
    std::snprintf(buf, sizeof(buf), "head %.2f vs backbone %.2f mAP", 100 * b.mean_full, 100 * b.mean_backbone);
    c.note(buf);
    return c;
}

// ---------------------------------------------------------------------------
// 9. determinism and persistence

Criterion criterion9() {
    Criterion c;
    auto cfg = miniature_config();
    auto teachers = pipeline::train_teachers(cfg, 7);
    auto run = [&] {
        pipeline::MetricsLog log;
        auto res = pipeline::distill(cfg, teachers, "det", 7, &log);
        return std::pair{log.csv(), std::move(res)};
    };
    auto [csv1, res1] = run();
    auto [csv2, res2] = run();
    c.require(csv1 == csv2, "metrics CSV not byte-identical across reruns");

    const std::string p1 = "/tmp/meddet_acc_a.mdkt", p2 = "/tmp/meddet_acc_b.mdkt";
    ckpt::save(res1.best, p1);
    auto loaded = ckpt::load(p1);
    ckpt::save(loaded, p2);
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    c.require(!s1.empty() && s1 == s2, "checkpoint round-trip not byte-identical");

    {
        std::ofstream bad(p1, std::ios::binary | std::ios::trunc);
        bad << "XXXX";
        bad << s2.substr(4);
    }
    bool rejected = false;
    try {
        ckpt::load(p1);
    } catch (const FormatError&) {
        rejected = true;
    }
    c.require(rejected, "corrupted checkpoint accepted");
    {
        std::ofstream trunc(p1, std::ios::binary | std::ios::trunc);
        trunc << s2.substr(0, s2.size() / 3);
    }
    rejected = false;
    try {
        ckpt::load(p1);
    } catch (const FormatError&) {
        rejected = true;
    }
    c.require(rejected, "truncated checkpoint accepted");
    std::remove(p1.c_str());
    std::remove(p2.c_str());
    return c;
}

// ---------------------------------------------------------------------------
// 10. negative controls

Criterion criterion10() {
    Criterion c;
    CounterRng rng(1010, 0, 0);
    auto x = Tensor64::param({6}, rvec(rng, 6));
    std::function<Tensor64(const Tensor64&)> bad = [](const Tensor64& t) {
        auto out = meddet::detail::make_result<double>({1}, "bad");
        double acc = 0;
        for (double v : t.data()) acc += v;
        out->value[0] = acc;
        if (grad_enabled() && t.node()->on_grad_path()) {
            auto tn = t.node();
            out->parents = {tn};
            out->backprop = [tn](meddet::detail::Node<double>& self) {
                tn->ensure_grad();
                for (auto& g : tn->grad) g += 3.0 * self.grad[0];
            };
        }
        return Tensor64(out);
    };
    c.require(finite_diff_check<double>(bad, x, 1e-5) > 1e-2, "wrong gradient slipped past the checker");

    // removing the block removes the trapping property
    detnet::NetConfig with;
    with.stem_channels = 2;
    with.stage_widths = {3, 4, 5};
    with.pyramid_levels = 2;
    with.pyramid_channels = 4;
    with.head_tower_depth = 1;
    with.nmode2_placement = {false, false, true};
    auto without = with;
    without.nmode2_placement = {false, false, false};
    auto scaled = Tensor64::from({1, 1, 16, 16}, rvec(rng, 256, 900.0, 1000.0));
    {
        auto net = detnet::build<double>(with, 11);
        detnet::ForwardTrace<double> trace;
        detnet::forward(net, scaled, &trace);
        for (const auto& t : trace.cls_tower_out)
            for (double v : t.data())
                c.require(v > -0.05 && v < 1.05, "tower output escaped [-0.05,1.05] despite the block");
    }
    {
        auto net = detnet::build<double>(without, 11);
        detnet::ForwardTrace<double> trace;
        detnet::forward(net, scaled, &trace);
        double peak = 0;
        for (const auto& t : trace.cls_tower_out)
            for (double v : t.data()) peak = std::max(peak, std::abs(v));
        c.require(peak > 1.05,
                  "unblocked tower stayed bounded under scaled inputs (peak " + std::to_string(peak) + ")");
    }
    return c;
}

}  // namespace

int main(int argc, char** argv) {
    std::set<int> wanted;
    for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
    auto selected = [&](int k) { return wanted.empty() || wanted.count(k) > 0; };

    std::vector<std::pair<int, Criterion>> results;
    if (selected(1)) results.emplace_back(1, criterion1());
    if (selected(2)) results.emplace_back(2, criterion2());
    if (selected(3)) results.emplace_back(3, criterion3());
    if (selected(4)) results.emplace_back(4, criterion4());
    if (selected(5)) results.emplace_back(5, criterion5());
    if (selected(6)) results.emplace_back(6, criterion6());
    if (selected(7) || selected(8)) {
        BenchmarkOutcome bench = run_benchmark();
        if (selected(7)) results.emplace_back(7, criterion7(bench));
        if (selected(8)) results.emplace_back(8, criterion8(bench));
    }
    if (selected(9)) results.emplace_back(9, criterion9());
    if (selected(10)) results.emplace_back(10, criterion10());

    static const char* kNames[] = {"",
                                   "gradient suite (finite differences, 100 trials/op)",
                                   "dynamics suite (trapping, fixed point, RK4 order)",
                                   "oracle equivalence (pooling, LWFF, NMS, AP, GIoU)",
                                   "loss identities",
                                   "adversarial isolation and frozen teachers",
                                   "compression analogue (param/FLOP ratios + counters)",
                                   "distillation uplift on the synthetic benchmark",
                                   "nmODE2 placement effect (head vs backbone)",
                                   "determinism and persistence",
                                   "negative controls"};
    std::sort(results.begin(), results.end(), [](auto& a, auto& b) { return a.first < b.first; });
    bool all = true;
    for (const auto& [num, r] : results) {
        std::printf("[%s] criterion %d: %s%s%s\n", r.pass ? "PASS" : "FAIL", num, kNames[num],
                    r.detail.empty() ? "" : " -- ", r.detail.c_str());
        all = all && r.pass;
    }
    std::fflush(stdout);
    return all ? 0 : 1;
}
