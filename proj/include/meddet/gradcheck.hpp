// SPDX-License-Identifier: Apache-2.0
//
// The gradient suite: every differentiable operation checked against central
// finite differences on random inputs. Each named check runs `trials` times
// and reports its worst relative error.
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "meddet/aatm.hpp"
#include "meddet/alignfuse.hpp"
#include "meddet/losses.hpp"
#include "meddet/nmode.hpp"
#include "meddet/rng.hpp"
#include "meddet/tensor.hpp"

namespace meddet::gradcheck {

struct CheckResult {
    std::string name;
    double max_err = 0.0;
    int trials = 0;
    bool pass = false;
};

namespace detail {

template <typename T>
std::vector<T> rvec(CounterRng& rng, int64_t n, double lo = -1.0, double hi = 1.0) {
    std::vector<T> v(static_cast<size_t>(n));
    for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
    return v;
}

}  // namespace detail

// One trial of a named operation; returns the finite-difference error.
template <typename T>
using Trial = std::function<double(CounterRng&)>;

template <typename T>
std::vector<std::pair<std::string, Trial<T>>> suite() {
    using detail::rvec;
    const T eps = static_cast<T>(1e-5);
    std::vector<std::pair<std::string, Trial<T>>> checks;

    checks.emplace_back("conv2d", [eps](CounterRng& rng) {
        auto x = TensorT<T>::param({1, 2, 5, 5}, rvec<T>(rng, 50));
        auto w = TensorT<T>::from({3, 2, 3, 3}, rvec<T>(rng, 54, -0.5, 0.5));
        auto b = TensorT<T>::from({3}, rvec<T>(rng, 3));
        std::function<TensorT<T>(const TensorT<T>&)> f = [&](const TensorT<T>& t) {
            return mean(square(conv2d(t, w, b, 1, 1)));
        };
        double err = finite_diff_check<T>(f, x, eps);
        auto wp = TensorT<T>::param({3, 2, 3, 3}, rvec<T>(rng, 54, -0.5, 0.5));
        std::function<TensorT<T>(const TensorT<T>&)> fw = [&](const TensorT<T>& t) {
            return mean(square(conv2d(x, t, b, 2, 1)));
        };
        return std::max(err, finite_diff_check<T>(fw, wp, eps));
    });

    checks.emplace_back("fully_connected", [eps](CounterRng& rng) {
        auto x = TensorT<T>::param({3, 4}, rvec<T>(rng, 12));
        auto w = TensorT<T>::from({4, 2}, rvec<T>(rng, 8));
        auto b = TensorT<T>::from({2}, rvec<T>(rng, 2));
        std::function<TensorT<T>(const TensorT<T>&)> f = [&](const TensorT<T>& t) {
            return mean(square(fully_connected(t, w, b)));
        };
        double err = finite_diff_check<T>(f, x, eps);
        auto wp = TensorT<T>::param({4, 2}, rvec<T>(rng, 8));
        std::function<TensorT<T>(const TensorT<T>&)> fw = [&](const TensorT<T>& t) {
            return mean(square(fully_connected(x, t, b)));
        };
        return std::max(err, finite_diff_check<T>(fw, wp, eps));
    });

    checks.emplace_back("global_avg_pool", [eps](CounterRng& rng) {
        auto x = TensorT<T>::param({2, 3, 4, 4}, rvec<T>(rng, 96));
        std::function<TensorT<T>(const TensorT<T>&)> f = [](const TensorT<T>& t) {
            return sum(square(global_avg_pool(t)));
        };
        return finite_diff_check<T>(f, x, eps);
    });

    checks.emplace_back("adaptive_max_pool", [eps](CounterRng& rng) {
        auto x = TensorT<T>::param({1, 2, 5, 6}, rvec<T>(rng, 60));
        std::function<TensorT<T>(const TensorT<T>&)> f = [](const TensorT<T>& t) {
            return sum(square(adaptive_max_pool(t, 2, 3)));
        };
        return finite_diff_check<T>(f, x, eps);
    });

    checks.emplace_back("activations", [eps](CounterRng& rng) {
        auto x = TensorT<T>::param({12}, rvec<T>(rng, 12, -2.0, 2.0));
        std::function<TensorT<T>(const TensorT<T>&)> f = [](const TensorT<T>& t) {
            auto a = mul(sigmoid(t), sin(t));
            auto b = mul(relu(t), cos(t));
            return sum(add(a, b));
        };
        return finite_diff_check<T>(f, x, eps);
    });

    checks.emplace_back("nmode_block", [eps](CounterRng& rng) {
        nmode::SolverSpec spec{nmode::Method::rk4, 0.25, 1.0};
        auto g = TensorT<T>::param({4}, rvec<T>(rng, 4));
        std::function<TensorT<T>(const TensorT<T>&)> f = [&](const TensorT<T>& t) {
            nmode::OdeState<T> s0{TensorT<T>::zeros({4}), 0.0, t};
            return sum(nmode::integrate(s0, nmode::Deriv::nmode, spec).y);
        };
        return finite_diff_check<T>(f, g, eps);
    });

    checks.emplace_back("nmode2_block", [eps](CounterRng& rng) {
        nmode::SolverSpec spec{nmode::Method::rk4, 0.25, 1.0};
        auto wv = rvec<T>(rng, 4);
        auto bv = rvec<T>(rng, 2);
        auto x = TensorT<T>::param({1, 2, 2, 2}, rvec<T>(rng, 8));
        std::function<TensorT<T>(const TensorT<T>&)> f = [&](const TensorT<T>& t) {
            nmode::PerceptualMap<T> map{nmode::PerceptualMap<T>::Kind::conv1x1, TensorT<T>::from({2, 2, 1, 1}, wv),
                                        TensorT<T>::from({2}, bv)};
            return mean(square(nmode::nmode2_block(t, map, spec)));
        };
        double err = finite_diff_check<T>(f, x, eps);
        auto wp = TensorT<T>::param({2, 2, 1, 1}, rvec<T>(rng, 4));
        auto x2 = TensorT<T>::from({1, 2, 2, 2}, rvec<T>(rng, 8));
        std::function<TensorT<T>(const TensorT<T>&)> fw = [&](const TensorT<T>& t) {
            nmode::PerceptualMap<T> map{nmode::PerceptualMap<T>::Kind::conv1x1, t, TensorT<T>::from({2}, bv)};
            return mean(square(nmode::nmode2_block(x2, map, spec)));
        };
        return std::max(err, finite_diff_check<T>(fw, wp, eps));
    });

    checks.emplace_back("afa", [eps](CounterRng& rng) {
        auto wv = rvec<T>(rng, 6);
        auto bv = rvec<T>(rng, 3);
        auto x = TensorT<T>::param({1, 2, 4, 4}, rvec<T>(rng, 32));
        std::function<TensorT<T>(const TensorT<T>&)> f = [&](const TensorT<T>& t) {
            fusion::AlignSpec<T> spec{2, 3, 2, 2, TensorT<T>::from({3, 2, 1, 1}, wv), TensorT<T>::from({3}, bv)};
            return mean(square(fusion::afa_apply(t, spec)));
        };
        return finite_diff_check<T>(f, x, eps);
    });

    checks.emplace_back("lwff", [eps](CounterRng& rng) {
        const int c = 2;
        fusion::FusionParams<T> params;
        params.k = 2;
        params.heads = {{TensorT<T>::from({c, c, 1, 1}, rvec<T>(rng, 4)), TensorT<T>::from({c}, rvec<T>(rng, 2))},
                        {TensorT<T>::from({c, c, 1, 1}, rvec<T>(rng, 4)), TensorT<T>::from({c}, rvec<T>(rng, 2))}};
        params.merge_weight = TensorT<T>::from({c, 2 * c, 1, 1}, rvec<T>(rng, 8));
        params.merge_bias = TensorT<T>::from({c}, rvec<T>(rng, 2));
        auto other = TensorT<T>::from({1, c, 3, 3}, rvec<T>(rng, 18));
        auto x = TensorT<T>::param({1, c, 3, 3}, rvec<T>(rng, 18));
        std::function<TensorT<T>(const TensorT<T>&)> f = [&](const TensorT<T>& t) {
            return mean(square(fusion::lwff_fuse<T>({t, other}, params)));
        };
        return finite_diff_check<T>(f, x, eps);
    });

    checks.emplace_back("generator", [eps](CounterRng& rng) {
        aatm::Generator<T> g;
        g.conv1_w = TensorT<T>::from({2, 2, 3, 3}, rvec<T>(rng, 36, -0.4, 0.4));
        g.conv1_b = TensorT<T>::from({2}, rvec<T>(rng, 2));
        g.conv2_w = TensorT<T>::from({2, 2, 3, 3}, rvec<T>(rng, 36, -0.4, 0.4));
        g.conv2_b = TensorT<T>::from({2}, rvec<T>(rng, 2));
        auto x = TensorT<T>::param({1, 2, 3, 3}, rvec<T>(rng, 18));
        std::function<TensorT<T>(const TensorT<T>&)> f = [&](const TensorT<T>& t) {
            return mean(square(aatm::generate(g, t)));
        };
        double err = finite_diff_check<T>(f, x, eps);
        auto wp = TensorT<T>::param({2, 2, 3, 3}, rvec<T>(rng, 36, -0.4, 0.4));
        std::function<TensorT<T>(const TensorT<T>&)> fw = [&](const TensorT<T>& t) {
            aatm::Generator<T> g2 = g;
            g2.conv1_w = t;
            return mean(square(aatm::generate(g2, x)));
        };
        return std::max(err, finite_diff_check<T>(fw, wp, eps));
    });

    checks.emplace_back("discriminator", [eps](CounterRng& rng) {
        aatm::Discriminator<T> d;
        d.input_dim = 8;
        d.fc1_w = TensorT<T>::from({8, 128}, rvec<T>(rng, 1024, -0.2, 0.2));
        d.fc1_b = TensorT<T>::from({128}, rvec<T>(rng, 128, -0.1, 0.1));
        d.fc2_w = TensorT<T>::from({128, 64}, rvec<T>(rng, 8192, -0.1, 0.1));
        d.fc2_b = TensorT<T>::from({64}, rvec<T>(rng, 64, -0.1, 0.1));
        d.fc3_w = TensorT<T>::from({64, 1}, rvec<T>(rng, 64, -0.2, 0.2));
        d.fc3_b = TensorT<T>::from({1}, rvec<T>(rng, 1));
        auto x = TensorT<T>::param({2, 2, 2, 2}, rvec<T>(rng, 16));
        std::function<TensorT<T>(const TensorT<T>&)> f = [&](const TensorT<T>& t) {
            return mean(square(aatm::discriminate(d, t)));
        };
        return finite_diff_check<T>(f, x, eps);
    });

    checks.emplace_back("loss_qfl", [eps](CounterRng& rng) {
        auto y = TensorT<T>::from({6}, rvec<T>(rng, 6, 0.0, 1.0));
        auto p = TensorT<T>::param({6}, rvec<T>(rng, 6, 0.05, 0.95));
        std::function<TensorT<T>(const TensorT<T>&)> f = [&](const TensorT<T>& t) {
            return sum(losses::qfl(t, y, T(2)));
        };
        return finite_diff_check<T>(f, p, eps);
    });

    checks.emplace_back("loss_dfl", [eps](CounterRng& rng) {
        const double target = rng.uniform(0.2, 7.8);
        auto logits = TensorT<T>::param({1, 9}, rvec<T>(rng, 9));
        std::function<TensorT<T>(const TensorT<T>&)> f = [&](const TensorT<T>& t) {
            auto probs = softmax_rows(t);
            return losses::dfl(reshape(probs, {9}), target);
        };
        return finite_diff_check<T>(f, logits, eps);
    });

    checks.emplace_back("loss_giou", [eps](CounterRng& rng) {
        // boxes parameterized by center/extent so perturbation keeps x1<x2
        auto q = TensorT<T>::param({4}, rvec<T>(rng, 4, 0.5, 1.5));
        auto gx1 = TensorT<T>::from({1}, {T(0.4)});
        auto gy1 = TensorT<T>::from({1}, {T(0.2)});
        auto gx2 = TensorT<T>::from({1}, {T(2.1)});
        auto gy2 = TensorT<T>::from({1}, {T(2.4)});
        std::function<TensorT<T>(const TensorT<T>&)> f = [&](const TensorT<T>& t) {
            auto cx = gather(t, {0}), cy = gather(t, {1}), wdt = gather(t, {2}), hgt = gather(t, {3});
            auto px1 = sub(cx, wdt), px2 = add(cx, wdt);
            auto py1 = sub(cy, hgt), py2 = add(cy, hgt);
            return sum(losses::giou_loss_columns(px1, py1, px2, py2, gx1, gy1, gx2, gy2));
        };
        return finite_diff_check<T>(f, q, eps);
    });

    checks.emplace_back("loss_dist", [eps](CounterRng& rng) {
        const int c = 2;
        aatm::Generator<T> g;
        g.conv1_w = TensorT<T>::from({c, c, 3, 3}, rvec<T>(rng, 36, -0.3, 0.3));
        g.conv1_b = TensorT<T>::from({c}, rvec<T>(rng, 2));
        g.conv2_w = TensorT<T>::from({c, c, 3, 3}, rvec<T>(rng, 36, -0.3, 0.3));
        g.conv2_b = TensorT<T>::from({c}, rvec<T>(rng, 2));
        std::vector<fusion::AlignSpec<T>> align;
        align.push_back({c, c, 2, 2, TensorT<T>::from({c, c, 1, 1}, rvec<T>(rng, 4)), TensorT<T>::from({c}, rvec<T>(rng, 2))});
        std::vector<TensorT<T>> teacher = {TensorT<T>::from({1, c, 2, 2}, rvec<T>(rng, 8))};
        auto s = TensorT<T>::param({1, c, 3, 3}, rvec<T>(rng, 18));
        std::function<TensorT<T>(const TensorT<T>&)> f = [&](const TensorT<T>& t) {
            return losses::dist_loss(teacher, {t}, g, align);
        };
        return finite_diff_check<T>(f, s, eps);
    });

    checks.emplace_back("loss_total", [eps](CounterRng& rng) {
        losses::LossWeights w;
        auto parts = TensorT<T>::param({3}, rvec<T>(rng, 3, 0.1, 2.0));
        std::function<TensorT<T>(const TensorT<T>&)> f = [&](const TensorT<T>& t) {
            auto det = gather(t, {0});
            auto dist = gather(t, {1});
            auto adv = gather(t, {2});
            return losses::total_loss(det, dist, adv, w).total;
        };
        return finite_diff_check<T>(f, parts, eps);
    });

    return checks;
}

template <typename T>
std::vector<CheckResult> run_suite(int trials, double tol, uint64_t seed = 99, const std::string& filter = "") {
    std::vector<CheckResult> results;
    auto checks = suite<T>();
    for (auto& [name, trial] : checks) {
        if (!filter.empty() && filter != "all" && name.find(filter) == std::string::npos) continue;
        CheckResult r;
        r.name = name;
        r.trials = trials;
        CounterRng rng(seed, std::hash<std::string>{}(name), 13);
        for (int t = 0; t < trials; ++t) r.max_err = std::max(r.max_err, trial(rng));
        r.pass = r.max_err <= tol;
        results.push_back(std::move(r));
    }
    return results;
}

}  // namespace meddet::gradcheck
