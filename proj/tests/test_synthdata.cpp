// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <set>

#include "meddet/synthdata.hpp"

using meddet::Tensor64;
namespace md = meddet;
namespace sy = meddet::synth;

namespace {

sy::SceneSpec quiet_spec(uint64_t seed) {
    sy::SceneSpec s;
    s.seed = seed;
    s.noise = {};  // noiseless
    return s;
}

}  // namespace

TEST_CASE("render is deterministic and in range") {
    auto spec = quiet_spec(101);
    spec.noise.gaussian_sigma = 0.1;
    spec.noise.rician_sigma = 0.05;
    auto a = sy::render<double>(spec, 7);
    auto b = sy::render<double>(spec, 7);
    REQUIRE(a.image.data() == b.image.data());
    REQUIRE(a.truth.size() == b.truth.size());
    for (size_t i = 0; i < a.truth.size(); ++i) {
        REQUIRE(a.truth[i].box.x1 == b.truth[i].box.x1);
        REQUIRE(a.truth[i].cls == b.truth[i].cls);
    }
    // a different index gives a different image
    auto c = sy::render<double>(spec, 8);
    REQUIRE(a.image.data() != c.image.data());

    for (double v : a.image.data()) {
        REQUIRE(v >= 0.0);
        REQUIRE(v <= 1.0);
    }
    REQUIRE(a.truth.size() >= 3);
    REQUIRE(a.truth.size() <= 6);
    for (const auto& obj : a.truth) {
        REQUIRE(obj.box.well_ordered());
        REQUIRE(obj.box.x1 >= 1.0);  // >= 2 px margin on the outer extent
        REQUIRE(obj.box.x2 <= 63.0);
    }
}

TEST_CASE("emitted boxes match the rendered extent within 1 px") {
    auto spec = quiet_spec(102);
    for (int index = 0; index < 100; ++index) {
        auto sc = sy::render<double>(spec, index, /*keep_masks=*/true);
        REQUIRE(sc.coverage_masks.size() == sc.truth.size());
        const int S = spec.image_size;
        for (size_t j = 0; j < sc.truth.size(); ++j) {
            // pixel-scan oracle over the rasterized coverage
            double mx1 = 1e9, my1 = 1e9, mx2 = -1e9, my2 = -1e9;
            for (int y = 0; y < S; ++y)
                for (int x = 0; x < S; ++x)
                    if (sc.coverage_masks[j][static_cast<size_t>(y) * S + x] >= 0.5f) {
                        mx1 = std::min(mx1, static_cast<double>(x));
                        my1 = std::min(my1, static_cast<double>(y));
                        mx2 = std::max(mx2, static_cast<double>(x) + 1);
                        my2 = std::max(my2, static_cast<double>(y) + 1);
                    }
            const md::Box& e = sc.truth[j].box;
            REQUIRE(std::abs(mx1 - e.x1) <= 1.0);
            REQUIRE(std::abs(my1 - e.y1) <= 1.0);
            REQUIRE(std::abs(mx2 - e.x2) <= 1.0);
            REQUIRE(std::abs(my2 - e.y2) <= 1.0);
        }
    }
}

TEST_CASE("protrusion_bump = 0 collapses every label to class 0") {
    auto spec = quiet_spec(103);
    spec.protrusion_bump = 0.0;
    for (int index = 0; index < 20; ++index) {
        auto sc = sy::render<double>(spec, index);
        for (const auto& obj : sc.truth) REQUIRE(obj.cls == 0);
    }
}

TEST_CASE("class frequency tracks class_balance") {
    auto spec = quiet_spec(104);
    spec.class_balance = 0.5;
    int protruding = 0, total = 0;
    for (int index = 0; index < 1000; ++index) {
        auto sc = sy::render<double>(spec, index);
        for (const auto& obj : sc.truth) {
            total += 1;
            protruding += obj.cls;
        }
    }
    const double freq = static_cast<double>(protruding) / total;
    REQUIRE(freq > 0.45);
    REQUIRE(freq < 0.55);
}

TEST_CASE("noise stages match their closed forms") {
    // all-zero spec is the identity
    auto img = Tensor64::filled({1, 32, 32}, 0.5);
    auto same = sy::apply_noise(img, sy::NoiseSpec{}, 1, 1);
    REQUIRE(same.data() == img.data());

    // Rician on x = 0 has the Rayleigh mean sigma*sqrt(pi/2)
    const double sigma_r = 0.05;
    sy::NoiseSpec rn;
    rn.rician_sigma = sigma_r;
    auto zeros = Tensor64::zeros({1, 100, 100});
    double mean = 0;
    int samples = 0;
    for (int index = 0; index < 10; ++index) {
        auto noisy = sy::apply_noise(zeros, rn, 55, static_cast<uint64_t>(index));
        for (double v : noisy.data()) mean += v;
        samples += static_cast<int>(noisy.size());
    }
    mean /= samples;
    const double want = sigma_r * std::sqrt(3.14159265358979323846 / 2.0);
    REQUIRE(std::abs(mean - want) / want < 0.01);

    // Gaussian-only variance ~ sigma^2
    sy::NoiseSpec gn;
    gn.gaussian_sigma = 0.1;
    auto mid = Tensor64::filled({1, 100, 100}, 0.5);
    double m = 0, m2 = 0;
    int n = 0;
    for (int index = 0; index < 10; ++index) {
        auto noisy = sy::apply_noise(mid, gn, 56, static_cast<uint64_t>(index));
        for (double v : noisy.data()) {
            m += v;
            m2 += v * v;
            ++n;
        }
    }
    m /= n;
    const double var = m2 / n - m * m;
    REQUIRE(std::abs(var - 0.01) / 0.01 < 0.05);

    // streaks brighten
    sy::NoiseSpec st;
    st.streak_count = 3;
    st.streak_amplitude = 0.4;
    auto dark = Tensor64::filled({1, 64, 64}, 0.1);
    auto streaked = sy::apply_noise(dark, st, 57, 0);
    double hi = 0;
    for (double v : streaked.data()) hi = std::max(hi, v);
    REQUIRE(hi >= 0.45);
}

TEST_CASE("psnr decreases as gaussian noise grows") {
    auto spec = quiet_spec(105);
    double prev = 1e9;
    for (double sigma : {0.0, 0.05, 0.1, 0.2}) {
        auto noisy_spec = spec;
        noisy_spec.noise.gaussian_sigma = sigma;
        double mean_psnr = 0;
        for (int index = 0; index < 10; ++index) {
            auto clean = sy::render<double>(spec, index);
            auto noisy = sy::render<double>(noisy_spec, index);
            mean_psnr += sy::psnr(noisy.image, clean.image);
        }
        mean_psnr /= 10;
        REQUIRE(mean_psnr < prev);
        prev = mean_psnr;
    }
}

TEST_CASE("splits are disjoint and reproducible") {
    auto spec = quiet_spec(106);
    auto splits = sy::make_split(spec, 800, 100, 100);
    std::set<int> seen;
    for (int i = 0; i < splits.train.count; ++i) seen.insert(splits.train.index(i));
    for (int i = 0; i < splits.val.count; ++i) seen.insert(splits.val.index(i));
    for (int i = 0; i < splits.test.count; ++i) seen.insert(splits.test.index(i));
    REQUIRE(seen.size() == 1000);

    // regenerated test set is byte-identical
    auto h1 = sy::render<double>(splits.test.spec, splits.test.index(5));
    auto h2 = sy::render<double>(splits.test.spec, splits.test.index(5));
    REQUIRE(h1.image.data() == h2.image.data());

    REQUIRE_THROWS_AS(sy::make_split(spec, 0, 1, 1), md::ConfigError);
}

TEST_CASE("dataset export round-trips") {
    auto spec = quiet_spec(107);
    spec.noise.gaussian_sigma = 0.05;
    sy::Dataset ds{spec, 0, 4};
    const std::string path = "/tmp/meddet_test_ds.bin";
    sy::export_dataset<double>(ds, path);
    auto back = sy::import_dataset<double>(path);
    REQUIRE(back.images.size() == 4);
    REQUIRE(back.h == 64);
    for (int i = 0; i < 4; ++i) {
        auto sc = sy::render<double>(spec, i);
        REQUIRE(back.truth[static_cast<size_t>(i)].size() == sc.truth.size());
        for (int64_t p = 0; p < sc.image.size(); ++p)
            REQUIRE(back.images[static_cast<size_t>(i)].data()[static_cast<size_t>(p)] ==
                    Catch::Approx(sc.image.data()[static_cast<size_t>(p)]).margin(1e-6));
    }
    // corrupted magic is rejected
    {
        std::ofstream bad(path, std::ios::binary);
        bad.write("NOPE", 4);
    }
    REQUIRE_THROWS_AS(sy::import_dataset<double>(path), md::FormatError);
    std::remove(path.c_str());
}
