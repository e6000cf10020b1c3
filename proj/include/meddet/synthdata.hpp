// SPDX-License-Identifier: Apache-2.0
//
// Deterministic synthetic scenes: noisy grayscale images with small
// anti-aliased elliptical discs in two classes (plain disc vs disc with a
// protruding half-ellipse bump), tight analytic boxes, and an MRI-flavoured
// noise stack (Rician magnitude noise, additive Gaussian, bright streaks).
// Everything is a pure function of (seed, index, stage).
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "meddet/boxes.hpp"
#include "meddet/errors.hpp"
#include "meddet/rng.hpp"
#include "meddet/tensor.hpp"

namespace meddet::synth {

struct NoiseSpec {
    double gaussian_sigma = 0.0;
    double rician_sigma = 0.0;
    int streak_count = 0;
    double streak_amplitude = 0.0;

    void validate() const {
        if (gaussian_sigma < 0 || rician_sigma < 0 || streak_count < 0 || streak_amplitude < 0)
            throw ConfigError("noise spec: all fields must be >= 0");
    }
    bool enabled() const { return gaussian_sigma > 0 || rician_sigma > 0 || streak_count > 0; }
};

struct SceneSpec {
    int image_size = 64;
    int discs_min = 3;
    int discs_max = 6;
    double radius_min = 3.0;
    double radius_max = 6.0;
    double protrusion_bump = 0.6;  // bump radius as a fraction of the disc radius
    double class_balance = 0.5;    // probability an object is a protrusion
    NoiseSpec noise;
    uint64_t seed = 0;

    void validate() const {
        if (image_size < 16) throw ConfigError("scene spec: image_size must be >= 16");
        if (discs_min < 1 || discs_max < discs_min) throw ConfigError("scene spec: bad disc count range");
        if (radius_min <= 0 || radius_max < radius_min) throw ConfigError("scene spec: bad radius range");
        if (protrusion_bump < 0 || protrusion_bump > 1) throw ConfigError("scene spec: protrusion_bump in [0,1]");
        if (class_balance < 0 || class_balance > 1) throw ConfigError("scene spec: class_balance in [0,1]");
        noise.validate();
    }
};

namespace detail {

struct Disc {
    double cx, cy, rx, ry;
    double bump_r = 0;   // 0 = plain disc
    double bump_x = 0, bump_y = 0;
    int cls = 0;
    double intensity = 0.8;

    // outer extent including the bump; the analytic box
    Box extent() const {
        Box b{cx - rx, cy - ry, cx + rx, cy + ry};
        if (bump_r > 0) {
            b.x1 = std::min(b.x1, bump_x - bump_r);
            b.y1 = std::min(b.y1, bump_y - bump_r);
            b.x2 = std::max(b.x2, bump_x + bump_r);
            b.y2 = std::max(b.y2, bump_y + bump_r);
        }
        return b;
    }

    bool covers(double x, double y) const {
        const double ex = (x - cx) / rx, ey = (y - cy) / ry;
        if (ex * ex + ey * ey <= 1.0) return true;
        if (bump_r > 0) {
            const double bx = x - bump_x, by = y - bump_y;
            if (bx * bx + by * by <= bump_r * bump_r) return true;
        }
        return false;
    }

    double outer_radius() const { return std::max(rx, ry) + 2.0 * bump_r; }
};

// 4x4 supersampled coverage of a pixel.
inline double coverage(const Disc& d, int px, int py) {
    int hits = 0;
    for (int sy = 0; sy < 4; ++sy)
        for (int sx = 0; sx < 4; ++sx)
            if (d.covers(px + (sx + 0.5) / 4.0, py + (sy + 0.5) / 4.0)) ++hits;
    return hits / 16.0;
}

}  // namespace detail

template <typename T>
struct Scene {
    TensorT<T> image;  // [1,H,W] in [0,1]
    std::vector<GtObject> truth;
    // per-object pixel coverage (row-major H*W), for extent checks
    std::vector<std::vector<float>> coverage_masks;
};

// Rician magnitude noise, then additive Gaussian, then bright streaks, then a
// final clamp to [0,1]. Each stage draws from its own (seed,index,stage) key
// so toggling one stage never shifts another's stream.
template <typename T>
TensorT<T> apply_noise(const TensorT<T>& image, const NoiseSpec& noise, uint64_t seed, uint64_t index) {
    noise.validate();
    if (!noise.enabled()) return image;
    const Shape& s = image.shape();
    const int h = s[s.size() == 3 ? 1 : 2], w = s[s.size() == 3 ? 2 : 3];
    std::vector<T> v = image.data();
    if (noise.rician_sigma > 0) {
        CounterRng rng(seed, index, 2);
        for (auto& x : v) {
            const double n1 = rng.gaussian(0.0, noise.rician_sigma);
            const double n2 = rng.gaussian(0.0, noise.rician_sigma);
            const double a = static_cast<double>(x) + n1;
            x = static_cast<T>(std::sqrt(a * a + n2 * n2));
        }
    }
    if (noise.gaussian_sigma > 0) {
        CounterRng rng(seed, index, 3);
        for (auto& x : v) x += static_cast<T>(rng.gaussian(0.0, noise.gaussian_sigma));
    }
    if (noise.streak_count > 0) {
        CounterRng rng(seed, index, 4);
        for (int k = 0; k < noise.streak_count; ++k) {
            const double theta = rng.uniform(0.0, 3.14159265358979323846);
            const double cx = rng.uniform(0.0, w), cy = rng.uniform(0.0, h);
            const double nx = std::sin(theta), ny = -std::cos(theta);  // line normal
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const double dist = std::abs((x + 0.5 - cx) * nx + (y + 0.5 - cy) * ny);
                    if (dist < 0.8) v[static_cast<size_t>(y) * w + x] += static_cast<T>(noise.streak_amplitude);
                }
        }
    }
    for (auto& x : v) x = std::clamp(x, T(0), T(1));
    return TensorT<T>::from(s, std::move(v));
}

// Deterministic render of scene `index`: smooth background gradient, placed
// discs, analytic boxes, then the noise stack.
template <typename T>
Scene<T> render(const SceneSpec& spec, int index, bool keep_masks = false) {
    spec.validate();
    const int S = spec.image_size;
    CounterRng rng(spec.seed, static_cast<uint64_t>(index), 1);

    // background gradient
    const double base = rng.uniform(0.08, 0.30);
    const double grad = rng.uniform(0.0, 0.15);
    const double theta = rng.uniform(0.0, 6.283185307179586);
    const double gx = std::cos(theta), gy = std::sin(theta);

    // place discs
    const int count = static_cast<int>(rng.uniform_int(spec.discs_min, spec.discs_max));
    std::vector<detail::Disc> discs;
    for (int d = 0; d < count; ++d) {
        detail::Disc disc;
        disc.rx = rng.uniform(spec.radius_min, spec.radius_max);
        disc.ry = rng.uniform(spec.radius_min, spec.radius_max);
        const bool protruding = rng.next_double() < spec.class_balance;
        const double phi = rng.uniform(0.0, 6.283185307179586);
        disc.intensity = rng.uniform(0.55, 0.95);
        const double bump_r = protruding ? spec.protrusion_bump * std::min(disc.rx, disc.ry) * 0.5 : 0.0;
        bool placed = false;
        for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
            const double pad = 2.0 + std::max(disc.rx, disc.ry) + 2.0 * bump_r;
            disc.cx = rng.uniform(pad, S - pad);
            disc.cy = rng.uniform(pad, S - pad);
            disc.bump_r = bump_r;
            if (bump_r > 0) {
                // bump centre sits on the ellipse boundary
                disc.bump_x = disc.cx + disc.rx * std::cos(phi);
                disc.bump_y = disc.cy + disc.ry * std::sin(phi);
            }
            placed = true;
            for (const auto& other : discs) {
                const double dx = disc.cx - other.cx, dy = disc.cy - other.cy;
                const double min_dist = disc.outer_radius() + other.outer_radius();
                if (dx * dx + dy * dy < min_dist * min_dist) {
                    placed = false;
                    break;
                }
            }
        }
        if (!placed)
            throw GenerationError("no feasible placement for disc " + std::to_string(d) + " in scene " +
                                  std::to_string(index));
        disc.cls = (bump_r > 0) ? 1 : 0;
        discs.push_back(disc);
    }

    Scene<T> out;
    std::vector<T> img(static_cast<size_t>(S) * S);
    for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
            const double proj = (gx * (x + 0.5) + gy * (y + 0.5)) / S;
            img[static_cast<size_t>(y) * S + x] = static_cast<T>(std::clamp(base + grad * (proj + 0.5), 0.0, 1.0));
        }
    for (const auto& d : discs) {
        std::vector<float> mask;
        if (keep_masks) mask.assign(static_cast<size_t>(S) * S, 0.0f);
        const Box e = d.extent();
        const int x0 = std::max(0, static_cast<int>(std::floor(e.x1)) - 1);
        const int x1 = std::min(S - 1, static_cast<int>(std::ceil(e.x2)) + 1);
        const int y0 = std::max(0, static_cast<int>(std::floor(e.y1)) - 1);
        const int y1 = std::min(S - 1, static_cast<int>(std::ceil(e.y2)) + 1);
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const double cov = detail::coverage(d, x, y);
                if (cov <= 0) continue;
                auto& px = img[static_cast<size_t>(y) * S + x];
                px = static_cast<T>(px * (1.0 - cov) + d.intensity * cov);
                if (keep_masks) mask[static_cast<size_t>(y) * S + x] = static_cast<float>(cov);
            }
        out.truth.push_back({d.extent(), d.cls});
        if (keep_masks) out.coverage_masks.push_back(std::move(mask));
    }

    TensorT<T> clean = TensorT<T>::from({1, S, S}, std::move(img));
    out.image = apply_noise(clean, spec.noise, spec.seed, static_cast<uint64_t>(index));
    return out;
}

// Split descriptor over disjoint index ranges; val/test realizations are
// frozen because every index regenerates identically.
struct Dataset {
    SceneSpec spec;
    int start = 0;
    int count = 0;

    int index(int i) const { return start + i; }
};

struct Splits {
    Dataset train, val, test;
};

inline Splits make_split(const SceneSpec& spec, int n_train, int n_val, int n_test) {
    if (n_train < 1 || n_val < 1 || n_test < 1) throw ConfigError("make_split: counts must be >= 1");
    Splits s;
    s.train = {spec, 0, n_train};
    s.val = {spec, n_train, n_val};
    s.test = {spec, n_train + n_val, n_test};
    return s;
}

// Peak signal-to-noise ratio in dB against a reference, capped for the
// identical-image case.
template <typename T>
double psnr(const TensorT<T>& a, const TensorT<T>& b, double cap_db = 99.0) {
    if (a.shape() != b.shape()) throw ShapeError("psnr: shape mismatch");
    double mse = 0;
    for (int64_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a.data()[static_cast<size_t>(i)]) -
                         static_cast<double>(b.data()[static_cast<size_t>(i)]);
        mse += d * d;
    }
    mse /= static_cast<double>(a.size());
    if (mse <= 0) return cap_db;
    return std::min(cap_db, 10.0 * std::log10(1.0 / mse));
}

// ---------------------------------------------------------------------------
// Binary export: magic "MDDS", count u32, H u16, W u16, then per image the
// f32 pixels, object count u16 and per object 4 f32 box coords + u8 class.

namespace detail {

template <typename V>
void put(std::ostream& os, V v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V take(std::istream& is, const char* what) {
    V v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!is)
        throw FormatError(std::string("dataset file truncated while reading ") + what + " at offset " +
                          std::to_string(static_cast<long long>(is.gcount())));
    return v;
}

}  // namespace detail

template <typename T>
void export_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path + " for writing");
    os.write("MDDS", 4);
    detail::put<uint32_t>(os, static_cast<uint32_t>(ds.count));
    detail::put<uint16_t>(os, static_cast<uint16_t>(ds.spec.image_size));
    detail::put<uint16_t>(os, static_cast<uint16_t>(ds.spec.image_size));
    for (int i = 0; i < ds.count; ++i) {
        Scene<T> sc = render<T>(ds.spec, ds.index(i));
        for (T v : sc.image.data()) detail::put<float>(os, static_cast<float>(v));
        detail::put<uint16_t>(os, static_cast<uint16_t>(sc.truth.size()));
        for (const auto& obj : sc.truth) {
            detail::put<float>(os, static_cast<float>(obj.box.x1));
            detail::put<float>(os, static_cast<float>(obj.box.y1));
            detail::put<float>(os, static_cast<float>(obj.box.x2));
            detail::put<float>(os, static_cast<float>(obj.box.y2));
            detail::put<uint8_t>(os, static_cast<uint8_t>(obj.cls));
        }
    }
}

template <typename T>
struct ExportedDataset {
    int h = 0, w = 0;
    std::vector<TensorT<T>> images;
    GroundTruthSet truth;
};

template <typename T>
ExportedDataset<T> import_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "MDDS") throw FormatError("bad dataset magic in " + path);
    ExportedDataset<T> out;
    const auto count = detail::take<uint32_t>(is, "count");
    out.h = detail::take<uint16_t>(is, "height");
    out.w = detail::take<uint16_t>(is, "width");
    for (uint32_t i = 0; i < count; ++i) {
        std::vector<T> px(static_cast<size_t>(out.h) * out.w);
        for (auto& v : px) v = static_cast<T>(detail::take<float>(is, "pixels"));
        out.images.push_back(TensorT<T>::from({1, out.h, out.w}, std::move(px)));
        const auto n = detail::take<uint16_t>(is, "object count");
        std::vector<GtObject> objs;
        for (uint16_t j = 0; j < n; ++j) {
            GtObject o;
            o.box.x1 = detail::take<float>(is, "box");
            o.box.y1 = detail::take<float>(is, "box");
            o.box.x2 = detail::take<float>(is, "box");
            o.box.y2 = detail::take<float>(is, "box");
            o.cls = detail::take<uint8_t>(is, "class");
            objs.push_back(o);
        }
        out.truth.push_back(std::move(objs));
    }
    return out;
}

}  // namespace meddet::synth
