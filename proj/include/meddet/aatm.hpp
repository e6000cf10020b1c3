// SPDX-License-Identifier: Apache-2.0
//
// Adversarial auxiliary teacher module: a two-conv generator over aligned
// student features and a per-level three-layer discriminator separating
// teacher features (label 1) from generated student features (label 0).
// d_loss trains only D (generated side detached); g_loss trains only the
// generator/student path (D evaluated with frozen weights).
#pragma once

#include <vector>

#include "meddet/errors.hpp"
#include "meddet/init.hpp"
#include "meddet/tensor.hpp"

namespace meddet::aatm {

inline constexpr double kProbClamp = 1e-7;

template <typename T>
struct Generator {
    TensorT<T> conv1_w, conv1_b;  // [C,C,3,3]
    TensorT<T> conv2_w, conv2_b;

    static Generator make(int channels, CounterRng& rng) {
        Generator g;
        g.conv1_w = init::he_normal<T>({channels, channels, 3, 3}, rng);
        g.conv1_b = init::zero_param<T>({channels});
        g.conv2_w = init::he_normal<T>({channels, channels, 3, 3}, rng);
        g.conv2_b = init::zero_param<T>({channels});
        return g;
    }

    int channels() const { return conv1_w.dim(0); }

    std::vector<TensorT<T>*> params() { return {&conv1_w, &conv1_b, &conv2_w, &conv2_b}; }
};

template <typename T>
TensorT<T> generate(const Generator<T>& g, const TensorT<T>& aligned_student) {
    if (aligned_student.rank() != 4 || aligned_student.dim(1) != g.channels())
        throw ShapeError("generate: input " + shape_str(aligned_student.shape()) + " vs generator channels " +
                         std::to_string(g.channels()));
    TensorT<T> h = relu(conv2d(aligned_student, g.conv1_w, g.conv1_b, 1, 1));
    return conv2d(h, g.conv2_w, g.conv2_b, 1, 1);
}

template <typename T>
struct Discriminator {
    int input_dim = 0;  // C*H*W of this pyramid level
    TensorT<T> fc1_w, fc1_b;  // [input_dim,128]
    TensorT<T> fc2_w, fc2_b;  // [128,64]
    TensorT<T> fc3_w, fc3_b;  // [64,1]

    static Discriminator make(int input_dim, CounterRng& rng) {
        Discriminator d;
        d.input_dim = input_dim;
        d.fc1_w = init::he_normal<T>({input_dim, 128}, rng);
        d.fc1_b = init::zero_param<T>({128});
        d.fc2_w = init::he_normal<T>({128, 64}, rng);
        d.fc2_b = init::zero_param<T>({64});
        d.fc3_w = init::he_normal<T>({64, 1}, rng);
        d.fc3_b = init::zero_param<T>({1});
        return d;
    }

    std::vector<TensorT<T>*> params() { return {&fc1_w, &fc1_b, &fc2_w, &fc2_b, &fc3_w, &fc3_b}; }

    // Weight snapshot without grad flags; lets g_loss evaluate D while keeping
    // its parameters out of the gradient path.
    Discriminator frozen() const {
        Discriminator d;
        d.input_dim = input_dim;
        d.fc1_w = fc1_w.detach();
        d.fc1_b = fc1_b.detach();
        d.fc2_w = fc2_w.detach();
        d.fc2_b = fc2_b.detach();
        d.fc3_w = fc3_w.detach();
        d.fc3_b = fc3_b.detach();
        return d;
    }
};

// flatten -> fc -> relu -> fc -> relu -> fc -> sigmoid; one score per sample.
template <typename T>
TensorT<T> discriminate(const Discriminator<T>& d, const TensorT<T>& feats) {
    if (feats.rank() != 4)
        throw ShapeError("discriminate: expected N,C,H,W features, got " + shape_str(feats.shape()));
    const int n = feats.dim(0);
    const int flat = feats.dim(1) * feats.dim(2) * feats.dim(3);
    if (flat != d.input_dim)
        throw ShapeError("discriminate: feature size " + std::to_string(flat) + " vs discriminator input_dim " +
                         std::to_string(d.input_dim));
    TensorT<T> x = reshape(feats, {n, flat});
    TensorT<T> h1 = relu(fully_connected(x, d.fc1_w, d.fc1_b));
    TensorT<T> h2 = relu(fully_connected(h1, d.fc2_w, d.fc2_b));
    TensorT<T> out = sigmoid(fully_connected(h2, d.fc3_w, d.fc3_b));
    return reshape(out, {n});
}

// Per-level sample sets: teacher features under the positive label, generated
// student features under the negative one. Teacher side must arrive detached.
template <typename T>
struct AdversarialBatch {
    int level = 0;
    TensorT<T> teacher_feats;
    TensorT<T> student_feats;  // post-generator
};

namespace detail {

template <typename T>
void check_batch(const AdversarialBatch<T>& b) {
    if (!b.teacher_feats.defined() || !b.student_feats.defined() || b.teacher_feats.dim(0) == 0 ||
        b.student_feats.dim(0) == 0)
        throw ContractError("adversarial batch for level " + std::to_string(b.level) + " is empty");
}

}  // namespace detail

// -[mean log D(F_T) + mean log(1 - D(G(F_S)))] for one level; gradients reach
// only the discriminator.
template <typename T>
TensorT<T> d_loss(const AdversarialBatch<T>& batch, const Discriminator<T>& d) {
    detail::check_batch(batch);
    const T lo = static_cast<T>(kProbClamp), hi = T(1) - static_cast<T>(kProbClamp);
    TensorT<T> p_teacher = clamp(discriminate(d, batch.teacher_feats.detach()), lo, hi);
    TensorT<T> p_generated = clamp(discriminate(d, batch.student_feats.detach()), lo, hi);
    TensorT<T> real_term = neg(mean(log(p_teacher)));
    TensorT<T> fake_term = neg(mean(log(sub(TensorT<T>::filled(p_generated.shape(), T(1)), p_generated))));
    return add(real_term, fake_term);
}

// Generator objective for one level. Non-saturating form -mean log D(G(F_S))
// by default; the literal min-max form mean log(1 - D(G(F_S))) is available
// for comparison runs. Gradients reach the generator and student, never D.
template <typename T>
TensorT<T> g_loss(const AdversarialBatch<T>& batch, const Discriminator<T>& d, bool literal_form = false) {
    detail::check_batch(batch);
    const T lo = static_cast<T>(kProbClamp), hi = T(1) - static_cast<T>(kProbClamp);
    Discriminator<T> frozen = d.frozen();
    TensorT<T> p = clamp(discriminate(frozen, batch.student_feats), lo, hi);
    if (literal_form) return mean(log(sub(TensorT<T>::filled(p.shape(), T(1)), p)));
    return neg(mean(log(p)));
}

}  // namespace meddet::aatm
