// SPDX-License-Identifier: Apache-2.0
//
// Neural-memory ODE dynamics: ydot = -y + sin^2(y+gamma) and the nested
// variant ydot = -y + sin^2[y + cos^2(y+gamma)], integrated with fixed-step
// Euler/RK4. The solver is unrolled through the op tape, so backward
// differentiates every step (discretize-then-differentiate).
#pragma once

#include <cmath>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "meddet/errors.hpp"
#include "meddet/tensor.hpp"

namespace meddet::nmode {

enum class Deriv { nmode, nmode2 };
enum class Method { euler, rk4 };

struct SolverSpec {
    Method method = Method::rk4;
    double step = 0.125;
    double t_end = 1.0;

    int steps() const {
        if (step <= 0.0 || t_end <= 0.0) throw ConfigError("solver: step and t_end must be positive");
        const double q = t_end / step;
        const int n = static_cast<int>(std::llround(q));
        if (n < 1 || std::abs(q - n) > 1e-9)
            throw ConfigError("solver: t_end/step must be a whole number of steps (got " + std::to_string(q) + ")");
        return n;
    }
};

inline SolverSpec default_block_solver() { return {Method::rk4, 0.125, 1.0}; }
inline SolverSpec analysis_solver() { return {Method::rk4, 0.125, 20.0}; }

template <typename T>
struct OdeState {
    TensorT<T> y;
    double t = 0.0;
    TensorT<T> gamma;
};

template <typename T>
TensorT<T> nmode_deriv(const TensorT<T>& y, const TensorT<T>& gamma) {
    if (y.shape() != gamma.shape())
        throw ShapeError("nmode_deriv: y " + shape_str(y.shape()) + " vs gamma " + shape_str(gamma.shape()));
    return sub(square(sin(add(y, gamma))), y);
}

template <typename T>
TensorT<T> nmode2_deriv(const TensorT<T>& y, const TensorT<T>& gamma) {
    if (y.shape() != gamma.shape())
        throw ShapeError("nmode2_deriv: y " + shape_str(y.shape()) + " vs gamma " + shape_str(gamma.shape()));
    auto inner = square(cos(add(y, gamma)));
    return sub(square(sin(add(y, inner))), y);
}

template <typename T>
using DerivFn = std::function<TensorT<T>(const TensorT<T>&, const TensorT<T>&)>;

template <typename T>
DerivFn<T> deriv_fn(Deriv d) {
    if (d == Deriv::nmode) return [](const TensorT<T>& y, const TensorT<T>& g) { return nmode_deriv(y, g); };
    return [](const TensorT<T>& y, const TensorT<T>& g) { return nmode2_deriv(y, g); };
}

namespace detail {

template <typename T>
void check_finite_state(const TensorT<T>& y, int step_index) {
    for (T v : y.data())
        if (!std::isfinite(static_cast<double>(v)))
            throw NumericError("integration diverged (non-finite state) at step " + std::to_string(step_index));
}

}  // namespace detail

template <typename T>
using ObserveFn = std::function<void(double, const TensorT<T>&)>;

// Fixed-step rollout with an arbitrary derivative (test hooks use e.g. -y).
// Optional per-step observer receives (t, y) after every step.
template <typename T>
OdeState<T> integrate_with(const OdeState<T>& state0, const DerivFn<T>& f, const SolverSpec& spec,
                           const std::type_identity_t<ObserveFn<T>>& observe = nullptr) {
    const int n = spec.steps();
    const T h = static_cast<T>(spec.step);
    TensorT<T> y = state0.y;
    const TensorT<T>& g = state0.gamma;
    if (y.shape() != g.shape())
        throw ShapeError("integrate: y " + shape_str(y.shape()) + " vs gamma " + shape_str(g.shape()));
    double t = state0.t;
    if (observe) observe(t, y);
    for (int k = 0; k < n; ++k) {
        if (spec.method == Method::euler) {
            y = add(y, mul_scalar(f(y, g), h));
        } else {
            auto k1 = f(y, g);
            auto k2 = f(add(y, mul_scalar(k1, h / T(2))), g);
            auto k3 = f(add(y, mul_scalar(k2, h / T(2))), g);
            auto k4 = f(add(y, mul_scalar(k3, h)), g);
            auto sum_k = add(add(k1, k4), mul_scalar(add(k2, k3), T(2)));
            y = add(y, mul_scalar(sum_k, h / T(6)));
        }
        detail::check_finite_state(y, k + 1);
        t = state0.t + static_cast<double>(k + 1) * spec.step;
        if (observe) observe(t, y);
    }
    return {y, t, g};
}

template <typename T>
OdeState<T> integrate(const OdeState<T>& state0, Deriv d, const SolverSpec& spec,
                      const std::type_identity_t<ObserveFn<T>>& observe = nullptr) {
    return integrate_with(state0, deriv_fn<T>(d), spec, observe);
}

// gamma = conv1x1(x) + bias or gamma = w*x + b elementwise.
template <typename T>
struct PerceptualMap {
    enum class Kind { affine, conv1x1 };
    Kind kind = Kind::conv1x1;
    TensorT<T> weight;  // conv1x1: [C,C,1,1]; affine: same shape as x
    TensorT<T> bias;    // conv1x1: [C]; affine: same shape as x

    TensorT<T> apply(const TensorT<T>& x) const {
        if (kind == Kind::conv1x1) {
            if (x.rank() != 4 || weight.rank() != 4 || weight.dim(1) != x.dim(1) || weight.dim(0) != x.dim(1))
                throw ShapeError("perceptual map: conv1x1 weight " + shape_str(weight.shape()) +
                                 " does not preserve feature shape " + shape_str(x.shape()));
            return conv2d(x, weight, bias, 1, 0);
        }
        return add(mul(weight, x), bias);
    }
};

// y(0)=0, gamma = map(x); returns y(t_end) with gradients into x and the map.
template <typename T>
TensorT<T> nmode2_block(const TensorT<T>& x, const PerceptualMap<T>& map, const SolverSpec& spec) {
    TensorT<T> gamma = map.apply(x);
    OdeState<T> s0{TensorT<T>::zeros(gamma.shape()), 0.0, gamma};
    return integrate(s0, Deriv::nmode2, spec).y;
}

// Long-horizon rollout until |ydot|_inf < tol; the attractor analysis oracle.
// Runs detached. max_time bounds the search.
template <typename T>
TensorT<T> fixed_point(const TensorT<T>& gamma, Deriv d, double tol, const TensorT<T>* y0 = nullptr,
                       double max_time = 2000.0) {
    if (tol <= 0.0) throw ContractError("fixed_point: tol must be positive");
    NoGradGuard ng;
    auto f = deriv_fn<T>(d);
    TensorT<T> y = y0 ? y0->detach() : TensorT<T>::zeros(gamma.shape());
    SolverSpec chunk{Method::rk4, 0.125, 1.0};
    auto residual = [&](const TensorT<T>& state) {
        TensorT<T> dy = f(state, gamma);
        double r = 0.0;
        for (T v : dy.data()) r = std::max(r, std::abs(static_cast<double>(v)));
        return r;
    };
    double t = 0.0;
    while (t < max_time) {
        y = integrate_with(OdeState<T>{y, t, gamma}, f, chunk).y;
        t += chunk.t_end;
        if (residual(y) < tol) return y;
    }
    throw NumericError("fixed_point: no convergence within t=" + std::to_string(max_time) +
                       ", residual=" + std::to_string(residual(y)));
}

// Analysis-mode trajectory dump: one row per (step, element).
template <typename T>
void write_trajectory_csv(std::ostream& os, const TensorT<T>& gamma, Deriv d, const SolverSpec& spec,
                          const TensorT<T>* y0 = nullptr) {
    os << "t,index,y\n";
    NoGradGuard ng;
    OdeState<T> s0{y0 ? y0->detach() : TensorT<T>::zeros(gamma.shape()), 0.0, gamma};
    integrate(s0, d, spec, [&os](double t, const TensorT<T>& y) {
        const auto& v = y.data();
        for (size_t i = 0; i < v.size(); ++i) {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%.9g,%zu,%.9g\n", t, i, static_cast<double>(v[i]));
            os << buf;
        }
    });
}

}  // namespace meddet::nmode
