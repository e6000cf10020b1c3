// SPDX-License-Identifier: Apache-2.0
//
// Minimal n-dimensional array with reverse-mode differentiation. Tensors are
// value-type handles onto recorded nodes; every op either runs detached (no
// input on a gradient path, or grads globally disabled) or appends a node
// whose closure accumulates into its parents' grads. Layout is row-major,
// activations use the N,C,H,W axis order throughout.
#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "meddet/errors.hpp"
#include "meddet/parallel.hpp"

namespace meddet {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

namespace detail {

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until first needed; same length as value after
    bool requires_grad = false;  // leaf parameter flag
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;  // reads this->grad, accumulates into parents

    bool is_leaf() const { return parents.empty(); }
    bool on_grad_path() const { return requires_grad || !parents.empty(); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

}  // namespace detail

// Thread-local switch; ops executed while disabled record no graph.
inline bool& grad_enabled() {
    thread_local bool on = true;
    return on;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_enabled()) { grad_enabled() = false; }
    ~NoGradGuard() { grad_enabled() = prev; }
};

template <typename T>
class TensorT {
public:
    using Node = detail::Node<T>;

    TensorT() = default;

    static TensorT zeros(Shape shape) { return filled(std::move(shape), T(0)); }

    static TensorT filled(Shape shape, T v) {
        auto n = std::make_shared<Node>();
        n->value.assign(static_cast<size_t>(shape_numel(shape)), v);
        n->shape = std::move(shape);
        return TensorT(std::move(n));
    }

    static TensorT from(Shape shape, std::vector<T> data) {
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) throw NumericError("non-finite value in tensor input");
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        return TensorT(std::move(n));
    }

    // Leaf that participates in differentiation.
    static TensorT param(Shape shape, std::vector<T> data) {
        TensorT t = from(std::move(shape), std::move(data));
        t.node_->requires_grad = true;
        return t;
    }

    static TensorT scalar(T v) { return from({1}, {v}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t size() const { return static_cast<int64_t>(node_->value.size()); }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(node_->shape.size()); }

    const std::vector<T>& data() const { return node_->value; }
    std::vector<T>& data_mut() { return node_->value; }  // leaves only; graphs record values by node
    T item() const {
        if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }
    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<T>& grad() const { return node_->grad; }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    // Same values, no history, no grad flag.
    TensorT detach() const {
        auto n = std::make_shared<Node>();
        n->shape = node_->shape;
        n->value = node_->value;
        return TensorT(std::move(n));
    }

    std::shared_ptr<Node> node() const { return node_; }

    explicit TensorT(std::shared_ptr<Node> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<Node> node_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

namespace detail {

template <typename T>
std::shared_ptr<Node<T>> make_result(Shape shape, const char* op) {
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value.resize(static_cast<size_t>(shape_numel(n->shape)));
    n->op = op;
    return n;
}

template <typename T, typename... Parents>
bool should_record(const Parents&... parents) {
    if (!grad_enabled()) return false;
    return (... || parents.node()->on_grad_path());
}

template <typename T>
void check_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": operand shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check_same_shape(a, b, "add");
    auto out = detail::make_result<T>(a.shape(), "add");
    const auto& av = a.data();
    const auto& bv = b.data();
    for (size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] + bv[i];
    if (detail::should_record<T>(a, b)) {
        auto an = a.node(), bn = b.node();
        out->parents = {an, bn};
        out->backprop = [an, bn](detail::Node<T>& self) {
            an->ensure_grad();
            bn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) {
                an->grad[i] += self.grad[i];
                bn->grad[i] += self.grad[i];
            }
        };
    }
    return TensorT<T>(out);
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check_same_shape(a, b, "sub");
    auto out = detail::make_result<T>(a.shape(), "sub");
    const auto& av = a.data();
    const auto& bv = b.data();
    for (size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] - bv[i];
    if (detail::should_record<T>(a, b)) {
        auto an = a.node(), bn = b.node();
        out->parents = {an, bn};
        out->backprop = [an, bn](detail::Node<T>& self) {
            an->ensure_grad();
            bn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) {
                an->grad[i] += self.grad[i];
                bn->grad[i] -= self.grad[i];
            }
        };
    }
    return TensorT<T>(out);
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check_same_shape(a, b, "mul");
    auto out = detail::make_result<T>(a.shape(), "mul");
    const auto& av = a.data();
    const auto& bv = b.data();
    for (size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] * bv[i];
    if (detail::should_record<T>(a, b)) {
        auto an = a.node(), bn = b.node();
        out->parents = {an, bn};
        out->backprop = [an, bn](detail::Node<T>& self) {
            an->ensure_grad();
            bn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) {
                an->grad[i] += self.grad[i] * bn->value[i];
                bn->grad[i] += self.grad[i] * an->value[i];
            }
        };
    }
    return TensorT<T>(out);
}

// Elementwise quotient with an epsilon guard on the denominator's magnitude.
template <typename T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b, T eps = T(1e-9)) {
    detail::check_same_shape(a, b, "div");
    auto out = detail::make_result<T>(a.shape(), "div");
    const auto& av = a.data();
    const auto& bv = b.data();
    auto guard = [eps](T d) { return d >= T(0) ? std::max(d, eps) : std::min(d, -eps); };
    for (size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] / guard(bv[i]);
    if (detail::should_record<T>(a, b)) {
        auto an = a.node(), bn = b.node();
        out->parents = {an, bn};
        out->backprop = [an, bn, guard](detail::Node<T>& self) {
            an->ensure_grad();
            bn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) {
                const T d = guard(bn->value[i]);
                an->grad[i] += self.grad[i] / d;
                bn->grad[i] -= self.grad[i] * an->value[i] / (d * d);
            }
        };
    }
    return TensorT<T>(out);
}

template <typename T>
TensorT<T> add_scalar(const TensorT<T>& a, T s) {
    auto out = detail::make_result<T>(a.shape(), "add_scalar");
    const auto& av = a.data();
    for (size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] + s;
    if (detail::should_record<T>(a)) {
        auto an = a.node();
        out->parents = {an};
        out->backprop = [an](detail::Node<T>& self) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        };
    }
    return TensorT<T>(out);
}

template <typename T>
TensorT<T> mul_scalar(const TensorT<T>& a, T s) {
    auto out = detail::make_result<T>(a.shape(), "mul_scalar");
    const auto& av = a.data();
    for (size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] * s;
    if (detail::should_record<T>(a)) {
        auto an = a.node();
        out->parents = {an};
        out->backprop = [an, s](detail::Node<T>& self) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * s;
        };
    }
    return TensorT<T>(out);
}

template <typename T>
TensorT<T> neg(const TensorT<T>& a) {
    return mul_scalar(a, T(-1));
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities (exact derivatives recorded)

namespace detail {

template <typename T, typename FwdFn, typename DerivFn>
TensorT<T> unary_op(const TensorT<T>& a, const char* name, FwdFn fwd, DerivFn deriv) {
    auto out = make_result<T>(a.shape(), name);
    const auto& av = a.data();
    for (size_t i = 0; i < av.size(); ++i) out->value[i] = fwd(av[i]);
    if (should_record<T>(a)) {
        auto an = a.node();
        out->parents = {an};
        out->backprop = [an, deriv](Node<T>& self) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                an->grad[i] += self.grad[i] * deriv(an->value[i], self.value[i]);
        };
    }
    return TensorT<T>(out);
}

}  // namespace detail

template <typename T>
TensorT<T> relu(const TensorT<T>& a) {
    return detail::unary_op(
        a, "relu", [](T x) { return x > T(0) ? x : T(0); },
        [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& a) {
    return detail::unary_op(
        a, "sigmoid",
        [](T x) {
            return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
        },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
TensorT<T> sin(const TensorT<T>& a) {
    return detail::unary_op(
        a, "sin", [](T x) { return std::sin(x); }, [](T x, T) { return std::cos(x); });
}

template <typename T>
TensorT<T> cos(const TensorT<T>& a) {
    return detail::unary_op(
        a, "cos", [](T x) { return std::cos(x); }, [](T x, T) { return -std::sin(x); });
}

// Natural log; inputs are the caller's responsibility (losses clamp first).
template <typename T>
TensorT<T> log(const TensorT<T>& a) {
    return detail::unary_op(
        a, "log", [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
TensorT<T> square(const TensorT<T>& a) {
    return detail::unary_op(
        a, "square", [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

// |x|^beta with d/dx = beta*|x|^(beta-1)*sign(x); derivative at 0 is 0 for beta > 1.
template <typename T>
TensorT<T> pow_abs(const TensorT<T>& a, T beta) {
    return detail::unary_op(
        a, "pow_abs", [beta](T x) { return std::pow(std::abs(x), beta); },
        [beta](T x, T) {
            if (x == T(0)) return T(0);
            const T s = x > T(0) ? T(1) : T(-1);
            return beta * std::pow(std::abs(x), beta - T(1)) * s;
        });
}

// Gradient passes only where lo < x < hi (saturation kills it, intentionally).
template <typename T>
TensorT<T> clamp(const TensorT<T>& a, T lo, T hi) {
    return detail::unary_op(
        a, "clamp", [lo, hi](T x) { return std::min(hi, std::max(lo, x)); },
        [lo, hi](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); });
}

template <typename T>
TensorT<T> min2(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check_same_shape(a, b, "min2");
    auto out = detail::make_result<T>(a.shape(), "min2");
    const auto& av = a.data();
    const auto& bv = b.data();
    for (size_t i = 0; i < av.size(); ++i) out->value[i] = std::min(av[i], bv[i]);
    if (detail::should_record<T>(a, b)) {
        auto an = a.node(), bn = b.node();
        out->parents = {an, bn};
        out->backprop = [an, bn](detail::Node<T>& self) {
            an->ensure_grad();
            bn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) {
                if (an->value[i] <= bn->value[i])
                    an->grad[i] += self.grad[i];
                else
                    bn->grad[i] += self.grad[i];
            }
        };
    }
    return TensorT<T>(out);
}

template <typename T>
TensorT<T> max2(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check_same_shape(a, b, "max2");
    auto out = detail::make_result<T>(a.shape(), "max2");
    const auto& av = a.data();
    const auto& bv = b.data();
    for (size_t i = 0; i < av.size(); ++i) out->value[i] = std::max(av[i], bv[i]);
    if (detail::should_record<T>(a, b)) {
        auto an = a.node(), bn = b.node();
        out->parents = {an, bn};
        out->backprop = [an, bn](detail::Node<T>& self) {
            an->ensure_grad();
            bn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) {
                if (an->value[i] >= bn->value[i])
                    an->grad[i] += self.grad[i];
                else
                    bn->grad[i] += self.grad[i];
            }
        };
    }
    return TensorT<T>(out);
}

// ---------------------------------------------------------------------------
// Shape plumbing

template <typename T>
TensorT<T> reshape(const TensorT<T>& a, Shape shape) {
    if (shape_numel(shape) != a.size())
        throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) + " changes element count");
    auto out = detail::make_result<T>(std::move(shape), "reshape");
    out->value = a.data();
    if (detail::should_record<T>(a)) {
        auto an = a.node();
        out->parents = {an};
        out->backprop = [an](detail::Node<T>& self) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        };
    }
    return TensorT<T>(out);
}

// Picks flat positions; duplicate indices allowed (grads scatter-add).
template <typename T>
TensorT<T> gather(const TensorT<T>& a, const std::vector<int64_t>& idx) {
    for (int64_t j : idx)
        if (j < 0 || j >= a.size()) throw ShapeError("gather: index " + std::to_string(j) + " out of range");
    auto out = detail::make_result<T>({static_cast<int>(idx.size())}, "gather");
    const auto& av = a.data();
    for (size_t k = 0; k < idx.size(); ++k) out->value[k] = av[static_cast<size_t>(idx[k])];
    if (detail::should_record<T>(a)) {
        auto an = a.node();
        out->parents = {an};
        out->backprop = [an, idx](detail::Node<T>& self) {
            an->ensure_grad();
            for (size_t k = 0; k < idx.size(); ++k) an->grad[static_cast<size_t>(idx[k])] += self.grad[k];
        };
    }
    return TensorT<T>(out);
}

template <typename T>
TensorT<T> concat_channels(const std::vector<TensorT<T>>& xs) {
    if (xs.empty()) throw ContractError("concat_channels: empty input list");
    const Shape& s0 = xs[0].shape();
    if (s0.size() != 4) throw ShapeError("concat_channels expects N,C,H,W inputs");
    int ctotal = 0;
    for (const auto& x : xs) {
        const Shape& s = x.shape();
        if (s.size() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3])
            throw ShapeError("concat_channels: incompatible shape " + shape_str(s) + " vs " + shape_str(s0));
        ctotal += s[1];
    }
    const int n = s0[0], h = s0[2], w = s0[3];
    const int64_t hw = static_cast<int64_t>(h) * w;
    auto out = detail::make_result<T>({n, ctotal, h, w}, "concat_channels");
    int64_t coff = 0;
    for (const auto& x : xs) {
        const int c = x.shape()[1];
        const auto& xv = x.data();
        for (int in = 0; in < n; ++in)
            std::copy(xv.begin() + in * c * hw, xv.begin() + (in + 1) * c * hw,
                      out->value.begin() + (in * ctotal + coff) * hw);
        coff += c;
    }
    bool rec = grad_enabled();
    if (rec) {
        bool any = false;
        for (const auto& x : xs) any = any || x.node()->on_grad_path();
        rec = any;
    }
    if (rec) {
        std::vector<std::shared_ptr<detail::Node<T>>> ps;
        for (const auto& x : xs) ps.push_back(x.node());
        out->parents = ps;
        out->backprop = [ps, n, ctotal, hw](detail::Node<T>& self) {
            int64_t off = 0;
            for (auto& p : ps) {
                p->ensure_grad();
                const int c = p->shape[1];
                for (int in = 0; in < n; ++in) {
                    const T* g = self.grad.data() + (in * ctotal + off) * hw;
                    T* pg = p->grad.data() + in * c * hw;
                    for (int64_t i = 0; i < c * hw; ++i) pg[i] += g[i];
                }
                off += c;
            }
        };
    }
    return TensorT<T>(out);
}

// x[N,C,H,W] scaled per channel by s[N,C,1,1].
template <typename T>
TensorT<T> scale_channels(const TensorT<T>& x, const TensorT<T>& s) {
    const Shape& xs = x.shape();
    const Shape& ss = s.shape();
    if (xs.size() != 4 || ss.size() != 4 || ss[0] != xs[0] || ss[1] != xs[1] || ss[2] != 1 || ss[3] != 1)
        throw ShapeError("scale_channels: x " + shape_str(xs) + " vs scale " + shape_str(ss));
    const int64_t nc = static_cast<int64_t>(xs[0]) * xs[1];
    const int64_t hw = static_cast<int64_t>(xs[2]) * xs[3];
    auto out = detail::make_result<T>(xs, "scale_channels");
    const auto& xv = x.data();
    const auto& sv = s.data();
    for (int64_t j = 0; j < nc; ++j) {
        const T a = sv[static_cast<size_t>(j)];
        for (int64_t i = 0; i < hw; ++i) out->value[j * hw + i] = xv[j * hw + i] * a;
    }
    if (detail::should_record<T>(x, s)) {
        auto xn = x.node(), sn = s.node();
        out->parents = {xn, sn};
        out->backprop = [xn, sn, nc, hw](detail::Node<T>& self) {
            xn->ensure_grad();
            sn->ensure_grad();
            for (int64_t j = 0; j < nc; ++j) {
                const T a = sn->value[static_cast<size_t>(j)];
                T acc = T(0);
                for (int64_t i = 0; i < hw; ++i) {
                    xn->grad[j * hw + i] += self.grad[j * hw + i] * a;
                    acc += self.grad[j * hw + i] * xn->value[j * hw + i];
                }
                sn->grad[static_cast<size_t>(j)] += acc;
            }
        };
    }
    return TensorT<T>(out);
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
TensorT<T> sum(const TensorT<T>& a) {
    auto out = detail::make_result<T>({1}, "sum");
    T acc = T(0);
    for (T v : a.data()) acc += v;
    out->value[0] = acc;
    if (detail::should_record<T>(a)) {
        auto an = a.node();
        out->parents = {an};
        out->backprop = [an](detail::Node<T>& self) {
            an->ensure_grad();
            const T g = self.grad[0];
            for (auto& v : an->grad) v += g;
        };
    }
    return TensorT<T>(out);
}

template <typename T>
TensorT<T> mean(const TensorT<T>& a) {
    return mul_scalar(sum(a), T(1) / static_cast<T>(a.size()));
}

// ---------------------------------------------------------------------------
// Linear algebra

// [N,D] x [D,M] -> [N,M]; rows partitioned across threads, inner loop sequential.
template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul expects rank-2 operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const int n = a.dim(0), d = a.dim(1), d2 = b.dim(0), m = b.dim(1);
    if (d != d2)
        throw ShapeError("matmul: inner dimensions disagree (axis 1 of " + shape_str(a.shape()) + " vs axis 0 of " +
                         shape_str(b.shape()) + ")");
    auto out = detail::make_result<T>({n, m}, "matmul");
    const T* A = a.data().data();
    const T* B = b.data().data();
    T* C = out->value.data();
    parallel_for(n, [&](int64_t i) {
        T* crow = C + i * m;
        std::fill(crow, crow + m, T(0));
        for (int k = 0; k < d; ++k) {
            const T aik = A[i * d + k];
            const T* brow = B + static_cast<int64_t>(k) * m;
            for (int j = 0; j < m; ++j) crow[j] += aik * brow[j];
        }
    });
    if (detail::should_record<T>(a, b)) {
        auto an = a.node(), bn = b.node();
        out->parents = {an, bn};
        out->backprop = [an, bn, n, d, m](detail::Node<T>& self) {
            an->ensure_grad();
            bn->ensure_grad();
            const T* G = self.grad.data();
            const T* A = an->value.data();
            const T* B = bn->value.data();
            // dA = G * B^T
            parallel_for(n, [&](int64_t i) {
                for (int k = 0; k < d; ++k) {
                    T acc = T(0);
                    const T* grow = G + i * m;
                    const T* brow = B + static_cast<int64_t>(k) * m;
                    for (int j = 0; j < m; ++j) acc += grow[j] * brow[j];
                    an->grad[i * d + k] += acc;
                }
            });
            // dB = A^T * G
            parallel_for(d, [&](int64_t k) {
                for (int j = 0; j < m; ++j) {
                    T acc = T(0);
                    for (int i = 0; i < n; ++i) acc += A[static_cast<int64_t>(i) * d + k] * G[static_cast<int64_t>(i) * m + j];
                    bn->grad[k * m + j] += acc;
                }
            });
        };
    }
    return TensorT<T>(out);
}

// input[N,D] * weight[D,M] + bias[M]
template <typename T>
TensorT<T> fully_connected(const TensorT<T>& input, const TensorT<T>& weight, const TensorT<T>& bias) {
    if (bias.rank() != 1 || bias.dim(0) != weight.dim(1))
        throw ShapeError("fully_connected: bias " + shape_str(bias.shape()) + " vs weight " + shape_str(weight.shape()));
    TensorT<T> y = matmul(input, weight);
    const int n = y.dim(0), m = y.dim(1);
    auto out = detail::make_result<T>({n, m}, "bias_add_row");
    const auto& yv = y.data();
    const auto& bv = bias.data();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) out->value[static_cast<size_t>(i) * m + j] = yv[static_cast<size_t>(i) * m + j] + bv[static_cast<size_t>(j)];
    if (detail::should_record<T>(y, bias)) {
        auto yn = y.node(), bn = bias.node();
        out->parents = {yn, bn};
        out->backprop = [yn, bn, n, m](detail::Node<T>& self) {
            yn->ensure_grad();
            bn->ensure_grad();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < m; ++j) {
                    const T g = self.grad[static_cast<size_t>(i) * m + j];
                    yn->grad[static_cast<size_t>(i) * m + j] += g;
                    bn->grad[static_cast<size_t>(j)] += g;
                }
        };
    }
    return TensorT<T>(out);
}

// ---------------------------------------------------------------------------
// Convolution and pooling

// Cross-correlation, weight[Co,C,k,k], k in {1,3}. Forward runs im2col-free
// direct loops partitioned over (n,co); backward recomputes from saved parents.
template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& weight, const TensorT<T>& bias, int stride = 1,
                  int padding = 0) {
    const Shape& xs = input.shape();
    const Shape& ws = weight.shape();
    if (xs.size() != 4) throw ShapeError("conv2d: input must be N,C,H,W, got " + shape_str(xs));
    if (ws.size() != 4) throw ShapeError("conv2d: weight must be Co,C,k,k, got " + shape_str(ws));
    const int n = xs[0], c = xs[1], h = xs[2], w = xs[3];
    const int co = ws[0], k = ws[2];
    if (ws[1] != c) throw ShapeError("conv2d: weight channel axis " + std::to_string(ws[1]) + " vs input channels " + std::to_string(c));
    if (ws[3] != k || (k != 1 && k != 3)) throw ShapeError("conv2d: kernel must be square 1x1 or 3x3, got " + shape_str(ws));
    if (bias.rank() != 1 || bias.dim(0) != co) throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " vs Co " + std::to_string(co));
    if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
    const int hn = h + 2 * padding - k;
    const int wn = w + 2 * padding - k;
    if (hn < 0 || wn < 0 || hn % stride != 0 || wn % stride != 0)
        throw ShapeError("conv2d: output size not integral for H,W axes (" + std::to_string(h) + "," + std::to_string(w) +
                         ") with k=" + std::to_string(k) + " stride=" + std::to_string(stride) + " pad=" + std::to_string(padding));
    const int oh = hn / stride + 1, ow = wn / stride + 1;

    auto out = detail::make_result<T>({n, co, oh, ow}, "conv2d");
    const T* X = input.data().data();
    const T* W = weight.data().data();
    const T* B = bias.data().data();
    T* Y = out->value.data();
    // valid output range for a kernel offset: in-bounds input indices only
    auto orange = [padding, stride](int k_off, int in_limit, int out_limit) {
        int o0 = padding - k_off;
        o0 = o0 <= 0 ? 0 : (o0 + stride - 1) / stride;
        int o1 = in_limit - 1 - k_off + padding;
        o1 = o1 < 0 ? 0 : std::min(out_limit, o1 / stride + 1);
        return std::pair<int, int>(o0, o1);
    };
    parallel_for(static_cast<int64_t>(n) * co, [&](int64_t nc) {
        const int in = static_cast<int>(nc / co);
        const int oc = static_cast<int>(nc % co);
        T* y = Y + ((static_cast<int64_t>(in) * co + oc) * oh) * ow;
        const T bv = B[oc];
        for (int i = 0; i < oh * ow; ++i) y[i] = bv;
        for (int ic = 0; ic < c; ++ic) {
            const T* x = X + ((static_cast<int64_t>(in) * c + ic) * h) * w;
            const T* wk = W + ((static_cast<int64_t>(oc) * c + ic) * k) * k;
            for (int kh = 0; kh < k; ++kh) {
                const auto [oy0, oy1] = orange(kh, h, oh);
                for (int kw = 0; kw < k; ++kw) {
                    const T wv = wk[kh * k + kw];
                    const auto [ox0, ox1] = orange(kw, w, ow);
                    for (int oy = oy0; oy < oy1; ++oy) {
                        const int iy = oy * stride + kh - padding;
                        T* yrow = y + oy * ow;
                        const T* xrow = x + iy * w + kw - padding;
                        if (stride == 1) {
                            for (int ox = ox0; ox < ox1; ++ox) yrow[ox] += wv * xrow[ox];
                        } else {
                            for (int ox = ox0; ox < ox1; ++ox) yrow[ox] += wv * xrow[static_cast<int64_t>(ox) * stride];
                        }
                    }
                }
            }
        }
    });

    if (detail::should_record<T>(input, weight, bias)) {
        auto xn = input.node(), wn2 = weight.node(), bn = bias.node();
        out->parents = {xn, wn2, bn};
        out->backprop = [xn, wn2, bn, n, c, h, w, co, k, oh, ow, stride, padding](detail::Node<T>& self) {
            xn->ensure_grad();
            wn2->ensure_grad();
            bn->ensure_grad();
            const T* G = self.grad.data();
            const T* X = xn->value.data();
            const T* W = wn2->value.data();
            // bias grad
            for (int oc = 0; oc < co; ++oc) {
                T acc = T(0);
                for (int in = 0; in < n; ++in) {
                    const T* g = G + ((static_cast<int64_t>(in) * co + oc) * oh) * ow;
                    for (int i = 0; i < oh * ow; ++i) acc += g[i];
                }
                bn->grad[static_cast<size_t>(oc)] += acc;
            }
            auto orange = [padding, stride](int k_off, int in_limit, int out_limit) {
                int o0 = padding - k_off;
                o0 = o0 <= 0 ? 0 : (o0 + stride - 1) / stride;
                int o1 = in_limit - 1 - k_off + padding;
                o1 = o1 < 0 ? 0 : std::min(out_limit, o1 / stride + 1);
                return std::pair<int, int>(o0, o1);
            };
            // weight grad: each (oc,ic) pair owned by one thread
            parallel_for(static_cast<int64_t>(co) * c, [&](int64_t oi) {
                const int oc = static_cast<int>(oi / c);
                const int ic = static_cast<int>(oi % c);
                for (int kh = 0; kh < k; ++kh) {
                    const auto [oy0, oy1] = orange(kh, h, oh);
                    for (int kw = 0; kw < k; ++kw) {
                        const auto [ox0, ox1] = orange(kw, w, ow);
                        T acc = T(0);
                        for (int in = 0; in < n; ++in) {
                            const T* g = G + ((static_cast<int64_t>(in) * co + oc) * oh) * ow;
                            const T* x = X + ((static_cast<int64_t>(in) * c + ic) * h) * w;
                            for (int oy = oy0; oy < oy1; ++oy) {
                                const int iy = oy * stride + kh - padding;
                                const T* grow = g + oy * ow;
                                const T* xrow = x + iy * w + kw - padding;
                                if (stride == 1) {
                                    for (int ox = ox0; ox < ox1; ++ox) acc += grow[ox] * xrow[ox];
                                } else {
                                    for (int ox = ox0; ox < ox1; ++ox) acc += grow[ox] * xrow[static_cast<int64_t>(ox) * stride];
                                }
                            }
                        }
                        wn2->grad[((static_cast<int64_t>(oc) * c + ic) * k + kh) * k + kw] += acc;
                    }
                }
            });
            // input grad: each (in,ic) plane owned by one thread
            parallel_for(static_cast<int64_t>(n) * c, [&](int64_t ni) {
                const int in = static_cast<int>(ni / c);
                const int ic = static_cast<int>(ni % c);
                T* gx = xn->grad.data() + ((static_cast<int64_t>(in) * c + ic) * h) * w;
                for (int oc = 0; oc < co; ++oc) {
                    const T* g = G + ((static_cast<int64_t>(in) * co + oc) * oh) * ow;
                    const T* wk = W + ((static_cast<int64_t>(oc) * c + ic) * k) * k;
                    for (int kh = 0; kh < k; ++kh) {
                        const auto [oy0, oy1] = orange(kh, h, oh);
                        for (int kw = 0; kw < k; ++kw) {
                            const T wv = wk[kh * k + kw];
                            const auto [ox0, ox1] = orange(kw, w, ow);
                            for (int oy = oy0; oy < oy1; ++oy) {
                                const int iy = oy * stride + kh - padding;
                                const T* grow = g + oy * ow;
                                T* xrow = gx + iy * w + kw - padding;
                                if (stride == 1) {
                                    for (int ox = ox0; ox < ox1; ++ox) xrow[ox] += grow[ox] * wv;
                                } else {
                                    for (int ox = ox0; ox < ox1; ++ox) xrow[static_cast<int64_t>(ox) * stride] += grow[ox] * wv;
                                }
                            }
                        }
                    }
                }
            });
        };
    }
    return TensorT<T>(out);
}

template <typename T>
TensorT<T> global_avg_pool(const TensorT<T>& x) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw ShapeError("global_avg_pool expects N,C,H,W, got " + shape_str(s));
    const int64_t nc = static_cast<int64_t>(s[0]) * s[1];
    const int64_t hw = static_cast<int64_t>(s[2]) * s[3];
    auto out = detail::make_result<T>({s[0], s[1], 1, 1}, "global_avg_pool");
    const auto& xv = x.data();
    for (int64_t j = 0; j < nc; ++j) {
        T acc = T(0);
        for (int64_t i = 0; i < hw; ++i) acc += xv[j * hw + i];
        out->value[static_cast<size_t>(j)] = acc / static_cast<T>(hw);
    }
    if (detail::should_record<T>(x)) {
        auto xn = x.node();
        out->parents = {xn};
        out->backprop = [xn, nc, hw](detail::Node<T>& self) {
            xn->ensure_grad();
            for (int64_t j = 0; j < nc; ++j) {
                const T g = self.grad[static_cast<size_t>(j)] / static_cast<T>(hw);
                for (int64_t i = 0; i < hw; ++i) xn->grad[j * hw + i] += g;
            }
        };
    }
    return TensorT<T>(out);
}

// output[j,l] = max over rows [floor(j*H/oh), ceil((j+1)*H/oh)) x cols alike;
// gradient routes to the argmax, ties resolved to the lowest flat index.
template <typename T>
TensorT<T> adaptive_max_pool(const TensorT<T>& x, int out_h, int out_w) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw ShapeError("adaptive_max_pool expects N,C,H,W, got " + shape_str(s));
    const int h = s[2], w = s[3];
    if (out_h < 1 || out_h > h || out_w < 1 || out_w > w)
        throw ShapeError("adaptive_max_pool: target " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                         " out of range for input " + std::to_string(h) + "x" + std::to_string(w));
    const int64_t nc = static_cast<int64_t>(s[0]) * s[1];
    auto out = detail::make_result<T>({s[0], s[1], out_h, out_w}, "adaptive_max_pool");
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(nc) * out_h * out_w);
    const auto& xv = x.data();
    for (int64_t j = 0; j < nc; ++j) {
        const T* plane = xv.data() + j * h * w;
        for (int oy = 0; oy < out_h; ++oy) {
            const int y0 = (oy * h) / out_h;
            const int y1 = ((oy + 1) * h + out_h - 1) / out_h;
            for (int ox = 0; ox < out_w; ++ox) {
                const int x0 = (ox * w) / out_w;
                const int x1 = ((ox + 1) * w + out_w - 1) / out_w;
                T best = -std::numeric_limits<T>::infinity();
                int64_t bi = -1;
                for (int iy = y0; iy < y1; ++iy)
                    for (int ix = x0; ix < x1; ++ix) {
                        const T v = plane[iy * w + ix];
                        if (v > best) {
                            best = v;
                            bi = iy * w + ix;
                        }
                    }
                const int64_t oidx = (j * out_h + oy) * out_w + ox;
                out->value[static_cast<size_t>(oidx)] = best;
                (*argmax)[static_cast<size_t>(oidx)] = j * h * w + bi;
            }
        }
    }
    if (detail::should_record<T>(x)) {
        auto xn = x.node();
        out->parents = {xn};
        out->backprop = [xn, argmax](detail::Node<T>& self) {
            xn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[static_cast<size_t>((*argmax)[i])] += self.grad[i];
        };
    }
    return TensorT<T>(out);
}

template <typename T>
TensorT<T> upsample_nearest2x(const TensorT<T>& x) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw ShapeError("upsample_nearest2x expects N,C,H,W, got " + shape_str(s));
    const int h = s[2], w = s[3];
    const int64_t nc = static_cast<int64_t>(s[0]) * s[1];
    auto out = detail::make_result<T>({s[0], s[1], 2 * h, 2 * w}, "upsample_nearest2x");
    const auto& xv = x.data();
    for (int64_t j = 0; j < nc; ++j) {
        const T* src = xv.data() + j * h * w;
        T* dst = out->value.data() + j * 4 * h * w;
        for (int iy = 0; iy < h; ++iy)
            for (int ix = 0; ix < w; ++ix) {
                const T v = src[iy * w + ix];
                T* d = dst + (2 * iy) * (2 * w) + 2 * ix;
                d[0] = v;
                d[1] = v;
                d[2 * w] = v;
                d[2 * w + 1] = v;
            }
    }
    if (detail::should_record<T>(x)) {
        auto xn = x.node();
        out->parents = {xn};
        out->backprop = [xn, nc, h, w](detail::Node<T>& self) {
            xn->ensure_grad();
            for (int64_t j = 0; j < nc; ++j) {
                const T* g = self.grad.data() + j * 4 * h * w;
                T* gx = xn->grad.data() + j * h * w;
                for (int iy = 0; iy < h; ++iy)
                    for (int ix = 0; ix < w; ++ix) {
                        const T* s4 = g + (2 * iy) * (2 * w) + 2 * ix;
                        gx[iy * w + ix] += s4[0] + s4[1] + s4[2 * w] + s4[2 * w + 1];
                    }
            }
        };
    }
    return TensorT<T>(out);
}

// Row-wise softmax on [R,B].
template <typename T>
TensorT<T> softmax_rows(const TensorT<T>& x) {
    if (x.rank() != 2) throw ShapeError("softmax_rows expects [R,B], got " + shape_str(x.shape()));
    const int r = x.dim(0), b = x.dim(1);
    auto out = detail::make_result<T>({r, b}, "softmax_rows");
    const auto& xv = x.data();
    for (int i = 0; i < r; ++i) {
        const T* row = xv.data() + static_cast<int64_t>(i) * b;
        T* y = out->value.data() + static_cast<int64_t>(i) * b;
        T mx = row[0];
        for (int j = 1; j < b; ++j) mx = std::max(mx, row[j]);
        T z = T(0);
        for (int j = 0; j < b; ++j) {
            y[j] = std::exp(row[j] - mx);
            z += y[j];
        }
        for (int j = 0; j < b; ++j) y[j] /= z;
    }
    if (detail::should_record<T>(x)) {
        auto xn = x.node();
        out->parents = {xn};
        out->backprop = [xn, r, b](detail::Node<T>& self) {
            xn->ensure_grad();
            for (int i = 0; i < r; ++i) {
                const T* y = self.value.data() + static_cast<int64_t>(i) * b;
                const T* g = self.grad.data() + static_cast<int64_t>(i) * b;
                T dot = T(0);
                for (int j = 0; j < b; ++j) dot += g[j] * y[j];
                T* gx = xn->grad.data() + static_cast<int64_t>(i) * b;
                for (int j = 0; j < b; ++j) gx[j] += y[j] * (g[j] - dot);
            }
        };
    }
    return TensorT<T>(out);
}

// ---------------------------------------------------------------------------
// Backward

// Topologically ordered view of the recorded operations reachable from a root;
// parents precede children, so reverse iteration is the backward schedule.
template <typename T>
struct Graph {
    std::vector<detail::Node<T>*> order;
};

template <typename T>
Graph<T> build_graph(const TensorT<T>& root) {
    Graph<T> g;
    std::unordered_set<detail::Node<T>*> seen;
    // iterative post-order DFS (unrolled ODE chains can be thousands of nodes deep)
    std::vector<std::pair<detail::Node<T>*, size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node<T>* p = node->parents[next++].get();
            if (seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            g.order.push_back(node);
            stack.pop_back();
        }
    }
    return g;
}

// Seeds d(loss)/d(loss)=1 and accumulates grads into every reachable node.
// Interior grads are reset per call; leaf (parameter) grads accumulate across
// calls until zero_grad().
template <typename T>
void backward(const TensorT<T>& loss) {
    if (loss.size() != 1) throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    Graph<T> g = build_graph(loss);
    for (auto* n : g.order) {
        if (!n->is_leaf()) n->grad.assign(n->value.size(), T(0));
    }
    loss.node()->ensure_grad();
    loss.node()->grad[0] += T(1);
    for (auto it = g.order.rbegin(); it != g.order.rend(); ++it) {
        if ((*it)->backprop) (*it)->backprop(**it);
    }
}

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
template <typename T>
double finite_diff_check(const std::function<TensorT<T>(const TensorT<T>&)>& f, TensorT<T>& x, T eps) {
    if (eps <= T(0)) throw ContractError("finite_diff_check: eps must be positive");
    x.set_requires_grad(true);
    x.zero_grad();
    TensorT<T> y = f(x);
    if (y.size() != 1) throw ContractError("finite_diff_check: f must be scalar-valued");
    backward(y);
    // parameters the loss never touches hold an identically-zero gradient
    std::vector<T> analytic = x.has_grad() ? x.grad() : std::vector<T>(x.data().size(), T(0));
    double worst = 0.0;
    NoGradGuard ng;
    auto& xv = x.data_mut();
    for (size_t i = 0; i < xv.size(); ++i) {
        const T keep = xv[i];
        xv[i] = keep + eps;
        const double up = static_cast<double>(f(x).item());
        xv[i] = keep - eps;
        const double dn = static_cast<double>(f(x).item());
        xv[i] = keep;
        const double fd = (up - dn) / (2.0 * static_cast<double>(eps));
        const double a = static_cast<double>(analytic[i]);
        const double err = std::abs(a - fd) / std::max(1.0, std::abs(a));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace meddet
