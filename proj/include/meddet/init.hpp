// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>

#include "meddet/rng.hpp"
#include "meddet/tensor.hpp"

namespace meddet::init {

// He fan-in normal init for conv [Co,C,k,k] and fc [D,M] weights.
template <typename T>
TensorT<T> he_normal(Shape shape, CounterRng& rng) {
    int64_t fan_in = 1;
    if (shape.size() == 4)
        fan_in = static_cast<int64_t>(shape[1]) * shape[2] * shape[3];
    else if (shape.size() == 2)
        fan_in = shape[0];
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    std::vector<T> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) x = static_cast<T>(rng.gaussian(0.0, stddev));
    return TensorT<T>::param(std::move(shape), std::move(v));
}

template <typename T>
TensorT<T> zero_param(Shape shape) {
    TensorT<T> t = TensorT<T>::zeros(std::move(shape));
    t.set_requires_grad(true);
    return t;
}

}  // namespace meddet::init
