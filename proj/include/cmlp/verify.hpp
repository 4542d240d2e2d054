#pragma once

// Reference implementations and gradient-checking utilities for the test
// suite. Everything here is written as plain nested loops, independent of the
// production kernels, so the two routes can disagree when one of them is
// wrong. Keep it that way: no calls into ops:: from this module.

#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <vector>

#include "cmlp/ops.hpp"
#include "cmlp/tensor.hpp"

namespace cmlp {
namespace verify {

// Direct convolution, one output element per innermost accumulation.
template <typename T>
Tensor<T> naive_conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias,
                       const ConvGeometry& geom);

// Matrix-vector product per row (rank 2) or per spatial position (rank 4).
template <typename T>
Tensor<T> naive_linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias);

template <typename T>
Tensor<T> naive_layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                           T eps);

template <typename T>
Tensor<T> naive_max_pool2d(const Tensor<T>& x, const ConvGeometry& geom);

// |a - b| / max(|a|, |b|, floor). The floor keeps near-zero values from
// inflating the ratio.
template <typename T>
T rel_error(T a, T b, T floor = T(1e-3)) {
    const T denom = std::max({std::abs(a), std::abs(b), floor});
    return std::abs(a - b) / denom;
}

template <typename T>
T max_rel_error(const Tensor<T>& a, const Tensor<T>& b, T floor = T(1e-3)) {
    T worst = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, rel_error(a[i], b[i], floor));
    }
    return worst;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    T worst = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(a[i] - b[i]));
    }
    return worst;
}

// Uniform fill in [lo, hi] from a caller-owned engine, so tests control the
// stream and stay reproducible.
template <typename T>
void fill_uniform(Tensor<T>& t, std::mt19937_64& rng, T lo = T(-1), T hi = T(1)) {
    std::uniform_real_distribution<T> dist(lo, hi);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
}

// Central-difference gradient of a scalar loss with respect to every element
// of `param`. The loss callback must re-read `param` on each call.
template <typename T>
Tensor<T> fd_gradient(Tensor<T>& param, const std::function<T()>& loss, T step = T(1e-5)) {
    Tensor<T> grad(param.shape());
    for (std::size_t i = 0; i < param.size(); ++i) {
        const T saved = param[i];
        param[i] = saved + step;
        const T up = loss();
        param[i] = saved - step;
        const T down = loss();
        param[i] = saved;
        grad[i] = (up - down) / (2 * step);
    }
    return grad;
}

// Projection loss sum(r * f(x)): differentiates every output element at once
// through a fixed random direction r.
template <typename T>
T dot_loss(const Tensor<T>& y, const Tensor<T>& r) {
    T acc = 0;
    for (std::size_t i = 0; i < y.size(); ++i) acc += y[i] * r[i];
    return acc;
}

} // namespace verify
} // namespace cmlp
