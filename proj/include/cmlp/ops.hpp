#pragma once

#include <cstddef>
#include <vector>

#include "cmlp/tensor.hpp"

namespace cmlp {

enum class Mode { train, eval };

// Convolution/pooling window description. Padding is zero-padding on both
// sides; output extent = floor((in + 2*pad - kernel)/stride) + 1 and must
// come out >= 1.
struct ConvGeometry {
    std::size_t kh = 1, kw = 1;
    std::size_t sh = 1, sw = 1;
    std::size_t ph = 0, pw = 0;
    std::size_t groups = 1;
};

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                            std::size_t pad);

namespace ops {

// ---------------------------------------------------------------------------
// Forward kernels. All are pure functions of their inputs except batch_norm2d,
// which updates the running statistics in train mode. Every kernel accumulates
// in a fixed order, so identical inputs give bit-identical outputs.
// ---------------------------------------------------------------------------

// Cross-correlation with zero padding. x [N,Cin,H,W], weight
// [Cout,Cin/groups,kh,kw], bias [Cout] or null. groups == Cin == Cout is the
// depthwise case and takes a direct path; everything else goes through
// im2col + matmul.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias,
                 const ConvGeometry& geom);

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const ConvGeometry& geom) {
    return conv2d(x, weight, static_cast<const Tensor<T>*>(nullptr), geom);
}

// Affine map over the channel axis. Rank-2 input [N,Cin] -> [N,Cout];
// rank-4 input [N,Cin,H,W] -> [N,Cout,H,W], applied independently at each
// spatial position. weight [Cout,Cin], bias [Cout] or null.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias);

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight) {
    return linear(x, weight, static_cast<const Tensor<T>*>(nullptr));
}

// Normalizes over the channel axis at each (n,h,w) position, then applies
// gamma/beta. x rank 4, gamma/beta extent C.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps);

// Train mode normalizes with batch statistics over (N,H,W) per channel and
// folds the batch mean / unbiased variance into the running statistics with
// the given momentum; eval mode normalizes with the running statistics.
template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       Tensor<T>& running_mean, Tensor<T>& running_var, T eps, T momentum,
                       Mode mode);

// Exact Gaussian-CDF form x * Phi(x); no tanh approximation.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

// Window max with zero-padding cells excluded from the max. Requires
// pad < kernel on both axes so every window sees at least one real cell.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, const ConvGeometry& geom);

// [N,C,H,W] -> [N,C] spatial mean.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

// ---------------------------------------------------------------------------
// Gradient kernels: given the upstream gradient, produce input/parameter
// gradients. batch_norm2d_grad differentiates the train-mode (batch
// statistics) path and recomputes those statistics from x.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d_grad_input(const Tensor<T>& grad_out, const Tensor<T>& weight,
                            const ConvGeometry& geom, const std::vector<std::size_t>& x_shape);
template <typename T>
Tensor<T> conv2d_grad_weight(const Tensor<T>& grad_out, const Tensor<T>& x,
                             const ConvGeometry& geom, const std::vector<std::size_t>& w_shape);
template <typename T>
Tensor<T> conv2d_grad_bias(const Tensor<T>& grad_out);

template <typename T>
Tensor<T> linear_grad_input(const Tensor<T>& grad_out, const Tensor<T>& weight);
template <typename T>
Tensor<T> linear_grad_weight(const Tensor<T>& grad_out, const Tensor<T>& x);
template <typename T>
Tensor<T> linear_grad_bias(const Tensor<T>& grad_out);

template <typename T>
struct NormGrads {
    Tensor<T> dx;
    Tensor<T> dgamma;
    Tensor<T> dbeta;
};

template <typename T>
NormGrads<T> layer_norm_grad(const Tensor<T>& x, const Tensor<T>& gamma, T eps,
                             const Tensor<T>& grad_out);

template <typename T>
NormGrads<T> batch_norm2d_grad(const Tensor<T>& x, const Tensor<T>& gamma, T eps,
                               const Tensor<T>& grad_out);

// Eval-mode batch norm is a fixed per-channel affine map of x.
template <typename T>
NormGrads<T> batch_norm2d_grad_eval(const Tensor<T>& x, const Tensor<T>& gamma,
                                    const Tensor<T>& running_mean, const Tensor<T>& running_var,
                                    T eps, const Tensor<T>& grad_out);

template <typename T>
Tensor<T> gelu_grad(const Tensor<T>& x, const Tensor<T>& grad_out);

template <typename T>
Tensor<T> relu_grad(const Tensor<T>& x, const Tensor<T>& grad_out);

// Routes each output's gradient to the first-occurring max element of its
// window (row-major scan order), recomputed from x.
template <typename T>
Tensor<T> max_pool2d_grad(const Tensor<T>& x, const Tensor<T>& grad_out,
                          const ConvGeometry& geom);

template <typename T>
Tensor<T> global_avg_pool_grad(const Tensor<T>& grad_out, std::size_t H, std::size_t W);

// ---------------------------------------------------------------------------
// Elementwise helpers shared by layers and optimizers.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b);

} // namespace ops
} // namespace cmlp
