#include "cmlp/nn.hpp"

#include <cmath>

#include "cmlp/error.hpp"

namespace cmlp {
namespace nn {

// ---------------------------------------------------------------------------
// registry
// ---------------------------------------------------------------------------

template <typename T>
void ParamRegistry<T>::claim_name(const std::string& name) {
    if (!names_.insert(name).second) {
        throw StateError("registry: duplicate state name '" + name + "'");
    }
}

template <typename T>
void ParamRegistry<T>::add_param(std::string name, Tensor<T>& value, Tensor<T>& grad,
                                 bool decay) {
    if (!value.same_shape(grad)) {
        throw StateError("registry: parameter '" + name + "' and its gradient disagree: " +
                         value.shape_string() + " vs " + grad.shape_string());
    }
    claim_name(name);
    params_.push_back(ParamRef<T>{std::move(name), &value, &grad, decay});
}

template <typename T>
void ParamRegistry<T>::add_buffer(std::string name, Tensor<T>& value) {
    claim_name(name);
    buffers_.push_back(BufferRef<T>{std::move(name), &value});
}

template <typename T>
std::size_t ParamRegistry<T>::param_element_count() const {
    std::size_t total = 0;
    for (const auto& p : params_) total += p.value->size();
    return total;
}

// ---------------------------------------------------------------------------
// layer base
// ---------------------------------------------------------------------------

template <typename T>
const Tensor<T>& Layer<T>::cached(const char* who) const {
    if (!has_cache_) {
        throw StateError(std::string(who) +
                         ": backward without a preceding train-mode forward");
    }
    return x_;
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

template <typename T>
Conv2d<T>::Conv2d(std::size_t cin, std::size_t cout, std::size_t kernel, std::size_t stride,
                  std::size_t pad, std::size_t groups, bool bias)
    : geom_{kernel, kernel, stride, stride, pad, pad, groups},
      has_bias_(bias) {
    if (groups == 0 || cin % groups != 0 || cout % groups != 0) {
        throw ShapeError("conv layer: channels " + std::to_string(cin) + "->" +
                         std::to_string(cout) + " not divisible by groups " +
                         std::to_string(groups));
    }
    weight_ = Tensor<T>({cout, cin / groups, kernel, kernel});
    grad_weight_ = Tensor<T>(weight_.shape());
    if (bias) {
        bias_ = Tensor<T>({cout});
        grad_bias_ = Tensor<T>({cout});
    }
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x, Mode mode) {
    if (mode == Mode::train) {
        this->x_ = x;
        this->has_cache_ = true;
    }
    return ops::conv2d(x, weight_, has_bias_ ? &bias_ : nullptr, geom_);
}

template <typename T>
Tensor<T> Conv2d<T>::backward(const Tensor<T>& grad_out) {
    const Tensor<T>& x = this->cached("conv layer");
    ops::add_inplace(grad_weight_, ops::conv2d_grad_weight(grad_out, x, geom_, weight_.shape()));
    if (has_bias_) ops::add_inplace(grad_bias_, ops::conv2d_grad_bias(grad_out));
    return ops::conv2d_grad_input(grad_out, weight_, geom_, x.shape());
}

template <typename T>
void Conv2d<T>::register_state(const std::string& prefix, ParamRegistry<T>& reg) {
    reg.add_param(prefix + ".weight", weight_, grad_weight_, true);
    if (has_bias_) reg.add_param(prefix + ".bias", bias_, grad_bias_, false);
}

// ---------------------------------------------------------------------------
// batch norm
// ---------------------------------------------------------------------------

template <typename T>
BatchNorm2d<T>::BatchNorm2d(std::size_t channels, T eps, T momentum)
    : eps_(eps),
      momentum_(momentum),
      gamma_({channels}, T(1)),
      grad_gamma_({channels}),
      beta_({channels}),
      grad_beta_({channels}),
      running_mean_({channels}),
      running_var_({channels}, T(1)) {}

template <typename T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& x, Mode mode) {
    if (mode == Mode::train) {
        this->x_ = x;
        this->has_cache_ = true;
        return ops::batch_norm2d(x, gamma_, beta_, running_mean_, running_var_, eps_, momentum_,
                                 Mode::train);
    }
    // Copies keep eval forward mutation-free.
    Tensor<T> mean = running_mean_, var = running_var_;
    return ops::batch_norm2d(x, gamma_, beta_, mean, var, eps_, momentum_, Mode::eval);
}

template <typename T>
Tensor<T> BatchNorm2d<T>::backward(const Tensor<T>& grad_out) {
    const Tensor<T>& x = this->cached("batch norm");
    auto g = ops::batch_norm2d_grad(x, gamma_, eps_, grad_out);
    ops::add_inplace(grad_gamma_, g.dgamma);
    ops::add_inplace(grad_beta_, g.dbeta);
    return std::move(g.dx);
}

template <typename T>
void BatchNorm2d<T>::register_state(const std::string& prefix, ParamRegistry<T>& reg) {
    reg.add_param(prefix + ".gamma", gamma_, grad_gamma_, false);
    reg.add_param(prefix + ".beta", beta_, grad_beta_, false);
    reg.add_buffer(prefix + ".running_mean", running_mean_);
    reg.add_buffer(prefix + ".running_var", running_var_);
}

// ---------------------------------------------------------------------------
// layer norm
// ---------------------------------------------------------------------------

template <typename T>
LayerNorm<T>::LayerNorm(std::size_t channels, T eps)
    : eps_(eps),
      gamma_({channels}, T(1)),
      grad_gamma_({channels}),
      beta_({channels}),
      grad_beta_({channels}) {}

template <typename T>
Tensor<T> LayerNorm<T>::forward(const Tensor<T>& x, Mode mode) {
    if (mode == Mode::train) {
        this->x_ = x;
        this->has_cache_ = true;
    }
    return ops::layer_norm(x, gamma_, beta_, eps_);
}

template <typename T>
Tensor<T> LayerNorm<T>::backward(const Tensor<T>& grad_out) {
    const Tensor<T>& x = this->cached("layer norm");
    auto g = ops::layer_norm_grad(x, gamma_, eps_, grad_out);
    ops::add_inplace(grad_gamma_, g.dgamma);
    ops::add_inplace(grad_beta_, g.dbeta);
    return std::move(g.dx);
}

template <typename T>
void LayerNorm<T>::register_state(const std::string& prefix, ParamRegistry<T>& reg) {
    reg.add_param(prefix + ".gamma", gamma_, grad_gamma_, false);
    reg.add_param(prefix + ".beta", beta_, grad_beta_, false);
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

template <typename T>
Linear<T>::Linear(std::size_t cin, std::size_t cout, bool bias)
    : has_bias_(bias),
      weight_({cout, cin}),
      grad_weight_({cout, cin}) {
    if (bias) {
        bias_ = Tensor<T>({cout});
        grad_bias_ = Tensor<T>({cout});
    }
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x, Mode mode) {
    if (mode == Mode::train) {
        this->x_ = x;
        this->has_cache_ = true;
    }
    return ops::linear(x, weight_, has_bias_ ? &bias_ : nullptr);
}

template <typename T>
Tensor<T> Linear<T>::backward(const Tensor<T>& grad_out) {
    const Tensor<T>& x = this->cached("linear layer");
    ops::add_inplace(grad_weight_, ops::linear_grad_weight(grad_out, x));
    if (has_bias_) ops::add_inplace(grad_bias_, ops::linear_grad_bias(grad_out));
    return ops::linear_grad_input(grad_out, weight_);
}

template <typename T>
void Linear<T>::register_state(const std::string& prefix, ParamRegistry<T>& reg) {
    reg.add_param(prefix + ".weight", weight_, grad_weight_, true);
    if (has_bias_) reg.add_param(prefix + ".bias", bias_, grad_bias_, false);
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> GELU<T>::forward(const Tensor<T>& x, Mode mode) {
    if (mode == Mode::train) {
        this->x_ = x;
        this->has_cache_ = true;
    }
    return ops::gelu(x);
}

template <typename T>
Tensor<T> GELU<T>::backward(const Tensor<T>& grad_out) {
    return ops::gelu_grad(this->cached("gelu"), grad_out);
}

template <typename T>
Tensor<T> ReLU<T>::forward(const Tensor<T>& x, Mode mode) {
    if (mode == Mode::train) {
        this->x_ = x;
        this->has_cache_ = true;
    }
    return ops::relu(x);
}

template <typename T>
Tensor<T> ReLU<T>::backward(const Tensor<T>& grad_out) {
    return ops::relu_grad(this->cached("relu"), grad_out);
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

template <typename T>
MaxPool2d<T>::MaxPool2d(std::size_t kernel, std::size_t stride, std::size_t pad)
    : geom_{kernel, kernel, stride, stride, pad, pad, 1} {}

template <typename T>
Tensor<T> MaxPool2d<T>::forward(const Tensor<T>& x, Mode mode) {
    if (mode == Mode::train) {
        this->x_ = x;
        this->has_cache_ = true;
    }
    return ops::max_pool2d(x, geom_);
}

template <typename T>
Tensor<T> MaxPool2d<T>::backward(const Tensor<T>& grad_out) {
    return ops::max_pool2d_grad(this->cached("max pool"), grad_out, geom_);
}

template <typename T>
Tensor<T> GlobalAvgPool<T>::forward(const Tensor<T>& x, Mode mode) {
    if (x.rank() != 4) {
        throw ShapeError("global average pool: input must have rank 4, got " +
                         x.shape_string());
    }
    if (mode == Mode::train) {
        h_ = x.extent(2);
        w_ = x.extent(3);
        this->has_cache_ = true;
    }
    return ops::global_avg_pool(x);
}

template <typename T>
Tensor<T> GlobalAvgPool<T>::backward(const Tensor<T>& grad_out) {
    if (!this->has_cache_) {
        throw StateError("global average pool: backward without a preceding train-mode forward");
    }
    return ops::global_avg_pool_grad(grad_out, h_, w_);
}

// ---------------------------------------------------------------------------
// dropout
// ---------------------------------------------------------------------------

template <typename T>
Dropout<T>::Dropout(T p, std::uint64_t seed) : p_(p), rng_(seed) {
    if (p < T(0) || p >= T(1)) {
        throw ConfigError("dropout: probability must lie in [0,1), got " + std::to_string(p));
    }
}

template <typename T>
Tensor<T> Dropout<T>::forward(const Tensor<T>& x, Mode mode) {
    if (mode != Mode::train) return x;
    this->has_cache_ = true;
    if (p_ == T(0)) {
        mask_ = Tensor<T>(); // identity: the stream is not consumed
        return x;
    }
    mask_ = Tensor<T>(x.shape());
    const T scale = T(1) / (T(1) - p_);
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const bool keep = dist(rng_) >= double(p_);
        mask_[i] = keep ? scale : T(0);
        y[i] = x[i] * mask_[i];
    }
    return y;
}

template <typename T>
Tensor<T> Dropout<T>::backward(const Tensor<T>& grad_out) {
    if (!this->has_cache_) {
        throw StateError("dropout: backward without a preceding train-mode forward");
    }
    if (mask_.empty()) return grad_out;
    if (!mask_.same_shape(grad_out)) {
        throw ShapeError("dropout: grad_out " + grad_out.shape_string() +
                         " does not match mask " + mask_.shape_string());
    }
    Tensor<T> dx(grad_out.shape());
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = grad_out[i] * mask_[i];
    return dx;
}

// ---------------------------------------------------------------------------
// channel MLP
// ---------------------------------------------------------------------------

template <typename T>
ChannelMLP<T>::ChannelMLP(std::size_t channels, std::size_t ratio, T dropout_p,
                          std::uint64_t seed)
    : fc1_(channels, ratio * channels),
      fc2_(ratio * channels, channels),
      drop_(dropout_p, seed) {
    if (ratio == 0) throw ConfigError("channel mlp: ratio must be positive");
}

template <typename T>
Tensor<T> ChannelMLP<T>::forward(const Tensor<T>& x, Mode mode) {
    return fc2_.forward(drop_.forward(act_.forward(fc1_.forward(x, mode), mode), mode), mode);
}

template <typename T>
Tensor<T> ChannelMLP<T>::backward(const Tensor<T>& grad_out) {
    return fc1_.backward(act_.backward(drop_.backward(fc2_.backward(grad_out))));
}

template <typename T>
void ChannelMLP<T>::register_state(const std::string& prefix, ParamRegistry<T>& reg) {
    fc1_.register_state(prefix + ".fc1", reg);
    fc2_.register_state(prefix + ".fc2", reg);
}

// ---------------------------------------------------------------------------
// residual and sequential
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> Residual<T>::forward(const Tensor<T>& x, Mode mode) {
    Tensor<T> y = inner_->forward(x, mode);
    if (!y.same_shape(x)) {
        throw ShapeError("residual: sub-layer output " + y.shape_string() +
                         " does not match input " + x.shape_string());
    }
    ops::add_inplace(y, x);
    return y;
}

template <typename T>
Tensor<T> Residual<T>::backward(const Tensor<T>& grad_out) {
    Tensor<T> dx = inner_->backward(grad_out);
    ops::add_inplace(dx, grad_out);
    return dx;
}

template <typename T>
Layer<T>& Sequential<T>::add(std::string name, std::unique_ptr<Layer<T>> layer) {
    entries_.push_back(Entry{std::move(name), std::move(layer)});
    return *entries_.back().layer;
}

template <typename T>
Tensor<T> Sequential<T>::forward(const Tensor<T>& x, Mode mode) {
    Tensor<T> h = x;
    for (auto& e : entries_) h = e.layer->forward(h, mode);
    return h;
}

template <typename T>
Tensor<T> Sequential<T>::backward(const Tensor<T>& grad_out) {
    Tensor<T> g = grad_out;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        g = it->layer->backward(g);
    }
    return g;
}

template <typename T>
void Sequential<T>::register_state(const std::string& prefix, ParamRegistry<T>& reg) {
    for (auto& e : entries_) e.layer->register_state(prefix + "." + e.name, reg);
}

// ---------------------------------------------------------------------------
// patch merge
// ---------------------------------------------------------------------------

template <typename T>
PatchMerge<T>::PatchMerge(std::size_t cin, std::size_t cout)
    : cin_(cin),
      cout_(cout),
      weight_({cout, 4 * cin}),
      grad_weight_({cout, 4 * cin}),
      bias_({cout}),
      grad_bias_({cout}) {}

namespace {

// Quadrant offsets in concatenation order.
constexpr std::size_t kQuadDy[4] = {0, 1, 0, 1};
constexpr std::size_t kQuadDx[4] = {0, 0, 1, 1};

} // namespace

template <typename T>
Tensor<T> PatchMerge<T>::forward(const Tensor<T>& x, Mode mode) {
    if (x.rank() != 4 || x.extent(1) != cin_) {
        throw ShapeError("patch merge: expected rank-4 input with " + std::to_string(cin_) +
                         " channels, got " + x.shape_string());
    }
    const std::size_t N = x.extent(0), H = x.extent(2), W = x.extent(3);
    if (H % 2 != 0 || W % 2 != 0) {
        throw GeometryError("patch merge: spatial extents must be even, got " +
                            x.shape_string());
    }
    Tensor<T> merged({N, 4 * cin_, H / 2, W / 2});
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t q = 0; q < 4; ++q) {
            for (std::size_t c = 0; c < cin_; ++c) {
                for (std::size_t ho = 0; ho < H / 2; ++ho) {
                    for (std::size_t wo = 0; wo < W / 2; ++wo) {
                        merged(n, q * cin_ + c, ho, wo) =
                            x(n, c, 2 * ho + kQuadDy[q], 2 * wo + kQuadDx[q]);
                    }
                }
            }
        }
    }
    Tensor<T> y = ops::linear(merged, weight_, &bias_);
    if (mode == Mode::train) {
        merged_ = std::move(merged);
        has_merged_ = true;
        x_shape_ = x.shape();
    }
    return y;
}

template <typename T>
Tensor<T> PatchMerge<T>::backward(const Tensor<T>& grad_out) {
    if (!has_merged_) {
        throw StateError("patch merge: backward without a preceding train-mode forward");
    }
    ops::add_inplace(grad_weight_, ops::linear_grad_weight(grad_out, merged_));
    ops::add_inplace(grad_bias_, ops::linear_grad_bias(grad_out));
    Tensor<T> dmerged = ops::linear_grad_input(grad_out, weight_);

    Tensor<T> dx(x_shape_);
    const std::size_t N = x_shape_[0], H = x_shape_[2], W = x_shape_[3];
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t q = 0; q < 4; ++q) {
            for (std::size_t c = 0; c < cin_; ++c) {
                for (std::size_t ho = 0; ho < H / 2; ++ho) {
                    for (std::size_t wo = 0; wo < W / 2; ++wo) {
                        dx(n, c, 2 * ho + kQuadDy[q], 2 * wo + kQuadDx[q]) =
                            dmerged(n, q * cin_ + c, ho, wo);
                    }
                }
            }
        }
    }
    return dx;
}

template <typename T>
void PatchMerge<T>::register_state(const std::string& prefix, ParamRegistry<T>& reg) {
    reg.add_param(prefix + ".weight", weight_, grad_weight_, true);
    reg.add_param(prefix + ".bias", bias_, grad_bias_, false);
}

// ---------------------------------------------------------------------------
// initialization
// ---------------------------------------------------------------------------

namespace {

// Standard deviation of a unit normal truncated at +/-2: rejection keeps the
// shape, dividing by this constant restores the target deviation.
constexpr double kTruncShrink = 0.87962566103423978;

} // namespace

template <typename T>
void init_params(ParamRegistry<T>& reg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const double base = 0.02 / kTruncShrink;
    std::normal_distribution<double> dist(0.0, base);
    for (const auto& p : reg.params()) {
        if (p.decay) {
            for (std::size_t i = 0; i < p.value->size(); ++i) {
                double v;
                do {
                    v = dist(rng);
                } while (std::abs(v) > 2.0 * base);
                (*p.value)[i] = T(v);
            }
        } else if (p.name.ends_with(".gamma")) {
            p.value->fill(T(1));
        } else {
            p.value->fill(T(0));
        }
        p.grad->fill(T(0));
    }
}

// ---------------------------------------------------------------------------
// instantiations
// ---------------------------------------------------------------------------

#define CMLP_INSTANTIATE_NN(T)                                      \
    template class ParamRegistry<T>;                                \
    template class Layer<T>;                                        \
    template class Conv2d<T>;                                       \
    template class BatchNorm2d<T>;                                  \
    template class LayerNorm<T>;                                    \
    template class Linear<T>;                                       \
    template class GELU<T>;                                         \
    template class ReLU<T>;                                         \
    template class MaxPool2d<T>;                                    \
    template class GlobalAvgPool<T>;                                \
    template class Dropout<T>;                                      \
    template class ChannelMLP<T>;                                   \
    template class Residual<T>;                                     \
    template class Sequential<T>;                                   \
    template class PatchMerge<T>;                                   \
    template void init_params<T>(ParamRegistry<T>&, std::uint64_t);

CMLP_INSTANTIATE_NN(float)
CMLP_INSTANTIATE_NN(double)

#undef CMLP_INSTANTIATE_NN

} // namespace nn
} // namespace cmlp
