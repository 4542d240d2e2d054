#include "cmlp/ops.hpp"

#include <cmath>
#include <cstring>
#include <limits>

namespace cmlp {

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                            std::size_t pad) {
    if (kernel == 0 || stride == 0) {
        throw GeometryError("window: kernel and stride must be positive");
    }
    if (in + 2 * pad < kernel) {
        throw GeometryError("window: output extent < 1 for input " + std::to_string(in) +
                            ", kernel " + std::to_string(kernel) + ", pad " + std::to_string(pad));
    }
    return (in + 2 * pad - kernel) / stride + 1;
}

namespace ops {
namespace {

template <typename T>
void expect_rank(const Tensor<T>& t, std::size_t r, const char* who, const char* what) {
    if (t.rank() != r) {
        throw ShapeError(std::string(who) + ": " + what + " must have rank " +
                         std::to_string(r) + ", got " + t.shape_string());
    }
}

// ---------------------------------------------------------------------------
// Accumulating matmul kernels on raw row-major buffers. The caller zeroes the
// destination when it wants a plain product. Per output element the reduction
// runs in ascending k order, which keeps every conv/linear bit-deterministic.
// ---------------------------------------------------------------------------

// c[M,N] += a[M,K] * b[K,N]
template <typename T>
void matmul_nn(const T* a, const T* b, T* c, std::size_t M, std::size_t K, std::size_t N) {
    for (std::size_t i = 0; i < M; ++i) {
        T* crow = c + i * N;
        const T* arow = a + i * K;
        for (std::size_t k = 0; k < K; ++k) {
            const T aik = arow[k];
            const T* brow = b + k * N;
            for (std::size_t j = 0; j < N; ++j) crow[j] += aik * brow[j];
        }
    }
}

// c[M,N] += a[M,K] * b[N,K]^T  (dot products of contiguous rows)
template <typename T>
void matmul_nt(const T* a, const T* b, T* c, std::size_t M, std::size_t K, std::size_t N) {
    for (std::size_t i = 0; i < M; ++i) {
        const T* arow = a + i * K;
        T* crow = c + i * N;
        for (std::size_t j = 0; j < N; ++j) {
            const T* brow = b + j * K;
            T acc = 0;
            for (std::size_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
            crow[j] += acc;
        }
    }
}

// c[M,N] += a[K,M]^T * b[K,N]
template <typename T>
void matmul_tn(const T* a, const T* b, T* c, std::size_t M, std::size_t K, std::size_t N) {
    for (std::size_t k = 0; k < K; ++k) {
        const T* arow = a + k * M;
        const T* brow = b + k * N;
        for (std::size_t i = 0; i < M; ++i) {
            const T aki = arow[i];
            T* crow = c + i * N;
            for (std::size_t j = 0; j < N; ++j) crow[j] += aki * brow[j];
        }
    }
}

// ---------------------------------------------------------------------------
// im2col for one (image, group): writes a [Cg*kh*kw, Ho*Wo] patch matrix.
// Out-of-bounds taps are zeros (zero padding).
// ---------------------------------------------------------------------------
template <typename T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t c0,
            std::size_t Cg, const ConvGeometry& g, std::size_t Ho, std::size_t Wo, T* cols) {
    (void)C;
    const std::size_t plane = H * W;
    for (std::size_t c = 0; c < Cg; ++c) {
        const T* xc = x + (c0 + c) * plane;
        for (std::size_t ki = 0; ki < g.kh; ++ki) {
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                T* dst = cols + ((c * g.kh + ki) * g.kw + kj) * (Ho * Wo);
                for (std::size_t ho = 0; ho < Ho; ++ho) {
                    const std::ptrdiff_t ih =
                        std::ptrdiff_t(ho * g.sh + ki) - std::ptrdiff_t(g.ph);
                    T* drow = dst + ho * Wo;
                    if (ih < 0 || ih >= std::ptrdiff_t(H)) {
                        for (std::size_t wo = 0; wo < Wo; ++wo) drow[wo] = 0;
                        continue;
                    }
                    const T* xrow = xc + std::size_t(ih) * W;
                    for (std::size_t wo = 0; wo < Wo; ++wo) {
                        const std::ptrdiff_t iw =
                            std::ptrdiff_t(wo * g.sw + kj) - std::ptrdiff_t(g.pw);
                        drow[wo] = (iw < 0 || iw >= std::ptrdiff_t(W)) ? T(0) : xrow[iw];
                    }
                }
            }
        }
    }
}

// Scatter-add of a patch-matrix gradient back onto the input plane.
template <typename T>
void col2im_add(const T* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t c0,
                std::size_t Cg, const ConvGeometry& g, std::size_t Ho, std::size_t Wo, T* dx) {
    (void)C;
    const std::size_t plane = H * W;
    for (std::size_t c = 0; c < Cg; ++c) {
        T* dxc = dx + (c0 + c) * plane;
        for (std::size_t ki = 0; ki < g.kh; ++ki) {
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                const T* src = cols + ((c * g.kh + ki) * g.kw + kj) * (Ho * Wo);
                for (std::size_t ho = 0; ho < Ho; ++ho) {
                    const std::ptrdiff_t ih =
                        std::ptrdiff_t(ho * g.sh + ki) - std::ptrdiff_t(g.ph);
                    if (ih < 0 || ih >= std::ptrdiff_t(H)) continue;
                    const T* srow = src + ho * Wo;
                    T* drow = dxc + std::size_t(ih) * W;
                    for (std::size_t wo = 0; wo < Wo; ++wo) {
                        const std::ptrdiff_t iw =
                            std::ptrdiff_t(wo * g.sw + kj) - std::ptrdiff_t(g.pw);
                        if (iw < 0 || iw >= std::ptrdiff_t(W)) continue;
                        drow[iw] += srow[wo];
                    }
                }
            }
        }
    }
}

struct ConvDims {
    std::size_t N, Cin, H, W, Cout, Cg, Coutg, Ho, Wo;
};

template <typename T>
ConvDims conv_check(const std::vector<std::size_t>& xs, const Tensor<T>& w,
                    const Tensor<T>* bias, const ConvGeometry& g) {
    if (xs.size() != 4) {
        throw ShapeError("conv2d: input must have rank 4, got " +
                         Tensor<T>::shape_string(xs));
    }
    expect_rank(w, 4, "conv2d", "weight");
    ConvDims d{};
    d.N = xs[0]; d.Cin = xs[1]; d.H = xs[2]; d.W = xs[3];
    d.Cout = w.extent(0);
    if (g.groups == 0 || d.Cin % g.groups != 0 || d.Cout % g.groups != 0) {
        throw ShapeError("conv2d: channels " + std::to_string(d.Cin) + "->" +
                         std::to_string(d.Cout) + " not divisible by groups " +
                         std::to_string(g.groups));
    }
    d.Cg = d.Cin / g.groups;
    d.Coutg = d.Cout / g.groups;
    if (w.extent(1) != d.Cg || w.extent(2) != g.kh || w.extent(3) != g.kw) {
        throw ShapeError("conv2d: weight " + w.shape_string() + " does not match " +
                         std::to_string(d.Cout) + "x" + std::to_string(d.Cg) + "x" +
                         std::to_string(g.kh) + "x" + std::to_string(g.kw));
    }
    if (bias && (bias->rank() != 1 || bias->extent(0) != d.Cout)) {
        throw ShapeError("conv2d: bias " + bias->shape_string() + " must be rank 1 extent " +
                         std::to_string(d.Cout));
    }
    d.Ho = conv_out_extent(d.H, g.kh, g.sh, g.ph);
    d.Wo = conv_out_extent(d.W, g.kw, g.sw, g.pw);
    return d;
}

template <typename T>
bool is_depthwise(const ConvDims& d, const ConvGeometry& g) {
    return g.groups == d.Cin && d.Cin == d.Cout;
}

} // namespace

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias,
                 const ConvGeometry& g) {
    const ConvDims d = conv_check(x.shape(), weight, bias, g);
    Tensor<T> y({d.N, d.Cout, d.Ho, d.Wo});

    if (is_depthwise<T>(d, g)) {
        for (std::size_t n = 0; n < d.N; ++n) {
            for (std::size_t c = 0; c < d.Cout; ++c) {
                const T* xc = x.data() + (n * d.Cin + c) * d.H * d.W;
                const T* wc = weight.data() + c * g.kh * g.kw;
                const T b = bias ? (*bias)[c] : T(0);
                T* yc = y.data() + (n * d.Cout + c) * d.Ho * d.Wo;
                for (std::size_t ho = 0; ho < d.Ho; ++ho) {
                    for (std::size_t wo = 0; wo < d.Wo; ++wo) {
                        T acc = 0;
                        for (std::size_t ki = 0; ki < g.kh; ++ki) {
                            const std::ptrdiff_t ih =
                                std::ptrdiff_t(ho * g.sh + ki) - std::ptrdiff_t(g.ph);
                            if (ih < 0 || ih >= std::ptrdiff_t(d.H)) continue;
                            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                                const std::ptrdiff_t iw =
                                    std::ptrdiff_t(wo * g.sw + kj) - std::ptrdiff_t(g.pw);
                                if (iw < 0 || iw >= std::ptrdiff_t(d.W)) continue;
                                acc += xc[std::size_t(ih) * d.W + std::size_t(iw)] *
                                       wc[ki * g.kw + kj];
                            }
                        }
                        yc[ho * d.Wo + wo] = acc + b;
                    }
                }
            }
        }
        return y;
    }

    const std::size_t pos = d.Ho * d.Wo;
    const std::size_t kk = d.Cg * g.kh * g.kw;
    const bool pointwise =
        g.groups == 1 && g.kh == 1 && g.kw == 1 && g.sh == 1 && g.sw == 1 && g.ph == 0 && g.pw == 0;
    std::vector<T> cols;
    if (!pointwise) cols.resize(kk * pos);

    for (std::size_t n = 0; n < d.N; ++n) {
        for (std::size_t grp = 0; grp < g.groups; ++grp) {
            const T* src;
            if (pointwise) {
                // 1x1 stride-1 convolution is a plain matmul on the channel planes.
                src = x.data() + n * d.Cin * d.H * d.W;
            } else {
                im2col(x.data() + n * d.Cin * d.H * d.W, d.Cin, d.H, d.W, grp * d.Cg, d.Cg, g,
                       d.Ho, d.Wo, cols.data());
                src = cols.data();
            }
            matmul_nn(weight.data() + grp * d.Coutg * kk, src,
                      y.data() + (n * d.Cout + grp * d.Coutg) * pos, d.Coutg, kk, pos);
        }
        if (bias) {
            for (std::size_t c = 0; c < d.Cout; ++c) {
                T* yc = y.data() + (n * d.Cout + c) * pos;
                const T b = (*bias)[c];
                for (std::size_t p = 0; p < pos; ++p) yc[p] += b;
            }
        }
    }
    return y;
}

template <typename T>
Tensor<T> conv2d_grad_input(const Tensor<T>& grad_out, const Tensor<T>& weight,
                            const ConvGeometry& g, const std::vector<std::size_t>& x_shape) {
    const ConvDims d = conv_check<T>(x_shape, weight, nullptr, g);
    expect_rank(grad_out, 4, "conv2d_grad_input", "grad_out");
    if (grad_out.shape() != std::vector<std::size_t>{d.N, d.Cout, d.Ho, d.Wo}) {
        throw ShapeError("conv2d_grad_input: grad_out " + grad_out.shape_string() +
                         " does not match output " +
                         Tensor<T>::shape_string({d.N, d.Cout, d.Ho, d.Wo}));
    }
    Tensor<T> dx(x_shape);

    if (is_depthwise<T>(d, g)) {
        for (std::size_t n = 0; n < d.N; ++n) {
            for (std::size_t c = 0; c < d.Cin; ++c) {
                const T* gc = grad_out.data() + (n * d.Cout + c) * d.Ho * d.Wo;
                const T* wc = weight.data() + c * g.kh * g.kw;
                T* dxc = dx.data() + (n * d.Cin + c) * d.H * d.W;
                for (std::size_t ho = 0; ho < d.Ho; ++ho) {
                    for (std::size_t wo = 0; wo < d.Wo; ++wo) {
                        const T gv = gc[ho * d.Wo + wo];
                        for (std::size_t ki = 0; ki < g.kh; ++ki) {
                            const std::ptrdiff_t ih =
                                std::ptrdiff_t(ho * g.sh + ki) - std::ptrdiff_t(g.ph);
                            if (ih < 0 || ih >= std::ptrdiff_t(d.H)) continue;
                            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                                const std::ptrdiff_t iw =
                                    std::ptrdiff_t(wo * g.sw + kj) - std::ptrdiff_t(g.pw);
                                if (iw < 0 || iw >= std::ptrdiff_t(d.W)) continue;
                                dxc[std::size_t(ih) * d.W + std::size_t(iw)] +=
                                    gv * wc[ki * g.kw + kj];
                            }
                        }
                    }
                }
            }
        }
        return dx;
    }

    const std::size_t pos = d.Ho * d.Wo;
    const std::size_t kk = d.Cg * g.kh * g.kw;
    std::vector<T> cols_grad(kk * pos);
    for (std::size_t n = 0; n < d.N; ++n) {
        for (std::size_t grp = 0; grp < g.groups; ++grp) {
            std::fill(cols_grad.begin(), cols_grad.end(), T(0));
            matmul_tn(weight.data() + grp * d.Coutg * kk,
                      grad_out.data() + (n * d.Cout + grp * d.Coutg) * pos, cols_grad.data(),
                      kk, d.Coutg, pos);
            col2im_add(cols_grad.data(), d.Cin, d.H, d.W, grp * d.Cg, d.Cg, g, d.Ho, d.Wo,
                       dx.data() + n * d.Cin * d.H * d.W);
        }
    }
    return dx;
}

template <typename T>
Tensor<T> conv2d_grad_weight(const Tensor<T>& grad_out, const Tensor<T>& x,
                             const ConvGeometry& g, const std::vector<std::size_t>& w_shape) {
    Tensor<T> dw(w_shape);
    const ConvDims d = conv_check<T>(x.shape(), dw, nullptr, g);
    if (grad_out.shape() != std::vector<std::size_t>{d.N, d.Cout, d.Ho, d.Wo}) {
        throw ShapeError("conv2d_grad_weight: grad_out " + grad_out.shape_string() +
                         " does not match output " +
                         Tensor<T>::shape_string({d.N, d.Cout, d.Ho, d.Wo}));
    }

    if (is_depthwise<T>(d, g)) {
        for (std::size_t n = 0; n < d.N; ++n) {
            for (std::size_t c = 0; c < d.Cin; ++c) {
                const T* gc = grad_out.data() + (n * d.Cout + c) * d.Ho * d.Wo;
                const T* xc = x.data() + (n * d.Cin + c) * d.H * d.W;
                T* dwc = dw.data() + c * g.kh * g.kw;
                for (std::size_t ho = 0; ho < d.Ho; ++ho) {
                    for (std::size_t wo = 0; wo < d.Wo; ++wo) {
                        const T gv = gc[ho * d.Wo + wo];
                        for (std::size_t ki = 0; ki < g.kh; ++ki) {
                            const std::ptrdiff_t ih =
                                std::ptrdiff_t(ho * g.sh + ki) - std::ptrdiff_t(g.ph);
                            if (ih < 0 || ih >= std::ptrdiff_t(d.H)) continue;
                            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                                const std::ptrdiff_t iw =
                                    std::ptrdiff_t(wo * g.sw + kj) - std::ptrdiff_t(g.pw);
                                if (iw < 0 || iw >= std::ptrdiff_t(d.W)) continue;
                                dwc[ki * g.kw + kj] +=
                                    gv * xc[std::size_t(ih) * d.W + std::size_t(iw)];
                            }
                        }
                    }
                }
            }
        }
        return dw;
    }

    const std::size_t pos = d.Ho * d.Wo;
    const std::size_t kk = d.Cg * g.kh * g.kw;
    std::vector<T> cols(kk * pos);
    for (std::size_t n = 0; n < d.N; ++n) {
        for (std::size_t grp = 0; grp < g.groups; ++grp) {
            im2col(x.data() + n * d.Cin * d.H * d.W, d.Cin, d.H, d.W, grp * d.Cg, d.Cg, g, d.Ho,
                   d.Wo, cols.data());
            matmul_nt(grad_out.data() + (n * d.Cout + grp * d.Coutg) * pos, cols.data(),
                      dw.data() + grp * d.Coutg * kk, d.Coutg, pos, kk);
        }
    }
    return dw;
}

template <typename T>
Tensor<T> conv2d_grad_bias(const Tensor<T>& grad_out) {
    expect_rank(grad_out, 4, "conv2d_grad_bias", "grad_out");
    const std::size_t N = grad_out.extent(0), C = grad_out.extent(1);
    const std::size_t pos = grad_out.extent(2) * grad_out.extent(3);
    Tensor<T> db({C});
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            const T* gc = grad_out.data() + (n * C + c) * pos;
            T acc = 0;
            for (std::size_t p = 0; p < pos; ++p) acc += gc[p];
            db[c] += acc;
        }
    }
    return db;
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void linear_check(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias) {
    expect_rank(w, 2, "linear", "weight");
    if (x.rank() != 2 && x.rank() != 4) {
        throw ShapeError("linear: input must have rank 2 or 4, got " + x.shape_string());
    }
    if (x.extent(1) != w.extent(1)) {
        throw ShapeError("linear: input channels " + std::to_string(x.extent(1)) +
                         " != weight in-features " + std::to_string(w.extent(1)));
    }
    if (bias && (bias->rank() != 1 || bias->extent(0) != w.extent(0))) {
        throw ShapeError("linear: bias " + bias->shape_string() + " must be rank 1 extent " +
                         std::to_string(w.extent(0)));
    }
}

} // namespace

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias) {
    linear_check(x, w, bias);
    const std::size_t Cout = w.extent(0), Cin = w.extent(1);
    if (x.rank() == 2) {
        const std::size_t N = x.extent(0);
        Tensor<T> y({N, Cout});
        matmul_nt(x.data(), w.data(), y.data(), N, Cin, Cout);
        if (bias) {
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < Cout; ++c) y(n, c) += (*bias)[c];
        }
        return y;
    }
    const std::size_t N = x.extent(0), H = x.extent(2), W = x.extent(3), pos = H * W;
    Tensor<T> y({N, Cout, H, W});
    for (std::size_t n = 0; n < N; ++n) {
        matmul_nn(w.data(), x.data() + n * Cin * pos, y.data() + n * Cout * pos, Cout, Cin, pos);
        if (bias) {
            for (std::size_t c = 0; c < Cout; ++c) {
                T* yc = y.data() + (n * Cout + c) * pos;
                const T b = (*bias)[c];
                for (std::size_t p = 0; p < pos; ++p) yc[p] += b;
            }
        }
    }
    return y;
}

template <typename T>
Tensor<T> linear_grad_input(const Tensor<T>& grad_out, const Tensor<T>& w) {
    expect_rank(w, 2, "linear_grad_input", "weight");
    const std::size_t Cout = w.extent(0), Cin = w.extent(1);
    if (grad_out.extent(1) != Cout) {
        throw ShapeError("linear_grad_input: grad_out channels " +
                         std::to_string(grad_out.extent(1)) + " != weight out-features " +
                         std::to_string(Cout));
    }
    if (grad_out.rank() == 2) {
        const std::size_t N = grad_out.extent(0);
        Tensor<T> dx({N, Cin});
        matmul_nn(grad_out.data(), w.data(), dx.data(), N, Cout, Cin);
        return dx;
    }
    expect_rank(grad_out, 4, "linear_grad_input", "grad_out");
    const std::size_t N = grad_out.extent(0), pos = grad_out.extent(2) * grad_out.extent(3);
    Tensor<T> dx({N, Cin, grad_out.extent(2), grad_out.extent(3)});
    for (std::size_t n = 0; n < N; ++n) {
        matmul_tn(w.data(), grad_out.data() + n * Cout * pos, dx.data() + n * Cin * pos, Cin,
                  Cout, pos);
    }
    return dx;
}

template <typename T>
Tensor<T> linear_grad_weight(const Tensor<T>& grad_out, const Tensor<T>& x) {
    if (grad_out.rank() != x.rank()) {
        throw ShapeError("linear_grad_weight: grad_out rank " + std::to_string(grad_out.rank()) +
                         " != input rank " + std::to_string(x.rank()));
    }
    const std::size_t Cout = grad_out.extent(1), Cin = x.extent(1);
    Tensor<T> dw({Cout, Cin});
    if (x.rank() == 2) {
        matmul_tn(grad_out.data(), x.data(), dw.data(), Cout, grad_out.extent(0), Cin);
        return dw;
    }
    expect_rank(x, 4, "linear_grad_weight", "input");
    const std::size_t N = x.extent(0), pos = x.extent(2) * x.extent(3);
    for (std::size_t n = 0; n < N; ++n) {
        matmul_nt(grad_out.data() + n * Cout * pos, x.data() + n * Cin * pos, dw.data(), Cout,
                  pos, Cin);
    }
    return dw;
}

template <typename T>
Tensor<T> linear_grad_bias(const Tensor<T>& grad_out) {
    const std::size_t Cout = grad_out.extent(1);
    Tensor<T> db({Cout});
    if (grad_out.rank() == 2) {
        for (std::size_t n = 0; n < grad_out.extent(0); ++n)
            for (std::size_t c = 0; c < Cout; ++c) db[c] += grad_out(n, c);
        return db;
    }
    expect_rank(grad_out, 4, "linear_grad_bias", "grad_out");
    const std::size_t N = grad_out.extent(0), pos = grad_out.extent(2) * grad_out.extent(3);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < Cout; ++c) {
            const T* gc = grad_out.data() + (n * Cout + c) * pos;
            T acc = 0;
            for (std::size_t p = 0; p < pos; ++p) acc += gc[p];
            db[c] += acc;
        }
    }
    return db;
}

// ---------------------------------------------------------------------------
// layer_norm: statistics over C at each (n,h,w). Channel values sit a plane
// (H*W) apart in NCHW, so the loops walk that stride.
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void norm_param_check(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      const char* who) {
    expect_rank(x, 4, who, "input");
    const std::size_t C = x.extent(1);
    if (gamma.rank() != 1 || gamma.extent(0) != C || beta.rank() != 1 || beta.extent(0) != C) {
        throw ShapeError(std::string(who) + ": gamma/beta must be rank 1 extent " +
                         std::to_string(C));
    }
}

} // namespace

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    norm_param_check(x, gamma, beta, "layer_norm");
    if (eps <= T(0)) throw ShapeError("layer_norm: eps must be positive");
    const std::size_t N = x.extent(0), C = x.extent(1), plane = x.extent(2) * x.extent(3);
    Tensor<T> y(x.shape());
    for (std::size_t n = 0; n < N; ++n) {
        const T* xn = x.data() + n * C * plane;
        T* yn = y.data() + n * C * plane;
        for (std::size_t p = 0; p < plane; ++p) {
            T mean = 0;
            for (std::size_t c = 0; c < C; ++c) mean += xn[c * plane + p];
            mean /= T(C);
            T var = 0;
            for (std::size_t c = 0; c < C; ++c) {
                const T dv = xn[c * plane + p] - mean;
                var += dv * dv;
            }
            var /= T(C);
            const T rstd = T(1) / std::sqrt(var + eps);
            for (std::size_t c = 0; c < C; ++c) {
                yn[c * plane + p] = (xn[c * plane + p] - mean) * rstd * gamma[c] + beta[c];
            }
        }
    }
    return y;
}

template <typename T>
NormGrads<T> layer_norm_grad(const Tensor<T>& x, const Tensor<T>& gamma, T eps,
                             const Tensor<T>& grad_out) {
    norm_param_check(x, gamma, gamma, "layer_norm_grad");
    if (!grad_out.same_shape(x)) {
        throw ShapeError("layer_norm_grad: grad_out " + grad_out.shape_string() +
                         " != input " + x.shape_string());
    }
    const std::size_t N = x.extent(0), C = x.extent(1), plane = x.extent(2) * x.extent(3);
    NormGrads<T> g{Tensor<T>(x.shape()), Tensor<T>({C}), Tensor<T>({C})};
    for (std::size_t n = 0; n < N; ++n) {
        const T* xn = x.data() + n * C * plane;
        const T* gn = grad_out.data() + n * C * plane;
        T* dxn = g.dx.data() + n * C * plane;
        for (std::size_t p = 0; p < plane; ++p) {
            T mean = 0;
            for (std::size_t c = 0; c < C; ++c) mean += xn[c * plane + p];
            mean /= T(C);
            T var = 0;
            for (std::size_t c = 0; c < C; ++c) {
                const T dv = xn[c * plane + p] - mean;
                var += dv * dv;
            }
            var /= T(C);
            const T rstd = T(1) / std::sqrt(var + eps);
            // ghat = gy*gamma; dx = rstd*(ghat - mean(ghat) - xhat*mean(ghat*xhat))
            T gsum = 0, gxsum = 0;
            for (std::size_t c = 0; c < C; ++c) {
                const T xhat = (xn[c * plane + p] - mean) * rstd;
                const T gh = gn[c * plane + p] * gamma[c];
                gsum += gh;
                gxsum += gh * xhat;
                g.dgamma[c] += gn[c * plane + p] * xhat;
                g.dbeta[c] += gn[c * plane + p];
            }
            const T gmean = gsum / T(C), gxmean = gxsum / T(C);
            for (std::size_t c = 0; c < C; ++c) {
                const T xhat = (xn[c * plane + p] - mean) * rstd;
                const T gh = gn[c * plane + p] * gamma[c];
                dxn[c * plane + p] = rstd * (gh - gmean - xhat * gxmean);
            }
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// batch_norm2d: statistics over (N,H,W) per channel.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       Tensor<T>& running_mean, Tensor<T>& running_var, T eps, T momentum,
                       Mode mode) {
    norm_param_check(x, gamma, beta, "batch_norm2d");
    const std::size_t C = x.extent(1);
    if (running_mean.rank() != 1 || running_mean.extent(0) != C || running_var.rank() != 1 ||
        running_var.extent(0) != C) {
        throw ShapeError("batch_norm2d: running statistics must be rank 1 extent " +
                         std::to_string(C));
    }
    if (momentum <= T(0) || momentum > T(1)) {
        throw ShapeError("batch_norm2d: momentum must be in (0,1]");
    }
    const std::size_t N = x.extent(0), plane = x.extent(2) * x.extent(3);
    const std::size_t m = N * plane;
    Tensor<T> y(x.shape());

    for (std::size_t c = 0; c < C; ++c) {
        T mean, var;
        if (mode == Mode::train) {
            if (m == 1) {
                throw StateError("batch_norm2d: train mode needs more than one value per "
                                 "channel to form statistics");
            }
            T sum = 0;
            for (std::size_t n = 0; n < N; ++n) {
                const T* xc = x.data() + (n * C + c) * plane;
                for (std::size_t p = 0; p < plane; ++p) sum += xc[p];
            }
            mean = sum / T(m);
            T sq = 0;
            for (std::size_t n = 0; n < N; ++n) {
                const T* xc = x.data() + (n * C + c) * plane;
                for (std::size_t p = 0; p < plane; ++p) {
                    const T dv = xc[p] - mean;
                    sq += dv * dv;
                }
            }
            var = sq / T(m);
            const T unbiased = sq / T(m - 1);
            running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * mean;
            running_var[c]  = (T(1) - momentum) * running_var[c] + momentum * unbiased;
        } else {
            mean = running_mean[c];
            var  = running_var[c];
        }
        const T rstd = T(1) / std::sqrt(var + eps);
        for (std::size_t n = 0; n < N; ++n) {
            const T* xc = x.data() + (n * C + c) * plane;
            T* yc = y.data() + (n * C + c) * plane;
            for (std::size_t p = 0; p < plane; ++p) {
                yc[p] = (xc[p] - mean) * rstd * gamma[c] + beta[c];
            }
        }
    }
    return y;
}

template <typename T>
NormGrads<T> batch_norm2d_grad(const Tensor<T>& x, const Tensor<T>& gamma, T eps,
                               const Tensor<T>& grad_out) {
    norm_param_check(x, gamma, gamma, "batch_norm2d_grad");
    if (!grad_out.same_shape(x)) {
        throw ShapeError("batch_norm2d_grad: grad_out " + grad_out.shape_string() +
                         " != input " + x.shape_string());
    }
    const std::size_t N = x.extent(0), C = x.extent(1), plane = x.extent(2) * x.extent(3);
    const std::size_t m = N * plane;
    if (m == 1) throw StateError("batch_norm2d_grad: degenerate statistics");
    NormGrads<T> g{Tensor<T>(x.shape()), Tensor<T>({C}), Tensor<T>({C})};

    for (std::size_t c = 0; c < C; ++c) {
        T sum = 0;
        for (std::size_t n = 0; n < N; ++n) {
            const T* xc = x.data() + (n * C + c) * plane;
            for (std::size_t p = 0; p < plane; ++p) sum += xc[p];
        }
        const T mean = sum / T(m);
        T sq = 0;
        for (std::size_t n = 0; n < N; ++n) {
            const T* xc = x.data() + (n * C + c) * plane;
            for (std::size_t p = 0; p < plane; ++p) {
                const T dv = xc[p] - mean;
                sq += dv * dv;
            }
        }
        const T var = sq / T(m);
        const T rstd = T(1) / std::sqrt(var + eps);

        T gsum = 0, gxsum = 0;
        for (std::size_t n = 0; n < N; ++n) {
            const T* xc = x.data() + (n * C + c) * plane;
            const T* gc = grad_out.data() + (n * C + c) * plane;
            for (std::size_t p = 0; p < plane; ++p) {
                const T xhat = (xc[p] - mean) * rstd;
                gsum += gc[p];
                gxsum += gc[p] * xhat;
            }
        }
        g.dgamma[c] = gxsum;
        g.dbeta[c]  = gsum;
        const T gmean = gsum * gamma[c] / T(m);
        const T gxmean = gxsum * gamma[c] / T(m);
        for (std::size_t n = 0; n < N; ++n) {
            const T* xc = x.data() + (n * C + c) * plane;
            const T* gc = grad_out.data() + (n * C + c) * plane;
            T* dxc = g.dx.data() + (n * C + c) * plane;
            for (std::size_t p = 0; p < plane; ++p) {
                const T xhat = (xc[p] - mean) * rstd;
                dxc[p] = rstd * (gc[p] * gamma[c] - gmean - xhat * gxmean);
            }
        }
    }
    return g;
}

template <typename T>
NormGrads<T> batch_norm2d_grad_eval(const Tensor<T>& x, const Tensor<T>& gamma,
                                    const Tensor<T>& running_mean, const Tensor<T>& running_var,
                                    T eps, const Tensor<T>& grad_out) {
    norm_param_check(x, gamma, gamma, "batch_norm2d_grad_eval");
    const std::size_t N = x.extent(0), C = x.extent(1), plane = x.extent(2) * x.extent(3);
    NormGrads<T> g{Tensor<T>(x.shape()), Tensor<T>({C}), Tensor<T>({C})};
    for (std::size_t c = 0; c < C; ++c) {
        const T rstd = T(1) / std::sqrt(running_var[c] + eps);
        for (std::size_t n = 0; n < N; ++n) {
            const T* xc = x.data() + (n * C + c) * plane;
            const T* gc = grad_out.data() + (n * C + c) * plane;
            T* dxc = g.dx.data() + (n * C + c) * plane;
            for (std::size_t p = 0; p < plane; ++p) {
                const T xhat = (xc[p] - running_mean[c]) * rstd;
                g.dgamma[c] += gc[p] * xhat;
                g.dbeta[c] += gc[p];
                dxc[p] = gc[p] * gamma[c] * rstd;
            }
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

namespace {

template <typename T>
T gauss_cdf(T x) {
    return T(0.5) * (T(1) + std::erf(x * T(0.7071067811865475244)));
}

} // namespace

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * gauss_cdf(x[i]);
    return y;
}

template <typename T>
Tensor<T> gelu_grad(const Tensor<T>& x, const Tensor<T>& grad_out) {
    if (!grad_out.same_shape(x)) throw ShapeError("gelu_grad: shape mismatch");
    constexpr T inv_sqrt_2pi = T(0.3989422804014326779);
    Tensor<T> dx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x[i] * x[i]);
        dx[i] = grad_out[i] * (gauss_cdf(x[i]) + x[i] * pdf);
    }
    return dx;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
    return y;
}

template <typename T>
Tensor<T> relu_grad(const Tensor<T>& x, const Tensor<T>& grad_out) {
    if (!grad_out.same_shape(x)) throw ShapeError("relu_grad: shape mismatch");
    Tensor<T> dx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > T(0) ? grad_out[i] : T(0);
    return dx;
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void pool_check(const Tensor<T>& x, const ConvGeometry& g) {
    expect_rank(x, 4, "max_pool2d", "input");
    if (g.ph >= g.kh || g.pw >= g.kw) {
        throw GeometryError("max_pool2d: padding must be smaller than the window");
    }
}

} // namespace

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, const ConvGeometry& g) {
    pool_check(x, g);
    const std::size_t N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
    const std::size_t Ho = conv_out_extent(H, g.kh, g.sh, g.ph);
    const std::size_t Wo = conv_out_extent(W, g.kw, g.sw, g.pw);
    Tensor<T> y({N, C, Ho, Wo});
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            const T* xc = x.data() + (n * C + c) * H * W;
            T* yc = y.data() + (n * C + c) * Ho * Wo;
            for (std::size_t ho = 0; ho < Ho; ++ho) {
                for (std::size_t wo = 0; wo < Wo; ++wo) {
                    T best = -std::numeric_limits<T>::infinity();
                    for (std::size_t ki = 0; ki < g.kh; ++ki) {
                        const std::ptrdiff_t ih =
                            std::ptrdiff_t(ho * g.sh + ki) - std::ptrdiff_t(g.ph);
                        if (ih < 0 || ih >= std::ptrdiff_t(H)) continue;
                        for (std::size_t kj = 0; kj < g.kw; ++kj) {
                            const std::ptrdiff_t iw =
                                std::ptrdiff_t(wo * g.sw + kj) - std::ptrdiff_t(g.pw);
                            if (iw < 0 || iw >= std::ptrdiff_t(W)) continue;
                            const T v = xc[std::size_t(ih) * W + std::size_t(iw)];
                            if (v > best) best = v;
                        }
                    }
                    yc[ho * Wo + wo] = best;
                }
            }
        }
    }
    return y;
}

template <typename T>
Tensor<T> max_pool2d_grad(const Tensor<T>& x, const Tensor<T>& grad_out,
                          const ConvGeometry& g) {
    pool_check(x, g);
    const std::size_t N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
    const std::size_t Ho = conv_out_extent(H, g.kh, g.sh, g.ph);
    const std::size_t Wo = conv_out_extent(W, g.kw, g.sw, g.pw);
    if (grad_out.shape() != std::vector<std::size_t>{N, C, Ho, Wo}) {
        throw ShapeError("max_pool2d_grad: grad_out " + grad_out.shape_string() +
                         " does not match pooled output");
    }
    Tensor<T> dx(x.shape());
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            const T* xc = x.data() + (n * C + c) * H * W;
            const T* gc = grad_out.data() + (n * C + c) * Ho * Wo;
            T* dxc = dx.data() + (n * C + c) * H * W;
            for (std::size_t ho = 0; ho < Ho; ++ho) {
                for (std::size_t wo = 0; wo < Wo; ++wo) {
                    T best = -std::numeric_limits<T>::infinity();
                    std::size_t arg = 0;
                    for (std::size_t ki = 0; ki < g.kh; ++ki) {
                        const std::ptrdiff_t ih =
                            std::ptrdiff_t(ho * g.sh + ki) - std::ptrdiff_t(g.ph);
                        if (ih < 0 || ih >= std::ptrdiff_t(H)) continue;
                        for (std::size_t kj = 0; kj < g.kw; ++kj) {
                            const std::ptrdiff_t iw =
                                std::ptrdiff_t(wo * g.sw + kj) - std::ptrdiff_t(g.pw);
                            if (iw < 0 || iw >= std::ptrdiff_t(W)) continue;
                            const std::size_t idx = std::size_t(ih) * W + std::size_t(iw);
                            if (xc[idx] > best) {
                                best = xc[idx];
                                arg = idx;
                            }
                        }
                    }
                    dxc[arg] += gc[ho * Wo + wo];
                }
            }
        }
    }
    return dx;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    expect_rank(x, 4, "global_avg_pool", "input");
    const std::size_t N = x.extent(0), C = x.extent(1), plane = x.extent(2) * x.extent(3);
    Tensor<T> y({N, C});
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            const T* xc = x.data() + (n * C + c) * plane;
            T acc = 0;
            for (std::size_t p = 0; p < plane; ++p) acc += xc[p];
            y(n, c) = acc / T(plane);
        }
    }
    return y;
}

template <typename T>
Tensor<T> global_avg_pool_grad(const Tensor<T>& grad_out, std::size_t H, std::size_t W) {
    expect_rank(grad_out, 2, "global_avg_pool_grad", "grad_out");
    const std::size_t N = grad_out.extent(0), C = grad_out.extent(1), plane = H * W;
    Tensor<T> dx({N, C, H, W});
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            const T v = grad_out(n, c) / T(plane);
            T* dxc = dx.data() + (n * C + c) * plane;
            for (std::size_t p = 0; p < plane; ++p) dxc[p] = v;
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("add: " + a.shape_string() + " vs " + b.shape_string());
    }
    Tensor<T> y(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] + b[i];
    return y;
}

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("add: " + a.shape_string() + " vs " + b.shape_string());
    }
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

// ---------------------------------------------------------------------------
// explicit instantiations: real32 runs the model, real64 runs the oracles.
// ---------------------------------------------------------------------------

#define CMLP_INSTANTIATE_OPS(T)                                                                 \
    template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*,         \
                                 const ConvGeometry&);                                          \
    template Tensor<T> conv2d_grad_input<T>(const Tensor<T>&, const Tensor<T>&,                \
                                            const ConvGeometry&,                               \
                                            const std::vector<std::size_t>&);                  \
    template Tensor<T> conv2d_grad_weight<T>(const Tensor<T>&, const Tensor<T>&,               \
                                             const ConvGeometry&,                              \
                                             const std::vector<std::size_t>&);                 \
    template Tensor<T> conv2d_grad_bias<T>(const Tensor<T>&);                                  \
    template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*);        \
    template Tensor<T> linear_grad_input<T>(const Tensor<T>&, const Tensor<T>&);               \
    template Tensor<T> linear_grad_weight<T>(const Tensor<T>&, const Tensor<T>&);              \
    template Tensor<T> linear_grad_bias<T>(const Tensor<T>&);                                  \
    template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T); \
    template NormGrads<T> layer_norm_grad<T>(const Tensor<T>&, const Tensor<T>&, T,            \
                                             const Tensor<T>&);                                \
    template Tensor<T> batch_norm2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                       Tensor<T>&, Tensor<T>&, T, T, Mode);                    \
    template NormGrads<T> batch_norm2d_grad<T>(const Tensor<T>&, const Tensor<T>&, T,          \
                                               const Tensor<T>&);                              \
    template NormGrads<T> batch_norm2d_grad_eval<T>(const Tensor<T>&, const Tensor<T>&,        \
                                                    const Tensor<T>&, const Tensor<T>&, T,     \
                                                    const Tensor<T>&);                         \
    template Tensor<T> gelu<T>(const Tensor<T>&);                                              \
    template Tensor<T> gelu_grad<T>(const Tensor<T>&, const Tensor<T>&);                       \
    template Tensor<T> relu<T>(const Tensor<T>&);                                              \
    template Tensor<T> relu_grad<T>(const Tensor<T>&, const Tensor<T>&);                       \
    template Tensor<T> max_pool2d<T>(const Tensor<T>&, const ConvGeometry&);                   \
    template Tensor<T> max_pool2d_grad<T>(const Tensor<T>&, const Tensor<T>&,                  \
                                          const ConvGeometry&);                                \
    template Tensor<T> global_avg_pool<T>(const Tensor<T>&);                                   \
    template Tensor<T> global_avg_pool_grad<T>(const Tensor<T>&, std::size_t, std::size_t);    \
    template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                             \
    template void add_inplace<T>(Tensor<T>&, const Tensor<T>&);

CMLP_INSTANTIATE_OPS(float)
CMLP_INSTANTIATE_OPS(double)

#undef CMLP_INSTANTIATE_OPS

} // namespace ops
} // namespace cmlp
