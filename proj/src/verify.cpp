#include "cmlp/verify.hpp"

#include <cmath>

#include "cmlp/error.hpp"

namespace cmlp {
namespace verify {

template <typename T>
Tensor<T> naive_conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias,
                       const ConvGeometry& g) {
    const std::size_t N = x.extent(0), Cin = x.extent(1), H = x.extent(2), W = x.extent(3);
    const std::size_t Cout = weight.extent(0);
    const std::size_t Cg = Cin / g.groups, Coutg = Cout / g.groups;
    const std::size_t Ho = conv_out_extent(H, g.kh, g.sh, g.ph);
    const std::size_t Wo = conv_out_extent(W, g.kw, g.sw, g.pw);

    Tensor<T> y({N, Cout, Ho, Wo});
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t co = 0; co < Cout; ++co) {
            const std::size_t grp = co / Coutg;
            for (std::size_t ho = 0; ho < Ho; ++ho) {
                for (std::size_t wo = 0; wo < Wo; ++wo) {
                    T acc = bias ? (*bias)[co] : T(0);
                    for (std::size_t cg = 0; cg < Cg; ++cg) {
                        const std::size_t ci = grp * Cg + cg;
                        for (std::size_t ki = 0; ki < g.kh; ++ki) {
                            const std::ptrdiff_t ih =
                                std::ptrdiff_t(ho * g.sh + ki) - std::ptrdiff_t(g.ph);
                            if (ih < 0 || ih >= std::ptrdiff_t(H)) continue;
                            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                                const std::ptrdiff_t iw =
                                    std::ptrdiff_t(wo * g.sw + kj) - std::ptrdiff_t(g.pw);
                                if (iw < 0 || iw >= std::ptrdiff_t(W)) continue;
                                acc += x(n, ci, std::size_t(ih), std::size_t(iw)) *
                                       weight(co, cg, ki, kj);
                            }
                        }
                    }
                    y(n, co, ho, wo) = acc;
                }
            }
        }
    }
    return y;
}

template <typename T>
Tensor<T> naive_linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias) {
    const std::size_t Cout = weight.extent(0), Cin = weight.extent(1);
    if (x.rank() == 2) {
        const std::size_t N = x.extent(0);
        Tensor<T> y({N, Cout});
        for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t co = 0; co < Cout; ++co) {
                T acc = bias ? (*bias)[co] : T(0);
                for (std::size_t ci = 0; ci < Cin; ++ci) acc += x(n, ci) * weight(co, ci);
                y(n, co) = acc;
            }
        }
        return y;
    }
    const std::size_t N = x.extent(0), H = x.extent(2), W = x.extent(3);
    Tensor<T> y({N, Cout, H, W});
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t w = 0; w < W; ++w) {
                for (std::size_t co = 0; co < Cout; ++co) {
                    T acc = bias ? (*bias)[co] : T(0);
                    for (std::size_t ci = 0; ci < Cin; ++ci) {
                        acc += x(n, ci, h, w) * weight(co, ci);
                    }
                    y(n, co, h, w) = acc;
                }
            }
        }
    }
    return y;
}

template <typename T>
Tensor<T> naive_layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                           T eps) {
    const std::size_t N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
    Tensor<T> y(x.shape());
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t w = 0; w < W; ++w) {
                T mean = 0;
                for (std::size_t c = 0; c < C; ++c) mean += x(n, c, h, w);
                mean /= T(C);
                T var = 0;
                for (std::size_t c = 0; c < C; ++c) {
                    const T d = x(n, c, h, w) - mean;
                    var += d * d;
                }
                var /= T(C);
                for (std::size_t c = 0; c < C; ++c) {
                    y(n, c, h, w) =
                        (x(n, c, h, w) - mean) / std::sqrt(var + eps) * gamma[c] + beta[c];
                }
            }
        }
    }
    return y;
}

template <typename T>
Tensor<T> naive_max_pool2d(const Tensor<T>& x, const ConvGeometry& g) {
    const std::size_t N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
    const std::size_t Ho = conv_out_extent(H, g.kh, g.sh, g.ph);
    const std::size_t Wo = conv_out_extent(W, g.kw, g.sw, g.pw);
    Tensor<T> y({N, C, Ho, Wo});
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t ho = 0; ho < Ho; ++ho) {
                for (std::size_t wo = 0; wo < Wo; ++wo) {
                    bool seen = false;
                    T best = 0;
                    for (std::size_t ki = 0; ki < g.kh; ++ki) {
                        const std::ptrdiff_t ih =
                            std::ptrdiff_t(ho * g.sh + ki) - std::ptrdiff_t(g.ph);
                        if (ih < 0 || ih >= std::ptrdiff_t(H)) continue;
                        for (std::size_t kj = 0; kj < g.kw; ++kj) {
                            const std::ptrdiff_t iw =
                                std::ptrdiff_t(wo * g.sw + kj) - std::ptrdiff_t(g.pw);
                            if (iw < 0 || iw >= std::ptrdiff_t(W)) continue;
                            const T v = x(n, c, std::size_t(ih), std::size_t(iw));
                            if (!seen || v > best) {
                                best = v;
                                seen = true;
                            }
                        }
                    }
                    if (!seen) throw GeometryError("naive_max_pool2d: empty window");
                    y(n, c, ho, wo) = best;
                }
            }
        }
    }
    return y;
}

#define CMLP_INSTANTIATE_VERIFY(T)                                                          \
    template Tensor<T> naive_conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*, \
                                       const ConvGeometry&);                                \
    template Tensor<T> naive_linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*); \
    template Tensor<T> naive_layer_norm<T>(const Tensor<T>&, const Tensor<T>&,              \
                                           const Tensor<T>&, T);                            \
    template Tensor<T> naive_max_pool2d<T>(const Tensor<T>&, const ConvGeometry&);

CMLP_INSTANTIATE_VERIFY(float)
CMLP_INSTANTIATE_VERIFY(double)

#undef CMLP_INSTANTIATE_VERIFY

} // namespace verify
} // namespace cmlp
