#include "voxseg/layers.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace voxseg {

namespace {

// ceil(a/b) and floor(a/b) for b > 0 and any sign of a
inline int64_t div_ceil(int64_t a, int64_t b) { return a >= 0 ? (a + b - 1) / b : a / b; }
inline int64_t div_floor(int64_t a, int64_t b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }

// Valid output range [lo, hi] such that 0 <= o*s - p + k < in_extent.
inline void out_range(int64_t in_extent, int64_t out_extent, int64_t s, int64_t p, int64_t k,
                      int64_t& lo, int64_t& hi) {
    lo = std::max<int64_t>(0, div_ceil(p - k, s));
    hi = std::min<int64_t>(out_extent - 1, div_floor(in_extent - 1 + p - k, s));
}

void check_conv_args(const std::vector<int64_t>& xs, const std::vector<int64_t>& ks, bool transpose) {
    if (xs.size() != 5 || ks.size() != 5)
        throw std::invalid_argument("conv expects 5-d input and kernel");
    const int64_t x_channels = xs[1];
    const int64_t k_channels = transpose ? ks[0] : ks[1];
    if (x_channels != k_channels)
        throw std::invalid_argument("conv channel mismatch: input has " + std::to_string(x_channels) +
                                    ", kernel expects " + std::to_string(k_channels));
}

}  // namespace

template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& x, const Tensor<T>& kernel, const std::vector<T>& bias,
                         Stride3 stride, Pad3 pad) {
    check_conv_args(x.shape(), kernel.shape(), false);
    const int64_t N = x.dim(0), Ci = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
    const int64_t Co = kernel.dim(0), kd = kernel.dim(2), kh = kernel.dim(3), kw = kernel.dim(4);
    const int64_t OD = conv_out_extent(D, kd, stride.d, pad.d);
    const int64_t OH = conv_out_extent(H, kh, stride.h, pad.h);
    const int64_t OW = conv_out_extent(W, kw, stride.w, pad.w);
    if (OD < 1 || OH < 1 || OW < 1) throw std::invalid_argument("conv output extent < 1");
    if (!bias.empty() && int64_t(bias.size()) != Co)
        throw std::invalid_argument("conv bias size mismatch");

    Tensor<T> y({N, Co, OD, OH, OW});
    const T* xp = x.data();
    const T* wp = kernel.data();
    T* yp = y.data();

#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < N; ++n)
        for (int64_t co = 0; co < Co; ++co) {
            T* ys = yp + ((n * Co + co) * OD) * OH * OW;
            const T b = bias.empty() ? T(0) : bias[size_t(co)];
            std::fill(ys, ys + OD * OH * OW, b);
            for (int64_t ci = 0; ci < Ci; ++ci) {
                const T* xs = xp + ((n * Ci + ci) * D) * H * W;
                const T* ws = wp + ((co * Ci + ci) * kd) * kh * kw;
                for (int64_t a = 0; a < kd; ++a)
                    for (int64_t b2 = 0; b2 < kh; ++b2)
                        for (int64_t c = 0; c < kw; ++c) {
                            const T wv = ws[(a * kh + b2) * kw + c];
                            if (wv == T(0)) continue;
                            int64_t od_lo, od_hi, oh_lo, oh_hi, ow_lo, ow_hi;
                            out_range(D, OD, stride.d, pad.d, a, od_lo, od_hi);
                            out_range(H, OH, stride.h, pad.h, b2, oh_lo, oh_hi);
                            out_range(W, OW, stride.w, pad.w, c, ow_lo, ow_hi);
                            for (int64_t od = od_lo; od <= od_hi; ++od) {
                                const int64_t id = od * stride.d - pad.d + a;
                                for (int64_t oh = oh_lo; oh <= oh_hi; ++oh) {
                                    const int64_t ih = oh * stride.h - pad.h + b2;
                                    const T* xrow = xs + (id * H + ih) * W;
                                    T* yrow = ys + (od * OH + oh) * OW;
                                    if (stride.w == 1) {
                                        const int64_t base = ow_lo - pad.w + c;
                                        for (int64_t ow = ow_lo; ow <= ow_hi; ++ow)
                                            yrow[ow] += wv * xrow[base + (ow - ow_lo)];
                                    } else {
                                        for (int64_t ow = ow_lo; ow <= ow_hi; ++ow)
                                            yrow[ow] += wv * xrow[ow * stride.w - pad.w + c];
                                    }
                                }
                            }
                        }
            }
        }
    return y;
}

template <typename T>
ConvGrads<T> conv3d_backward(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& grad_out,
                             Stride3 stride, Pad3 pad, bool has_bias) {
    const int64_t N = x.dim(0), Ci = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
    const int64_t Co = kernel.dim(0), kd = kernel.dim(2), kh = kernel.dim(3), kw = kernel.dim(4);
    const int64_t OD = grad_out.dim(2), OH = grad_out.dim(3), OW = grad_out.dim(4);

    ConvGrads<T> g;
    g.input = Tensor<T>(x.shape());
    g.kernel = Tensor<T>(kernel.shape());
    if (has_bias) g.bias.assign(size_t(Co), T(0));

    const T* xp = x.data();
    const T* wp = kernel.data();
    const T* gp = grad_out.data();

    // grad input: owner (n, ci)
    T* gip = g.input.data();
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < N; ++n)
        for (int64_t ci = 0; ci < Ci; ++ci) {
            T* gx = gip + ((n * Ci + ci) * D) * H * W;
            for (int64_t co = 0; co < Co; ++co) {
                const T* gs = gp + ((n * Co + co) * OD) * OH * OW;
                const T* ws = wp + ((co * Ci + ci) * kd) * kh * kw;
                for (int64_t a = 0; a < kd; ++a)
                    for (int64_t b2 = 0; b2 < kh; ++b2)
                        for (int64_t c = 0; c < kw; ++c) {
                            const T wv = ws[(a * kh + b2) * kw + c];
                            if (wv == T(0)) continue;
                            int64_t od_lo, od_hi, oh_lo, oh_hi, ow_lo, ow_hi;
                            out_range(D, OD, stride.d, pad.d, a, od_lo, od_hi);
                            out_range(H, OH, stride.h, pad.h, b2, oh_lo, oh_hi);
                            out_range(W, OW, stride.w, pad.w, c, ow_lo, ow_hi);
                            for (int64_t od = od_lo; od <= od_hi; ++od) {
                                const int64_t id = od * stride.d - pad.d + a;
                                for (int64_t oh = oh_lo; oh <= oh_hi; ++oh) {
                                    const int64_t ih = oh * stride.h - pad.h + b2;
                                    const T* grow = gs + (od * OH + oh) * OW;
                                    T* xrow = gx + (id * H + ih) * W;
                                    for (int64_t ow = ow_lo; ow <= ow_hi; ++ow)
                                        xrow[ow * stride.w - pad.w + c] += wv * grow[ow];
                                }
                            }
                        }
            }
        }

    // grad kernel: owner (co, ci)
    T* gwp = g.kernel.data();
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t co = 0; co < Co; ++co)
        for (int64_t ci = 0; ci < Ci; ++ci) {
            T* gw = gwp + ((co * Ci + ci) * kd) * kh * kw;
            for (int64_t a = 0; a < kd; ++a)
                for (int64_t b2 = 0; b2 < kh; ++b2)
                    for (int64_t c = 0; c < kw; ++c) {
                        int64_t od_lo, od_hi, oh_lo, oh_hi, ow_lo, ow_hi;
                        out_range(D, OD, stride.d, pad.d, a, od_lo, od_hi);
                        out_range(H, OH, stride.h, pad.h, b2, oh_lo, oh_hi);
                        out_range(W, OW, stride.w, pad.w, c, ow_lo, ow_hi);
                        T acc = T(0);
                        for (int64_t n = 0; n < N; ++n) {
                            const T* gs = gp + ((n * Co + co) * OD) * OH * OW;
                            const T* xs = xp + ((n * Ci + ci) * D) * H * W;
                            for (int64_t od = od_lo; od <= od_hi; ++od) {
                                const int64_t id = od * stride.d - pad.d + a;
                                for (int64_t oh = oh_lo; oh <= oh_hi; ++oh) {
                                    const int64_t ih = oh * stride.h - pad.h + b2;
                                    const T* grow = gs + (od * OH + oh) * OW;
                                    const T* xrow = xs + (id * H + ih) * W;
                                    for (int64_t ow = ow_lo; ow <= ow_hi; ++ow)
                                        acc += grow[ow] * xrow[ow * stride.w - pad.w + c];
                                }
                            }
                        }
                        gw[(a * kh + b2) * kw + c] = acc;
                    }
        }

    if (has_bias) {
#pragma omp parallel for schedule(static)
        for (int64_t co = 0; co < Co; ++co) {
            T acc = T(0);
            for (int64_t n = 0; n < N; ++n) {
                const T* gs = gp + ((n * Co + co) * OD) * OH * OW;
                for (int64_t i = 0; i < OD * OH * OW; ++i) acc += gs[i];
            }
            g.bias[size_t(co)] = acc;
        }
    }
    return g;
}

template <typename T>
Tensor<T> conv_transpose3d_forward(const Tensor<T>& x, const Tensor<T>& kernel, Stride3 stride,
                                   Pad3 pad) {
    check_conv_args(x.shape(), kernel.shape(), true);
    const int64_t N = x.dim(0), Ci = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
    const int64_t Co = kernel.dim(1), kd = kernel.dim(2), kh = kernel.dim(3), kw = kernel.dim(4);
    const int64_t OD = conv_transpose_out_extent(D, kd, stride.d, pad.d);
    const int64_t OH = conv_transpose_out_extent(H, kh, stride.h, pad.h);
    const int64_t OW = conv_transpose_out_extent(W, kw, stride.w, pad.w);
    if (OD < 1 || OH < 1 || OW < 1) throw std::invalid_argument("transpose conv output extent < 1");

    Tensor<T> y({N, Co, OD, OH, OW});
    const T* xp = x.data();
    const T* wp = kernel.data();
    T* yp = y.data();

#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < N; ++n)
        for (int64_t co = 0; co < Co; ++co) {
            T* ys = yp + ((n * Co + co) * OD) * OH * OW;
            for (int64_t ci = 0; ci < Ci; ++ci) {
                const T* xs = xp + ((n * Ci + ci) * D) * H * W;
                const T* ws = wp + ((ci * Co + co) * kd) * kh * kw;
                for (int64_t a = 0; a < kd; ++a)
                    for (int64_t b2 = 0; b2 < kh; ++b2)
                        for (int64_t c = 0; c < kw; ++c) {
                            const T wv = ws[(a * kh + b2) * kw + c];
                            if (wv == T(0)) continue;
                            // input index i contributes to o = i*s - p + k
                            int64_t id_lo, id_hi, ih_lo, ih_hi, iw_lo, iw_hi;
                            out_range(OD, D, stride.d, pad.d, a, id_lo, id_hi);
                            out_range(OH, H, stride.h, pad.h, b2, ih_lo, ih_hi);
                            out_range(OW, W, stride.w, pad.w, c, iw_lo, iw_hi);
                            for (int64_t id = id_lo; id <= id_hi; ++id) {
                                const int64_t od = id * stride.d - pad.d + a;
                                for (int64_t ih = ih_lo; ih <= ih_hi; ++ih) {
                                    const int64_t oh = ih * stride.h - pad.h + b2;
                                    const T* xrow = xs + (id * H + ih) * W;
                                    T* yrow = ys + (od * OH + oh) * OW;
                                    for (int64_t iw = iw_lo; iw <= iw_hi; ++iw)
                                        yrow[iw * stride.w - pad.w + c] += wv * xrow[iw];
                                }
                            }
                        }
            }
        }
    return y;
}

template <typename T>
ConvGrads<T> conv_transpose3d_backward(const Tensor<T>& x, const Tensor<T>& kernel,
                                       const Tensor<T>& grad_out, Stride3 stride, Pad3 pad) {
    const int64_t N = x.dim(0), Ci = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
    const int64_t Co = kernel.dim(1), kd = kernel.dim(2), kh = kernel.dim(3), kw = kernel.dim(4);
    const int64_t OD = grad_out.dim(2), OH = grad_out.dim(3), OW = grad_out.dim(4);

    ConvGrads<T> g;
    g.input = Tensor<T>(x.shape());
    g.kernel = Tensor<T>(kernel.shape());

    const T* xp = x.data();
    const T* wp = kernel.data();
    const T* gp = grad_out.data();

    // grad input: gx[n,ci,i] = sum_co sum_k g[n,co,i*s-p+k] w[ci,co,k]
    T* gip = g.input.data();
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < N; ++n)
        for (int64_t ci = 0; ci < Ci; ++ci) {
            T* gx = gip + ((n * Ci + ci) * D) * H * W;
            for (int64_t co = 0; co < Co; ++co) {
                const T* gs = gp + ((n * Co + co) * OD) * OH * OW;
                const T* ws = wp + ((ci * Co + co) * kd) * kh * kw;
                for (int64_t a = 0; a < kd; ++a)
                    for (int64_t b2 = 0; b2 < kh; ++b2)
                        for (int64_t c = 0; c < kw; ++c) {
                            const T wv = ws[(a * kh + b2) * kw + c];
                            if (wv == T(0)) continue;
                            int64_t id_lo, id_hi, ih_lo, ih_hi, iw_lo, iw_hi;
                            out_range(OD, D, stride.d, pad.d, a, id_lo, id_hi);
                            out_range(OH, H, stride.h, pad.h, b2, ih_lo, ih_hi);
                            out_range(OW, W, stride.w, pad.w, c, iw_lo, iw_hi);
                            for (int64_t id = id_lo; id <= id_hi; ++id) {
                                const int64_t od = id * stride.d - pad.d + a;
                                for (int64_t ih = ih_lo; ih <= ih_hi; ++ih) {
                                    const int64_t oh = ih * stride.h - pad.h + b2;
                                    const T* grow = gs + (od * OH + oh) * OW;
                                    T* xrow = gx + (id * H + ih) * W;
                                    for (int64_t iw = iw_lo; iw <= iw_hi; ++iw)
                                        xrow[iw] += wv * grow[iw * stride.w - pad.w + c];
                                }
                            }
                        }
            }
        }

    // grad kernel: owner (ci, co)
    T* gwp = g.kernel.data();
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t ci = 0; ci < Ci; ++ci)
        for (int64_t co = 0; co < Co; ++co) {
            T* gw = gwp + ((ci * Co + co) * kd) * kh * kw;
            for (int64_t a = 0; a < kd; ++a)
                for (int64_t b2 = 0; b2 < kh; ++b2)
                    for (int64_t c = 0; c < kw; ++c) {
                        int64_t id_lo, id_hi, ih_lo, ih_hi, iw_lo, iw_hi;
                        out_range(OD, D, stride.d, pad.d, a, id_lo, id_hi);
                        out_range(OH, H, stride.h, pad.h, b2, ih_lo, ih_hi);
                        out_range(OW, W, stride.w, pad.w, c, iw_lo, iw_hi);
                        T acc = T(0);
                        for (int64_t n = 0; n < N; ++n) {
                            const T* xs = xp + ((n * Ci + ci) * D) * H * W;
                            const T* gs = gp + ((n * Co + co) * OD) * OH * OW;
                            for (int64_t id = id_lo; id <= id_hi; ++id) {
                                const int64_t od = id * stride.d - pad.d + a;
                                for (int64_t ih = ih_lo; ih <= ih_hi; ++ih) {
                                    const int64_t oh = ih * stride.h - pad.h + b2;
                                    const T* xrow = xs + (id * H + ih) * W;
                                    const T* grow = gs + (od * OH + oh) * OW;
                                    for (int64_t iw = iw_lo; iw <= iw_hi; ++iw)
                                        acc += xrow[iw] * grow[iw * stride.w - pad.w + c];
                                }
                            }
                        }
                        gw[(a * kh + b2) * kw + c] = acc;
                    }
        }
    return g;
}

template <typename T>
Tensor<T> batchnorm_forward_train(const Tensor<T>& x, const std::vector<T>& scale,
                                  const std::vector<T>& shift, std::vector<T>& running_mean,
                                  std::vector<T>& running_var, BatchNormCache<T>* cache,
                                  bool update_running) {
    const int64_t N = x.dim(0), C = x.dim(1);
    const int64_t S = x.dim(2) * x.dim(3) * x.dim(4);
    const int64_t count = N * S;
    if (int64_t(scale.size()) != C || int64_t(shift.size()) != C)
        throw std::invalid_argument("batchnorm parameter size mismatch");

    Tensor<T> y(x.shape());
    if (cache) {
        cache->xhat = Tensor<T>(x.shape());
        cache->inv_std.assign(size_t(C), T(0));
    }
    const T* xp = x.data();
    T* yp = y.data();

#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < C; ++c) {
        T mean = T(0);
        for (int64_t n = 0; n < N; ++n) {
            const T* xs = xp + (n * C + c) * S;
            for (int64_t i = 0; i < S; ++i) mean += xs[i];
        }
        mean /= T(count);
        T var = T(0);
        for (int64_t n = 0; n < N; ++n) {
            const T* xs = xp + (n * C + c) * S;
            for (int64_t i = 0; i < S; ++i) {
                const T d = xs[i] - mean;
                var += d * d;
            }
        }
        var /= T(count);
        const T inv_std = T(1) / std::sqrt(var + T(kBatchNormEps));
        const T g = scale[size_t(c)], b = shift[size_t(c)];
        for (int64_t n = 0; n < N; ++n) {
            const T* xs = xp + (n * C + c) * S;
            T* ys = yp + (n * C + c) * S;
            T* hs = cache ? cache->xhat.data() + (n * C + c) * S : nullptr;
            for (int64_t i = 0; i < S; ++i) {
                const T xh = (xs[i] - mean) * inv_std;
                if (hs) hs[i] = xh;
                ys[i] = g * xh + b;
            }
        }
        if (cache) cache->inv_std[size_t(c)] = inv_std;
        if (update_running) {
            running_mean[size_t(c)] =
                T(1 - kBatchNormMomentum) * running_mean[size_t(c)] + T(kBatchNormMomentum) * mean;
            running_var[size_t(c)] =
                T(1 - kBatchNormMomentum) * running_var[size_t(c)] + T(kBatchNormMomentum) * var;
        }
    }
    return y;
}

template <typename T>
Tensor<T> batchnorm_forward_eval(const Tensor<T>& x, const std::vector<T>& scale,
                                 const std::vector<T>& shift, const std::vector<T>& running_mean,
                                 const std::vector<T>& running_var) {
    const int64_t N = x.dim(0), C = x.dim(1);
    const int64_t S = x.dim(2) * x.dim(3) * x.dim(4);
    Tensor<T> y(x.shape());
    const T* xp = x.data();
    T* yp = y.data();
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < C; ++c) {
        const T inv_std = T(1) / std::sqrt(running_var[size_t(c)] + T(kBatchNormEps));
        const T g = scale[size_t(c)], b = shift[size_t(c)], m = running_mean[size_t(c)];
        for (int64_t n = 0; n < N; ++n) {
            const T* xs = xp + (n * C + c) * S;
            T* ys = yp + (n * C + c) * S;
            for (int64_t i = 0; i < S; ++i) ys[i] = g * (xs[i] - m) * inv_std + b;
        }
    }
    return y;
}

template <typename T>
BatchNormGrads<T> batchnorm_backward(const Tensor<T>& grad_out, const std::vector<T>& scale,
                                     const BatchNormCache<T>& cache) {
    const Tensor<T>& xhat = cache.xhat;
    const int64_t N = grad_out.dim(0), C = grad_out.dim(1);
    const int64_t S = grad_out.dim(2) * grad_out.dim(3) * grad_out.dim(4);
    const int64_t count = N * S;

    BatchNormGrads<T> g;
    g.input = Tensor<T>(grad_out.shape());
    g.scale.assign(size_t(C), T(0));
    g.shift.assign(size_t(C), T(0));

    const T* gp = grad_out.data();
    const T* hp = xhat.data();
    T* gip = g.input.data();

#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < C; ++c) {
        T sum_g = T(0), sum_gh = T(0);
        for (int64_t n = 0; n < N; ++n) {
            const T* gs = gp + (n * C + c) * S;
            const T* hs = hp + (n * C + c) * S;
            for (int64_t i = 0; i < S; ++i) {
                sum_g += gs[i];
                sum_gh += gs[i] * hs[i];
            }
        }
        g.shift[size_t(c)] = sum_g;
        g.scale[size_t(c)] = sum_gh;
        const T mean_g = sum_g / T(count);
        const T mean_gh = sum_gh / T(count);
        const T k = scale[size_t(c)] * cache.inv_std[size_t(c)];
        for (int64_t n = 0; n < N; ++n) {
            const T* gs = gp + (n * C + c) * S;
            const T* hs = hp + (n * C + c) * S;
            T* gi = gip + (n * C + c) * S;
            for (int64_t i = 0; i < S; ++i) gi[i] = k * (gs[i] - mean_g - hs[i] * mean_gh);
        }
    }
    return g;
}

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x, std::vector<uint8_t>* mask) {
    Tensor<T> y(x.shape());
    const int64_t n = x.numel();
    if (mask) mask->assign(size_t(n), 0);
    const T* xp = x.data();
    T* yp = y.data();
    for (int64_t i = 0; i < n; ++i) {
        const bool pos = xp[i] > T(0);
        yp[i] = pos ? xp[i] : T(0);
        if (mask && pos) (*mask)[size_t(i)] = 1;
    }
    return y;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& grad_out, const std::vector<uint8_t>& mask) {
    if (size_t(grad_out.numel()) != mask.size())
        throw std::invalid_argument("relu mask size mismatch");
    Tensor<T> g(grad_out.shape());
    const T* gp = grad_out.data();
    T* op = g.data();
    for (int64_t i = 0; i < grad_out.numel(); ++i)
        op[i] = mask[size_t(i)] ? gp[i] : T(0);
    return g;
}

template <typename T>
Tensor<T> maxpool_hw2_forward(const Tensor<T>& x, std::vector<uint8_t>* argmax) {
    const int64_t N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
    if (H % 2 != 0 || W % 2 != 0) throw std::invalid_argument("maxpool requires even H and W");
    const int64_t OH = H / 2, OW = W / 2;
    Tensor<T> y({N, C, D, OH, OW});
    if (argmax) argmax->assign(size_t(y.numel()), 0);
    const T* xp = x.data();
    T* yp = y.data();
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t d = 0; d < D; ++d) {
                const T* xs = xp + (((n * C + c) * D + d) * H) * W;
                T* ys = yp + (((n * C + c) * D + d) * OH) * OW;
                uint8_t* as = argmax ? argmax->data() + (((n * C + c) * D + d) * OH) * OW : nullptr;
                for (int64_t oh = 0; oh < OH; ++oh)
                    for (int64_t ow = 0; ow < OW; ++ow) {
                        const int64_t h0 = 2 * oh, w0 = 2 * ow;
                        T best = xs[h0 * W + w0];
                        uint8_t which = 0;
                        const T cand1 = xs[h0 * W + w0 + 1];
                        if (cand1 > best) { best = cand1; which = 1; }
                        const T cand2 = xs[(h0 + 1) * W + w0];
                        if (cand2 > best) { best = cand2; which = 2; }
                        const T cand3 = xs[(h0 + 1) * W + w0 + 1];
                        if (cand3 > best) { best = cand3; which = 3; }
                        ys[oh * OW + ow] = best;
                        if (as) as[oh * OW + ow] = which;
                    }
            }
    return y;
}

template <typename T>
Tensor<T> maxpool_hw2_backward(const Tensor<T>& grad_out, const std::vector<uint8_t>& argmax,
                               const std::vector<int64_t>& input_shape) {
    const int64_t N = grad_out.dim(0), C = grad_out.dim(1), D = grad_out.dim(2);
    const int64_t OH = grad_out.dim(3), OW = grad_out.dim(4);
    const int64_t H = input_shape[3], W = input_shape[4];
    Tensor<T> g(input_shape);
    const T* gp = grad_out.data();
    T* gx = g.data();
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t d = 0; d < D; ++d) {
                const int64_t in_base = ((n * C + c) * D + d) * H * W;
                const int64_t out_base = ((n * C + c) * D + d) * OH * OW;
                for (int64_t oh = 0; oh < OH; ++oh)
                    for (int64_t ow = 0; ow < OW; ++ow) {
                        const uint8_t which = argmax[size_t(out_base + oh * OW + ow)];
                        const int64_t h = 2 * oh + (which >> 1);
                        const int64_t w = 2 * ow + (which & 1);
                        gx[in_base + h * W + w] = gp[out_base + oh * OW + ow];
                    }
            }
    return g;
}

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
    const int64_t N = x.dim(0), C = x.dim(1);
    const int64_t S = x.dim(2) * x.dim(3) * x.dim(4);
    Tensor<T> y(x.shape());
    const T* xp = x.data();
    T* yp = y.data();
#pragma omp parallel for schedule(static)
    for (int64_t n = 0; n < N; ++n)
        for (int64_t i = 0; i < S; ++i) {
            const int64_t base = n * C * S + i;
            T m = xp[base];
            for (int64_t c = 1; c < C; ++c) m = std::max(m, xp[base + c * S]);
            T norm = T(0);
            for (int64_t c = 0; c < C; ++c) {
                const T e = std::exp(xp[base + c * S] - m);
                yp[base + c * S] = e;
                norm += e;
            }
            for (int64_t c = 0; c < C; ++c) yp[base + c * S] /= norm;
        }
    return y;
}

template <typename T>
Tensor<T> softmax_channels_backward(const Tensor<T>& grad_probs, const Tensor<T>& probs) {
    const int64_t N = probs.dim(0), C = probs.dim(1);
    const int64_t S = probs.dim(2) * probs.dim(3) * probs.dim(4);
    Tensor<T> g(probs.shape());
    const T* gp = grad_probs.data();
    const T* pp = probs.data();
    T* op = g.data();
#pragma omp parallel for schedule(static)
    for (int64_t n = 0; n < N; ++n)
        for (int64_t i = 0; i < S; ++i) {
            const int64_t base = n * C * S + i;
            T dot = T(0);
            for (int64_t c = 0; c < C; ++c) dot += pp[base + c * S] * gp[base + c * S];
            for (int64_t c = 0; c < C; ++c)
                op[base + c * S] = pp[base + c * S] * (gp[base + c * S] - dot);
        }
    return g;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    const int64_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1);
    const int64_t S = a.dim(2) * a.dim(3) * a.dim(4);
    for (int i : {0, 2, 3, 4})
        if (a.dim(i) != b.dim(i)) throw std::invalid_argument("concat spatial/batch shape mismatch");
    Tensor<T> y({N, Ca + Cb, a.dim(2), a.dim(3), a.dim(4)});
    const T* ap = a.data();
    const T* bp = b.data();
    T* yp = y.data();
    for (int64_t n = 0; n < N; ++n) {
        std::copy(ap + n * Ca * S, ap + (n + 1) * Ca * S, yp + n * (Ca + Cb) * S);
        std::copy(bp + n * Cb * S, bp + (n + 1) * Cb * S, yp + n * (Ca + Cb) * S + Ca * S);
    }
    return y;
}

template <typename T>
void split_channels(const Tensor<T>& grad_cat, int64_t ca, Tensor<T>& grad_a, Tensor<T>& grad_b) {
    const int64_t N = grad_cat.dim(0), C = grad_cat.dim(1);
    const int64_t S = grad_cat.dim(2) * grad_cat.dim(3) * grad_cat.dim(4);
    const int64_t cb = C - ca;
    grad_a = Tensor<T>({N, ca, grad_cat.dim(2), grad_cat.dim(3), grad_cat.dim(4)});
    grad_b = Tensor<T>({N, cb, grad_cat.dim(2), grad_cat.dim(3), grad_cat.dim(4)});
    const T* gp = grad_cat.data();
    for (int64_t n = 0; n < N; ++n) {
        std::copy(gp + n * C * S, gp + n * C * S + ca * S, grad_a.data() + n * ca * S);
        std::copy(gp + n * C * S + ca * S, gp + (n + 1) * C * S, grad_b.data() + n * cb * S);
    }
}

template <typename T>
Tensor<T> shortcut_forward(const Tensor<T>& x, int64_t out_channels, int64_t stride_hw) {
    const int64_t N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
    if (out_channels < C) throw std::invalid_argument("shortcut cannot shrink channels");
    const int64_t OH = (H + stride_hw - 1) / stride_hw, OW = (W + stride_hw - 1) / stride_hw;
    Tensor<T> y({N, out_channels, D, OH, OW});
    const T* xp = x.data();
    T* yp = y.data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t d = 0; d < D; ++d)
                for (int64_t oh = 0; oh < OH; ++oh)
                    for (int64_t ow = 0; ow < OW; ++ow)
                        yp[(((n * out_channels + c) * D + d) * OH + oh) * OW + ow] =
                            xp[(((n * C + c) * D + d) * H + oh * stride_hw) * W + ow * stride_hw];
    return y;
}

template <typename T>
Tensor<T> shortcut_backward(const Tensor<T>& grad_out, int64_t in_channels, int64_t stride_hw,
                            const std::vector<int64_t>& input_shape) {
    const int64_t N = grad_out.dim(0), Co = grad_out.dim(1), D = grad_out.dim(2);
    const int64_t OH = grad_out.dim(3), OW = grad_out.dim(4);
    const int64_t H = input_shape[3], W = input_shape[4];
    Tensor<T> g(input_shape);
    const T* gp = grad_out.data();
    T* gx = g.data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < in_channels; ++c)
            for (int64_t d = 0; d < D; ++d)
                for (int64_t oh = 0; oh < OH; ++oh)
                    for (int64_t ow = 0; ow < OW; ++ow)
                        gx[(((n * in_channels + c) * D + d) * H + oh * stride_hw) * W + ow * stride_hw] =
                            gp[(((n * Co + c) * D + d) * OH + oh) * OW + ow];
    return g;
}

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("add shape mismatch");
    T* ap = a.data();
    const T* bp = b.data();
    for (int64_t i = 0; i < a.numel(); ++i) ap[i] += bp[i];
}

#define VOXSEG_INSTANTIATE_LAYERS(T)                                                               \
    template Tensor<T> conv3d_forward<T>(const Tensor<T>&, const Tensor<T>&, const std::vector<T>&, \
                                         Stride3, Pad3);                                           \
    template ConvGrads<T> conv3d_backward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                             Stride3, Pad3, bool);                                 \
    template Tensor<T> conv_transpose3d_forward<T>(const Tensor<T>&, const Tensor<T>&, Stride3,    \
                                                   Pad3);                                          \
    template ConvGrads<T> conv_transpose3d_backward<T>(const Tensor<T>&, const Tensor<T>&,         \
                                                       const Tensor<T>&, Stride3, Pad3);           \
    template Tensor<T> batchnorm_forward_train<T>(const Tensor<T>&, const std::vector<T>&,         \
                                                  const std::vector<T>&, std::vector<T>&,          \
                                                  std::vector<T>&, BatchNormCache<T>*, bool);      \
    template Tensor<T> batchnorm_forward_eval<T>(const Tensor<T>&, const std::vector<T>&,          \
                                                 const std::vector<T>&, const std::vector<T>&,     \
                                                 const std::vector<T>&);                           \
    template BatchNormGrads<T> batchnorm_backward<T>(const Tensor<T>&, const std::vector<T>&,      \
                                                     const BatchNormCache<T>&);                    \
    template Tensor<T> relu_forward<T>(const Tensor<T>&, std::vector<uint8_t>*);                   \
    template Tensor<T> relu_backward<T>(const Tensor<T>&, const std::vector<uint8_t>&);            \
    template Tensor<T> maxpool_hw2_forward<T>(const Tensor<T>&, std::vector<uint8_t>*);            \
    template Tensor<T> maxpool_hw2_backward<T>(const Tensor<T>&, const std::vector<uint8_t>&,      \
                                               const std::vector<int64_t>&);                       \
    template Tensor<T> softmax_channels<T>(const Tensor<T>&);                                      \
    template Tensor<T> softmax_channels_backward<T>(const Tensor<T>&, const Tensor<T>&);           \
    template Tensor<T> concat_channels<T>(const Tensor<T>&, const Tensor<T>&);                     \
    template void split_channels<T>(const Tensor<T>&, int64_t, Tensor<T>&, Tensor<T>&);            \
    template Tensor<T> shortcut_forward<T>(const Tensor<T>&, int64_t, int64_t);                    \
    template Tensor<T> shortcut_backward<T>(const Tensor<T>&, int64_t, int64_t,                    \
                                            const std::vector<int64_t>&);                          \
    template void add_inplace<T>(Tensor<T>&, const Tensor<T>&);

VOXSEG_INSTANTIATE_LAYERS(float)
VOXSEG_INSTANTIATE_LAYERS(double)

#undef VOXSEG_INSTANTIATE_LAYERS

}  // namespace voxseg
