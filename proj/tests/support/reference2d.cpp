#include "support/reference2d.hpp"

#include <cmath>
#include <stdexcept>

namespace voxseg::testsupport {

namespace {

// Plain (N,C,H,W) grids throughout.

Tensor<float> conv2d(const Tensor<float>& x, const Tensor<float>& k, int stride, int pad,
                     const std::vector<float>* bias = nullptr) {
    const int64_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t Co = k.dim(0), kh = k.dim(2), kw = k.dim(3);
    const int64_t OH = (H + 2 * pad - kh) / stride + 1;
    const int64_t OW = (W + 2 * pad - kw) / stride + 1;
    Tensor<float> y({N, Co, OH, OW});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t co = 0; co < Co; ++co)
            for (int64_t oh = 0; oh < OH; ++oh)
                for (int64_t ow = 0; ow < OW; ++ow) {
                    double acc = bias ? double((*bias)[size_t(co)]) : 0.0;
                    for (int64_t ci = 0; ci < Ci; ++ci)
                        for (int64_t a = 0; a < kh; ++a)
                            for (int64_t b = 0; b < kw; ++b) {
                                const int64_t ih = oh * stride - pad + a;
                                const int64_t iw = ow * stride - pad + b;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += double(x[((n * Ci + ci) * H + ih) * W + iw]) *
                                       double(k[((co * Ci + ci) * kh + a) * kw + b]);
                            }
                    y[((n * Co + co) * OH + oh) * OW + ow] = float(acc);
                }
    return y;
}

// Scatter-style transpose convolution (kernel (Ci,Co,kh,kw)).
Tensor<float> conv_transpose2d(const Tensor<float>& x, const Tensor<float>& k, int stride, int pad) {
    const int64_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t Co = k.dim(1), kh = k.dim(2), kw = k.dim(3);
    const int64_t OH = (H - 1) * stride - 2 * pad + kh;
    const int64_t OW = (W - 1) * stride - 2 * pad + kw;
    Tensor<float> y({N, Co, OH, OW});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t ci = 0; ci < Ci; ++ci)
            for (int64_t ih = 0; ih < H; ++ih)
                for (int64_t iw = 0; iw < W; ++iw) {
                    const float v = x[((n * Ci + ci) * H + ih) * W + iw];
                    for (int64_t co = 0; co < Co; ++co)
                        for (int64_t a = 0; a < kh; ++a)
                            for (int64_t b = 0; b < kw; ++b) {
                                const int64_t oh = ih * stride - pad + a;
                                const int64_t ow = iw * stride - pad + b;
                                if (oh < 0 || oh >= OH || ow < 0 || ow >= OW) continue;
                                y[((n * Co + co) * OH + oh) * OW + ow] +=
                                    v * k[((ci * Co + co) * kh + a) * kw + b];
                            }
                }
    return y;
}

Tensor<float> bn_eval(const Tensor<float>& x, const std::vector<float>& scale,
                      const std::vector<float>& shift, const std::vector<float>& mean,
                      const std::vector<float>& var) {
    const int64_t N = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3);
    Tensor<float> y(x.shape());
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t i = 0; i < S; ++i) {
                const float xv = x[(n * C + c) * S + i];
                y[(n * C + c) * S + i] =
                    scale[size_t(c)] * (xv - mean[size_t(c)]) /
                        float(std::sqrt(double(var[size_t(c)]) + 1e-5)) +
                    shift[size_t(c)];
            }
    return y;
}

Tensor<float> relu(const Tensor<float>& x) {
    Tensor<float> y(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
    return y;
}

Tensor<float> maxpool2(const Tensor<float>& x) {
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor<float> y({N, C, H / 2, W / 2});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t oh = 0; oh < H / 2; ++oh)
                for (int64_t ow = 0; ow < W / 2; ++ow) {
                    float best = x[((n * C + c) * H + 2 * oh) * W + 2 * ow];
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx)
                            best = std::max(best,
                                            x[((n * C + c) * H + 2 * oh + dy) * W + 2 * ow + dx]);
                    y[((n * C + c) * (H / 2) + oh) * (W / 2) + ow] = best;
                }
    return y;
}

Tensor<float> shortcut(const Tensor<float>& x, int64_t out_ch, int stride) {
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor<float> y({N, out_ch, (H + stride - 1) / stride, (W + stride - 1) / stride});
    const int64_t OH = y.dim(2), OW = y.dim(3);
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t oh = 0; oh < OH; ++oh)
                for (int64_t ow = 0; ow < OW; ++ow)
                    y[((n * out_ch + c) * OH + oh) * OW + ow] =
                        x[((n * C + c) * H + oh * stride) * W + ow * stride];
    return y;
}

Tensor<float> concat(const Tensor<float>& a, const Tensor<float>& b) {
    const int64_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), S = a.dim(2) * a.dim(3);
    Tensor<float> y({N, Ca + Cb, a.dim(2), a.dim(3)});
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t i = 0; i < Ca * S; ++i) y[n * (Ca + Cb) * S + i] = a[n * Ca * S + i];
        for (int64_t i = 0; i < Cb * S; ++i) y[n * (Ca + Cb) * S + Ca * S + i] = b[n * Cb * S + i];
    }
    return y;
}

Tensor<float> add(const Tensor<float>& a, const Tensor<float>& b) {
    Tensor<float> y(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) y[i] = a[i] + b[i];
    return y;
}

Tensor<float> softmax4(const Tensor<float>& x) {
    const int64_t N = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3);
    Tensor<float> y(x.shape());
    for (int64_t n = 0; n < N; ++n)
        for (int64_t i = 0; i < S; ++i) {
            float m = x[n * C * S + i];
            for (int64_t c = 1; c < C; ++c) m = std::max(m, x[(n * C + c) * S + i]);
            double norm = 0.0;
            for (int64_t c = 0; c < C; ++c) {
                const float e = std::exp(x[(n * C + c) * S + i] - m);
                y[(n * C + c) * S + i] = e;
                norm += e;
            }
            for (int64_t c = 0; c < C; ++c) y[(n * C + c) * S + i] = float(y[(n * C + c) * S + i] / norm);
        }
    return y;
}

Tensor<float> kernel2d(const ParamSet<float>& params, const std::string& name) {
    return squeeze_kernel_3d_to_2d(params.at(name));
}

const std::vector<float>& vec_of(const ParamSet<float>& params, const std::string& name) {
    return params.at(name).values();
}

Tensor<float> bn_block(const ParamSet<float>& params, const std::string& prefix,
                       const Tensor<float>& x) {
    return bn_eval(x, vec_of(params, prefix + "scale"), vec_of(params, prefix + "shift"),
                   vec_of(params, prefix + "mean"), vec_of(params, prefix + "var"));
}

}  // namespace

Tensor<float> reference2d_forward(const ParamSet<float>& params, const NetworkConfig& cfg,
                                  const Tensor<float>& images) {
    if (cfg.depth_layers_enabled)
        throw std::invalid_argument("reference2d requires depth layers disabled");
    if (images.rank() != 4) throw std::invalid_argument("reference2d expects (N,3,H,W)");

    Tensor<float> x = conv2d(images, kernel2d(params, "enc.stage0.block0.conv1.weight"), 2, 3);
    x = bn_block(params, "enc.stage0.block0.bn1.", x);
    const Tensor<float> e0 = relu(x);

    Tensor<float> cur = maxpool2(e0);
    std::vector<Tensor<float>> features{e0};
    const auto widths = cfg.encoder_widths();
    int in_ch = widths[0];
    for (int stage = 1; stage <= 4; ++stage) {
        const int out_ch = widths[size_t(stage)];
        for (int block = 0; block < cfg.blocks_per_stage[size_t(stage - 1)]; ++block) {
            const std::string p = "enc.stage" + std::to_string(stage) + ".block" +
                                  std::to_string(block) + ".";
            const int stride = (block == 0 && stage >= 2) ? 2 : 1;
            Tensor<float> h = conv2d(cur, kernel2d(params, p + "conv1.weight"), stride, 1);
            h = bn_block(params, p + "bn1.", h);
            h = relu(h);
            h = conv2d(h, kernel2d(params, p + "conv2.weight"), 1, 1);
            h = bn_block(params, p + "bn2.", h);
            const bool transform = stride != 1 || in_ch != out_ch;
            cur = relu(add(h, transform ? shortcut(cur, out_ch, stride) : cur));
            in_ch = out_ch;
        }
        features.push_back(cur);
    }

    Tensor<float> d = features[4];
    const auto skips = cfg.skip_widths();
    for (int blk = 0; blk < 5; ++blk) {
        const std::string p = "dec.block" + std::to_string(blk) + ".";
        Tensor<float> up = conv_transpose2d(d, kernel2d(params, p + "up.weight"), 2, 1);
        Tensor<float> merged = skips[size_t(blk)] > 0 ? concat(up, features[size_t(3 - blk)]) : up;
        d = relu(conv2d(merged, kernel2d(params, p + "conv.weight"), 1, 1));
    }

    Tensor<float> logits =
        conv2d(d, kernel2d(params, "head.weight"), 1, 0, &vec_of(params, "head.bias"));
    return softmax4(logits);
}

}  // namespace voxseg::testsupport
