#pragma once

#include <cstdint>
#include <vector>

#include "voxseg/tensor.hpp"

namespace voxseg {

struct Stride3 {
    int64_t d = 1, h = 1, w = 1;
};
struct Pad3 {
    int64_t d = 0, h = 0, w = 0;
};

inline int64_t conv_out_extent(int64_t in, int64_t k, int64_t s, int64_t p) {
    return (in + 2 * p - k) / s + 1;
}
inline int64_t conv_transpose_out_extent(int64_t in, int64_t k, int64_t s, int64_t p) {
    return (in - 1) * s - 2 * p + k;
}

// Cross-correlation of x (N,Ci,D,H,W) with kernel (Co,Ci,kd,kh,kw).
// bias may be empty. Throws on channel mismatch.
template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& x, const Tensor<T>& kernel, const std::vector<T>& bias,
                         Stride3 stride, Pad3 pad);

template <typename T>
struct ConvGrads {
    Tensor<T> input;
    Tensor<T> kernel;
    std::vector<T> bias;
};

template <typename T>
ConvGrads<T> conv3d_backward(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& grad_out,
                             Stride3 stride, Pad3 pad, bool has_bias);

// Transpose convolution; kernel layout (Ci,Co,kd,kh,kw), no bias.
template <typename T>
Tensor<T> conv_transpose3d_forward(const Tensor<T>& x, const Tensor<T>& kernel, Stride3 stride,
                                   Pad3 pad);

template <typename T>
ConvGrads<T> conv_transpose3d_backward(const Tensor<T>& x, const Tensor<T>& kernel,
                                       const Tensor<T>& grad_out, Stride3 stride, Pad3 pad);

// Batch normalization over (N,D,H,W) per channel, epsilon 1e-5.
// Train mode normalizes with biased batch statistics and updates the running
// estimates in place with momentum 0.1; eval mode uses the running estimates.
template <typename T>
struct BatchNormCache {
    Tensor<T> xhat;
    std::vector<T> inv_std;  // per channel
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

template <typename T>
Tensor<T> batchnorm_forward_train(const Tensor<T>& x, const std::vector<T>& scale,
                                  const std::vector<T>& shift, std::vector<T>& running_mean,
                                  std::vector<T>& running_var, BatchNormCache<T>* cache,
                                  bool update_running = true);

template <typename T>
Tensor<T> batchnorm_forward_eval(const Tensor<T>& x, const std::vector<T>& scale,
                                 const std::vector<T>& shift, const std::vector<T>& running_mean,
                                 const std::vector<T>& running_var);

template <typename T>
struct BatchNormGrads {
    Tensor<T> input;
    std::vector<T> scale;
    std::vector<T> shift;
};

template <typename T>
BatchNormGrads<T> batchnorm_backward(const Tensor<T>& grad_out, const std::vector<T>& scale,
                                     const BatchNormCache<T>& cache);

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x, std::vector<uint8_t>* mask);

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& grad_out, const std::vector<uint8_t>& mask);

// 1x2x2 max pooling with stride (1,2,2); H and W must be even.
template <typename T>
Tensor<T> maxpool_hw2_forward(const Tensor<T>& x, std::vector<uint8_t>* argmax);

template <typename T>
Tensor<T> maxpool_hw2_backward(const Tensor<T>& grad_out, const std::vector<uint8_t>& argmax,
                               const std::vector<int64_t>& input_shape);

// Softmax over the channel axis of (N,C,D,H,W).
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x);

// Gradient through softmax given its cached output probabilities.
template <typename T>
Tensor<T> softmax_channels_backward(const Tensor<T>& grad_probs, const Tensor<T>& probs);

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
void split_channels(const Tensor<T>& grad_cat, int64_t ca, Tensor<T>& grad_a, Tensor<T>& grad_b);

// Parameter-free residual shortcut: spatial subsampling by (1,s,s) plus
// zero-padding the channel axis up to out_channels.
template <typename T>
Tensor<T> shortcut_forward(const Tensor<T>& x, int64_t out_channels, int64_t stride_hw);

template <typename T>
Tensor<T> shortcut_backward(const Tensor<T>& grad_out, int64_t in_channels, int64_t stride_hw,
                            const std::vector<int64_t>& input_shape);

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b);

}  // namespace voxseg
