#pragma once

#include "voxseg/network.hpp"
#include "voxseg/tensor.hpp"

namespace voxseg::testsupport {

// Independently coded slice-wise 2D reference of the architecture, eval mode
// only. Reads the same named parameters (kernels squeezed to 2D) but shares
// no layer code with the library: plain direct loops, scatter-style
// transpose convolution. Requires cfg.depth_layers_enabled == false.
// Input (N,3,H,W), output (N,4,H,W) class probabilities.
Tensor<float> reference2d_forward(const ParamSet<float>& params, const NetworkConfig& cfg,
                                  const Tensor<float>& images);

}  // namespace voxseg::testsupport
