#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "voxseg/layers.hpp"
#include "voxseg/tensor.hpp"
#include "voxseg/weights.hpp"

namespace voxseg {

// Encoder-decoder segmentation network: a ResNet-style 2D encoder lifted to
// 3D (all encoder kernels 1xkxk, processing volumes slice-wise) and a decoder
// of transpose convolutions with optional 3x1x1 depth layers that correlate
// adjacent slices. Residual shortcuts are parameter-free (strided identity
// with zero-padded channels), so the encoder holds exactly
// 1 + 2*sum(blocks_per_stage) convolution kernels.
struct NetworkConfig {
    std::array<int, 4> blocks_per_stage{3, 4, 6, 3};
    int base_width = 64;
    bool depth_layers_enabled = true;
    int in_channels = 3;
    int out_classes = 4;
    std::array<int, 5> decoder_widths{256, 128, 64, 32, 16};

    static NetworkConfig paper();  // ResNet34 instantiation, width 64
    static NetworkConfig tiny();   // blocks (1,1,1,1), width 8 — test scale

    // stem + stage widths: (b, b, 2b, 4b, 8b)
    std::array<int, 5> encoder_widths() const;
    // decoder skip channels per block: (4b, 2b, b, b, 0)
    std::array<int, 5> skip_widths() const;

    void validate() const;  // throws listing every violated constraint
};

struct TensorSpec {
    std::string name;
    std::vector<int64_t> shape;
};

// Full parameter/state table in canonical order. Shapes are fully determined
// by the config; the names are the normative weight-store interface.
std::vector<TensorSpec> parameter_specs(const NetworkConfig& cfg);

// The encoder subset with kernel shapes squeezed to 2-d form (Co,Ci,kh,kw);
// this is the layout pretrained stores use.
std::vector<TensorSpec> encoder_specs_2d(const NetworkConfig& cfg);

inline bool is_encoder_tensor(const std::string& name) { return name.rfind("enc.", 0) == 0; }
// batchnorm running statistics are state, not trainable parameters
inline bool is_trainable(const std::string& name) {
    return name.size() < 5 || (name.substr(name.size() - 5) != ".mean" && name.substr(name.size() - 4) != ".var");
}

// Named tensor set addressed by the canonical spec names.
template <typename T>
class ParamSet {
public:
    ParamSet() = default;
    explicit ParamSet(std::vector<TensorSpec> specs);

    Tensor<T>& at(const std::string& name);
    const Tensor<T>& at(const std::string& name) const;
    bool contains(const std::string& name) const;
    const std::vector<TensorSpec>& specs() const { return specs_; }
    int64_t total_parameters() const;

    // throws listing every tensor whose shape deviates from its spec
    void audit_shapes() const;

private:
    std::vector<TensorSpec> specs_;
    std::map<std::string, size_t> index_;
    std::vector<Tensor<T>> tensors_;
};

enum class NetMode { kTrain, kEval };

// Per-layer caches from a train-mode forward, consumed LIFO by the backward
// pass. Eval-mode forwards cache nothing.
template <typename T>
struct ActivationTape {
    bool train_mode = false;
    std::vector<Tensor<T>> conv_inputs;
    std::vector<BatchNormCache<T>> bn_caches;
    std::vector<std::vector<uint8_t>> relu_masks;
    std::vector<uint8_t> pool_argmax;
    std::vector<int64_t> pool_in_shape;
    std::vector<std::vector<int64_t>> shortcut_in_shapes;
    Tensor<T> probs;
};

// Fan-in scaled uniform initialization, deterministic given the seed.
template <typename T>
ParamSet<T> build_network(const NetworkConfig& cfg, uint64_t seed);

// Inserts a unit depth axis: (Co,Ci,kh,kw) -> (Co,Ci,1,kh,kw). Values and
// parameter count are unchanged.
template <typename T>
Tensor<T> lift_kernel_2d_to_3d(const Tensor<T>& k2d);

template <typename T>
Tensor<T> squeeze_kernel_3d_to_2d(const Tensor<T>& k3d);  // requires depth extent 1

// Replaces every encoder tensor by its lifted counterpart from a 2D store.
// strict: missing encoder tensors are an error; shape mismatches always are.
// Non-encoder store entries (e.g. a pretraining classifier head) are ignored.
void load_pretrained(ParamSet<float>& params, const WeightStore& store, bool strict);

// Encoder tensors exported in squeezed 2-d form, ready for load_pretrained.
WeightStore export_encoder_store(const ParamSet<float>& params, const NetworkConfig& cfg);
// Every tensor in its native (3-d) shape, for checkpointing.
WeightStore export_full_store(const ParamSet<float>& params);
void load_full_store(ParamSet<float>& params, const WeightStore& store);

// Encoder half on its own: returns the five skip features (e0..e4). Used by
// the full forward pass and by 2D encoder pretraining.
template <typename T>
std::array<Tensor<T>, 5> encoder_forward(ParamSet<T>& params, const NetworkConfig& cfg,
                                         const Tensor<T>& batch, NetMode mode,
                                         ActivationTape<T>* tape, bool update_running = true);

// Read positions into the tape's per-kind stacks; backward passes walk them
// LIFO without consuming, so a tape supports repeated backward calls.
struct TapeCursor {
    size_t conv = 0;
    size_t bn = 0;
    size_t relu = 0;
    size_t shortcut = 0;
};

// Reverse of encoder_forward. `grad_top` is the gradient w.r.t. e4;
// skip_grads carries gradients w.r.t. e0..e3 (empty tensors mean zero).
// Parameter gradients accumulate into `grads`; returns the input gradient.
template <typename T>
Tensor<T> encoder_backward(const ParamSet<T>& params, const NetworkConfig& cfg,
                           const ActivationTape<T>& tape, TapeCursor& cursor, Tensor<T> grad_top,
                           std::array<Tensor<T>, 4>& skip_grads, ParamSet<T>& grads);

// Forward pass: batch (B,3,D,H,W) -> class probabilities (B,4,D,H,W),
// softmax over the class axis. H and W must be divisible by 32. Train mode
// fills the tape and (unless update_running=false) advances the batchnorm
// running statistics.
template <typename T>
Tensor<T> network_forward(ParamSet<T>& params, const NetworkConfig& cfg, const Tensor<T>& batch,
                          NetMode mode, ActivationTape<T>* tape, bool update_running = true);

// Eval-mode forward over read-shared parameters.
template <typename T>
Tensor<T> network_forward_eval(const ParamSet<T>& params, const NetworkConfig& cfg,
                               const Tensor<T>& batch);

template <typename T>
struct BackwardResult {
    ParamSet<T> grads;      // same spec table; running-stat entries stay zero
    Tensor<T> grad_input;
};

// Walks a train-mode tape (read-only). Throws on an eval-mode tape.
template <typename T>
BackwardResult<T> network_backward(const ParamSet<T>& params, const NetworkConfig& cfg,
                                   const ActivationTape<T>& tape, const Tensor<T>& grad_probs);

// Scalar loss on probabilities: returns (loss, d loss / d probs).
using LossFn = std::function<std::pair<double, Tensor<double>>(const Tensor<double>& probs)>;

// Central finite differences (h = 1e-5) against the analytic gradient over
// `probe_count` randomly sampled trainable scalars, in 64-bit mode.
// Returns the max relative error |analytic - fd| / max(|analytic|,|fd|,1e-6).
double gradient_check(ParamSet<double>& params, const NetworkConfig& cfg,
                      const Tensor<double>& batch, const LossFn& loss, int probe_count,
                      uint64_t seed);

}  // namespace voxseg
