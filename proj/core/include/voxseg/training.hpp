#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "voxseg/network.hpp"
#include "voxseg/tensor.hpp"
#include "voxseg/volume.hpp"
#include "voxseg/weights.hpp"

namespace voxseg {

struct AugmentConfig {
    bool reflections = true;
    bool elastic = true;
    bool noise = true;
    bool blur = true;
    double elastic_sigma_voxels = 2.0;  // per-node displacement std on the 4x4x4 grid
    double noise_sigma_max = 0.1;       // additive Gaussian, in normalized intensity units
    double blur_sigma_min = 0.5;        // voxels
    double blur_sigma_max = 1.5;

    static AugmentConfig none() { return {false, false, false, false, 2.0, 0.1, 0.5, 1.5}; }
};

struct TrainConfig {
    Dims3 patch_shape{24, 128, 128};  // 2D variant uses (1,128,128)
    int batch_size = 24;              // 2D variant uses 64
    double learning_rate = 1e-3;
    int epochs = 50;
    int batches_per_epoch = 100;
    uint64_t seed = 0;
    AugmentConfig augment;
    bool freeze_bn_stats = false;

    void validate() const;  // patch H,W divisible by 32, batch_size >= 1
};

// Per-parameter Adam moments; beta1 0.9, beta2 0.999, eps 1e-8.
struct AdamState {
    explicit AdamState(const ParamSet<float>& params)
        : m(params.specs()), v(params.specs()) {}
    ParamSet<float> m;
    ParamSet<float> v;
    int64_t t = 0;

    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-8;
};

// Bias-corrected Adam update over every trainable tensor.
// Throws naming the tensor when a gradient is non-finite.
void adam_step(ParamSet<float>& params, const ParamSet<float>& grads, AdamState& state, double lr);

// Multiple Dice Loss over the three foreground classes (background excluded):
//   loss = 1 - (1/3) sum_l DSC_l,
//   DSC_l = (2 sum r p + 2 eps) / (sum r + sum p + 2 eps),  eps = 1e-5,
// with sums pooled over the batch. Returns the analytic gradient w.r.t. the
// probabilities and the per-class DSC values.
inline constexpr double kDiceEps = 1e-5;

template <typename T>
struct DiceLossResult {
    double loss = 0.0;
    std::array<double, 3> per_class_dsc{};  // classes 1 (core), 2 (edema), 4 (enhancing)
    Tensor<T> grad_probs;
};

template <typename T>
DiceLossResult<T> multiple_dice_loss(const Tensor<T>& probs, const Tensor<uint8_t>& ref_one_hot);

struct PatchPair {
    Tensor<float> input;     // (3, pd, ph, pw)
    SegmentationMap labels;  // aligned; empty when sampled without labels
};

// The origin draw behind sample_patch, in symmetric-padded coordinates:
// uniform over dims + pad - patch + 1 positions per axis, drawn z, y, x.
void sample_patch_origin(const Dims3& vol_dims, const Dims3& patch_shape, std::mt19937_64& rng,
                         Dims3& origin);

// Uniform patch origin over the valid positions of the (nonzero-cropped)
// volume; axes shorter than the patch are zero-padded symmetrically first.
PatchPair sample_patch(const MultiModalScan& scan, const SegmentationMap* seg, Dims3 patch_shape,
                       std::mt19937_64& rng);

// In-place reflection along one spatial axis (0=z,1=y,2=x); labels optional.
void reflect_patch(Tensor<float>& input, SegmentationMap* labels, int spatial_axis);

// Applies, each with independent probability 0.5 unless disabled: per-axis
// reflection, elastic deformation (linear for intensities, nearest for
// labels), additive Gaussian noise, Gaussian blur. Labels receive only the
// geometric transforms.
void augment_patch(Tensor<float>& input, SegmentationMap& labels, const AugmentConfig& cfg,
                   std::mt19937_64& rng);

struct TrainCase {
    MultiModalScan scan;
    SegmentationMap seg;
};

struct EpochStats {
    double mean_loss = 0.0;
    double dice_et = 0.0;
    double dice_wt = 0.0;
    double dice_tc = 0.0;
};

struct TrainRun {
    TrainConfig config;
    std::vector<EpochStats> epochs;
};

class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(int epoch, int iteration, double loss_value)
        : std::runtime_error("non-finite loss " + std::to_string(loss_value) + " at epoch " +
                             std::to_string(epoch) + " iteration " + std::to_string(iteration)),
          epoch(epoch), iteration(iteration), loss_value(loss_value) {}
    int epoch;
    int iteration;
    double loss_value;
};

// Normalizes (z-score over nonzero voxels) and crops each case to its
// nonzero bounding box — the training-time view of the data.
TrainCase prepare_case(const TrainCase& raw);

// Epoch loop: sample -> augment -> forward -> dice loss -> backward -> Adam,
// batches_per_epoch times per epoch; full-volume sliding-window validation
// dice per region after each epoch on the held-out tail of the dataset.
// Deterministic given cfg.seed. Throws TrainingDiverged on non-finite loss.
TrainRun train(const TrainConfig& cfg, const NetworkConfig& net_cfg, ParamSet<float>& params,
               const std::vector<TrainCase>& dataset, int val_count);

void write_train_log(const TrainRun& run, const std::string& path);

// Pretrained-vs-random comparison: num_seeds paired runs per arm, identical
// seeds and data, the pretrained arm strict-loading the encoder store before
// training. Arm 0 = pretrained, arm 1 = random init.
struct CompareResult {
    std::array<std::vector<TrainRun>, 2> runs;
    std::array<ParamSet<float>, 2> last_params;  // from the final seed, for inspection
};

CompareResult compare_pretraining(const TrainConfig& base_cfg, const NetworkConfig& net_cfg,
                                  const WeightStore& pretrained_store,
                                  const std::vector<TrainCase>& dataset, int val_count,
                                  int num_seeds);

// --- 2D encoder pretraining (desk-scale ImageNet stand-in) ---

struct PretrainExample {
    Tensor<float> image;  // (3, 1, H, W)
    int label = 0;
};

struct PretrainConfig {
    int steps = 300;
    int batch_size = 16;
    double learning_rate = 1e-3;
    uint64_t seed = 0;
    int num_classes = 4;
};

struct PretrainResult {
    WeightStore store;           // squeezed encoder tensors + cls.{weight,bias}
    std::vector<double> losses;  // cross-entropy per step
};

// Trains encoder + global-average-pool + linear head on slice classification,
// then exports the encoder in 2D form for load_pretrained.
PretrainResult pretrain_encoder_2d(const NetworkConfig& net_cfg,
                                   const std::vector<PretrainExample>& examples,
                                   const PretrainConfig& cfg);

}  // namespace voxseg
