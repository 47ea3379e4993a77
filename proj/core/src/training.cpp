#include "voxseg/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "voxseg/inference.hpp"
#include "voxseg/metrics.hpp"
#include "voxseg/rng.hpp"

namespace voxseg {

void TrainConfig::validate() const {
    if (patch_shape[0] < 1) throw std::invalid_argument("patch depth must be >= 1");
    if (patch_shape[1] % 32 != 0 || patch_shape[2] % 32 != 0)
        throw std::invalid_argument("patch H and W must be divisible by 32");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (epochs < 0 || batches_per_epoch < 1)
        throw std::invalid_argument("epochs must be >= 0 and batches_per_epoch >= 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
}

void adam_step(ParamSet<float>& params, const ParamSet<float>& grads, AdamState& state, double lr) {
    state.t += 1;
    const double c1 = 1.0 - std::pow(AdamState::kBeta1, double(state.t));
    const double c2 = 1.0 - std::pow(AdamState::kBeta2, double(state.t));
    for (const auto& spec : params.specs()) {
        if (!is_trainable(spec.name)) continue;
        const Tensor<float>& g = grads.at(spec.name);
        Tensor<float>& p = params.at(spec.name);
        Tensor<float>& m = state.m.at(spec.name);
        Tensor<float>& v = state.v.at(spec.name);
        for (int64_t i = 0; i < g.numel(); ++i) {
            if (!std::isfinite(g[i]))
                throw std::runtime_error("non-finite gradient in tensor " + spec.name);
            m[i] = float(AdamState::kBeta1 * m[i] + (1.0 - AdamState::kBeta1) * g[i]);
            v[i] = float(AdamState::kBeta2 * v[i] + (1.0 - AdamState::kBeta2) * double(g[i]) * g[i]);
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            p[i] = float(p[i] - lr * mhat / (std::sqrt(vhat) + AdamState::kEps));
        }
    }
}

template <typename T>
DiceLossResult<T> multiple_dice_loss(const Tensor<T>& probs, const Tensor<uint8_t>& ref_one_hot) {
    if (probs.shape() != ref_one_hot.shape())
        throw std::invalid_argument("dice loss shape mismatch: probs " +
                                    Tensor<T>::shape_string(probs.shape()) + " vs ref " +
                                    Tensor<T>::shape_string(ref_one_hot.shape()));
    if (probs.rank() != 5 || probs.dim(1) != kNumClasses)
        throw std::invalid_argument("dice loss expects (B,4,D,H,W)");

    const int64_t B = probs.dim(0);
    const int64_t S = probs.dim(2) * probs.dim(3) * probs.dim(4);
    const T* pp = probs.data();
    const uint8_t* rp = ref_one_hot.data();

    DiceLossResult<T> out;
    out.grad_probs = Tensor<T>(probs.shape());
    T* gp = out.grad_probs.data();

    double dsc_sum = 0.0;
    for (int cls = 1; cls < kNumClasses; ++cls) {
        double s_rp = 0.0, s_r = 0.0, s_p = 0.0;
        for (int64_t b = 0; b < B; ++b) {
            const int64_t base = (b * kNumClasses + cls) * S;
            for (int64_t i = 0; i < S; ++i) {
                const double p = double(pp[base + i]);
                const double r = double(rp[base + i]);
                s_rp += r * p;
                s_r += r;
                s_p += p;
            }
        }
        const double num = 2.0 * s_rp + 2.0 * kDiceEps;
        const double den = s_r + s_p + 2.0 * kDiceEps;
        const double dsc = num / den;
        out.per_class_dsc[size_t(cls - 1)] = dsc;
        dsc_sum += dsc;

        // d dsc / d p_n = (2 r_n den - num) / den^2; loss takes -(1/3) of it
        const double inv_den2 = 1.0 / (den * den);
        for (int64_t b = 0; b < B; ++b) {
            const int64_t base = (b * kNumClasses + cls) * S;
            for (int64_t i = 0; i < S; ++i) {
                const double r = double(rp[base + i]);
                gp[base + i] = T(-(2.0 * r * den - num) * inv_den2 / 3.0);
            }
        }
    }
    out.loss = 1.0 - dsc_sum / 3.0;
    return out;
}

template DiceLossResult<float> multiple_dice_loss<float>(const Tensor<float>&,
                                                         const Tensor<uint8_t>&);
template DiceLossResult<double> multiple_dice_loss<double>(const Tensor<double>&,
                                                           const Tensor<uint8_t>&);

void sample_patch_origin(const Dims3& vol_dims, const Dims3& patch_shape, std::mt19937_64& rng,
                         Dims3& origin) {
    for (int a = 0; a < 3; ++a) {
        const int64_t pad_total =
            std::max<int64_t>(0, patch_shape[size_t(a)] - vol_dims[size_t(a)]);
        const int64_t range = vol_dims[size_t(a)] + pad_total - patch_shape[size_t(a)] + 1;
        origin[size_t(a)] = uniform_below(rng, range);
    }
}

PatchPair sample_patch(const MultiModalScan& scan, const SegmentationMap* seg, Dims3 patch_shape,
                       std::mt19937_64& rng) {
    scan.validate();
    const Dims3 dims = scan.dims();
    Dims3 pad_lo{0, 0, 0};
    for (int a = 0; a < 3; ++a) {
        const int64_t pad_total = std::max<int64_t>(0, patch_shape[size_t(a)] - dims[size_t(a)]);
        pad_lo[size_t(a)] = pad_total / 2;
    }
    Dims3 origin;
    sample_patch_origin(dims, patch_shape, rng, origin);
    const int64_t oz = origin[0];
    const int64_t oy = origin[1];
    const int64_t ox = origin[2];

    PatchPair out;
    out.input = Tensor<float>({3, patch_shape[0], patch_shape[1], patch_shape[2]});
    float* ip = out.input.data();
    for (int c = 0; c < 3; ++c) {
        const Volume3D& vol = scan.channels[size_t(c)];
        for (int64_t pz = 0; pz < patch_shape[0]; ++pz) {
            const int64_t z = oz + pz - pad_lo[0];
            for (int64_t py = 0; py < patch_shape[1]; ++py) {
                const int64_t y = oy + py - pad_lo[1];
                float* row = ip + ((c * patch_shape[0] + pz) * patch_shape[1] + py) * patch_shape[2];
                if (z < 0 || z >= dims[0] || y < 0 || y >= dims[1]) {
                    std::fill(row, row + patch_shape[2], 0.0f);
                    continue;
                }
                for (int64_t px = 0; px < patch_shape[2]; ++px) {
                    const int64_t x = ox + px - pad_lo[2];
                    row[px] = (x < 0 || x >= dims[2]) ? 0.0f : vol.at(z, y, x);
                }
            }
        }
    }
    if (seg) {
        if (seg->dims != dims) throw std::invalid_argument("label dims do not match scan");
        out.labels = SegmentationMap(patch_shape, scan.spacing());
        for (int64_t pz = 0; pz < patch_shape[0]; ++pz) {
            const int64_t z = oz + pz - pad_lo[0];
            for (int64_t py = 0; py < patch_shape[1]; ++py) {
                const int64_t y = oy + py - pad_lo[1];
                for (int64_t px = 0; px < patch_shape[2]; ++px) {
                    const int64_t x = ox + px - pad_lo[2];
                    const bool inside = z >= 0 && z < dims[0] && y >= 0 && y < dims[1] && x >= 0 &&
                                        x < dims[2];
                    out.labels.at(pz, py, px) = inside ? seg->at(z, y, x) : uint8_t(0);
                }
            }
        }
    }
    return out;
}

void reflect_patch(Tensor<float>& input, SegmentationMap* labels, int spatial_axis) {
    if (spatial_axis < 0 || spatial_axis > 2) throw std::invalid_argument("axis must be 0..2");
    const int64_t C = input.dim(0), D = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::array<int64_t, 3> ext{D, H, W};
    auto flipped = [&](int64_t z, int64_t y, int64_t x) {
        std::array<int64_t, 3> v{z, y, x};
        v[size_t(spatial_axis)] = ext[size_t(spatial_axis)] - 1 - v[size_t(spatial_axis)];
        return v;
    };
    Tensor<float> src = input;
    for (int64_t c = 0; c < C; ++c)
        for (int64_t z = 0; z < D; ++z)
            for (int64_t y = 0; y < H; ++y)
                for (int64_t x = 0; x < W; ++x) {
                    const auto s = flipped(z, y, x);
                    input[((c * D + z) * H + y) * W + x] =
                        src[((c * D + s[0]) * H + s[1]) * W + s[2]];
                }
    if (labels) {
        std::vector<uint8_t> lsrc = labels->labels;
        for (int64_t z = 0; z < D; ++z)
            for (int64_t y = 0; y < H; ++y)
                for (int64_t x = 0; x < W; ++x) {
                    const auto s = flipped(z, y, x);
                    labels->at(z, y, x) = lsrc[size_t((s[0] * H + s[1]) * W + s[2])];
                }
    }
}

namespace {

float trilinear_sample(const float* ch, int64_t D, int64_t H, int64_t W, double z, double y,
                       double x) {
    const int64_t z0 = int64_t(std::floor(z)), y0 = int64_t(std::floor(y)),
                  x0 = int64_t(std::floor(x));
    const double tz = z - double(z0), ty = y - double(y0), tx = x - double(x0);
    double acc = 0.0;
    for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
                const int64_t zz = z0 + dz, yy = y0 + dy, xx = x0 + dx;
                if (zz < 0 || zz >= D || yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                const double w = (dz ? tz : 1.0 - tz) * (dy ? ty : 1.0 - ty) * (dx ? tx : 1.0 - tx);
                acc += w * double(ch[(zz * H + yy) * W + xx]);
            }
    return float(acc);
}

// Align-corners trilinear interpolation of a 4x4x4 node grid.
double grid_value(const std::vector<double>& nodes, double fz, double fy, double fx) {
    const int z0 = std::min(2, int(std::floor(fz))), y0 = std::min(2, int(std::floor(fy))),
              x0 = std::min(2, int(std::floor(fx)));
    const double tz = fz - z0, ty = fy - y0, tx = fx - x0;
    double acc = 0.0;
    for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
                const double w = (dz ? tz : 1.0 - tz) * (dy ? ty : 1.0 - ty) * (dx ? tx : 1.0 - tx);
                acc += w * nodes[size_t(((z0 + dz) * 4 + (y0 + dy)) * 4 + (x0 + dx))];
            }
    return acc;
}

void elastic_deform(Tensor<float>& input, SegmentationMap& labels, double sigma,
                    std::mt19937_64& rng) {
    const int64_t C = input.dim(0), D = input.dim(1), H = input.dim(2), W = input.dim(3);
    std::array<std::vector<double>, 3> nodes;
    for (int comp = 0; comp < 3; ++comp) {
        nodes[size_t(comp)].resize(64);
        for (int i = 0; i < 64; ++i) nodes[size_t(comp)][size_t(i)] = normal01(rng) * sigma;
    }
    const Tensor<float> src = input;
    const std::vector<uint8_t> lsrc = labels.labels;
    for (int64_t z = 0; z < D; ++z) {
        const double fz = D > 1 ? double(z) * 3.0 / double(D - 1) : 0.0;
        for (int64_t y = 0; y < H; ++y) {
            const double fy = H > 1 ? double(y) * 3.0 / double(H - 1) : 0.0;
            for (int64_t x = 0; x < W; ++x) {
                const double fx = W > 1 ? double(x) * 3.0 / double(W - 1) : 0.0;
                const double sz = double(z) + grid_value(nodes[0], fz, fy, fx);
                const double sy = double(y) + grid_value(nodes[1], fz, fy, fx);
                const double sx = double(x) + grid_value(nodes[2], fz, fy, fx);
                for (int64_t c = 0; c < C; ++c)
                    input[((c * D + z) * H + y) * W + x] =
                        trilinear_sample(src.data() + c * D * H * W, D, H, W, sz, sy, sx);
                const int64_t rz = int64_t(std::llround(sz)), ry = int64_t(std::llround(sy)),
                              rx = int64_t(std::llround(sx));
                const bool inside =
                    rz >= 0 && rz < D && ry >= 0 && ry < H && rx >= 0 && rx < W;
                labels.at(z, y, x) = inside ? lsrc[size_t((rz * H + ry) * W + rx)] : uint8_t(0);
            }
        }
    }
}

// Separable truncated Gaussian, renormalized per voxel over in-range taps.
void gaussian_blur(Tensor<float>& input, double sigma) {
    const int64_t C = input.dim(0), D = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int64_t radius = std::max<int64_t>(1, int64_t(std::ceil(3.0 * sigma)));
    std::vector<double> w(size_t(2 * radius + 1));
    for (int64_t i = -radius; i <= radius; ++i)
        w[size_t(i + radius)] = std::exp(-double(i * i) / (2.0 * sigma * sigma));

    const std::array<int64_t, 3> ext{D, H, W};
    for (int axis = 0; axis < 3; ++axis) {
        Tensor<float> src = input;
        for (int64_t c = 0; c < C; ++c) {
            const float* s = src.data() + c * D * H * W;
            float* o = input.data() + c * D * H * W;
            for (int64_t z = 0; z < D; ++z)
                for (int64_t y = 0; y < H; ++y)
                    for (int64_t x = 0; x < W; ++x) {
                        std::array<int64_t, 3> v{z, y, x};
                        double acc = 0.0, norm = 0.0;
                        for (int64_t k = -radius; k <= radius; ++k) {
                            auto u = v;
                            u[size_t(axis)] += k;
                            if (u[size_t(axis)] < 0 || u[size_t(axis)] >= ext[size_t(axis)]) continue;
                            const double wk = w[size_t(k + radius)];
                            acc += wk * double(s[(u[0] * H + u[1]) * W + u[2]]);
                            norm += wk;
                        }
                        o[(z * H + y) * W + x] = float(acc / norm);
                    }
        }
    }
}

}  // namespace

void augment_patch(Tensor<float>& input, SegmentationMap& labels, const AugmentConfig& cfg,
                   std::mt19937_64& rng) {
    if (input.rank() != 4 || input.dim(0) != 3)
        throw std::invalid_argument("augment expects a (3,D,H,W) patch");
    if (labels.dims != Dims3{input.dim(1), input.dim(2), input.dim(3)})
        throw std::invalid_argument("augment label dims mismatch");

    if (cfg.reflections)
        for (int axis = 0; axis < 3; ++axis)
            if (uniform01(rng) < 0.5) reflect_patch(input, &labels, axis);

    if (cfg.elastic && uniform01(rng) < 0.5)
        elastic_deform(input, labels, cfg.elastic_sigma_voxels, rng);

    if (cfg.noise && uniform01(rng) < 0.5) {
        const double sigma = uniform_range(rng, 0.0, cfg.noise_sigma_max);
        for (int64_t i = 0; i < input.numel(); ++i)
            input[i] += float(normal01(rng) * sigma);
    }

    if (cfg.blur && uniform01(rng) < 0.5) {
        const double sigma = uniform_range(rng, cfg.blur_sigma_min, cfg.blur_sigma_max);
        gaussian_blur(input, sigma);
    }
}

TrainCase prepare_case(const TrainCase& raw) {
    TrainCase prepared;
    prepared.scan.patient_id = raw.scan.patient_id;
    for (int c = 0; c < 3; ++c)
        prepared.scan.channels[size_t(c)] =
            zscore_normalize(raw.scan.channels[size_t(c)], NormRegion::kNonzero);
    const BoundingBox box = nonzero_bounding_box(prepared.scan);
    prepared.scan = crop(prepared.scan, box);
    prepared.seg = crop(raw.seg, box);
    return prepared;
}

namespace {

struct RegionDice {
    double et = 0.0, wt = 0.0, tc = 0.0;
};

RegionDice validation_dice(const ParamSet<float>& params, const NetworkConfig& net_cfg,
                           const std::vector<TrainCase>& val_cases, const SlidingWindowPlan& plan) {
    RegionDice acc;
    for (const auto& c : val_cases) {
        const PredictionResult pred = predict_volume(params, net_cfg, c.scan, plan);
        const RegionMasks mp = regions_from_labels(pred.labels);
        const RegionMasks mr = regions_from_labels(c.seg);
        acc.et += dice_region(mp.et, mr.et);
        acc.wt += dice_region(mp.wt, mr.wt);
        acc.tc += dice_region(mp.tc, mr.tc);
    }
    const double n = double(val_cases.size());
    return {acc.et / n, acc.wt / n, acc.tc / n};
}

}  // namespace

TrainRun train(const TrainConfig& cfg, const NetworkConfig& net_cfg, ParamSet<float>& params,
               const std::vector<TrainCase>& dataset, int val_count) {
    cfg.validate();
    net_cfg.validate();
    if (dataset.empty()) throw std::invalid_argument("dataset is empty");
    if (val_count < 0 || val_count >= int(dataset.size()))
        throw std::invalid_argument("val_count must leave at least one training case");

    std::vector<TrainCase> prepared;
    prepared.reserve(dataset.size());
    for (const auto& c : dataset) prepared.push_back(prepare_case(c));

    const int train_count = int(prepared.size()) - val_count;
    const std::vector<TrainCase> val_cases(prepared.begin() + train_count, prepared.end());
    prepared.resize(size_t(train_count));

    const SlidingWindowPlan val_plan{
        cfg.patch_shape,
        {cfg.patch_shape[0], std::max<int64_t>(1, cfg.patch_shape[1] / 4),
         std::max<int64_t>(1, cfg.patch_shape[2] / 4)}};

    AdamState state(params);
    TrainRun run;
    run.config = cfg;

    const Dims3& ps = cfg.patch_shape;
    const int64_t patch_vox = ps[0] * ps[1] * ps[2];

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double loss_sum = 0.0;
        for (int it = 0; it < cfg.batches_per_epoch; ++it) {
            const uint64_t gi = uint64_t(epoch) * uint64_t(cfg.batches_per_epoch) + uint64_t(it);
            std::mt19937_64 rng(mix_seed(cfg.seed, gi));

            Tensor<float> batch({cfg.batch_size, 3, ps[0], ps[1], ps[2]});
            Tensor<uint8_t> ref({cfg.batch_size, kNumClasses, ps[0], ps[1], ps[2]});
            for (int b = 0; b < cfg.batch_size; ++b) {
                const auto& c = prepared[size_t(uniform_below(rng, train_count))];
                PatchPair pp = sample_patch(c.scan, &c.seg, ps, rng);
                augment_patch(pp.input, pp.labels, cfg.augment, rng);
                std::copy(pp.input.data(), pp.input.data() + 3 * patch_vox,
                          batch.data() + int64_t(b) * 3 * patch_vox);
                Tensor<uint8_t> oh = one_hot(pp.labels);
                std::copy(oh.data(), oh.data() + kNumClasses * patch_vox,
                          ref.data() + int64_t(b) * kNumClasses * patch_vox);
            }

            ActivationTape<float> tape;
            Tensor<float> probs = network_forward(params, net_cfg, batch, NetMode::kTrain, &tape,
                                                  !cfg.freeze_bn_stats);
            DiceLossResult<float> dl = multiple_dice_loss(probs, ref);
            if (!std::isfinite(dl.loss)) throw TrainingDiverged(epoch, it, dl.loss);
            BackwardResult<float> back = network_backward(params, net_cfg, tape, dl.grad_probs);
            adam_step(params, back.grads, state, cfg.learning_rate);
            loss_sum += dl.loss;
        }

        EpochStats es;
        es.mean_loss = loss_sum / double(cfg.batches_per_epoch);
        if (!val_cases.empty()) {
            const RegionDice d = validation_dice(params, net_cfg, val_cases, val_plan);
            es.dice_et = d.et;
            es.dice_wt = d.wt;
            es.dice_tc = d.tc;
        }
        run.epochs.push_back(es);
    }
    return run;
}

void write_train_log(const TrainRun& run, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write train log: " + path);
    out << "epoch\tdice_et\tdice_wt\tdice_tc\tloss\n";
    out.precision(6);
    out << std::fixed;
    for (size_t e = 0; e < run.epochs.size(); ++e) {
        const EpochStats& s = run.epochs[e];
        out << e << "\t" << s.dice_et << "\t" << s.dice_wt << "\t" << s.dice_tc << "\t"
            << s.mean_loss << "\n";
    }
    if (!out) throw std::runtime_error("train log write failed: " + path);
}

CompareResult compare_pretraining(const TrainConfig& base_cfg, const NetworkConfig& net_cfg,
                                  const WeightStore& pretrained_store,
                                  const std::vector<TrainCase>& dataset, int val_count,
                                  int num_seeds) {
    if (num_seeds < 1) throw std::invalid_argument("num_seeds must be >= 1");
    CompareResult result;
    for (int s = 0; s < num_seeds; ++s) {
        TrainConfig cfg = base_cfg;
        cfg.seed = base_cfg.seed + uint64_t(s);
        for (int arm = 0; arm < 2; ++arm) {
            ParamSet<float> params = build_network<float>(net_cfg, cfg.seed);
            if (arm == 0) load_pretrained(params, pretrained_store, true);
            result.runs[size_t(arm)].push_back(train(cfg, net_cfg, params, dataset, val_count));
            if (s == num_seeds - 1) result.last_params[size_t(arm)] = std::move(params);
        }
    }
    return result;
}

PretrainResult pretrain_encoder_2d(const NetworkConfig& net_cfg,
                                   const std::vector<PretrainExample>& examples,
                                   const PretrainConfig& cfg) {
    net_cfg.validate();
    if (examples.empty()) throw std::invalid_argument("no pretraining examples");
    const int64_t H = examples[0].image.dim(2), W = examples[0].image.dim(3);
    if (H % 32 != 0 || W % 32 != 0)
        throw std::invalid_argument("pretraining image H and W must be divisible by 32");
    for (const auto& ex : examples)
        if (ex.label < 0 || ex.label >= cfg.num_classes)
            throw std::invalid_argument("pretraining label out of range");

    ParamSet<float> params = build_network<float>(net_cfg, cfg.seed);
    const int K = cfg.num_classes;
    const int C = net_cfg.encoder_widths()[4];

    // classifier head on global-average-pooled top features
    std::vector<float> head_w(size_t(K) * size_t(C));
    std::vector<float> head_b(size_t(K), 0.0f);
    {
        std::mt19937_64 init_rng(mix_seed(cfg.seed, 0x111));
        const double bound = 1.0 / std::sqrt(double(C));
        for (auto& w : head_w) w = float(uniform_range(init_rng, -bound, bound));
    }
    std::vector<float> m_w(head_w.size(), 0.0f), v_w(head_w.size(), 0.0f);
    std::vector<float> m_b(head_b.size(), 0.0f), v_b(head_b.size(), 0.0f);

    AdamState state(params);
    PretrainResult result;

    const int B = cfg.batch_size;
    for (int step = 0; step < cfg.steps; ++step) {
        std::mt19937_64 rng(mix_seed(cfg.seed, 1000 + uint64_t(step)));
        Tensor<float> batch({B, 3, 1, H, W});
        std::vector<int> labels(static_cast<size_t>(B), 0);
        const int64_t img_n = 3 * H * W;
        for (int b = 0; b < B; ++b) {
            const auto& ex = examples[size_t(uniform_below(rng, int64_t(examples.size())))];
            std::copy(ex.image.data(), ex.image.data() + img_n, batch.data() + int64_t(b) * img_n);
            labels[size_t(b)] = ex.label;
        }

        ActivationTape<float> tape;
        tape.train_mode = true;
        std::array<Tensor<float>, 5> features =
            encoder_forward(params, net_cfg, batch, NetMode::kTrain, &tape, true);
        const Tensor<float>& e4 = features[4];
        const int64_t S = e4.dim(2) * e4.dim(3) * e4.dim(4);

        // global average pool
        std::vector<double> feat(size_t(B) * size_t(C), 0.0);
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                const float* s = e4.data() + (int64_t(b) * C + c) * S;
                double acc = 0.0;
                for (int64_t i = 0; i < S; ++i) acc += s[i];
                feat[size_t(b) * size_t(C) + size_t(c)] = acc / double(S);
            }

        // logits, softmax, cross-entropy
        std::vector<double> logits(size_t(B) * size_t(K));
        for (int b = 0; b < B; ++b)
            for (int k = 0; k < K; ++k) {
                double acc = double(head_b[size_t(k)]);
                for (int c = 0; c < C; ++c)
                    acc += double(head_w[size_t(k) * size_t(C) + size_t(c)]) *
                           feat[size_t(b) * size_t(C) + size_t(c)];
                logits[size_t(b) * size_t(K) + size_t(k)] = acc;
            }
        double loss = 0.0;
        std::vector<double> dlogits(size_t(B) * size_t(K));
        for (int b = 0; b < B; ++b) {
            double mx = logits[size_t(b) * size_t(K)];
            for (int k = 1; k < K; ++k) mx = std::max(mx, logits[size_t(b) * size_t(K) + size_t(k)]);
            double norm = 0.0;
            for (int k = 0; k < K; ++k)
                norm += std::exp(logits[size_t(b) * size_t(K) + size_t(k)] - mx);
            for (int k = 0; k < K; ++k) {
                const double p = std::exp(logits[size_t(b) * size_t(K) + size_t(k)] - mx) / norm;
                dlogits[size_t(b) * size_t(K) + size_t(k)] =
                    (p - (labels[size_t(b)] == k ? 1.0 : 0.0)) / double(B);
                if (labels[size_t(b)] == k) loss -= std::log(std::max(p, 1e-12));
            }
        }
        loss /= double(B);
        result.losses.push_back(loss);

        // head gradients and feature gradient
        std::vector<float> g_w(head_w.size(), 0.0f), g_b(head_b.size(), 0.0f);
        for (int k = 0; k < K; ++k) {
            double gb = 0.0;
            for (int b = 0; b < B; ++b) gb += dlogits[size_t(b) * size_t(K) + size_t(k)];
            g_b[size_t(k)] = float(gb);
            for (int c = 0; c < C; ++c) {
                double gw = 0.0;
                for (int b = 0; b < B; ++b)
                    gw += dlogits[size_t(b) * size_t(K) + size_t(k)] *
                          feat[size_t(b) * size_t(C) + size_t(c)];
                g_w[size_t(k) * size_t(C) + size_t(c)] = float(gw);
            }
        }
        Tensor<float> de4(e4.shape());
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                double df = 0.0;
                for (int k = 0; k < K; ++k)
                    df += dlogits[size_t(b) * size_t(K) + size_t(k)] *
                          double(head_w[size_t(k) * size_t(C) + size_t(c)]);
                const float per_voxel = float(df / double(S));
                float* d = de4.data() + (int64_t(b) * C + c) * S;
                std::fill(d, d + S, per_voxel);
            }

        ParamSet<float> grads(parameter_specs(net_cfg));
        std::array<Tensor<float>, 4> no_skips;
        TapeCursor cursor{tape.conv_inputs.size(), tape.bn_caches.size(), tape.relu_masks.size(),
                          tape.shortcut_in_shapes.size()};
        encoder_backward(params, net_cfg, tape, cursor, std::move(de4), no_skips, grads);
        adam_step(params, grads, state, cfg.learning_rate);

        // Adam on the head, sharing the step counter
        const double c1 = 1.0 - std::pow(AdamState::kBeta1, double(state.t));
        const double c2 = 1.0 - std::pow(AdamState::kBeta2, double(state.t));
        auto adam_vec = [&](std::vector<float>& p, const std::vector<float>& g, std::vector<float>& m,
                            std::vector<float>& v) {
            for (size_t i = 0; i < p.size(); ++i) {
                m[i] = float(AdamState::kBeta1 * m[i] + (1.0 - AdamState::kBeta1) * g[i]);
                v[i] = float(AdamState::kBeta2 * v[i] +
                             (1.0 - AdamState::kBeta2) * double(g[i]) * g[i]);
                p[i] = float(p[i] - cfg.learning_rate * (m[i] / c1) /
                                        (std::sqrt(v[i] / c2) + AdamState::kEps));
            }
        };
        adam_vec(head_w, g_w, m_w, v_w);
        adam_vec(head_b, g_b, m_b, v_b);
    }

    result.store = export_encoder_store(params, net_cfg);
    result.store.add("cls.weight", {K, C}, head_w);
    result.store.add("cls.bias", {K}, head_b);
    return result;
}

}  // namespace voxseg
