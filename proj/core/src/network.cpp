#include "voxseg/network.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace voxseg {

namespace {

constexpr Stride3 kStride1{1, 1, 1};
constexpr Stride3 kStrideHW2{1, 2, 2};
constexpr Pad3 kPad0{0, 0, 0};
constexpr Pad3 kPadHW1{0, 1, 1};     // 1x3x3 kernels keep H,W
constexpr Pad3 kPadHW3{0, 3, 3};     // 1x7x7 stem
constexpr Pad3 kPadDepth1{1, 0, 0};  // 3x1x1 depth layers keep D
constexpr Pad3 kPadUp{0, 1, 1};      // 1x4x4 stride-2 transpose conv doubles H,W

std::string stage_prefix(int stage, int block) {
    return "enc.stage" + std::to_string(stage) + ".block" + std::to_string(block) + ".";
}

void push_bn_specs(std::vector<TensorSpec>& specs, const std::string& prefix, int channels) {
    for (const char* field : {"scale", "shift", "mean", "var"})
        specs.push_back({prefix + field, {channels}});
}

struct EncoderBlockDesc {
    int stage = 0;
    int block = 0;
    int in_ch = 0;
    int out_ch = 0;
    int stride_hw = 1;
    bool needs_shortcut_transform() const { return stride_hw != 1 || in_ch != out_ch; }
};

std::vector<EncoderBlockDesc> encoder_block_table(const NetworkConfig& cfg) {
    std::vector<EncoderBlockDesc> table;
    const auto widths = cfg.encoder_widths();
    int in_ch = widths[0];  // pool output has stem width
    for (int stage = 1; stage <= 4; ++stage) {
        const int out_ch = widths[size_t(stage)];
        const int blocks = cfg.blocks_per_stage[size_t(stage - 1)];
        for (int block = 0; block < blocks; ++block) {
            EncoderBlockDesc d;
            d.stage = stage;
            d.block = block;
            d.in_ch = in_ch;
            d.out_ch = out_ch;
            d.stride_hw = (block == 0 && stage >= 2) ? 2 : 1;
            table.push_back(d);
            in_ch = out_ch;
        }
    }
    return table;
}

struct DecoderBlockDesc {
    int index = 0;
    int in_ch = 0;
    int out_ch = 0;
    int skip_ch = 0;  // 0 = no skip
};

std::vector<DecoderBlockDesc> decoder_block_table(const NetworkConfig& cfg) {
    const auto skips = cfg.skip_widths();
    const auto widths = cfg.encoder_widths();
    std::vector<DecoderBlockDesc> table(5);
    for (int d = 0; d < 5; ++d) {
        table[size_t(d)].index = d;
        table[size_t(d)].in_ch = d == 0 ? widths[4] : cfg.decoder_widths[size_t(d - 1)];
        table[size_t(d)].out_ch = cfg.decoder_widths[size_t(d)];
        table[size_t(d)].skip_ch = skips[size_t(d)];
    }
    return table;
}

std::string dec_prefix(int d) { return "dec.block" + std::to_string(d) + "."; }

}  // namespace

NetworkConfig NetworkConfig::paper() { return NetworkConfig{}; }

NetworkConfig NetworkConfig::tiny() {
    NetworkConfig cfg;
    cfg.blocks_per_stage = {1, 1, 1, 1};
    cfg.base_width = 8;
    cfg.decoder_widths = {32, 16, 8, 4, 2};
    return cfg;
}

std::array<int, 5> NetworkConfig::encoder_widths() const {
    return {base_width, base_width, 2 * base_width, 4 * base_width, 8 * base_width};
}

std::array<int, 5> NetworkConfig::skip_widths() const {
    return {4 * base_width, 2 * base_width, base_width, base_width, 0};
}

void NetworkConfig::validate() const {
    std::vector<std::string> problems;
    if (base_width < 1) problems.push_back("base_width must be >= 1");
    for (size_t i = 0; i < 4; ++i)
        if (blocks_per_stage[i] < 1)
            problems.push_back("blocks_per_stage[" + std::to_string(i) + "] must be >= 1");
    if (in_channels != 3) problems.push_back("in_channels must be 3 (FLAIR,T1c,T2)");
    if (out_classes != 4) problems.push_back("out_classes must be 4");
    for (size_t i = 0; i < 5; ++i)
        if (decoder_widths[i] < 1)
            problems.push_back("decoder_widths[" + std::to_string(i) + "] must be >= 1");
    if (!problems.empty()) {
        std::string msg = "invalid network config:";
        for (const auto& p : problems) msg += "\n  - " + p;
        throw std::invalid_argument(msg);
    }
}

std::vector<TensorSpec> parameter_specs(const NetworkConfig& cfg) {
    cfg.validate();
    std::vector<TensorSpec> specs;
    const auto widths = cfg.encoder_widths();

    specs.push_back({"enc.stage0.block0.conv1.weight", {widths[0], cfg.in_channels, 1, 7, 7}});
    push_bn_specs(specs, "enc.stage0.block0.bn1.", widths[0]);

    for (const auto& b : encoder_block_table(cfg)) {
        const std::string p = stage_prefix(b.stage, b.block);
        specs.push_back({p + "conv1.weight", {b.out_ch, b.in_ch, 1, 3, 3}});
        push_bn_specs(specs, p + "bn1.", b.out_ch);
        specs.push_back({p + "conv2.weight", {b.out_ch, b.out_ch, 1, 3, 3}});
        push_bn_specs(specs, p + "bn2.", b.out_ch);
    }

    for (const auto& d : decoder_block_table(cfg)) {
        const std::string p = dec_prefix(d.index);
        specs.push_back({p + "up.weight", {d.in_ch, d.out_ch, 1, 4, 4}});
        specs.push_back({p + "conv.weight", {d.out_ch, d.out_ch + d.skip_ch, 1, 3, 3}});
        if (cfg.depth_layers_enabled)
            specs.push_back({p + "depth.weight", {d.out_ch, d.out_ch, 3, 1, 1}});
    }

    specs.push_back({"head.weight", {cfg.out_classes, cfg.decoder_widths[4], 1, 1, 1}});
    specs.push_back({"head.bias", {cfg.out_classes}});
    return specs;
}

std::vector<TensorSpec> encoder_specs_2d(const NetworkConfig& cfg) {
    std::vector<TensorSpec> out;
    for (const auto& spec : parameter_specs(cfg)) {
        if (!is_encoder_tensor(spec.name)) continue;
        if (spec.shape.size() == 5) {
            if (spec.shape[2] != 1)
                throw std::logic_error("encoder kernel with depth extent != 1: " + spec.name);
            out.push_back({spec.name, {spec.shape[0], spec.shape[1], spec.shape[3], spec.shape[4]}});
        } else {
            out.push_back(spec);
        }
    }
    return out;
}

template <typename T>
ParamSet<T>::ParamSet(std::vector<TensorSpec> specs) : specs_(std::move(specs)) {
    tensors_.reserve(specs_.size());
    for (size_t i = 0; i < specs_.size(); ++i) {
        if (index_.count(specs_[i].name))
            throw std::invalid_argument("duplicate parameter name: " + specs_[i].name);
        index_[specs_[i].name] = i;
        tensors_.emplace_back(specs_[i].shape);
    }
}

template <typename T>
Tensor<T>& ParamSet<T>::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return tensors_[it->second];
}

template <typename T>
const Tensor<T>& ParamSet<T>::at(const std::string& name) const {
    return const_cast<ParamSet*>(this)->at(name);
}

template <typename T>
bool ParamSet<T>::contains(const std::string& name) const {
    return index_.count(name) != 0;
}

template <typename T>
int64_t ParamSet<T>::total_parameters() const {
    int64_t n = 0;
    for (const auto& t : tensors_) n += t.numel();
    return n;
}

template <typename T>
void ParamSet<T>::audit_shapes() const {
    std::vector<std::string> mismatches;
    for (size_t i = 0; i < specs_.size(); ++i)
        if (tensors_[i].shape() != specs_[i].shape)
            mismatches.push_back(specs_[i].name + ": have " +
                                 Tensor<T>::shape_string(tensors_[i].shape()) + ", expect " +
                                 Tensor<T>::shape_string(specs_[i].shape));
    if (!mismatches.empty()) {
        std::string msg = "shape audit failed:";
        for (const auto& m : mismatches) msg += "\n  - " + m;
        throw std::runtime_error(msg);
    }
}

template class ParamSet<float>;
template class ParamSet<double>;

namespace {

// 53-bit uniform in [0,1); spelled out so builds are bit-stable across
// standard libraries.
double next_uniform(std::mt19937_64& rng) { return double(rng() >> 11) * 0x1.0p-53; }

}  // namespace

template <typename T>
ParamSet<T> build_network(const NetworkConfig& cfg, uint64_t seed) {
    ParamSet<T> params(parameter_specs(cfg));
    std::mt19937_64 rng(seed);
    int64_t head_fan_in = 1;
    for (const auto& spec : params.specs()) {
        Tensor<T>& t = params.at(spec.name);
        if (spec.shape.size() >= 4) {  // convolution kernels
            int64_t fan_in = spec.shape[1];
            for (size_t i = 2; i < spec.shape.size(); ++i) fan_in *= spec.shape[i];
            if (spec.name == "head.weight") head_fan_in = fan_in;
            const double bound = 1.0 / std::sqrt(double(fan_in));
            for (int64_t i = 0; i < t.numel(); ++i)
                t[i] = T((2.0 * next_uniform(rng) - 1.0) * bound);
        } else if (spec.name == "head.bias") {
            const double bound = 1.0 / std::sqrt(double(head_fan_in));
            for (int64_t i = 0; i < t.numel(); ++i)
                t[i] = T((2.0 * next_uniform(rng) - 1.0) * bound);
        } else if (spec.name.ends_with(".scale") || spec.name.ends_with(".var")) {
            t.fill(T(1));
        } else {  // .shift, .mean
            t.fill(T(0));
        }
    }
    return params;
}

template ParamSet<float> build_network<float>(const NetworkConfig&, uint64_t);
template ParamSet<double> build_network<double>(const NetworkConfig&, uint64_t);

template <typename T>
Tensor<T> lift_kernel_2d_to_3d(const Tensor<T>& k2d) {
    if (k2d.rank() != 4) throw std::invalid_argument("lift expects a (Co,Ci,kh,kw) kernel");
    const auto& s = k2d.shape();
    return Tensor<T>({s[0], s[1], 1, s[2], s[3]}, k2d.values());
}

template <typename T>
Tensor<T> squeeze_kernel_3d_to_2d(const Tensor<T>& k3d) {
    if (k3d.rank() != 5 || k3d.dim(2) != 1)
        throw std::invalid_argument("squeeze expects a (Co,Ci,1,kh,kw) kernel");
    const auto& s = k3d.shape();
    return Tensor<T>({s[0], s[1], s[3], s[4]}, k3d.values());
}

template Tensor<float> lift_kernel_2d_to_3d<float>(const Tensor<float>&);
template Tensor<double> lift_kernel_2d_to_3d<double>(const Tensor<double>&);
template Tensor<float> squeeze_kernel_3d_to_2d<float>(const Tensor<float>&);
template Tensor<double> squeeze_kernel_3d_to_2d<double>(const Tensor<double>&);

void load_pretrained(ParamSet<float>& params, const WeightStore& store, bool strict) {
    for (const auto& spec : params.specs()) {
        if (!is_encoder_tensor(spec.name)) continue;
        if (!store.contains(spec.name)) {
            if (strict)
                throw std::runtime_error("pretrained store is missing encoder tensor " + spec.name);
            continue;
        }
        const Tensor<float> src = store.tensor(spec.name);
        if (spec.shape.size() == 5) {
            const std::vector<int64_t> expect2d{spec.shape[0], spec.shape[1], spec.shape[3],
                                                spec.shape[4]};
            if (src.shape() != expect2d)
                throw std::runtime_error("pretrained tensor " + spec.name + " has shape " +
                                         Tensor<float>::shape_string(src.shape()) + ", expected " +
                                         Tensor<float>::shape_string(expect2d) + " (lifts to " +
                                         Tensor<float>::shape_string(spec.shape) + ")");
            params.at(spec.name) = lift_kernel_2d_to_3d(src);
        } else {
            if (src.shape() != spec.shape)
                throw std::runtime_error("pretrained tensor " + spec.name + " has shape " +
                                         Tensor<float>::shape_string(src.shape()) + ", expected " +
                                         Tensor<float>::shape_string(spec.shape));
            params.at(spec.name) = src;
        }
    }
}

WeightStore export_encoder_store(const ParamSet<float>& params, const NetworkConfig& cfg) {
    WeightStore store;
    for (const auto& spec : encoder_specs_2d(cfg)) {
        const Tensor<float>& t = params.at(spec.name);
        if (t.rank() == 5)
            store.add(spec.name, squeeze_kernel_3d_to_2d(t));
        else
            store.add(spec.name, t);
    }
    return store;
}

WeightStore export_full_store(const ParamSet<float>& params) {
    WeightStore store;
    for (const auto& spec : params.specs()) store.add(spec.name, params.at(spec.name));
    return store;
}

void load_full_store(ParamSet<float>& params, const WeightStore& store) {
    for (const auto& spec : params.specs()) {
        const Tensor<float> src = store.tensor(spec.name);  // throws on missing
        if (src.shape() != spec.shape)
            throw std::runtime_error("checkpoint tensor " + spec.name + " has shape " +
                                     Tensor<float>::shape_string(src.shape()) + ", expected " +
                                     Tensor<float>::shape_string(spec.shape));
        params.at(spec.name) = src;
    }
}

namespace {

template <typename T>
std::vector<T>& vec(ParamSet<T>& p, const std::string& name) {
    return p.at(name).values();
}
template <typename T>
const std::vector<T>& vec(const ParamSet<T>& p, const std::string& name) {
    return p.at(name).values();
}

template <typename T>
Tensor<T> apply_bn(ParamSet<T>& params, const std::string& prefix, const Tensor<T>& x, NetMode mode,
                   ActivationTape<T>* tape, bool update_running) {
    if (mode == NetMode::kTrain) {
        BatchNormCache<T> cache;
        Tensor<T> y = batchnorm_forward_train(
            x, vec(params, prefix + "scale"), vec(params, prefix + "shift"),
            vec(params, prefix + "mean"), vec(params, prefix + "var"), tape ? &cache : nullptr,
            update_running);
        if (tape) tape->bn_caches.push_back(std::move(cache));
        return y;
    }
    return batchnorm_forward_eval(x, vec(params, prefix + "scale"), vec(params, prefix + "shift"),
                                  vec(params, prefix + "mean"), vec(params, prefix + "var"));
}

template <typename T>
Tensor<T> apply_relu(const Tensor<T>& x, ActivationTape<T>* tape) {
    if (!tape) return relu_forward(x, nullptr);
    std::vector<uint8_t> mask;
    Tensor<T> y = relu_forward(x, &mask);
    tape->relu_masks.push_back(std::move(mask));
    return y;
}

template <typename T>
Tensor<T> apply_conv(ParamSet<T>& params, const std::string& name, const Tensor<T>& x,
                     Stride3 stride, Pad3 pad, const std::vector<T>& bias, ActivationTape<T>* tape) {
    if (tape) tape->conv_inputs.push_back(x);
    return conv3d_forward(x, params.at(name), bias, stride, pad);
}

template <typename T>
const std::vector<T>& no_bias() {
    static const std::vector<T> empty;
    return empty;
}

}  // namespace

template <typename T>
std::array<Tensor<T>, 5> encoder_forward(ParamSet<T>& params, const NetworkConfig& cfg,
                                         const Tensor<T>& batch, NetMode mode,
                                         ActivationTape<T>* tape, bool update_running) {
    // stem
    Tensor<T> x = apply_conv(params, "enc.stage0.block0.conv1.weight", batch, kStrideHW2, kPadHW3,
                             no_bias<T>(), tape);
    x = apply_bn(params, "enc.stage0.block0.bn1.", x, mode, tape, update_running);
    Tensor<T> e0 = apply_relu(x, tape);

    // pool (the single 1x2x2 pooling layer)
    Tensor<T> cur;
    if (tape) {
        tape->pool_in_shape = e0.shape();
        cur = maxpool_hw2_forward(e0, &tape->pool_argmax);
    } else {
        cur = maxpool_hw2_forward(e0, nullptr);
    }

    std::array<Tensor<T>, 5> features;
    features[0] = std::move(e0);
    for (const auto& b : encoder_block_table(cfg)) {
        const std::string p = stage_prefix(b.stage, b.block);
        const Stride3 s1{1, b.stride_hw, b.stride_hw};
        Tensor<T> h = apply_conv(params, p + "conv1.weight", cur, s1, kPadHW1, no_bias<T>(), tape);
        h = apply_bn(params, p + "bn1.", h, mode, tape, update_running);
        h = apply_relu(h, tape);
        h = apply_conv(params, p + "conv2.weight", h, kStride1, kPadHW1, no_bias<T>(), tape);
        h = apply_bn(params, p + "bn2.", h, mode, tape, update_running);

        if (b.needs_shortcut_transform()) {
            if (tape) tape->shortcut_in_shapes.push_back(cur.shape());
            Tensor<T> sc = shortcut_forward(cur, b.out_ch, b.stride_hw);
            add_inplace(h, sc);
        } else {
            add_inplace(h, cur);
        }
        cur = apply_relu(h, tape);
        if (b.block == cfg.blocks_per_stage[size_t(b.stage - 1)] - 1)
            features[size_t(b.stage)] = cur;
    }
    return features;
}

template std::array<Tensor<float>, 5> encoder_forward<float>(ParamSet<float>&, const NetworkConfig&,
                                                             const Tensor<float>&, NetMode,
                                                             ActivationTape<float>*, bool);
template std::array<Tensor<double>, 5> encoder_forward<double>(ParamSet<double>&,
                                                               const NetworkConfig&,
                                                               const Tensor<double>&, NetMode,
                                                               ActivationTape<double>*, bool);

template <typename T>
Tensor<T> encoder_backward(const ParamSet<T>& params, const NetworkConfig& cfg,
                           const ActivationTape<T>& tape, TapeCursor& cur, Tensor<T> g,
                           std::array<Tensor<T>, 4>& skip_grads, ParamSet<T>& G) {
    auto pop_conv_input = [&]() -> const Tensor<T>& { return tape.conv_inputs[--cur.conv]; };
    auto pop_relu = [&]() -> const std::vector<uint8_t>& { return tape.relu_masks[--cur.relu]; };
    auto pop_bn = [&]() -> const BatchNormCache<T>& { return tape.bn_caches[--cur.bn]; };

    const auto blocks = encoder_block_table(cfg);
    for (auto it = blocks.rbegin(); it != blocks.rend(); ++it) {
        const auto& b = *it;
        const bool stage_end = (b.block == cfg.blocks_per_stage[size_t(b.stage - 1)] - 1);
        if (stage_end && b.stage <= 3 && !skip_grads[size_t(b.stage)].empty())
            add_inplace(g, skip_grads[size_t(b.stage)]);

        const std::string p = stage_prefix(b.stage, b.block);
        g = relu_backward(g, pop_relu());  // post-add rectifier

        Tensor<T> g_main;
        {
            const BatchNormCache<T>& c2 = pop_bn();
            BatchNormGrads<T> bg = batchnorm_backward(g, vec(params, p + "bn2.scale"), c2);
            G.at(p + "bn2.scale") = Tensor<T>({b.out_ch}, std::move(bg.scale));
            G.at(p + "bn2.shift") = Tensor<T>({b.out_ch}, std::move(bg.shift));
            g_main = std::move(bg.input);
        }
        {
            const Tensor<T>& x_in = pop_conv_input();
            ConvGrads<T> cg =
                conv3d_backward(x_in, params.at(p + "conv2.weight"), g_main, kStride1, kPadHW1, false);
            G.at(p + "conv2.weight") = std::move(cg.kernel);
            g_main = std::move(cg.input);
        }
        g_main = relu_backward(g_main, pop_relu());
        {
            const BatchNormCache<T>& c1 = pop_bn();
            BatchNormGrads<T> bg = batchnorm_backward(g_main, vec(params, p + "bn1.scale"), c1);
            G.at(p + "bn1.scale") = Tensor<T>({b.out_ch}, std::move(bg.scale));
            G.at(p + "bn1.shift") = Tensor<T>({b.out_ch}, std::move(bg.shift));
            g_main = std::move(bg.input);
        }
        const Stride3 s1{1, b.stride_hw, b.stride_hw};
        {
            const Tensor<T>& x_in = pop_conv_input();
            ConvGrads<T> cg =
                conv3d_backward(x_in, params.at(p + "conv1.weight"), g_main, s1, kPadHW1, false);
            G.at(p + "conv1.weight") = std::move(cg.kernel);
            g_main = std::move(cg.input);
        }

        if (b.needs_shortcut_transform()) {
            const std::vector<int64_t>& in_shape = tape.shortcut_in_shapes[--cur.shortcut];
            Tensor<T> g_short = shortcut_backward(g, int64_t(b.in_ch), b.stride_hw, in_shape);
            add_inplace(g_main, g_short);
        } else {
            add_inplace(g_main, g);
        }
        g = std::move(g_main);
    }

    // pool, then the stem (whose output may also feed a decoder skip)
    g = maxpool_hw2_backward(g, tape.pool_argmax, tape.pool_in_shape);
    if (!skip_grads[0].empty()) add_inplace(g, skip_grads[0]);

    g = relu_backward(g, pop_relu());
    {
        const BatchNormCache<T>& c = pop_bn();
        BatchNormGrads<T> bg = batchnorm_backward(g, vec(params, "enc.stage0.block0.bn1.scale"), c);
        const int w0 = cfg.encoder_widths()[0];
        G.at("enc.stage0.block0.bn1.scale") = Tensor<T>({w0}, std::move(bg.scale));
        G.at("enc.stage0.block0.bn1.shift") = Tensor<T>({w0}, std::move(bg.shift));
        g = std::move(bg.input);
    }
    {
        const Tensor<T>& x_in = pop_conv_input();
        ConvGrads<T> cg = conv3d_backward(x_in, params.at("enc.stage0.block0.conv1.weight"), g,
                                          kStrideHW2, kPadHW3, false);
        G.at("enc.stage0.block0.conv1.weight") = std::move(cg.kernel);
        g = std::move(cg.input);
    }
    return g;  // gradient w.r.t. the network input
}

template Tensor<float> encoder_backward<float>(const ParamSet<float>&, const NetworkConfig&,
                                               const ActivationTape<float>&, TapeCursor&,
                                               Tensor<float>, std::array<Tensor<float>, 4>&,
                                               ParamSet<float>&);
template Tensor<double> encoder_backward<double>(const ParamSet<double>&, const NetworkConfig&,
                                                 const ActivationTape<double>&, TapeCursor&,
                                                 Tensor<double>, std::array<Tensor<double>, 4>&,
                                                 ParamSet<double>&);

template <typename T>
Tensor<T> network_forward(ParamSet<T>& params, const NetworkConfig& cfg, const Tensor<T>& batch,
                          NetMode mode, ActivationTape<T>* tape, bool update_running) {
    cfg.validate();
    params.audit_shapes();
    if (batch.rank() != 5) throw std::invalid_argument("network input must be (B,C,D,H,W)");
    if (batch.dim(1) != cfg.in_channels)
        throw std::invalid_argument("network input has " + std::to_string(batch.dim(1)) +
                                    " channels, config expects " + std::to_string(cfg.in_channels));
    if (batch.dim(3) % 32 != 0 || batch.dim(4) % 32 != 0)
        throw std::invalid_argument(
            "input H and W must be divisible by 32 (five 2x downsamplings); got " +
            std::to_string(batch.dim(3)) + "x" + std::to_string(batch.dim(4)));
    if (mode == NetMode::kEval) tape = nullptr;
    if (tape) {
        *tape = ActivationTape<T>{};
        tape->train_mode = true;
    }

    std::array<Tensor<T>, 5> features =
        encoder_forward(params, cfg, batch, mode, tape, update_running);

    Tensor<T> d = features[4];
    for (const auto& blk : decoder_block_table(cfg)) {
        const std::string p = dec_prefix(blk.index);
        if (tape) tape->conv_inputs.push_back(d);
        Tensor<T> up = conv_transpose3d_forward(d, params.at(p + "up.weight"), kStrideHW2, kPadUp);
        Tensor<T> merged =
            blk.skip_ch > 0 ? concat_channels(up, features[size_t(3 - blk.index)]) : std::move(up);
        Tensor<T> c =
            apply_conv(params, p + "conv.weight", merged, kStride1, kPadHW1, no_bias<T>(), tape);
        if (cfg.depth_layers_enabled)
            c = apply_conv(params, p + "depth.weight", c, kStride1, kPadDepth1, no_bias<T>(), tape);
        d = apply_relu(c, tape);
    }

    Tensor<T> logits =
        apply_conv(params, "head.weight", d, kStride1, kPad0, params.at("head.bias").values(), tape);
    Tensor<T> probs = softmax_channels(logits);
    if (tape) tape->probs = probs;
    return probs;
}

template Tensor<float> network_forward<float>(ParamSet<float>&, const NetworkConfig&,
                                              const Tensor<float>&, NetMode,
                                              ActivationTape<float>*, bool);
template Tensor<double> network_forward<double>(ParamSet<double>&, const NetworkConfig&,
                                                const Tensor<double>&, NetMode,
                                                ActivationTape<double>*, bool);

template <typename T>
Tensor<T> network_forward_eval(const ParamSet<T>& params, const NetworkConfig& cfg,
                               const Tensor<T>& batch) {
    // eval mode never mutates the parameter set
    return network_forward(const_cast<ParamSet<T>&>(params), cfg, batch, NetMode::kEval,
                           static_cast<ActivationTape<T>*>(nullptr));
}

template Tensor<float> network_forward_eval<float>(const ParamSet<float>&, const NetworkConfig&,
                                                   const Tensor<float>&);
template Tensor<double> network_forward_eval<double>(const ParamSet<double>&, const NetworkConfig&,
                                                     const Tensor<double>&);

template <typename T>
BackwardResult<T> network_backward(const ParamSet<T>& params, const NetworkConfig& cfg,
                                   const ActivationTape<T>& tape, const Tensor<T>& grad_probs) {
    if (!tape.train_mode) throw std::runtime_error("network_backward requires a train-mode tape");
    if (!grad_probs.same_shape(tape.probs))
        throw std::invalid_argument("grad_probs shape mismatch");

    BackwardResult<T> result;
    result.grads = ParamSet<T>(parameter_specs(cfg));
    ParamSet<T>& G = result.grads;

    TapeCursor cur{tape.conv_inputs.size(), tape.bn_caches.size(), tape.relu_masks.size(),
                   tape.shortcut_in_shapes.size()};
    auto pop_conv_input = [&]() -> const Tensor<T>& { return tape.conv_inputs[--cur.conv]; };
    auto pop_relu = [&]() -> const std::vector<uint8_t>& { return tape.relu_masks[--cur.relu]; };

    Tensor<T> g = softmax_channels_backward(grad_probs, tape.probs);

    {
        const Tensor<T>& x_in = pop_conv_input();
        ConvGrads<T> cg = conv3d_backward(x_in, params.at("head.weight"), g, kStride1, kPad0, true);
        G.at("head.weight") = std::move(cg.kernel);
        G.at("head.bias") = Tensor<T>({cfg.out_classes}, std::move(cg.bias));
        g = std::move(cg.input);
    }

    const auto dec_table = decoder_block_table(cfg);
    std::array<Tensor<T>, 4> skip_grads;  // for e0..e3
    for (int d = 4; d >= 0; --d) {
        const auto& blk = dec_table[size_t(d)];
        const std::string p = dec_prefix(d);
        g = relu_backward(g, pop_relu());
        if (cfg.depth_layers_enabled) {
            const Tensor<T>& x_in = pop_conv_input();
            ConvGrads<T> cg =
                conv3d_backward(x_in, params.at(p + "depth.weight"), g, kStride1, kPadDepth1, false);
            G.at(p + "depth.weight") = std::move(cg.kernel);
            g = std::move(cg.input);
        }
        {
            const Tensor<T>& x_in = pop_conv_input();
            ConvGrads<T> cg =
                conv3d_backward(x_in, params.at(p + "conv.weight"), g, kStride1, kPadHW1, false);
            G.at(p + "conv.weight") = std::move(cg.kernel);
            g = std::move(cg.input);
        }
        Tensor<T> g_up;
        if (blk.skip_ch > 0) {
            Tensor<T> g_skip;
            split_channels(g, int64_t(blk.out_ch), g_up, g_skip);
            skip_grads[size_t(3 - d)] = std::move(g_skip);
        } else {
            g_up = std::move(g);
        }
        {
            const Tensor<T>& x_in = pop_conv_input();
            ConvGrads<T> cg =
                conv_transpose3d_backward(x_in, params.at(p + "up.weight"), g_up, kStrideHW2, kPadUp);
            G.at(p + "up.weight") = std::move(cg.kernel);
            g = std::move(cg.input);
        }
    }

    result.grad_input = encoder_backward(params, cfg, tape, cur, std::move(g), skip_grads, G);
    return result;
}

template BackwardResult<float> network_backward<float>(const ParamSet<float>&, const NetworkConfig&,
                                                       const ActivationTape<float>&,
                                                       const Tensor<float>&);
template BackwardResult<double> network_backward<double>(const ParamSet<double>&,
                                                         const NetworkConfig&,
                                                         const ActivationTape<double>&,
                                                         const Tensor<double>&);

double gradient_check(ParamSet<double>& params, const NetworkConfig& cfg,
                      const Tensor<double>& batch, const LossFn& loss, int probe_count,
                      uint64_t seed) {
    ActivationTape<double> tape;
    Tensor<double> probs = network_forward(params, cfg, batch, NetMode::kTrain, &tape, false);
    auto [base_loss, grad_probs] = loss(probs);
    (void)base_loss;
    BackwardResult<double> back = network_backward(params, cfg, tape, grad_probs);

    std::vector<std::string> trainable;
    for (const auto& spec : params.specs())
        if (is_trainable(spec.name)) trainable.push_back(spec.name);

    std::vector<int64_t> cumulative{0};
    for (const auto& name : trainable)
        cumulative.push_back(cumulative.back() + params.at(name).numel());
    const int64_t total = cumulative.back();

    auto loss_at = [&]() -> double {
        Tensor<double> p = network_forward(params, cfg, batch, NetMode::kTrain,
                                           static_cast<ActivationTape<double>*>(nullptr), false);
        return loss(p).first;
    };

    const double h = 1e-5;
    double max_rel = 0.0;
    std::mt19937_64 rng(seed);
    for (int probe = 0; probe < probe_count; ++probe) {
        const int64_t flat = int64_t(rng() % uint64_t(total));
        size_t which = 0;
        while (cumulative[which + 1] <= flat) ++which;
        const std::string& name = trainable[which];
        const int64_t offset = flat - cumulative[which];

        Tensor<double>& t = params.at(name);
        const double original = t[offset];
        t[offset] = original + h;
        const double lp = loss_at();
        t[offset] = original - h;
        const double lm = loss_at();
        t[offset] = original;

        const double fd = (lp - lm) / (2.0 * h);
        const double an = back.grads.at(name)[offset];
        const double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
        max_rel = std::max(max_rel, std::abs(fd - an) / denom);
    }
    return max_rel;
}

}  // namespace voxseg
