#include "commands.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>

#include "manifest.hpp"
#include "voxseg/inference.hpp"
#include "voxseg/metrics.hpp"
#include "voxseg/nifti.hpp"
#include "voxseg/preprocess.hpp"
#include "voxseg/synth.hpp"
#include "voxseg/training.hpp"

namespace fs = std::filesystem;

namespace voxseg::cli {

namespace {

Dims3 parse_triple(const std::string& text, const char* what) {
    Dims3 out;
    std::stringstream ss(text);
    std::string tok;
    int i = 0;
    while (std::getline(ss, tok, ',')) {
        if (i >= 3) throw std::invalid_argument(std::string(what) + " needs three components");
        out[size_t(i++)] = std::stoll(tok);
    }
    if (i != 3) throw std::invalid_argument(std::string(what) + " needs three components");
    return out;
}

Spacing3 parse_spacing(const std::string& text) {
    Spacing3 out;
    std::stringstream ss(text);
    std::string tok;
    int i = 0;
    while (std::getline(ss, tok, ',')) {
        if (i >= 3) throw std::invalid_argument("spacing needs three components");
        out[size_t(i++)] = std::stod(tok);
    }
    if (i != 3) throw std::invalid_argument("spacing needs three components");
    return out;
}

// Network/mode flags shared by pretrain, train, predict and compare.
struct NetFlags {
    std::string net = "paper";  // paper | tiny
    std::string mode = "3d";    // 3d | 2d (2d disables depth layers)

    NetworkConfig config() const {
        NetworkConfig cfg;
        if (net == "paper") cfg = NetworkConfig::paper();
        else if (net == "tiny") cfg = NetworkConfig::tiny();
        else throw std::invalid_argument("unknown --net '" + net + "' (paper|tiny)");
        if (mode == "2d") cfg.depth_layers_enabled = false;
        else if (mode != "3d") throw std::invalid_argument("unknown --mode '" + mode + "' (2d|3d)");
        return cfg;
    }

    void add_to(CLI::App* cmd) {
        cmd->add_option("--net", net, "network size: paper|tiny")->capture_default_str();
        cmd->add_option("--mode", mode, "2d (depth layers off) or 3d")->capture_default_str();
    }
};

struct TrainFlags {
    NetFlags net;
    std::string patch;  // empty -> mode default
    int batch_size = 0;  // 0 -> mode default
    double lr = 1e-3;
    int epochs = 50;
    int batches_per_epoch = 100;
    uint64_t seed = 0;
    int val_count = 1;
    bool freeze_bn = false;
    bool no_reflect = false, no_elastic = false, no_noise = false, no_blur = false;
    double elastic_sigma = 2.0, noise_sigma_max = 0.1;
    double blur_sigma_min = 0.5, blur_sigma_max = 1.5;

    void add_to(CLI::App* cmd) {
        net.add_to(cmd);
        cmd->add_option("--patch", patch, "patch D,H,W (default 24,128,128 3d / 1,128,128 2d)");
        cmd->add_option("--batch", batch_size, "batch size (default 24 3d / 64 2d)");
        cmd->add_option("--lr", lr, "Adam learning rate")->capture_default_str();
        cmd->add_option("--epochs", epochs, "training epochs")->capture_default_str();
        cmd->add_option("--batches-per-epoch", batches_per_epoch, "batches per epoch")
            ->capture_default_str();
        cmd->add_option("--seed", seed, "RNG seed")->capture_default_str();
        cmd->add_option("--val", val_count, "patients held out for validation")
            ->capture_default_str();
        cmd->add_flag("--freeze-bn", freeze_bn, "freeze batchnorm running statistics");
        cmd->add_flag("--no-reflect", no_reflect, "disable reflection augmentation");
        cmd->add_flag("--no-elastic", no_elastic, "disable elastic deformation");
        cmd->add_flag("--no-noise", no_noise, "disable additive noise");
        cmd->add_flag("--no-blur", no_blur, "disable Gaussian blur");
        cmd->add_option("--elastic-sigma", elastic_sigma, "elastic node displacement (voxels)")
            ->capture_default_str();
        cmd->add_option("--noise-sigma-max", noise_sigma_max, "max noise sigma")
            ->capture_default_str();
        cmd->add_option("--blur-sigma-min", blur_sigma_min, "min blur sigma (voxels)")
            ->capture_default_str();
        cmd->add_option("--blur-sigma-max", blur_sigma_max, "max blur sigma (voxels)")
            ->capture_default_str();
    }

    TrainConfig config() const {
        TrainConfig cfg;
        const bool is_2d = net.mode == "2d";
        cfg.patch_shape = patch.empty() ? (is_2d ? Dims3{1, 128, 128} : Dims3{24, 128, 128})
                                        : parse_triple(patch, "--patch");
        cfg.batch_size = batch_size > 0 ? batch_size : (is_2d ? 64 : 24);
        cfg.learning_rate = lr;
        cfg.epochs = epochs;
        cfg.batches_per_epoch = batches_per_epoch;
        cfg.seed = seed;
        cfg.freeze_bn_stats = freeze_bn;
        cfg.augment.reflections = !no_reflect;
        cfg.augment.elastic = !no_elastic;
        cfg.augment.noise = !no_noise;
        cfg.augment.blur = !no_blur;
        cfg.augment.elastic_sigma_voxels = elastic_sigma;
        cfg.augment.noise_sigma_max = noise_sigma_max;
        cfg.augment.blur_sigma_min = blur_sigma_min;
        cfg.augment.blur_sigma_max = blur_sigma_max;
        return cfg;
    }

    void describe(nlohmann::ordered_json& j) const {
        const TrainConfig cfg = config();
        j["net"] = net.net;
        j["mode"] = net.mode;
        j["patch"] = {cfg.patch_shape[0], cfg.patch_shape[1], cfg.patch_shape[2]};
        j["batch_size"] = cfg.batch_size;
        j["learning_rate"] = cfg.learning_rate;
        j["epochs"] = cfg.epochs;
        j["batches_per_epoch"] = cfg.batches_per_epoch;
        j["val"] = val_count;
        j["freeze_bn"] = cfg.freeze_bn_stats;
        j["augment"] = {{"reflections", cfg.augment.reflections},
                        {"elastic", cfg.augment.elastic},
                        {"noise", cfg.augment.noise},
                        {"blur", cfg.augment.blur},
                        {"elastic_sigma", cfg.augment.elastic_sigma_voxels},
                        {"noise_sigma_max", cfg.augment.noise_sigma_max},
                        {"blur_sigma_min", cfg.augment.blur_sigma_min},
                        {"blur_sigma_max", cfg.augment.blur_sigma_max}};
    }
};

void ensure_out_dir(const std::string& dir) {
    fs::create_directories(dir);
    if (!fs::is_directory(dir)) throw std::runtime_error("cannot create output dir: " + dir);
}

// Prediction in the original frame: normalize, crop, predict, paste back.
SegmentationMap predict_full_frame(const ParamSet<float>& params, const NetworkConfig& net_cfg,
                                   const MultiModalScan& raw, const SlidingWindowPlan& plan,
                                   ClassProbabilityMap* probs_out) {
    MultiModalScan norm;
    norm.patient_id = raw.patient_id;
    for (int c = 0; c < 3; ++c)
        norm.channels[size_t(c)] = zscore_normalize(raw.channels[size_t(c)], NormRegion::kNonzero);
    const BoundingBox box = nonzero_bounding_box(norm);
    const MultiModalScan cropped = crop(norm, box);

    const PredictionResult pred = predict_volume(params, net_cfg, cropped, plan);

    const Dims3 dims = raw.dims();
    SegmentationMap full(dims, raw.spacing());
    for (int64_t z = box.z0; z < box.z1; ++z)
        for (int64_t y = box.y0; y < box.y1; ++y)
            for (int64_t x = box.x0; x < box.x1; ++x)
                full.at(z, y, x) = pred.labels.at(z - box.z0, y - box.y0, x - box.x0);

    if (probs_out) {
        probs_out->dims = dims;
        const int64_t n = dims[0] * dims[1] * dims[2];
        probs_out->probs.assign(size_t(4 * n), 0.0f);
        // outside the brain box the prediction is background with certainty
        for (int64_t i = 0; i < n; ++i) probs_out->probs[size_t(i)] = 1.0f;
        const Dims3 cd = pred.probs.dims;
        const int64_t cn = cd[0] * cd[1] * cd[2];
        for (int cls = 0; cls < 4; ++cls)
            for (int64_t z = box.z0; z < box.z1; ++z)
                for (int64_t y = box.y0; y < box.y1; ++y)
                    for (int64_t x = box.x0; x < box.x1; ++x) {
                        const int64_t src =
                            cls * cn +
                            ((z - box.z0) * cd[1] + (y - box.y0)) * cd[2] + (x - box.x0);
                        const int64_t dst = cls * n + (z * dims[1] + y) * dims[2] + x;
                        probs_out->probs[size_t(dst)] = pred.probs.probs[size_t(src)];
                    }
    }
    return full;
}

// ---- synth ----

struct SynthOpts {
    int cases = 10;
    std::string dims = "48,64,64";
    uint64_t seed = 0;
    std::string spacing = "1,1,1";
    double tumor_scale = 1.0;
    std::string out;
};

void run_synth(const SynthOpts& o) {
    ManifestWriter manifest("synth");
    PhantomSpec spec;
    spec.count = o.cases;
    spec.dims = parse_triple(o.dims, "--dims");
    spec.seed = o.seed;
    spec.spacing = parse_spacing(o.spacing);
    spec.tumor_scale = o.tumor_scale;
    manifest.set_seed(o.seed);
    manifest.config() = {{"cases", o.cases},
                         {"dims", {spec.dims[0], spec.dims[1], spec.dims[2]}},
                         {"spacing", {spec.spacing[0], spec.spacing[1], spec.spacing[2]}},
                         {"tumor_scale", o.tumor_scale}};

    const std::vector<PhantomCase> cases = generate(spec);
    ensure_out_dir(o.out);
    save_dataset(cases, o.out);
    for (const auto& c : cases) manifest.add_output(o.out + "/" + c.scan.patient_id);
    manifest.write((fs::path(o.out) / "manifest.json").string());
}

// ---- preprocess ----

struct PreprocessOpts {
    std::string flair, t1c, t2, mask, seg;
    std::string axes = "z,y,x";
    std::string reference = "t1c";
    std::string target_spacing = "1,1,1";
    std::string out;
};

void run_preprocess(const PreprocessOpts& o) {
    std::vector<std::string> missing;
    if (o.flair.empty()) missing.push_back("flair");
    if (o.t1c.empty()) missing.push_back("t1c");
    if (o.t2.empty()) missing.push_back("t2");
    if (!missing.empty()) {
        std::string msg = "missing modality:";
        for (const auto& m : missing) msg += " " + m;
        throw std::invalid_argument(msg);
    }

    ManifestWriter manifest("preprocess");
    manifest.config() = {{"axes", o.axes},
                         {"reference", o.reference},
                         {"target_spacing", o.target_spacing},
                         {"mask", o.mask},
                         {"seg", o.seg}};
    const AxisSpec axes = AxisSpec::parse(o.axes);
    const Spacing3 target = parse_spacing(o.target_spacing);

    const std::array<std::string, 3> paths{o.flair, o.t1c, o.t2};
    const std::array<std::string, 3> names{"flair", "t1c", "t2"};
    int ref_index = -1;
    for (int i = 0; i < 3; ++i)
        if (o.reference == names[size_t(i)]) ref_index = i;
    if (ref_index < 0)
        throw std::invalid_argument("--reference must be one of flair|t1c|t2");

    std::array<Volume3D, 3> vols;
    for (int i = 0; i < 3; ++i) {
        manifest.add_input(paths[size_t(i)]);
        vols[size_t(i)] = reorient(read_volume(paths[size_t(i)]), axes);
    }
    if (!o.mask.empty()) {
        manifest.add_input(o.mask);
        const Volume3D mask = reorient(read_volume(o.mask), axes);
        for (auto& v : vols) v = apply_mask(v, mask);
    }

    // rigid co-registration of the moving modalities onto the reference grid
    nlohmann::ordered_json reg_log = nlohmann::ordered_json::array();
    for (int i = 0; i < 3; ++i) {
        if (i == ref_index) continue;
        const RegistrationResult r = rigid_register(vols[size_t(i)], vols[size_t(ref_index)]);
        vols[size_t(i)] = apply_rigid(vols[size_t(i)], r.transform);
        reg_log.push_back({{"modality", names[size_t(i)]},
                           {"ncc", r.ncc},
                           {"converged", r.converged},
                           {"rotation", {r.transform.rotation[0], r.transform.rotation[1],
                                         r.transform.rotation[2]}},
                           {"translation", {r.transform.translation[0], r.transform.translation[1],
                                            r.transform.translation[2]}}});
    }
    manifest.config()["registration"] = reg_log;

    for (auto& v : vols) v = resample_nn(v, target);
    for (auto& v : vols) v = zscore_normalize(v, NormRegion::kNonzero);

    MultiModalScan scan;
    scan.patient_id = "preprocessed";
    scan.channels = vols;
    const BoundingBox box = nonzero_bounding_box(scan);
    scan = crop(scan, box);

    ensure_out_dir(o.out);
    for (int i = 0; i < 3; ++i) {
        const std::string path = (fs::path(o.out) / (names[size_t(i)] + ".nii")).string();
        write_nifti(scan.channels[size_t(i)], path);
        manifest.add_output(path);
    }
    if (!o.seg.empty()) {
        manifest.add_input(o.seg);
        SegmentationMap seg = reorient(read_labels(o.seg), axes);
        seg = resample_nn(seg, target);
        const SegmentationMap seg_cropped = crop(seg, box);
        const std::string path = (fs::path(o.out) / "seg.nii").string();
        write_nifti(seg_cropped, path);
        manifest.add_output(path);
    }
    manifest.write((fs::path(o.out) / "manifest.json").string());
}

// ---- pretrain ----

struct PretrainOpts {
    NetFlags net;
    int cases = 8;
    std::string dims = "32,64,64";
    int steps = 300;
    int batch = 16;
    double lr = 1e-3;
    uint64_t seed = 0;
    bool force = false;
    std::string out;
};

void run_pretrain(const PretrainOpts& o) {
    if (!o.force && (fs::exists(o.out + ".manifest") || fs::exists(o.out + ".blob")))
        throw std::invalid_argument("store '" + o.out + "' already exists (use --force)");

    ManifestWriter manifest("pretrain");
    manifest.set_seed(o.seed);
    PhantomSpec spec;
    spec.count = o.cases;
    spec.dims = parse_triple(o.dims, "--dims");
    spec.seed = o.seed;
    manifest.config() = {{"net", o.net.net},
                         {"cases", o.cases},
                         {"dims", {spec.dims[0], spec.dims[1], spec.dims[2]}},
                         {"steps", o.steps},
                         {"batch", o.batch},
                         {"learning_rate", o.lr}};

    NetworkConfig net_cfg = o.net.config();
    const std::vector<PretrainExample> examples = generate_pretrain_2d(spec);
    PretrainConfig pcfg;
    pcfg.steps = o.steps;
    pcfg.batch_size = o.batch;
    pcfg.learning_rate = o.lr;
    pcfg.seed = o.seed;
    const PretrainResult result = pretrain_encoder_2d(net_cfg, examples, pcfg);

    if (const fs::path parent = fs::path(o.out).parent_path(); !parent.empty())
        fs::create_directories(parent);
    result.store.save(o.out);
    manifest.add_output(o.out + ".manifest");
    manifest.add_output(o.out + ".blob");
    manifest.config()["first_loss"] = result.losses.front();
    manifest.config()["last_loss"] = result.losses.back();
    manifest.write(o.out + ".run.json");
}

// ---- train ----

struct TrainOpts {
    TrainFlags flags;
    std::string data;
    std::string pretrained;
    bool random_init = false;
    std::string out;
};

void run_train(const TrainOpts& o) {
    if (!o.pretrained.empty() && o.random_init)
        throw std::invalid_argument("--pretrained and --random-init are mutually exclusive");

    ManifestWriter manifest("train");
    manifest.set_seed(o.flags.seed);
    manifest.add_input(o.data);
    o.flags.describe(manifest.config());
    manifest.config()["pretrained"] = o.pretrained;

    const NetworkConfig net_cfg = o.flags.net.config();
    const TrainConfig cfg = o.flags.config();
    const std::vector<TrainCase> dataset = load_dataset(o.data);

    ParamSet<float> params = build_network<float>(net_cfg, cfg.seed);
    if (!o.pretrained.empty()) {
        manifest.add_input(o.pretrained + ".manifest");
        load_pretrained(params, WeightStore::load(o.pretrained), true);
    }

    const TrainRun run = train(cfg, net_cfg, params, dataset, o.flags.val_count);

    ensure_out_dir(o.out);
    const std::string log_path = (fs::path(o.out) / "train_log.tsv").string();
    write_train_log(run, log_path);
    const std::string store_prefix = (fs::path(o.out) / "weights").string();
    export_full_store(params).save(store_prefix);
    manifest.add_output(log_path);
    manifest.add_output(store_prefix + ".manifest");
    manifest.add_output(store_prefix + ".blob");
    manifest.write((fs::path(o.out) / "manifest.json").string());
}

// ---- predict ----

struct PredictOpts {
    NetFlags net;
    std::string data;
    std::string weights;
    std::string patch;
    std::string steps = "24,32,32";
    bool probs = false;
    std::string out;
};

void run_predict(const PredictOpts& o) {
    ManifestWriter manifest("predict");
    manifest.add_input(o.data);
    manifest.add_input(o.weights + ".manifest");
    const NetworkConfig net_cfg = o.net.config();

    SlidingWindowPlan plan;
    plan.patch_shape = o.patch.empty()
                           ? (o.net.mode == "2d" ? Dims3{1, 128, 128} : Dims3{24, 128, 128})
                           : parse_triple(o.patch, "--patch");
    plan.steps = parse_triple(o.steps, "--steps");
    manifest.config() = {{"net", o.net.net},
                         {"mode", o.net.mode},
                         {"patch", {plan.patch_shape[0], plan.patch_shape[1], plan.patch_shape[2]}},
                         {"steps", {plan.steps[0], plan.steps[1], plan.steps[2]}},
                         {"probs", o.probs}};

    ParamSet<float> params = build_network<float>(net_cfg, 0);
    load_full_store(params, WeightStore::load(o.weights));

    const std::vector<TrainCase> dataset = load_dataset(o.data, false);
    ensure_out_dir(o.out);
    const std::array<std::string, 4> prob_names{"prob_background.nii", "prob_core.nii",
                                                "prob_edema.nii", "prob_enhancing.nii"};
    for (const auto& c : dataset) {
        const fs::path pdir = fs::path(o.out) / c.scan.patient_id;
        fs::create_directories(pdir);
        ClassProbabilityMap probs;
        const SegmentationMap labels =
            predict_full_frame(params, net_cfg, c.scan, plan, o.probs ? &probs : nullptr);
        write_nifti(labels, (pdir / "seg.nii").string());
        manifest.add_output((pdir / "seg.nii").string());
        if (o.probs) {
            const int64_t n = labels.voxel_count();
            for (int cls = 0; cls < 4; ++cls) {
                Volume3D vol(labels.dims, labels.spacing);
                std::copy(probs.probs.begin() + cls * n, probs.probs.begin() + (cls + 1) * n,
                          vol.data.begin());
                write_nifti(vol, (pdir / prob_names[size_t(cls)]).string());
                manifest.add_output((pdir / prob_names[size_t(cls)]).string());
            }
        }
    }
    manifest.write((fs::path(o.out) / "manifest.json").string());
}

// ---- evaluate ----

struct EvaluateOpts {
    std::vector<std::string> runs;
    std::string ref;
    int percentile = 95;
    std::string out;
};

void run_evaluate(const EvaluateOpts& o) {
    ManifestWriter manifest("evaluate");
    manifest.config() = {{"runs", o.runs}, {"ref", o.ref}, {"percentile", o.percentile}};

    std::vector<CaseScores> cases;
    std::ostringstream case_rows;
    case_rows << "run\tpatient\tregion\tdice\thausdorff_mm\n";
    case_rows.precision(6);
    case_rows << std::fixed;

    for (const auto& run_dir : o.runs) {
        manifest.add_input(run_dir);
        std::vector<std::string> patients;
        if (!fs::is_directory(run_dir))
            throw std::runtime_error("prediction directory not found: " + run_dir);
        for (const auto& entry : fs::directory_iterator(run_dir))
            if (entry.is_directory() && fs::exists(entry.path() / "seg.nii"))
                patients.push_back(entry.path().filename().string());
        std::sort(patients.begin(), patients.end());
        if (patients.empty())
            throw std::runtime_error("no predictions found under " + run_dir);

        for (const auto& p : patients) {
            const SegmentationMap pred = read_labels((fs::path(run_dir) / p / "seg.nii").string());
            const fs::path ref_path = fs::path(o.ref) / p / "seg.nii";
            if (!fs::exists(ref_path))
                throw std::runtime_error("reference segmentation missing for patient " + p);
            const SegmentationMap ref = read_labels(ref_path.string());
            const CaseScores s = evaluate_case(pred, ref, ref.spacing, o.percentile);
            cases.push_back(s);
            const auto row = [&](const char* region, const RegionScores& r) {
                case_rows << run_dir << "\t" << p << "\t" << region << "\t" << r.dice << "\t"
                          << r.hausdorff_mm << "\n";
            };
            row("ET", s.et);
            row("WT", s.wt);
            row("TC", s.tc);
        }
    }

    const AggregateReport report = aggregate(cases);
    ensure_out_dir(o.out);
    {
        std::ofstream f(fs::path(o.out) / "cases.tsv", std::ios::trunc);
        f << case_rows.str();
    }
    {
        std::ofstream f(fs::path(o.out) / "report.tsv", std::ios::trunc);
        f << "runs\t" << o.runs.size() << "\n" << format_report(report);
    }
    manifest.add_output((fs::path(o.out) / "cases.tsv").string());
    manifest.add_output((fs::path(o.out) / "report.tsv").string());
    manifest.write((fs::path(o.out) / "manifest.json").string());
}

// ---- compare ----

struct CompareOpts {
    TrainFlags flags;
    std::string data;
    std::string pretrained;
    int seeds = 5;
    std::string out;
};

void run_compare(const CompareOpts& o) {
    ManifestWriter manifest("compare");
    manifest.set_seed(o.flags.seed);
    manifest.add_input(o.data);
    manifest.add_input(o.pretrained + ".manifest");
    o.flags.describe(manifest.config());
    manifest.config()["seeds"] = o.seeds;

    const NetworkConfig net_cfg = o.flags.net.config();
    const TrainConfig cfg = o.flags.config();
    const std::vector<TrainCase> dataset = load_dataset(o.data);
    const WeightStore store = WeightStore::load(o.pretrained);

    const CompareResult result =
        compare_pretraining(cfg, net_cfg, store, dataset, o.flags.val_count, o.seeds);

    ensure_out_dir(o.out);
    fs::create_directories(fs::path(o.out) / "runs");
    const std::array<std::string, 2> arm_names{"pretrained", "random"};
    for (int arm = 0; arm < 2; ++arm)
        for (int s = 0; s < o.seeds; ++s) {
            const std::string path = (fs::path(o.out) / "runs" /
                                      (arm_names[size_t(arm)] + "_seed" + std::to_string(s) + ".tsv"))
                                         .string();
            write_train_log(result.runs[size_t(arm)][size_t(s)], path);
            manifest.add_output(path);
        }

    // per-epoch mean +/- std of the validation dice per region and arm
    const int epochs = cfg.epochs;
    std::ofstream per_epoch(fs::path(o.out) / "per_epoch.tsv", std::ios::trunc);
    per_epoch << "arm\tepoch\tregion\tmean_dice\tstd_dice\n";
    per_epoch.precision(6);
    per_epoch << std::fixed;
    const std::array<std::string, 3> regions{"ET", "WT", "TC"};
    auto region_value = [](const EpochStats& s, int r) {
        return r == 0 ? s.dice_et : (r == 1 ? s.dice_wt : s.dice_tc);
    };
    std::array<std::array<std::pair<double, double>, 3>, 2> final_stats{};
    for (int arm = 0; arm < 2; ++arm)
        for (int e = 0; e < epochs; ++e)
            for (int r = 0; r < 3; ++r) {
                double mean = 0.0;
                for (int s = 0; s < o.seeds; ++s)
                    mean += region_value(result.runs[size_t(arm)][size_t(s)].epochs[size_t(e)], r);
                mean /= o.seeds;
                double var = 0.0;
                for (int s = 0; s < o.seeds; ++s) {
                    const double d =
                        region_value(result.runs[size_t(arm)][size_t(s)].epochs[size_t(e)], r) - mean;
                    var += d * d;
                }
                const double sd = std::sqrt(var / o.seeds);
                per_epoch << arm_names[size_t(arm)] << "\t" << e << "\t" << regions[size_t(r)]
                          << "\t" << mean << "\t" << sd << "\n";
                if (e == epochs - 1) final_stats[size_t(arm)][size_t(r)] = {mean, sd};
            }
    per_epoch.close();

    std::ofstream final_out(fs::path(o.out) / "final.tsv", std::ios::trunc);
    final_out << "arm\tregion\tfinal_mean_dice\tfinal_std_dice\n";
    final_out.precision(6);
    final_out << std::fixed;
    for (int arm = 0; arm < 2; ++arm)
        for (int r = 0; r < 3; ++r)
            final_out << arm_names[size_t(arm)] << "\t" << regions[size_t(r)] << "\t"
                      << final_stats[size_t(arm)][size_t(r)].first << "\t"
                      << final_stats[size_t(arm)][size_t(r)].second << "\n";
    final_out.close();

    manifest.add_output((fs::path(o.out) / "per_epoch.tsv").string());
    manifest.add_output((fs::path(o.out) / "final.tsv").string());
    manifest.write((fs::path(o.out) / "manifest.json").string());
}

}  // namespace

void register_commands(CLI::App& app) {
    {
        auto opts = std::make_shared<SynthOpts>();
        auto* cmd = app.add_subcommand("synth", "generate a synthetic phantom dataset");
        cmd->add_option("--cases", opts->cases, "number of phantoms")
            ->check(CLI::PositiveNumber)
            ->capture_default_str();
        cmd->add_option("--dims", opts->dims, "volume dims D,H,W (each >= 32)")
            ->capture_default_str();
        cmd->add_option("--seed", opts->seed, "RNG seed")->capture_default_str();
        cmd->add_option("--spacing", opts->spacing, "voxel spacing sz,sy,sx (mm)")
            ->capture_default_str();
        cmd->add_option("--tumor-scale", opts->tumor_scale, "tumor radii scale")
            ->capture_default_str();
        cmd->add_option("--out", opts->out, "output dataset directory")->required();
        cmd->callback([opts] { run_synth(*opts); });
    }
    {
        auto opts = std::make_shared<PreprocessOpts>();
        auto* cmd = app.add_subcommand(
            "preprocess", "reorient, mask, co-register, resample, normalize and crop one patient");
        cmd->add_option("--flair", opts->flair, "FLAIR .nii path");
        cmd->add_option("--t1c", opts->t1c, "T1c .nii path");
        cmd->add_option("--t2", opts->t2, "T2 .nii path");
        cmd->add_option("--mask", opts->mask, "brain mask .nii path (optional)");
        cmd->add_option("--seg", opts->seg, "segmentation .nii to carry through (optional)");
        cmd->add_option("--axes", opts->axes, "axis spec onto axial orientation, e.g. -y,x,z")
            ->capture_default_str();
        cmd->add_option("--reference", opts->reference, "registration target: flair|t1c|t2")
            ->capture_default_str();
        cmd->add_option("--target-spacing", opts->target_spacing, "resampling target (mm)")
            ->capture_default_str();
        cmd->add_option("--out", opts->out, "output directory")->required();
        cmd->callback([opts] { run_preprocess(*opts); });
    }
    {
        auto opts = std::make_shared<PretrainOpts>();
        auto* cmd = app.add_subcommand("pretrain",
                                       "pretrain the 2D encoder on slice classification");
        opts->net.add_to(cmd);
        cmd->add_option("--cases", opts->cases, "phantoms to slice")->capture_default_str();
        cmd->add_option("--dims", opts->dims, "phantom dims D,H,W")->capture_default_str();
        cmd->add_option("--steps", opts->steps, "optimization steps")->capture_default_str();
        cmd->add_option("--batch", opts->batch, "batch size")->capture_default_str();
        cmd->add_option("--lr", opts->lr, "Adam learning rate")->capture_default_str();
        cmd->add_option("--seed", opts->seed, "RNG seed")->capture_default_str();
        cmd->add_flag("--force", opts->force, "overwrite an existing store");
        cmd->add_option("--out", opts->out, "weight store prefix")->required();
        cmd->callback([opts] { run_pretrain(*opts); });
    }
    {
        auto opts = std::make_shared<TrainOpts>();
        auto* cmd = app.add_subcommand("train", "train the segmentation network");
        opts->flags.add_to(cmd);
        cmd->add_option("--data", opts->data, "dataset directory")->required();
        cmd->add_option("--pretrained", opts->pretrained, "pretrained encoder store prefix");
        cmd->add_flag("--random-init", opts->random_init, "train from random initialization");
        cmd->add_option("--out", opts->out, "output directory")->required();
        cmd->callback([opts] { run_train(*opts); });
    }
    {
        auto opts = std::make_shared<PredictOpts>();
        auto* cmd = app.add_subcommand("predict", "sliding-window full-volume prediction");
        opts->net.add_to(cmd);
        cmd->add_option("--data", opts->data, "dataset directory")->required();
        cmd->add_option("--weights", opts->weights, "trained weight store prefix")->required();
        cmd->add_option("--patch", opts->patch, "patch D,H,W (default from --mode)");
        cmd->add_option("--steps", opts->steps, "window steps along D,H,W")->capture_default_str();
        cmd->add_flag("--probs", opts->probs, "also write per-class probability volumes");
        cmd->add_option("--out", opts->out, "output directory")->required();
        cmd->callback([opts] { run_predict(*opts); });
    }
    {
        auto opts = std::make_shared<EvaluateOpts>();
        auto* cmd = app.add_subcommand("evaluate", "dice/Hausdorff evaluation and aggregation");
        cmd->add_option("--runs", opts->runs, "prediction directories (repeatable)")->required();
        cmd->add_option("--ref", opts->ref, "reference dataset directory")->required();
        cmd->add_option("--percentile", opts->percentile, "Hausdorff percentile (95 or 100)")
            ->capture_default_str();
        cmd->add_option("--out", opts->out, "output directory")->required();
        cmd->callback([opts] { run_evaluate(*opts); });
    }
    {
        auto opts = std::make_shared<CompareOpts>();
        auto* cmd = app.add_subcommand(
            "compare", "pretrained vs random-init convergence comparison over seeds");
        opts->flags.add_to(cmd);
        cmd->add_option("--data", opts->data, "dataset directory")->required();
        cmd->add_option("--pretrained", opts->pretrained, "pretrained encoder store prefix")
            ->required();
        cmd->add_option("--seeds", opts->seeds, "number of paired runs")->capture_default_str();
        cmd->add_option("--out", opts->out, "output directory")->required();
        cmd->callback([opts] { run_compare(*opts); });
    }
    app.require_subcommand(1);
}

}  // namespace voxseg::cli
