// Command-line front end: phantom generation, training, stitched inference,
// evaluation, and model inspection. Every command is reproducible from its
// config file plus --seed; flags override file values.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "voxseg/config.hpp"
#include "voxseg/metrics.hpp"
#include "voxseg/model.hpp"
#include "voxseg/phantom.hpp"
#include "voxseg/sampler.hpp"
#include "voxseg/stitcher.hpp"
#include "voxseg/trainer.hpp"
#include "voxseg/volume.hpp"

namespace fs = std::filesystem;
using namespace voxseg;

namespace {

struct CommonOpts {
    std::string config_path;
    std::vector<std::string> sets;  // raw "key=value" overrides, applied in order
    int workers = 0;                // 0 keeps the OpenMP default
};

void add_common(CLI::App* cmd, CommonOpts& common) {
    cmd->add_option("--config", common.config_path, "config file with key = value lines");
    cmd->add_option("--set", common.sets, "override one config key, e.g. --set train.steps=100")
        ->take_all();
    cmd->add_option("--workers", common.workers, "cap the number of compute threads");
}

/// File values first, then --set overrides, then dedicated flags (most
/// specific wins). `flag_sets` carries the dedicated flags already rendered
/// as key=value strings.
RunConfig resolve_config(const CommonOpts& common, const std::vector<std::string>& flag_sets) {
    ConfigMap kv;
    if (!common.config_path.empty()) kv = load_config_file(common.config_path);
    for (const std::string& s : common.sets) apply_override(kv, s);
    for (const std::string& s : flag_sets) apply_override(kv, s);
    return make_run_config(kv);
}

void apply_workers(int workers) {
    if (workers <= 0) return;
#ifdef _OPENMP
    omp_set_num_threads(workers);
#else
    (void)workers;
#endif
}

std::string activation_label(Activation a) {
    switch (a) {
        case Activation::None: return "none";
        case Activation::Relu: return "relu";
        case Activation::Tanh: return "tanh";
        case Activation::Softmax: return "softmax";
    }
    return "none";
}

int cmd_info(const std::string& variant, int in_channels, int num_classes) {
    const ModelSpec spec = build_model(variant, in_channels, num_classes);
    const std::vector<int> channels = trace_channels(spec);

    std::printf("%s (%d -> %d channels)\n", spec.name.c_str(), spec.in_channels,
                spec.num_classes);
    std::printf("%5s  %-8s %4s %4s %7s %4s %4s %3s %-8s %5s\n", "layer", "kind", "in", "out",
                "extent", "dil", "pad", "bn", "act", "drop");
    int prev = spec.in_channels;
    for (std::size_t li = 0; li < spec.layers.size(); ++li) {
        const LayerSpec& l = spec.layers[li];
        if (l.kind == LayerKind::Conv) {
            std::printf("%5zu  %-8s %4d %4d %7d %4d %4d %3s %-8s %5.2f\n", li, "conv",
                        l.in_channels, l.out_channels, l.extent, l.dilation, l.pad,
                        l.batchnorm ? "yes" : "no", activation_label(l.activation).c_str(),
                        l.dropout);
        } else if (l.kind == LayerKind::ConcatSkip) {
            std::printf("%5zu  %-8s %4d %4d %7s %4s %4s   (appends layer %d)\n", li, "concat",
                        prev, channels[li], "-", "-", "-", l.skip_from);
        } else {
            std::printf("%5zu  %-8s %4d %4d\n", li,
                        l.kind == LayerKind::MaxPool ? "maxpool" : "upsample", prev,
                        channels[li]);
        }
        prev = channels[li];
    }
    std::printf("parameters: %zu\n", parameter_count(spec));
    std::printf("receptive field: %d\n", receptive_field(spec));
    return 0;
}

int cmd_phantom(const RunConfig& rc) {
    if (rc.output_dir.empty())
        throw ConfigError("phantom needs an output directory (--out or paths.output)");
    const PhantomSpec spec = rc.phantom_spec();
    spec.validate();
    const DatasetIndex index = write_phantom_dataset(spec, rc.output_dir);
    std::printf("wrote %d volumes (%s, 3 classes) to %s\n", spec.count,
                to_string(spec.dims).c_str(), rc.output_dir.string().c_str());
    std::printf("manifest: %s\n", (rc.output_dir / "manifest.json").string().c_str());
    (void)index;
    return 0;
}

int cmd_train(const RunConfig& rc, const std::string& resume_path) {
    if (!rc.has_seed)
        throw ConfigError("train requires an explicit seed (--seed or seed= in the config)");
    if (rc.data_dir.empty())
        throw ConfigError("train needs a dataset directory (--data or paths.data)");
    if (rc.checkpoint.empty())
        throw ConfigError("train needs a checkpoint path (--out or paths.checkpoint)");

    const DatasetIndex index = read_dataset_index(rc.data_dir);
    const LoadedDataset data = load_dataset(index);
    std::printf("dataset: %zu volumes, %s, %d classes\n", data.images.size(),
                to_string(index.dims).c_str(), index.num_classes);

    ModelSpec spec;
    ModelParams params;
    if (!resume_path.empty()) {
        Checkpoint ck = load_checkpoint(resume_path);
        spec = std::move(ck.spec);
        params = std::move(ck.params);
        std::printf("resumed %s from %s\n", spec.name.c_str(), resume_path.c_str());
    } else {
        spec = rc.model_spec();
        params = init_params<float>(spec, rc.seed);
    }
    std::printf("model: %s, %zu parameters, receptive field %d\n", spec.name.c_str(),
                parameter_count(spec), receptive_field(spec));

    const TrainConfig tc = rc.train_config();
    const TrainReport report = train(spec, params, data.images, data.labels, tc, &std::cout);

    nlohmann::json meta;
    meta["seed"] = rc.seed;
    meta["normalization"] = to_string(tc.normalization);
    meta["input_side"] = tc.side;
    meta["steps"] = tc.steps;
    save_checkpoint(rc.checkpoint, spec, params, meta);
    std::printf("final loss: %.6f\n", report.losses.back());
    std::printf("checkpoint: %s\n", rc.checkpoint.string().c_str());
    return 0;
}

int cmd_segment(const RunConfig& rc, const std::string& input_path) {
    if (rc.checkpoint.empty())
        throw ConfigError("segment needs a model checkpoint (--model or paths.checkpoint)");
    if (input_path.empty()) throw ConfigError("segment needs an input volume (--input)");
    if (rc.output_dir.empty())
        throw ConfigError("segment needs an output directory (--out or paths.output)");

    // Cheap header checks first: reject an impossible crop size before the
    // parameter blob or the volume payload is read.
    const vvol::Header header = vvol::peek_header(input_path);
    const nlohmann::json manifest = peek_checkpoint_manifest(rc.checkpoint);
    const nlohmann::json meta = manifest.value("meta", nlohmann::json::object());
    const int side = meta.contains("input_side") ? meta.at("input_side").get<int>() : rc.side;
    if (side > header.dims.d || side > header.dims.h || side > header.dims.w)
        throw SubvolumeTooLarge("model input side " + std::to_string(side) +
                                " exceeds volume " + to_string(header.dims));

    const Checkpoint ck = load_checkpoint(rc.checkpoint);
    const Volume vol = read_volume(input_path);
    const NormalizationConfig norm =
        meta.contains("normalization")
            ? normalization_from_string(meta.at("normalization").get<std::string>())
            : rc.normalization_config();

    SamplerConfig sc;
    sc.side = side;
    sc.sigma = rc.sigma;
    sc.seed = rc.seed;
    const CoveragePlan plan = plan_inference(vol.dims(), sc, rc.infer_subvolumes);
    std::fprintf(stderr, "stitching %zu subvolumes (%zu grid + %zu sampled)\n",
                 plan.all().size(), plan.grid.size(), plan.sampled.size());

    const int total = static_cast<int>(plan.all().size());
    const int stride = std::max(1, total / 10);
    const LabelVolume labels =
        segment_volume(ck.spec, ck.params, vol, plan, norm, [&](int done, int n) {
            if (done % stride == 0 || done == n)
                std::fprintf(stderr, "  %d/%d subvolumes\n", done, n);
        });

    fs::create_directories(rc.output_dir);
    const fs::path label_path = rc.output_dir / "segmentation.vvol";
    write_labels(labels, label_path);
    const std::vector<fs::path> slices =
        write_midslice_pgms(labels, rc.output_dir, "segmentation");
    std::printf("labels: %s\n", label_path.string().c_str());
    for (const fs::path& p : slices) std::printf("slice: %s\n", p.string().c_str());
    return 0;
}

int cmd_evaluate(const std::string& pred_path, const std::string& truth_path,
                 const std::string& csv_path) {
    const LabelVolume pred = read_labels(pred_path);
    const LabelVolume truth = read_labels(truth_path);
    const SegmentationReport report = evaluate_segmentation(pred, truth);
    std::cout << format_report(report);
    if (!csv_path.empty()) {
        write_report_csv(report, csv_path);
        std::printf("csv: %s\n", csv_path.c_str());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"volumetric segmentation with dilated convolutions"};
    app.require_subcommand(1);

    // ---- phantom ----------------------------------------------------------
    CommonOpts phantom_common;
    std::string phantom_out;
    std::uint64_t phantom_seed = 0;
    int phantom_count = 0;
    CLI::App* phantom = app.add_subcommand("phantom", "generate a synthetic dataset");
    add_common(phantom, phantom_common);
    phantom->add_option("--out", phantom_out, "dataset directory");
    CLI::Option* phantom_seed_opt = phantom->add_option("--seed", phantom_seed, "master seed");
    CLI::Option* phantom_count_opt =
        phantom->add_option("--count", phantom_count, "number of volumes");

    // ---- train ------------------------------------------------------------
    CommonOpts train_common;
    std::string train_data, train_out, train_resume, train_log, train_variant;
    std::uint64_t train_seed = 0;
    int train_steps = 0, train_batch = 0;
    CLI::App* train_cmd = app.add_subcommand("train", "fit a model on a dataset");
    add_common(train_cmd, train_common);
    train_cmd->add_option("--data", train_data, "dataset directory (from `phantom`)");
    train_cmd->add_option("--out", train_out, "checkpoint to write");
    train_cmd->add_option("--resume", train_resume, "checkpoint to continue from");
    train_cmd->add_option("--log", train_log, "JSONL training log");
    CLI::Option* train_variant_opt =
        train_cmd->add_option("--variant", train_variant, "model variant");
    CLI::Option* train_seed_opt = train_cmd->add_option("--seed", train_seed, "master seed");
    CLI::Option* train_steps_opt = train_cmd->add_option("--steps", train_steps, "mini-batches");
    CLI::Option* train_batch_opt =
        train_cmd->add_option("--batch", train_batch, "subvolumes per mini-batch");

    // ---- segment ----------------------------------------------------------
    CommonOpts seg_common;
    std::string seg_model, seg_input, seg_out;
    std::uint64_t seg_seed = 0;
    int seg_subvolumes = -1;
    CLI::App* segment = app.add_subcommand("segment", "label a volume with a trained model");
    add_common(segment, seg_common);
    segment->add_option("--model", seg_model, "checkpoint file");
    segment->add_option("--input", seg_input, "volume to segment");
    segment->add_option("--out", seg_out, "output directory");
    CLI::Option* seg_seed_opt = segment->add_option("--seed", seg_seed, "crop sampling seed");
    CLI::Option* seg_n_opt = segment->add_option("--subvolumes", seg_subvolumes,
                                                 "random subvolumes added to the grid");

    // ---- evaluate ---------------------------------------------------------
    std::string eval_pred, eval_truth, eval_csv;
    CLI::App* evaluate = app.add_subcommand("evaluate", "score a segmentation against truth");
    evaluate->add_option("--pred", eval_pred, "predicted label volume")->required();
    evaluate->add_option("--truth", eval_truth, "reference label volume")->required();
    evaluate->add_option("--csv", eval_csv, "also write per-class metrics as CSV");

    // ---- info -------------------------------------------------------------
    std::string info_variant;
    int info_channels = 1, info_classes = 3;
    CLI::App* info = app.add_subcommand("info", "print a model's layer table");
    info->add_option("variant", info_variant, "meshnet-64 | meshnet-68 | meshnet-32 | unet")
        ->required();
    info->add_option("--channels", info_channels, "input channels");
    info->add_option("--classes", info_classes, "output classes");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*info) return cmd_info(info_variant, info_channels, info_classes);
        if (*evaluate) return cmd_evaluate(eval_pred, eval_truth, eval_csv);

        if (*phantom) {
            std::vector<std::string> flags;
            if (!phantom_out.empty()) flags.push_back("paths.output=" + phantom_out);
            if (*phantom_seed_opt) flags.push_back("seed=" + std::to_string(phantom_seed));
            if (*phantom_count_opt)
                flags.push_back("phantom.count=" + std::to_string(phantom_count));
            apply_workers(phantom_common.workers);
            return cmd_phantom(resolve_config(phantom_common, flags));
        }
        if (*train_cmd) {
            std::vector<std::string> flags;
            if (!train_data.empty()) flags.push_back("paths.data=" + train_data);
            if (!train_out.empty()) flags.push_back("paths.checkpoint=" + train_out);
            if (!train_log.empty()) flags.push_back("paths.log=" + train_log);
            if (*train_variant_opt) flags.push_back("model.variant=" + train_variant);
            if (*train_seed_opt) flags.push_back("seed=" + std::to_string(train_seed));
            if (*train_steps_opt) flags.push_back("train.steps=" + std::to_string(train_steps));
            if (*train_batch_opt)
                flags.push_back("train.batch_size=" + std::to_string(train_batch));
            apply_workers(train_common.workers);
            return cmd_train(resolve_config(train_common, flags), train_resume);
        }
        if (*segment) {
            std::vector<std::string> flags;
            if (!seg_model.empty()) flags.push_back("paths.checkpoint=" + seg_model);
            if (!seg_out.empty()) flags.push_back("paths.output=" + seg_out);
            if (*seg_seed_opt) flags.push_back("seed=" + std::to_string(seg_seed));
            if (*seg_n_opt) flags.push_back("infer.subvolumes=" + std::to_string(seg_subvolumes));
            apply_workers(seg_common.workers);
            return cmd_segment(resolve_config(seg_common, flags), seg_input);
        }
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
