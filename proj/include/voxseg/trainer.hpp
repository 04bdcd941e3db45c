#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxseg/errors.hpp"
#include "voxseg/metrics.hpp"
#include "voxseg/model.hpp"
#include "voxseg/preprocess.hpp"
#include "voxseg/rng.hpp"
#include "voxseg/sampler.hpp"
#include "voxseg/stitcher.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
    double alpha = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    void validate() const {
        if (!(alpha > 0.0) || !std::isfinite(alpha))
            throw InvalidConfig("adam alpha must be positive");
        if (!(beta1 >= 0.0 && beta1 < 1.0)) throw InvalidConfig("adam beta1 must be in [0,1)");
        if (!(beta2 >= 0.0 && beta2 < 1.0)) throw InvalidConfig("adam beta2 must be in [0,1)");
        if (!(epsilon > 0.0)) throw InvalidConfig("adam epsilon must be positive");
    }
};

template <class T>
struct AdamState {
    std::vector<T> m, v;  // first/second moment estimates
    std::int64_t t = 0;   // completed steps

    explicit AdamState(std::size_t n) : m(n, T(0)), v(n, T(0)) {}
};

/// One update, computed in double regardless of the storage type:
///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2,
///   theta -= alpha * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
template <class T>
void adam_step(std::vector<T>& params, const std::vector<T>& grads, AdamState<T>& state,
               const AdamConfig& cfg) {
    cfg.validate();
    if (params.size() != grads.size() || params.size() != state.m.size() ||
        params.size() != state.v.size())
        throw ShapeMismatch("adam buffers disagree: params " + std::to_string(params.size()) +
                            ", grads " + std::to_string(grads.size()) + ", state " +
                            std::to_string(state.m.size()));
    state.t += 1;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = static_cast<double>(grads[i]);
        const double m = cfg.beta1 * static_cast<double>(state.m[i]) + (1.0 - cfg.beta1) * g;
        const double v =
            cfg.beta2 * static_cast<double>(state.v[i]) + (1.0 - cfg.beta2) * g * g;
        state.m[i] = static_cast<T>(m);
        state.v[i] = static_cast<T>(v);
        const double update = cfg.alpha * (m / c1) / (std::sqrt(v / c2) + cfg.epsilon);
        params[i] = static_cast<T>(static_cast<double>(params[i]) - update);
    }
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy, fused with its gradient. The loss is the mean
// negative log-likelihood over every voxel in the batch, so the returned
// gradients are (softmax - onehot) / total_voxels and feed straight into the
// logits produced by a training-mode forward pass.
// ---------------------------------------------------------------------------

template <class T>
struct CrossEntropyResult {
    double loss = 0.0;
    Batch<T> grads;  // one per batch item, shaped like the logits
};

namespace detail {

template <class T>
double ce_accumulate(const BasicVolume<T>& logits, const LabelVolume& labels, double scale,
                     BasicVolume<T>& grad) {
    if (!(logits.dims() == labels.dims()))
        throw ShapeMismatch("logits are " + to_string(logits.dims()) + ", labels are " +
                            to_string(labels.dims()));
    const int C = logits.channels();
    const std::size_t span = logits.dims().voxels();
    double loss = 0.0;
    for (std::size_t j = 0; j < span; ++j) {
        const int truth = labels.raw()[j];
        if (truth >= C)
            throw ClassOutOfRange("label " + std::to_string(truth) + " but logits carry " +
                                  std::to_string(C) + " channels");
        double hi = static_cast<double>(logits.raw()[j]);
        for (int c = 1; c < C; ++c)
            hi = std::max(hi, static_cast<double>(logits.raw()[c * span + j]));
        double sum = 0.0;
        for (int c = 0; c < C; ++c)
            sum += std::exp(static_cast<double>(logits.raw()[c * span + j]) - hi);
        const double lse = hi + std::log(sum);
        loss += lse - static_cast<double>(logits.raw()[truth * span + j]);
        for (int c = 0; c < C; ++c) {
            const double p =
                std::exp(static_cast<double>(logits.raw()[c * span + j]) - lse);
            grad.raw()[c * span + j] =
                static_cast<T>((p - (c == truth ? 1.0 : 0.0)) * scale);
        }
    }
    return loss;
}

}  // namespace detail

template <class T>
CrossEntropyResult<T> cross_entropy(const Batch<T>& logits,
                                    const std::vector<LabelVolume>& labels) {
    if (logits.empty()) throw InvalidConfig("cross entropy needs at least one item");
    if (logits.size() != labels.size())
        throw ShapeMismatch("batch has " + std::to_string(logits.size()) + " logits but " +
                            std::to_string(labels.size()) + " label volumes");
    std::size_t total = 0;
    for (const BasicVolume<T>& l : logits) total += l.dims().voxels();
    const double scale = 1.0 / static_cast<double>(total);

    CrossEntropyResult<T> out;
    double loss = 0.0;
    for (std::size_t b = 0; b < logits.size(); ++b) {
        BasicVolume<T> grad(logits[b].channels(), logits[b].dims());
        loss += detail::ce_accumulate(logits[b], labels[b], scale, grad);
        out.grads.push_back(std::move(grad));
    }
    out.loss = loss * scale;
    return out;
}

template <class T>
CrossEntropyResult<T> cross_entropy(const BasicVolume<T>& logits, const LabelVolume& labels) {
    const std::size_t span = logits.dims().voxels();
    const double scale = 1.0 / static_cast<double>(span);
    CrossEntropyResult<T> out;
    BasicVolume<T> grad(logits.channels(), logits.dims());
    out.loss = detail::ce_accumulate(logits, labels, scale, grad) * scale;
    out.grads.push_back(std::move(grad));
    return out;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
    AdamConfig adam;
    int steps = 500;
    int batch_size = 1;
    int side = 68;      // subvolume edge length
    double sigma = 0.0; // Gaussian sampling spread; <= 0 derives extent/5
    std::uint64_t seed = 0;
    NormalizationConfig normalization;
    int log_every = 10;              // console cadence; the report keeps every step
    int validate_every = 0;          // 0 disables stitched validation
    int validate_extra_crops = 0;    // random crops added to the validation grid
    std::filesystem::path log_path;  // JSONL stream; empty disables

    void validate() const {
        adam.validate();
        normalization.validate();
        if (steps < 1) throw InvalidConfig("steps must be >= 1");
        if (batch_size < 1) throw InvalidConfig("batch_size must be >= 1");
        if (side < 1) throw InvalidConfig("side must be >= 1");
        if (log_every < 1) throw InvalidConfig("log_every must be >= 1");
        if (validate_every < 0 || validate_extra_crops < 0)
            throw InvalidConfig("validation cadence must be >= 0");
    }
};

struct ValidationPoint {
    int step = 0;
    double mean_dice = 0.0;
};

struct TrainReport {
    std::vector<double> losses;  // one entry per optimization step
    std::vector<ValidationPoint> validations;
};

namespace detail {

// Independent deterministic stream labels hung off the master seed.
inline constexpr std::uint64_t kPickStream = 0x5049434bull;     // volume choice
inline constexpr std::uint64_t kSampleStream = 0x53414d50ull;   // crop origins
inline constexpr std::uint64_t kDropoutStream = 0x44524f50ull;  // per-step dropout
inline constexpr std::uint64_t kValStream = 0x56414c44ull;      // validation plans

}  // namespace detail

/// Stitches every training volume with the current weights and averages the
/// defined per-class dice values.
inline double validation_mean_dice(const ModelSpec& spec, const ModelParams& params,
                                   const std::vector<Volume>& images,
                                   const std::vector<LabelVolume>& labels,
                                   const TrainConfig& cfg, int step) {
    double sum = 0.0;
    int n = 0;
    for (std::size_t i = 0; i < images.size(); ++i) {
        SamplerConfig sc;
        sc.side = cfg.side;
        sc.sigma = cfg.sigma;
        sc.seed = mix_seed(cfg.seed, detail::kValStream,
                           mix_seed(static_cast<std::uint64_t>(step), i));
        const CoveragePlan plan =
            plan_inference(images[i].dims(), sc, cfg.validate_extra_crops);
        const LabelVolume pred =
            segment_volume(spec, params, images[i], plan, cfg.normalization);
        const SegmentationReport rep = evaluate_segmentation(pred, labels[i]);
        if (rep.mean_dice) {
            sum += *rep.mean_dice;
            ++n;
        }
    }
    return n > 0 ? sum / n : 0.0;
}

inline TrainReport train(const ModelSpec& spec, ModelParams& params,
                         const std::vector<Volume>& images,
                         const std::vector<LabelVolume>& labels, const TrainConfig& cfg,
                         std::ostream* console = nullptr) {
    cfg.validate();
    validate_model(spec);
    if (images.empty() || images.size() != labels.size())
        throw InvalidConfig("need matching, non-empty image and label sets");
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (!(images[i].dims() == labels[i].dims()))
            throw ShapeMismatch("volume " + std::to_string(i) + " is " +
                                to_string(images[i].dims()) + " but its labels are " +
                                to_string(labels[i].dims()));
        if (images[i].channels() != spec.in_channels)
            throw ShapeMismatch("volume " + std::to_string(i) + " has " +
                                std::to_string(images[i].channels()) +
                                " channels, model expects " +
                                std::to_string(spec.in_channels));
        if (labels[i].num_classes() != spec.num_classes)
            throw ClassOutOfRange("labels " + std::to_string(i) + " carry " +
                                  std::to_string(labels[i].num_classes()) +
                                  " classes, model expects " +
                                  std::to_string(spec.num_classes));
    }

    const Layout lay = compute_layout(spec);
    if (params.trainable.size() != static_cast<std::size_t>(lay.trainable_count) ||
        params.state.size() != static_cast<std::size_t>(lay.state_count))
        throw ShapeMismatch("parameter buffers do not match the model layout");

    std::vector<GaussianSampler> samplers;
    for (std::size_t i = 0; i < images.size(); ++i) {
        SamplerConfig sc;
        sc.side = cfg.side;
        sc.sigma = cfg.sigma;
        sc.seed = mix_seed(cfg.seed, detail::kSampleStream, i);
        samplers.emplace_back(images[i].dims(), sc);  // throws if side cannot fit
    }
    Rng pick(mix_seed(cfg.seed, detail::kPickStream));

    std::ofstream log;
    if (!cfg.log_path.empty()) {
        log.open(cfg.log_path, std::ios::trunc);
        if (!log) throw IOFailure("cannot open " + cfg.log_path.string() + " for writing");
        nlohmann::json header{{"event", "config"},
                              {"steps", cfg.steps},
                              {"batch_size", cfg.batch_size},
                              {"side", cfg.side},
                              {"seed", cfg.seed},
                              {"alpha", cfg.adam.alpha},
                              {"normalization", to_string(cfg.normalization)}};
        log << header.dump() << "\n";
    }

    AdamState<float> adam(params.trainable.size());
    TrainReport report;
    for (int step = 1; step <= cfg.steps; ++step) {
        Batch<float> xb;
        std::vector<LabelVolume> yb;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const std::size_t vi = pick.uniform_index(images.size());
            const SubvolumeRef ref = samplers[vi].next();
            Volume crop = extract_subvolume(images[vi], ref);
            normalize_inplace(crop, cfg.normalization);
            xb.push_back(std::move(crop));
            yb.push_back(extract_subvolume(labels[vi], ref));
        }

        Tape<float> tape;
        const Batch<float> logits =
            model_forward_train(spec, lay, params, xb,
                                mix_seed(cfg.seed, detail::kDropoutStream,
                                         static_cast<std::uint64_t>(step)),
                                &tape);
        CrossEntropyResult<float> ce = cross_entropy(logits, yb);
        if (!std::isfinite(ce.loss))
            throw NonFiniteLoss("loss became non-finite at step " + std::to_string(step));

        const std::vector<float> grads = model_backward(spec, lay, params, tape, ce.grads);
        adam_step(params.trainable, grads, adam, cfg.adam);
        report.losses.push_back(ce.loss);

        if (log.is_open()) {
            nlohmann::json line{{"event", "step"}, {"step", step}, {"loss", ce.loss}};
            log << line.dump() << "\n";
        }
        if (console && (step == 1 || step == cfg.steps || step % cfg.log_every == 0))
            *console << "step " << step << "/" << cfg.steps << " loss " << ce.loss << "\n";

        if (cfg.validate_every > 0 && step % cfg.validate_every == 0) {
            const double dice =
                validation_mean_dice(spec, params, images, labels, cfg, step);
            report.validations.push_back(ValidationPoint{step, dice});
            if (log.is_open()) {
                nlohmann::json line{
                    {"event", "validation"}, {"step", step}, {"mean_dice", dice}};
                log << line.dump() << "\n";
            }
            if (console)
                *console << "validate @" << step << " mean dice " << dice << "\n";
        }
    }
    if (log.is_open() && !log) throw IOFailure("write failed for " + cfg.log_path.string());
    return report;
}

}  // namespace voxseg
