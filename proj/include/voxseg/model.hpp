#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxseg/errors.hpp"
#include "voxseg/ops.hpp"
#include "voxseg/rng.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

// ---------------------------------------------------------------------------
// Network description: a flat list of layers executed in order. Skip
// connections reference an earlier layer by index and append its output
// channel-wise. Convolution layers optionally fuse batchnorm, an activation,
// and dropout, in that order.
// ---------------------------------------------------------------------------

enum class LayerKind { Conv, MaxPool, Upsample, ConcatSkip };
enum class Activation { None, Relu, Tanh, Softmax };

struct LayerSpec {
    LayerKind kind = LayerKind::Conv;
    // conv fields
    int in_channels = 0, out_channels = 0;
    int extent = 3, pad = 0, dilation = 1;
    bool batchnorm = false;
    Activation activation = Activation::None;
    double dropout = 0.0;
    // concat field: index of the earlier layer whose output is appended
    int skip_from = -1;

    static LayerSpec conv(int in_ch, int out_ch, int extent, int pad, int dilation,
                          bool batchnorm, Activation act, double dropout) {
        LayerSpec l;
        l.kind = LayerKind::Conv;
        l.in_channels = in_ch;
        l.out_channels = out_ch;
        l.extent = extent;
        l.pad = pad;
        l.dilation = dilation;
        l.batchnorm = batchnorm;
        l.activation = act;
        l.dropout = dropout;
        return l;
    }
    static LayerSpec maxpool() {
        LayerSpec l;
        l.kind = LayerKind::MaxPool;
        return l;
    }
    static LayerSpec upsample() {
        LayerSpec l;
        l.kind = LayerKind::Upsample;
        return l;
    }
    static LayerSpec concat(int skip_from) {
        LayerSpec l;
        l.kind = LayerKind::ConcatSkip;
        l.skip_from = skip_from;
        return l;
    }
};

struct ModelSpec {
    std::string name;
    int in_channels = 1;
    int num_classes = 3;
    double bn_epsilon = 1e-5;
    double bn_momentum = 0.1;
    std::vector<LayerSpec> layers;
};

// Per-layer output channel counts, resolving pool/upsample/concat.
inline std::vector<int> trace_channels(const ModelSpec& spec) {
    std::vector<int> out(spec.layers.size(), 0);
    int prev = spec.in_channels;
    for (std::size_t li = 0; li < spec.layers.size(); ++li) {
        const LayerSpec& l = spec.layers[li];
        switch (l.kind) {
            case LayerKind::Conv:
                if (l.in_channels != prev)
                    throw InvalidConfig("layer " + std::to_string(li) + " expects " +
                                        std::to_string(l.in_channels) + " channels but gets " +
                                        std::to_string(prev));
                out[li] = l.out_channels;
                break;
            case LayerKind::MaxPool:
            case LayerKind::Upsample:
                out[li] = prev;
                break;
            case LayerKind::ConcatSkip:
                if (l.skip_from < 0 || static_cast<std::size_t>(l.skip_from) >= li)
                    throw InvalidConfig("concat at layer " + std::to_string(li) +
                                        " references layer " + std::to_string(l.skip_from));
                out[li] = prev + out[l.skip_from];
                break;
        }
        prev = out[li];
    }
    return out;
}

inline void validate_model(const ModelSpec& spec) {
    if (spec.in_channels < 1 || spec.num_classes < 1)
        throw InvalidConfig("model channel counts must be >= 1");
    if (spec.layers.empty()) throw InvalidConfig("model has no layers");
    const std::vector<int> ch = trace_channels(spec);  // throws on inconsistency
    if (ch.back() != spec.num_classes)
        throw InvalidConfig("final layer emits " + std::to_string(ch.back()) +
                            " channels, expected num_classes = " +
                            std::to_string(spec.num_classes));
    for (std::size_t li = 0; li < spec.layers.size(); ++li) {
        const LayerSpec& l = spec.layers[li];
        if (l.kind == LayerKind::Conv) {
            if (l.extent < 1 || l.extent % 2 == 0)
                throw InvalidConfig("conv extents must be odd");
            if (l.dilation < 1 || l.pad < 0)
                throw InvalidConfig("conv dilation must be >= 1 and padding >= 0");
            if (!(l.dropout >= 0.0 && l.dropout < 1.0))
                throw InvalidProbability("conv dropout must be in [0, 1)");
        }
    }
}

// Spatial shapes per layer for a given input size; throws where a pool meets
// odd extents or a concat meets mismatched shapes.
inline std::vector<Dims> trace_shapes(const ModelSpec& spec, const Dims& input) {
    std::vector<Dims> out(spec.layers.size());
    Dims prev = input;
    for (std::size_t li = 0; li < spec.layers.size(); ++li) {
        const LayerSpec& l = spec.layers[li];
        switch (l.kind) {
            case LayerKind::Conv: {
                const int k = l.extent;
                const Dims next{prev.d + 2 * l.pad - l.dilation * (k - 1),
                                prev.h + 2 * l.pad - l.dilation * (k - 1),
                                prev.w + 2 * l.pad - l.dilation * (k - 1)};
                if (next.d < 1 || next.h < 1 || next.w < 1)
                    throw InvalidConfig("layer " + std::to_string(li) +
                                        " output extent would be " + to_string(next));
                out[li] = next;
                break;
            }
            case LayerKind::MaxPool:
                if (prev.d % 2 || prev.h % 2 || prev.w % 2)
                    throw NonDivisibleDims("pool input " + to_string(prev) + " at layer " +
                                           std::to_string(li) + " is not even");
                out[li] = Dims{prev.d / 2, prev.h / 2, prev.w / 2};
                break;
            case LayerKind::Upsample:
                out[li] = Dims{prev.d * 2, prev.h * 2, prev.w * 2};
                break;
            case LayerKind::ConcatSkip:
                if (out[l.skip_from] != prev)
                    throw ShapeMismatch("concat at layer " + std::to_string(li) + " joins " +
                                        to_string(prev) + " with " + to_string(out[l.skip_from]));
                out[li] = prev;
                break;
        }
        prev = out[li];
    }
    return out;
}

// Widest window of input voxels that can influence one output voxel, tracked
// along the deepest path; pooling multiplies the stride of later taps.
inline int receptive_field(const ModelSpec& spec) {
    int rf = 1, jump = 1;
    std::vector<int> rf_at(spec.layers.size(), 0);
    for (std::size_t li = 0; li < spec.layers.size(); ++li) {
        const LayerSpec& l = spec.layers[li];
        switch (l.kind) {
            case LayerKind::Conv:
                rf += jump * l.dilation * (l.extent - 1);
                break;
            case LayerKind::MaxPool:
                rf += jump;
                jump *= 2;
                break;
            case LayerKind::Upsample:
                jump = std::max(1, jump / 2);
                break;
            case LayerKind::ConcatSkip:
                rf = std::max(rf, rf_at[l.skip_from]);
                break;
        }
        rf_at[li] = rf;
    }
    return rf;
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

namespace detail {
inline ModelSpec meshnet_from_dilations(const std::string& name, int in_channels,
                                        int num_classes, int width,
                                        const std::vector<int>& dilations, double dropout) {
    ModelSpec spec;
    spec.name = name;
    spec.in_channels = in_channels;
    spec.num_classes = num_classes;
    int prev = in_channels;
    for (int d : dilations) {
        spec.layers.push_back(
            LayerSpec::conv(prev, width, 3, d, d, true, Activation::Relu, dropout));
        prev = width;
    }
    spec.layers.push_back(
        LayerSpec::conv(prev, num_classes, 1, 0, 1, false, Activation::Softmax, 0.0));
    validate_model(spec);
    return spec;
}
}  // namespace detail

// Dilated fully convolutional segmenter: seven shape-preserving 3x3x3 layers
// (pad == dilation) with batchnorm + relu + dropout, then a 1x1x1 classifier.
// The -64 and -68 variants share the layer widths and differ in the dilation
// schedule (receptive fields 37 and 67); -32 is a narrow desk-scale variant
// (width 8, receptive field 31) sized for quick experiments.
inline ModelSpec build_meshnet(const std::string& variant, int in_channels, int num_classes,
                               double dropout = 0.25) {
    if (variant == "meshnet-64")
        return detail::meshnet_from_dilations(variant, in_channels, num_classes, 21,
                                              {1, 1, 1, 2, 4, 8, 1}, dropout);
    if (variant == "meshnet-68")
        return detail::meshnet_from_dilations(variant, in_channels, num_classes, 21,
                                              {1, 1, 2, 4, 8, 16, 1}, dropout);
    if (variant == "meshnet-32")
        return detail::meshnet_from_dilations(variant, in_channels, num_classes, 8,
                                              {1, 1, 2, 2, 4, 4, 1}, dropout);
    throw InvalidVariant("unknown model variant: " + variant);
}

// Encoder-decoder comparison network: four 2x max-pool stages down to a
// bottleneck, nearest-neighbor upsampling back up, skip concatenations across
// matching resolutions. One convolution per block, relu except for a tanh on
// the last hidden block, no batchnorm.
inline ModelSpec build_unet(int in_channels, int num_classes) {
    ModelSpec spec;
    spec.name = "unet";
    spec.in_channels = in_channels;
    spec.num_classes = num_classes;
    auto conv = [](int in_ch, int out_ch, Activation act) {
        return LayerSpec::conv(in_ch, out_ch, 3, 1, 1, false, act, 0.0);
    };
    spec.layers = {
        conv(in_channels, 32, Activation::Relu),  // 0
        LayerSpec::maxpool(),                     // 1
        conv(32, 64, Activation::Relu),           // 2
        LayerSpec::maxpool(),                     // 3
        conv(64, 128, Activation::Relu),          // 4
        LayerSpec::maxpool(),                     // 5
        conv(128, 256, Activation::Relu),         // 6
        LayerSpec::maxpool(),                     // 7
        conv(256, 512, Activation::Relu),         // 8
        LayerSpec::upsample(),                    // 9
        LayerSpec::concat(6),                     // 10: 512 + 256
        conv(768, 256, Activation::Relu),         // 11
        LayerSpec::upsample(),                    // 12
        LayerSpec::concat(4),                     // 13: 256 + 128
        conv(384, 128, Activation::Relu),         // 14
        LayerSpec::upsample(),                    // 15
        LayerSpec::concat(2),                     // 16: 128 + 64
        conv(192, 64, Activation::Relu),          // 17
        LayerSpec::upsample(),                    // 18
        LayerSpec::concat(0),                     // 19: 64 + 32
        conv(96, 32, Activation::Tanh),           // 20
        LayerSpec::conv(32, num_classes, 1, 0, 1, false, Activation::Softmax, 0.0),  // 21
    };
    validate_model(spec);
    return spec;
}

inline ModelSpec build_model(const std::string& name, int in_channels, int num_classes,
                             double dropout = 0.25) {
    if (name == "unet") return build_unet(in_channels, num_classes);
    return build_meshnet(name, in_channels, num_classes, dropout);
}

// ---------------------------------------------------------------------------
// Parameter storage: one flat trainable array (weights, bias, gamma, beta in
// layer order) plus a flat state array (batchnorm running mean / variance).
// The optimizer and the checkpoint format both operate on these flat views.
// ---------------------------------------------------------------------------

struct LayerLayout {
    std::size_t weights = 0, wcount = 0;
    std::size_t bias = 0, bcount = 0;
    std::size_t gamma = 0, beta = 0, bncount = 0;   // offsets into trainable
    std::size_t run_mean = 0, run_var = 0;          // offsets into state
};

struct Layout {
    std::vector<LayerLayout> layers;
    std::size_t trainable_count = 0;
    std::size_t state_count = 0;
};

inline Layout compute_layout(const ModelSpec& spec) {
    Layout lay;
    lay.layers.resize(spec.layers.size());
    for (std::size_t li = 0; li < spec.layers.size(); ++li) {
        const LayerSpec& l = spec.layers[li];
        if (l.kind != LayerKind::Conv) continue;
        LayerLayout& e = lay.layers[li];
        const int k = l.extent;
        e.wcount = static_cast<std::size_t>(l.out_channels) * l.in_channels * k * k * k;
        e.bcount = static_cast<std::size_t>(l.out_channels);
        e.weights = lay.trainable_count;
        lay.trainable_count += e.wcount;
        e.bias = lay.trainable_count;
        lay.trainable_count += e.bcount;
        if (l.batchnorm) {
            e.bncount = static_cast<std::size_t>(l.out_channels);
            e.gamma = lay.trainable_count;
            lay.trainable_count += e.bncount;
            e.beta = lay.trainable_count;
            lay.trainable_count += e.bncount;
            e.run_mean = lay.state_count;
            lay.state_count += e.bncount;
            e.run_var = lay.state_count;
            lay.state_count += e.bncount;
        }
    }
    return lay;
}

inline std::size_t parameter_count(const ModelSpec& spec) {
    return compute_layout(spec).trainable_count;
}

template <class T>
struct ModelParamsT {
    std::vector<T> trainable;
    std::vector<T> state;
};

using ModelParams = ModelParamsT<float>;

// Fan-in scaled uniform init, bound sqrt(6 / fan_in); biases and the affine
// shift start at zero, scales at one, running stats at (0, 1). Each layer
// draws from its own derived stream so widths elsewhere do not shift it.
template <class T>
ModelParamsT<T> init_params(const ModelSpec& spec, std::uint64_t seed) {
    validate_model(spec);
    const Layout lay = compute_layout(spec);
    ModelParamsT<T> p;
    p.trainable.assign(lay.trainable_count, T(0));
    p.state.assign(lay.state_count, T(0));
    for (std::size_t li = 0; li < spec.layers.size(); ++li) {
        const LayerSpec& l = spec.layers[li];
        if (l.kind != LayerKind::Conv) continue;
        const LayerLayout& e = lay.layers[li];
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(li)));
        const double fan_in =
            static_cast<double>(l.in_channels) * l.extent * l.extent * l.extent;
        const double bound = std::sqrt(6.0 / fan_in);
        for (std::size_t j = 0; j < e.wcount; ++j)
            p.trainable[e.weights + j] = static_cast<T>(rng.uniform(-bound, bound));
        // bias already zero
        if (l.batchnorm) {
            for (std::size_t j = 0; j < e.bncount; ++j) {
                p.trainable[e.gamma + j] = T(1);
                p.state[e.run_var + j] = T(1);
            }
        }
    }
    return p;
}

// ---------------------------------------------------------------------------
// Executor
// ---------------------------------------------------------------------------

template <class T>
struct Tape {
    Batch<T> input;
    std::vector<Batch<T>> outputs;                            // per layer
    std::vector<Batch<T>> act_out;                            // pre-dropout, when dropout > 0
    std::vector<BatchNormSave<T>> bn_saves;                   // when batchnorm
    std::vector<std::vector<std::vector<std::uint8_t>>> dropout_masks;  // [layer][item]
    std::vector<std::vector<std::vector<std::int64_t>>> pool_argmax;    // [layer][item]
};

namespace detail {

template <class T>
Kernel<T> kernel_view(const ModelSpec& spec, const Layout& lay, const ModelParamsT<T>& params,
                      std::size_t li) {
    const LayerSpec& l = spec.layers[li];
    const LayerLayout& e = lay.layers[li];
    Kernel<T> k(l.out_channels, l.in_channels, l.extent);
    std::copy_n(params.trainable.data() + e.weights, e.wcount, k.weights.data());
    std::copy_n(params.trainable.data() + e.bias, e.bcount, k.bias.data());
    return k;
}

template <class T>
BasicVolume<T> concat_channels(const BasicVolume<T>& a, const BasicVolume<T>& b) {
    if (a.dims() != b.dims())
        throw ShapeMismatch("concat joins " + to_string(a.dims()) + " with " +
                            to_string(b.dims()));
    BasicVolume<T> out(a.channels() + b.channels(), a.dims());
    std::copy_n(a.data(), a.size(), out.data());
    std::copy_n(b.data(), b.size(), out.data() + a.size());
    return out;
}

template <class T>
void add_into(Batch<T>& dst, const Batch<T>& src) {
    if (dst.empty()) {
        dst = src;
        return;
    }
    for (std::size_t b = 0; b < dst.size(); ++b)
        for (std::size_t j = 0; j < dst[b].size(); ++j) dst[b].raw()[j] += src[b].raw()[j];
}

}  // namespace detail

// Training-mode forward over a batch. Returns raw classifier outputs (the
// trailing softmax is fused into the loss); batchnorm sees batch statistics
// and updates the running estimates in `params.state`; dropout masks are
// drawn from streams derived from (dropout_seed, layer, item).
template <class T>
Batch<T> model_forward_train(const ModelSpec& spec, const Layout& lay, ModelParamsT<T>& params,
                             const Batch<T>& input, std::uint64_t dropout_seed,
                             std::type_identity_t<Tape<T>>* tape) {
    if (input.empty()) throw ShapeMismatch("training batch is empty");
    for (const auto& v : input)
        if (v.channels() != spec.in_channels)
            throw ShapeMismatch("input has " + std::to_string(v.channels()) +
                                " channels, model expects " + std::to_string(spec.in_channels));
    const std::size_t L = spec.layers.size();
    if (tape) {
        tape->input = input;
        tape->outputs.assign(L, {});
        tape->act_out.assign(L, {});
        tape->bn_saves.assign(L, {});
        tape->dropout_masks.assign(L, {});
        tape->pool_argmax.assign(L, {});
    }

    std::vector<Batch<T>> outputs(L);
    const Batch<T>* prev = &input;
    for (std::size_t li = 0; li < L; ++li) {
        const LayerSpec& l = spec.layers[li];
        Batch<T>& out = outputs[li];
        switch (l.kind) {
            case LayerKind::Conv: {
                const Kernel<T> k = detail::kernel_view(spec, lay, params, li);
                const ConvConfig cfg = ConvConfig::padded(l.pad, l.dilation);
                Batch<T> y(prev->size());
                for (std::size_t b = 0; b < prev->size(); ++b)
                    y[b] = conv3d_forward((*prev)[b], k, cfg);
                if (l.batchnorm) {
                    const LayerLayout& e = lay.layers[li];
                    std::span<T> rm(params.state.data() + e.run_mean, e.bncount);
                    std::span<T> rv(params.state.data() + e.run_var, e.bncount);
                    std::span<const T> gamma(params.trainable.data() + e.gamma, e.bncount);
                    std::span<const T> beta(params.trainable.data() + e.beta, e.bncount);
                    y = batchnorm_forward_train<T>(y, gamma, beta, rm, rv, spec.bn_momentum,
                                                   spec.bn_epsilon,
                                                   tape ? &tape->bn_saves[li] : nullptr);
                }
                for (auto& v : y) {
                    if (l.activation == Activation::Relu) v = relu(v);
                    else if (l.activation == Activation::Tanh) v = tanh_op(v);
                    // Softmax is deferred to the loss in training mode
                }
                if (l.dropout > 0.0) {
                    if (tape) {
                        tape->act_out[li] = y;
                        tape->dropout_masks[li].resize(y.size());
                    }
                    for (std::size_t b = 0; b < y.size(); ++b) {
                        Rng rng(mix_seed(dropout_seed, static_cast<std::uint64_t>(li),
                                         static_cast<std::uint64_t>(b)));
                        y[b] = dropout_forward(y[b], l.dropout, rng,
                                               tape ? &tape->dropout_masks[li][b] : nullptr);
                    }
                }
                out = std::move(y);
                break;
            }
            case LayerKind::MaxPool: {
                out.resize(prev->size());
                if (tape) tape->pool_argmax[li].resize(prev->size());
                for (std::size_t b = 0; b < prev->size(); ++b)
                    out[b] = maxpool3d_forward((*prev)[b],
                                               tape ? &tape->pool_argmax[li][b] : nullptr);
                break;
            }
            case LayerKind::Upsample: {
                out.resize(prev->size());
                for (std::size_t b = 0; b < prev->size(); ++b)
                    out[b] = upsample3d_forward((*prev)[b]);
                break;
            }
            case LayerKind::ConcatSkip: {
                out.resize(prev->size());
                for (std::size_t b = 0; b < prev->size(); ++b)
                    out[b] = detail::concat_channels((*prev)[b], outputs[l.skip_from][b]);
                break;
            }
        }
        if (tape) tape->outputs[li] = out;
        prev = &outputs[li];
    }
    return outputs.back();
}

// Inference forward for a single volume: batchnorm uses running statistics,
// dropout is the identity, the trailing softmax (if declared) is applied.
template <class T>
BasicVolume<T> model_forward_eval(const ModelSpec& spec, const Layout& lay,
                                  const ModelParamsT<T>& params, const BasicVolume<T>& input) {
    if (input.channels() != spec.in_channels)
        throw ShapeMismatch("input has " + std::to_string(input.channels()) +
                            " channels, model expects " + std::to_string(spec.in_channels));
    const std::size_t L = spec.layers.size();
    std::vector<BasicVolume<T>> outputs(L);
    const BasicVolume<T>* prev = &input;
    for (std::size_t li = 0; li < L; ++li) {
        const LayerSpec& l = spec.layers[li];
        switch (l.kind) {
            case LayerKind::Conv: {
                const Kernel<T> k = detail::kernel_view(spec, lay, params, li);
                BasicVolume<T> y = conv3d_forward(*prev, k, ConvConfig::padded(l.pad, l.dilation));
                if (l.batchnorm) {
                    const LayerLayout& e = lay.layers[li];
                    y = batchnorm_forward_eval<T>(
                        y, std::span<const T>(params.trainable.data() + e.gamma, e.bncount),
                        std::span<const T>(params.trainable.data() + e.beta, e.bncount),
                        std::span<const T>(params.state.data() + e.run_mean, e.bncount),
                        std::span<const T>(params.state.data() + e.run_var, e.bncount),
                        spec.bn_epsilon);
                }
                if (l.activation == Activation::Relu) y = relu(y);
                else if (l.activation == Activation::Tanh) y = tanh_op(y);
                else if (l.activation == Activation::Softmax) y = softmax_voxelwise(y);
                outputs[li] = std::move(y);
                break;
            }
            case LayerKind::MaxPool:
                outputs[li] = maxpool3d_forward(*prev, nullptr);
                break;
            case LayerKind::Upsample:
                outputs[li] = upsample3d_forward(*prev);
                break;
            case LayerKind::ConcatSkip:
                outputs[li] = detail::concat_channels(*prev, outputs[l.skip_from]);
                break;
        }
        prev = &outputs[li];
    }
    return outputs.back();
}

// Reverse pass over a taped training forward. `grad_logits` is the loss
// gradient at the classifier output; the return value is the gradient of the
// flat trainable array (same layout as `params.trainable`).
template <class T>
std::vector<T> model_backward(const ModelSpec& spec, const Layout& lay,
                              const ModelParamsT<T>& params, const Tape<T>& tape,
                              const Batch<T>& grad_logits) {
    const std::size_t L = spec.layers.size();
    if (tape.outputs.size() != L) throw ShapeMismatch("tape does not match the model");
    std::vector<T> grads(lay.trainable_count, T(0));
    std::vector<Batch<T>> grad_at(L);  // gradient w.r.t. each layer's output
    grad_at[L - 1] = grad_logits;

    for (std::size_t li = L; li-- > 0;) {
        Batch<T>& g = grad_at[li];
        if (g.empty()) continue;  // no path to the loss (cannot happen in built models)
        const LayerSpec& l = spec.layers[li];
        const Batch<T>& layer_in = (li == 0) ? tape.input : tape.outputs[li - 1];
        switch (l.kind) {
            case LayerKind::Conv: {
                if (l.dropout > 0.0)
                    for (std::size_t b = 0; b < g.size(); ++b)
                        g[b] = dropout_backward(g[b], tape.dropout_masks[li][b], l.dropout);
                if (l.activation == Activation::Relu || l.activation == Activation::Tanh) {
                    const Batch<T>& act =
                        l.dropout > 0.0 ? tape.act_out[li] : tape.outputs[li];
                    for (std::size_t b = 0; b < g.size(); ++b)
                        g[b] = l.activation == Activation::Relu
                                   ? relu_backward(g[b], act[b])
                                   : tanh_backward(g[b], act[b]);
                }
                // training-mode Softmax was deferred to the loss: nothing here
                const LayerLayout& e = lay.layers[li];
                if (l.batchnorm) {
                    std::span<const T> gamma(params.trainable.data() + e.gamma, e.bncount);
                    std::span<T> dgamma(grads.data() + e.gamma, e.bncount);
                    std::span<T> dbeta(grads.data() + e.beta, e.bncount);
                    g = batchnorm_backward<T>(g, tape.bn_saves[li], gamma, dgamma, dbeta);
                }
                const Kernel<T> k = detail::kernel_view(spec, lay, params, li);
                const ConvConfig cfg = ConvConfig::padded(l.pad, l.dilation);
                Batch<T> gin(g.size());
                for (std::size_t b = 0; b < g.size(); ++b) {
                    ConvGrads<T> cg = conv3d_backward(g[b], layer_in[b], k, cfg);
                    for (std::size_t j = 0; j < e.wcount; ++j)
                        grads[e.weights + j] += cg.weights[j];
                    for (std::size_t j = 0; j < e.bcount; ++j)
                        grads[e.bias + j] += cg.bias[j];
                    gin[b] = std::move(cg.input);
                }
                if (li > 0) detail::add_into(grad_at[li - 1], gin);
                break;
            }
            case LayerKind::MaxPool: {
                Batch<T> gin(g.size());
                for (std::size_t b = 0; b < g.size(); ++b)
                    gin[b] = maxpool3d_backward(g[b], tape.pool_argmax[li][b],
                                                layer_in[b].channels(), layer_in[b].dims());
                if (li > 0) detail::add_into(grad_at[li - 1], gin);
                break;
            }
            case LayerKind::Upsample: {
                Batch<T> gin(g.size());
                for (std::size_t b = 0; b < g.size(); ++b) gin[b] = upsample3d_backward(g[b]);
                if (li > 0) detail::add_into(grad_at[li - 1], gin);
                break;
            }
            case LayerKind::ConcatSkip: {
                const int main_ch = layer_in[0].channels();
                Batch<T> gmain(g.size()), gskip(g.size());
                for (std::size_t b = 0; b < g.size(); ++b) {
                    const BasicVolume<T>& gb = g[b];
                    const std::int64_t n = gb.dims().voxels();
                    gmain[b] = BasicVolume<T>(main_ch, gb.dims());
                    gskip[b] = BasicVolume<T>(gb.channels() - main_ch, gb.dims());
                    std::copy_n(gb.data(), static_cast<std::size_t>(main_ch) * n,
                                gmain[b].data());
                    std::copy_n(gb.data() + static_cast<std::size_t>(main_ch) * n,
                                static_cast<std::size_t>(gb.channels() - main_ch) * n,
                                gskip[b].data());
                }
                if (li > 0) detail::add_into(grad_at[li - 1], gmain);
                detail::add_into(grad_at[l.skip_from], gskip);
                break;
            }
        }
        g.clear();  // free as we go
        g.shrink_to_fit();
    }
    return grads;
}

// ---------------------------------------------------------------------------
// Checkpoints: a JSON manifest carrying the full model description plus
// free-form metadata, then a binary section with the flat parameter arrays
// as little-endian float32. Round-trips are bitwise.
// ---------------------------------------------------------------------------

namespace ckpt {

constexpr const char* kMagicLine = "VOXSEGCKPT 1";
constexpr const char* kBinaryMarker = "---BINARY---";

inline std::string activation_name(Activation a) {
    switch (a) {
        case Activation::None: return "none";
        case Activation::Relu: return "relu";
        case Activation::Tanh: return "tanh";
        case Activation::Softmax: return "softmax";
    }
    return "none";
}

inline Activation activation_from(const std::string& s) {
    if (s == "none") return Activation::None;
    if (s == "relu") return Activation::Relu;
    if (s == "tanh") return Activation::Tanh;
    if (s == "softmax") return Activation::Softmax;
    throw InvalidConfig("unknown activation: " + s);
}

inline std::string kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::Conv: return "conv";
        case LayerKind::MaxPool: return "maxpool";
        case LayerKind::Upsample: return "upsample";
        case LayerKind::ConcatSkip: return "concat";
    }
    return "conv";
}

inline LayerKind kind_from(const std::string& s) {
    if (s == "conv") return LayerKind::Conv;
    if (s == "maxpool") return LayerKind::MaxPool;
    if (s == "upsample") return LayerKind::Upsample;
    if (s == "concat") return LayerKind::ConcatSkip;
    throw InvalidConfig("unknown layer kind: " + s);
}

}  // namespace ckpt

inline nlohmann::json spec_to_json(const ModelSpec& spec) {
    nlohmann::json j;
    j["name"] = spec.name;
    j["in_channels"] = spec.in_channels;
    j["num_classes"] = spec.num_classes;
    j["bn_epsilon"] = spec.bn_epsilon;
    j["bn_momentum"] = spec.bn_momentum;
    j["layers"] = nlohmann::json::array();
    for (const LayerSpec& l : spec.layers) {
        nlohmann::json e;
        e["kind"] = ckpt::kind_name(l.kind);
        if (l.kind == LayerKind::Conv) {
            e["in"] = l.in_channels;
            e["out"] = l.out_channels;
            e["extent"] = l.extent;
            e["pad"] = l.pad;
            e["dilation"] = l.dilation;
            e["batchnorm"] = l.batchnorm;
            e["activation"] = ckpt::activation_name(l.activation);
            e["dropout"] = l.dropout;
        } else if (l.kind == LayerKind::ConcatSkip) {
            e["skip_from"] = l.skip_from;
        }
        j["layers"].push_back(e);
    }
    return j;
}

inline ModelSpec spec_from_json(const nlohmann::json& j) {
    ModelSpec spec;
    spec.name = j.at("name").get<std::string>();
    spec.in_channels = j.at("in_channels").get<int>();
    spec.num_classes = j.at("num_classes").get<int>();
    spec.bn_epsilon = j.at("bn_epsilon").get<double>();
    spec.bn_momentum = j.at("bn_momentum").get<double>();
    for (const auto& e : j.at("layers")) {
        LayerSpec l;
        l.kind = ckpt::kind_from(e.at("kind").get<std::string>());
        if (l.kind == LayerKind::Conv) {
            l.in_channels = e.at("in").get<int>();
            l.out_channels = e.at("out").get<int>();
            l.extent = e.at("extent").get<int>();
            l.pad = e.at("pad").get<int>();
            l.dilation = e.at("dilation").get<int>();
            l.batchnorm = e.at("batchnorm").get<bool>();
            l.activation = ckpt::activation_from(e.at("activation").get<std::string>());
            l.dropout = e.at("dropout").get<double>();
        } else if (l.kind == LayerKind::ConcatSkip) {
            l.skip_from = e.at("skip_from").get<int>();
        }
        spec.layers.push_back(l);
    }
    validate_model(spec);
    return spec;
}

struct Checkpoint {
    ModelSpec spec;
    ModelParams params;
    nlohmann::json meta;  // free-form: seed, normalization, training history
};

inline void save_checkpoint(const std::filesystem::path& path, const ModelSpec& spec,
                            const ModelParams& params, const nlohmann::json& meta = {}) {
    const Layout lay = compute_layout(spec);
    if (params.trainable.size() != lay.trainable_count ||
        params.state.size() != lay.state_count)
        throw ShapeMismatch("parameter arrays do not match the model layout");
    nlohmann::json manifest;
    manifest["model"] = spec_to_json(spec);
    manifest["trainable_count"] = params.trainable.size();
    manifest["state_count"] = params.state.size();
    manifest["meta"] = meta.is_null() ? nlohmann::json::object() : meta;

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IOFailure("cannot open " + path.string() + " for writing");
    os << ckpt::kMagicLine << "\n" << manifest.dump(2) << "\n" << ckpt::kBinaryMarker << "\n";
    vvol::detail::put_f32_array(os, params.trainable.data(), params.trainable.size());
    vvol::detail::put_f32_array(os, params.state.data(), params.state.size());
    if (!os) throw IOFailure("write failed for " + path.string());
}

namespace ckpt {

inline nlohmann::json read_manifest(std::istream& is, const std::string& path) {
    std::string line;
    if (!std::getline(is, line)) throw TruncatedFile(path + ": empty file");
    if (line != kMagicLine) {
        if (line.rfind("VOXSEGCKPT", 0) == 0)
            throw UnsupportedVersion(path + ": checkpoint version " + line.substr(11));
        throw BadMagic(path + ": not a checkpoint file");
    }
    std::string manifest_text;
    bool found_marker = false;
    while (std::getline(is, line)) {
        if (line == kBinaryMarker) {
            found_marker = true;
            break;
        }
        manifest_text += line;
        manifest_text += '\n';
    }
    if (!found_marker) throw TruncatedFile(path + ": missing binary section");
    try {
        return nlohmann::json::parse(manifest_text);
    } catch (const nlohmann::json::exception& e) {
        throw BadMagic(path + ": manifest is not valid JSON: " + e.what());
    }
}

}  // namespace ckpt

/// Reads only the manifest (model description + metadata), skipping the
/// parameter blob; used for fail-fast shape checks before any heavy work.
inline nlohmann::json peek_checkpoint_manifest(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IOFailure("cannot open " + path.string());
    return ckpt::read_manifest(is, path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IOFailure("cannot open " + path.string());
    const nlohmann::json manifest = ckpt::read_manifest(is, path.string());
    Checkpoint c;
    c.spec = spec_from_json(manifest.at("model"));
    c.meta = manifest.value("meta", nlohmann::json::object());
    const Layout lay = compute_layout(c.spec);
    const auto tcount = manifest.at("trainable_count").get<std::size_t>();
    const auto scount = manifest.at("state_count").get<std::size_t>();
    if (tcount != lay.trainable_count || scount != lay.state_count)
        throw ShapeMismatch(path.string() + ": parameter counts do not match the model");
    c.params.trainable.resize(tcount);
    c.params.state.resize(scount);
    vvol::detail::get_f32_array(is, c.params.trainable.data(), tcount);
    vvol::detail::get_f32_array(is, c.params.state.data(), scount);
    return c;
}

}  // namespace voxseg
