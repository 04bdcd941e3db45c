#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <type_traits>
#include <vector>

#include "voxseg/errors.hpp"
#include "voxseg/rng.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

// ---------------------------------------------------------------------------
// Volumetric convolution, plain and dilated.
//
// Weights are stored [out][in][tz][ty][tx] with tap index 0 holding the most
// negative kernel coordinate, so weights[...][0][0][0] multiplies the sample
// at (+az, +ay, +ax) relative to the output voxel (true convolution, not
// correlation). Output spatial extent per axis: in + 2*pad - dilation*(k-1).
// Accumulation is 64-bit regardless of the stored scalar type; every output
// element is owned by exactly one loop iteration, so parallel execution is
// bit-identical to serial.
// ---------------------------------------------------------------------------

template <class T>
struct Kernel {
    int out_channels = 0, in_channels = 0;
    int kd = 1, kh = 1, kw = 1;  // odd extents
    std::vector<T> weights;      // out * in * kd * kh * kw
    std::vector<T> bias;         // out

    Kernel() = default;
    Kernel(int out_ch, int in_ch, int extent)
        : Kernel(out_ch, in_ch, extent, extent, extent) {}
    Kernel(int out_ch, int in_ch, int ekd, int ekh, int ekw)
        : out_channels(out_ch), in_channels(in_ch), kd(ekd), kh(ekh), kw(ekw),
          weights(static_cast<std::size_t>(out_ch) * in_ch * ekd * ekh * ekw, T(0)),
          bias(static_cast<std::size_t>(out_ch), T(0)) {
        validate();
    }

    std::size_t weight_index(int o, int i, int tz, int ty, int tx) const {
        return ((((static_cast<std::size_t>(o) * in_channels + i) * kd + tz) * kh + ty) * kw +
                tx);
    }
    T& w(int o, int i, int tz, int ty, int tx) { return weights[weight_index(o, i, tz, ty, tx)]; }
    const T& w(int o, int i, int tz, int ty, int tx) const {
        return weights[weight_index(o, i, tz, ty, tx)];
    }

    void validate() const {
        if (out_channels < 1 || in_channels < 1)
            throw InvalidConfig("kernel channel counts must be >= 1");
        if (kd < 1 || kh < 1 || kw < 1 || kd % 2 == 0 || kh % 2 == 0 || kw % 2 == 0)
            throw InvalidConfig("kernel extents must be odd and >= 1");
        if (weights.size() != static_cast<std::size_t>(out_channels) * in_channels * kd * kh * kw)
            throw ShapeMismatch("kernel weight array has the wrong length");
        if (bias.size() != static_cast<std::size_t>(out_channels))
            throw ShapeMismatch("kernel bias array has the wrong length");
    }
};

struct ConvConfig {
    int dilation = 1;  // isotropic
    int pad_d = 0, pad_h = 0, pad_w = 0;

    static ConvConfig padded(int pad, int dilation = 1) {
        return ConvConfig{dilation, pad, pad, pad};
    }
};

namespace detail {

inline int conv_out_extent(int in, int pad, int dilation, int k) {
    return in + 2 * pad - dilation * (k - 1);
}

template <class T>
Dims conv_check(const BasicVolume<T>& input, const Kernel<T>& kernel, const ConvConfig& cfg) {
    kernel.validate();
    if (input.channels() != kernel.in_channels)
        throw ShapeMismatch("input has " + std::to_string(input.channels()) +
                            " channels, kernel expects " + std::to_string(kernel.in_channels));
    if (cfg.dilation < 1 || cfg.pad_d < 0 || cfg.pad_h < 0 || cfg.pad_w < 0)
        throw InvalidConfig("dilation must be >= 1 and padding >= 0");
    const Dims out{conv_out_extent(input.dims().d, cfg.pad_d, cfg.dilation, kernel.kd),
                   conv_out_extent(input.dims().h, cfg.pad_h, cfg.dilation, kernel.kh),
                   conv_out_extent(input.dims().w, cfg.pad_w, cfg.dilation, kernel.kw)};
    if (out.d < 1 || out.h < 1 || out.w < 1)
        throw InvalidConfig("convolution output extent would be " + to_string(out));
    return out;
}

template <class T>
BasicVolume<T> zero_pad(const BasicVolume<T>& v, int pd, int ph, int pw) {
    if (pd == 0 && ph == 0 && pw == 0) return v;
    BasicVolume<T> out(v.channels(),
                       {v.dims().d + 2 * pd, v.dims().h + 2 * ph, v.dims().w + 2 * pw});
    for (int c = 0; c < v.channels(); ++c)
        for (int z = 0; z < v.dims().d; ++z)
            for (int y = 0; y < v.dims().h; ++y)
                std::copy_n(&v.at(c, z, y, 0), v.dims().w, &out.at(c, z + pd, y + ph, pw));
    return out;
}

// out(o,z,y,x) = bias[o] + sum_i sum_t w[o][i][t] * P(i, z + l*tz, y + l*ty, x + l*tx)
template <class T>
void conv_core(const BasicVolume<T>& P, const T* w, int kd, int kh, int kw, int l, const T* bias,
               BasicVolume<T>& out) {
    const int oc = out.channels(), od = out.dims().d, oh = out.dims().h, ow = out.dims().w;
    const int ic = P.channels();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int o = 0; o < oc; ++o)
        for (int z = 0; z < od; ++z) {
            std::vector<double> acc(ow);
            for (int y = 0; y < oh; ++y) {
                const double b = bias ? static_cast<double>(bias[o]) : 0.0;
                std::fill(acc.begin(), acc.end(), b);
                for (int i = 0; i < ic; ++i)
                    for (int tz = 0; tz < kd; ++tz)
                        for (int ty = 0; ty < kh; ++ty) {
                            const T* prow = &P.at(i, z + l * tz, y + l * ty, 0);
                            const T* wrow =
                                w + ((((static_cast<std::size_t>(o) * ic + i) * kd + tz) * kh +
                                      ty) *
                                     kw);
                            for (int tx = 0; tx < kw; ++tx) {
                                const double wv = static_cast<double>(wrow[tx]);
                                const T* p = prow + l * tx;
                                for (int x = 0; x < ow; ++x)
                                    acc[x] += wv * static_cast<double>(p[x]);
                            }
                        }
                T* orow = &out.at(o, z, y, 0);
                for (int x = 0; x < ow; ++x) orow[x] = static_cast<T>(acc[x]);
            }
        }
}

// tap-reversed copy: rev[o][i][t] = w[o][i][k-1-t] per axis
template <class T>
std::vector<T> reverse_taps(const Kernel<T>& k) {
    std::vector<T> rev(k.weights.size());
    for (int o = 0; o < k.out_channels; ++o)
        for (int i = 0; i < k.in_channels; ++i)
            for (int tz = 0; tz < k.kd; ++tz)
                for (int ty = 0; ty < k.kh; ++ty)
                    for (int tx = 0; tx < k.kw; ++tx)
                        rev[k.weight_index(o, i, tz, ty, tx)] =
                            k.w(o, i, k.kd - 1 - tz, k.kh - 1 - ty, k.kw - 1 - tx);
    return rev;
}

}  // namespace detail

template <class T>
BasicVolume<T> conv3d_forward(const BasicVolume<T>& input, const Kernel<T>& kernel,
                              const ConvConfig& cfg) {
    const Dims out_dims = detail::conv_check(input, kernel, cfg);
    const BasicVolume<T> padded = detail::zero_pad(input, cfg.pad_d, cfg.pad_h, cfg.pad_w);
    const std::vector<T> wrev = detail::reverse_taps(kernel);
    BasicVolume<T> out(kernel.out_channels, out_dims);
    detail::conv_core(padded, wrev.data(), kernel.kd, kernel.kh, kernel.kw, cfg.dilation,
                      kernel.bias.data(), out);
    return out;
}

template <class T>
struct ConvGrads {
    BasicVolume<T> input;
    std::vector<T> weights;
    std::vector<T> bias;
};

template <class T>
ConvGrads<T> conv3d_backward(const BasicVolume<T>& grad_out, const BasicVolume<T>& input,
                             const Kernel<T>& kernel, const ConvConfig& cfg) {
    const Dims out_dims = detail::conv_check(input, kernel, cfg);
    if (grad_out.channels() != kernel.out_channels || grad_out.dims() != out_dims)
        throw ShapeMismatch("grad_out shape does not match the forward output");

    const int l = cfg.dilation;
    const int kd = kernel.kd, kh = kernel.kh, kw = kernel.kw;
    ConvGrads<T> g;

    // grad_bias[o] = sum over grad_out channel o
    g.bias.assign(kernel.out_channels, T(0));
    for (int o = 0; o < kernel.out_channels; ++o) {
        double s = 0.0;
        const T* p = grad_out.channel(o);
        const std::int64_t n = out_dims.voxels();
        for (std::int64_t j = 0; j < n; ++j) s += static_cast<double>(p[j]);
        g.bias[o] = static_cast<T>(s);
    }

    const BasicVolume<T> padded = detail::zero_pad(input, cfg.pad_d, cfg.pad_h, cfg.pad_w);

    // grad_weights via tap-wise dot products against the padded input
    g.weights.assign(kernel.weights.size(), T(0));
    {
        const int oc = kernel.out_channels, ic = kernel.in_channels;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
        // per tap row: lane-parallel FMA into x-indexed accumulators, one
        // horizontal sum per (o,i,tz,ty) pass; taps walk forward over the
        // padded input, which lands on the reversed kernel coordinate
        for (int o = 0; o < oc; ++o)
            for (int i = 0; i < ic; ++i)
                for (int tz = 0; tz < kd; ++tz)
                    for (int ty = 0; ty < kh; ++ty) {
                        std::vector<double> acc(static_cast<std::size_t>(kw) * out_dims.w,
                                                0.0);
                        if (kw == 3) {
                            double* a0 = acc.data();
                            double* a1 = a0 + out_dims.w;
                            double* a2 = a1 + out_dims.w;
                            for (int z = 0; z < out_dims.d; ++z)
                                for (int y = 0; y < out_dims.h; ++y) {
                                    const T* go = &grad_out.at(o, z, y, 0);
                                    const T* p = &padded.at(i, z + l * tz, y + l * ty, 0);
#ifdef _OPENMP
#pragma omp simd
#endif
                                    for (int x = 0; x < out_dims.w; ++x) {
                                        const double gv = static_cast<double>(go[x]);
                                        a0[x] += gv * static_cast<double>(p[x]);
                                        a1[x] += gv * static_cast<double>(p[x + l]);
                                        a2[x] += gv * static_cast<double>(p[x + 2 * l]);
                                    }
                                }
                        } else {
                            for (int z = 0; z < out_dims.d; ++z)
                                for (int y = 0; y < out_dims.h; ++y) {
                                    const T* go = &grad_out.at(o, z, y, 0);
                                    for (int tx = 0; tx < kw; ++tx) {
                                        const T* p =
                                            &padded.at(i, z + l * tz, y + l * ty, l * tx);
                                        double* a = acc.data() + tx * out_dims.w;
#ifdef _OPENMP
#pragma omp simd
#endif
                                        for (int x = 0; x < out_dims.w; ++x)
                                            a[x] += static_cast<double>(go[x]) *
                                                    static_cast<double>(p[x]);
                                    }
                                }
                        }
                        for (int tx = 0; tx < kw; ++tx) {
                            double s = 0.0;
                            const double* a = acc.data() + tx * out_dims.w;
                            for (int x = 0; x < out_dims.w; ++x) s += a[x];
                            g.weights[kernel.weight_index(o, i, kd - 1 - tz, kh - 1 - ty,
                                                          kw - 1 - tx)] = static_cast<T>(s);
                        }
                    }
    }

    // grad_input: convolve the re-padded grad_out with the channel-transposed
    // kernel in forward tap order, then crop away the padding margin
    {
        const BasicVolume<T> gpad =
            detail::zero_pad(grad_out, l * (kd - 1), l * (kh - 1), l * (kw - 1));
        std::vector<T> wt(kernel.weights.size());
        for (int o = 0; o < kernel.out_channels; ++o)
            for (int i = 0; i < kernel.in_channels; ++i)
                for (int tz = 0; tz < kd; ++tz)
                    for (int ty = 0; ty < kh; ++ty)
                        for (int tx = 0; tx < kw; ++tx)
                            wt[((((static_cast<std::size_t>(i) * kernel.out_channels + o) * kd +
                                  tz) *
                                     kh +
                                 ty) *
                                    kw +
                                tx)] = kernel.w(o, i, tz, ty, tx);
        BasicVolume<T> gfull(kernel.in_channels,
                             {input.dims().d + 2 * cfg.pad_d, input.dims().h + 2 * cfg.pad_h,
                              input.dims().w + 2 * cfg.pad_w});
        detail::conv_core(gpad, wt.data(), kd, kh, kw, l, static_cast<const T*>(nullptr), gfull);
        if (cfg.pad_d == 0 && cfg.pad_h == 0 && cfg.pad_w == 0) {
            g.input = std::move(gfull);
        } else {
            g.input = BasicVolume<T>(kernel.in_channels, input.dims());
            for (int c = 0; c < kernel.in_channels; ++c)
                for (int z = 0; z < input.dims().d; ++z)
                    for (int y = 0; y < input.dims().h; ++y)
                        std::copy_n(&gfull.at(c, z + cfg.pad_d, y + cfg.pad_h, cfg.pad_w),
                                    input.dims().w, &g.input.at(c, z, y, 0));
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <class T>
BasicVolume<T> relu(const BasicVolume<T>& v) {
    BasicVolume<T> out = v;
    for (T& x : out.raw()) x = x > T(0) ? x : T(0);
    return out;
}

template <class T>
BasicVolume<T> relu_backward(const BasicVolume<T>& grad, const BasicVolume<T>& output) {
    if (grad.dims() != output.dims() || grad.channels() != output.channels())
        throw ShapeMismatch("relu_backward shape mismatch");
    BasicVolume<T> g = grad;
    for (std::size_t j = 0; j < g.size(); ++j)
        if (!(output.raw()[j] > T(0))) g.raw()[j] = T(0);
    return g;
}

template <class T>
BasicVolume<T> tanh_op(const BasicVolume<T>& v) {
    BasicVolume<T> out = v;
    for (T& x : out.raw()) x = std::tanh(x);
    return out;
}

template <class T>
BasicVolume<T> tanh_backward(const BasicVolume<T>& grad, const BasicVolume<T>& output) {
    if (grad.dims() != output.dims() || grad.channels() != output.channels())
        throw ShapeMismatch("tanh_backward shape mismatch");
    BasicVolume<T> g = grad;
    for (std::size_t j = 0; j < g.size(); ++j)
        g.raw()[j] *= T(1) - output.raw()[j] * output.raw()[j];
    return g;
}

// ---------------------------------------------------------------------------
// Voxel-wise softmax across the channel axis, log-sum-exp stabilized.
// ---------------------------------------------------------------------------

template <class T>
BasicVolume<T> softmax_voxelwise(const BasicVolume<T>& v) {
    BasicVolume<T> out(v.channels(), v.dims());
    const std::int64_t n = v.dims().voxels();
    const int nc = v.channels();
    for (std::int64_t j = 0; j < n; ++j) {
        double m = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < nc; ++c)
            m = std::max(m, static_cast<double>(v.raw()[c * n + j]));
        double sum = 0.0;
        for (int c = 0; c < nc; ++c)
            sum += std::exp(static_cast<double>(v.raw()[c * n + j]) - m);
        for (int c = 0; c < nc; ++c)
            out.raw()[c * n + j] =
                static_cast<T>(std::exp(static_cast<double>(v.raw()[c * n + j]) - m) / sum);
    }
    return out;
}

template <class T>
BasicVolume<T> softmax_backward(const BasicVolume<T>& grad, const BasicVolume<T>& probs) {
    if (grad.dims() != probs.dims() || grad.channels() != probs.channels())
        throw ShapeMismatch("softmax_backward shape mismatch");
    BasicVolume<T> out(probs.channels(), probs.dims());
    const std::int64_t n = probs.dims().voxels();
    const int nc = probs.channels();
    for (std::int64_t j = 0; j < n; ++j) {
        double dot = 0.0;
        for (int c = 0; c < nc; ++c)
            dot += static_cast<double>(grad.raw()[c * n + j]) *
                   static_cast<double>(probs.raw()[c * n + j]);
        for (int c = 0; c < nc; ++c)
            out.raw()[c * n + j] = static_cast<T>(
                static_cast<double>(probs.raw()[c * n + j]) *
                (static_cast<double>(grad.raw()[c * n + j]) - dot));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dropout, inverted scaling: survivors are scaled by 1/(1-p) at train time so
// eval mode is the exact identity. Granularity is per voxel-channel element.
// ---------------------------------------------------------------------------

inline void check_dropout_probability(double p) {
    if (!(p >= 0.0 && p < 1.0))
        throw InvalidProbability("dropout probability must be in [0, 1), got " +
                                 std::to_string(p));
}

template <class T>
BasicVolume<T> dropout_forward(const BasicVolume<T>& v, double p, Rng& rng,
                               std::vector<std::uint8_t>* mask_out) {
    check_dropout_probability(p);
    BasicVolume<T> out = v;
    if (mask_out) mask_out->assign(v.size(), 1);
    if (p == 0.0) return out;
    const T scale = static_cast<T>(1.0 / (1.0 - p));
    for (std::size_t j = 0; j < out.size(); ++j) {
        if (rng.uniform() < p) {
            out.raw()[j] = T(0);
            if (mask_out) (*mask_out)[j] = 0;
        } else {
            out.raw()[j] *= scale;
        }
    }
    return out;
}

template <class T>
BasicVolume<T> dropout_backward(const BasicVolume<T>& grad, const std::vector<std::uint8_t>& mask,
                                double p) {
    check_dropout_probability(p);
    if (mask.size() != grad.size())
        throw ShapeMismatch("dropout mask length does not match the gradient");
    BasicVolume<T> g = grad;
    const T scale = static_cast<T>(1.0 / (1.0 - p));
    for (std::size_t j = 0; j < g.size(); ++j) g.raw()[j] = mask[j] ? g.raw()[j] * scale : T(0);
    return g;
}

// ---------------------------------------------------------------------------
// Batch normalization over batch + spatial axes per channel.
// ---------------------------------------------------------------------------

template <class T>
struct BatchNormState {
    std::vector<T> gamma, beta, running_mean, running_var;
    T momentum = T(0.1);
    T epsilon = T(1e-5);

    BatchNormState() = default;
    explicit BatchNormState(int channels)
        : gamma(channels, T(1)), beta(channels, T(0)), running_mean(channels, T(0)),
          running_var(channels, T(1)) {}

    void validate() const {
        if (!(epsilon > T(0))) throw InvalidConfig("batchnorm epsilon must be > 0");
        for (const T& v : running_var)
            if (v < T(0)) throw InvalidConfig("batchnorm running variance must be >= 0");
    }
};

template <class T>
struct BatchNormSave {
    Batch<T> xhat;                 // normalized pre-affine activations
    std::vector<double> inv_std;   // per channel, 1/sqrt(var + eps)
};

namespace detail {
template <class T>
void check_batch(const Batch<T>& xs, int channels) {
    if (xs.empty()) throw ShapeMismatch("batch is empty");
    for (const auto& x : xs)
        if (x.channels() != channels || x.dims() != xs.front().dims())
            throw ShapeMismatch("batch items disagree in shape");
}
}  // namespace detail

// Train mode: normalize with the batch statistics, apply gamma/beta, and fold
// the batch statistics into the running estimates (unbiased variance, the
// usual convnet convention).
template <class T>
Batch<T> batchnorm_forward_train(const Batch<T>& xs, std::span<const T> gamma,
                                 std::span<const T> beta, std::span<T> running_mean,
                                 std::span<T> running_var, double momentum, double epsilon,
                                 BatchNormSave<T>* save) {
    const int nc = static_cast<int>(gamma.size());
    detail::check_batch(xs, nc);
    const std::int64_t per_item = xs.front().dims().voxels();
    const double m = static_cast<double>(per_item) * xs.size();

    Batch<T> out(xs.size());
    for (std::size_t b = 0; b < xs.size(); ++b)
        out[b] = BasicVolume<T>(nc, xs.front().dims());
    if (save) {
        save->xhat.assign(xs.size(), BasicVolume<T>(nc, xs.front().dims()));
        save->inv_std.assign(nc, 0.0);
    }

    for (int c = 0; c < nc; ++c) {
        double sum = 0.0, sq = 0.0;
        for (const auto& x : xs) {
            const T* p = x.channel(c);
            for (std::int64_t j = 0; j < per_item; ++j) {
                const double v = static_cast<double>(p[j]);
                sum += v;
                sq += v * v;
            }
        }
        const double mean = sum / m;
        const double var = std::max(0.0, sq / m - mean * mean);
        const double inv_std = 1.0 / std::sqrt(var + epsilon);
        if (save) save->inv_std[c] = inv_std;

        const double g = static_cast<double>(gamma[c]), bta = static_cast<double>(beta[c]);
        for (std::size_t b = 0; b < xs.size(); ++b) {
            const T* p = xs[b].channel(c);
            T* q = out[b].channel(c);
            T* xh = save ? save->xhat[b].channel(c) : nullptr;
            for (std::int64_t j = 0; j < per_item; ++j) {
                const double h = (static_cast<double>(p[j]) - mean) * inv_std;
                if (xh) xh[j] = static_cast<T>(h);
                q[j] = static_cast<T>(g * h + bta);
            }
        }

        const double unbiased = m > 1.0 ? var * m / (m - 1.0) : var;
        running_mean[c] = static_cast<T>((1.0 - momentum) * running_mean[c] + momentum * mean);
        running_var[c] = static_cast<T>((1.0 - momentum) * running_var[c] + momentum * unbiased);
    }
    return out;
}

template <class T>
BasicVolume<T> batchnorm_forward_eval(const BasicVolume<T>& x, std::span<const T> gamma,
                                      std::span<const T> beta, std::span<const T> running_mean,
                                      std::span<const T> running_var, double epsilon) {
    const int nc = static_cast<int>(gamma.size());
    if (x.channels() != nc) throw ShapeMismatch("batchnorm channel count mismatch");
    BasicVolume<T> out(nc, x.dims());
    const std::int64_t n = x.dims().voxels();
    for (int c = 0; c < nc; ++c) {
        const double inv_std = 1.0 / std::sqrt(static_cast<double>(running_var[c]) + epsilon);
        const double mean = static_cast<double>(running_mean[c]);
        const double g = static_cast<double>(gamma[c]), b = static_cast<double>(beta[c]);
        const T* p = x.channel(c);
        T* q = out.channel(c);
        for (std::int64_t j = 0; j < n; ++j)
            q[j] = static_cast<T>(g * ((static_cast<double>(p[j]) - mean) * inv_std) + b);
    }
    return out;
}

// dgamma/dbeta are accumulated into, so layer slices can be reused across a batch.
template <class T>
Batch<T> batchnorm_backward(const Batch<T>& grads, const BatchNormSave<T>& save,
                            std::span<const T> gamma, std::span<T> dgamma, std::span<T> dbeta) {
    const int nc = static_cast<int>(gamma.size());
    detail::check_batch(grads, nc);
    if (save.xhat.size() != grads.size())
        throw ShapeMismatch("batchnorm save does not match the gradient batch");
    const std::int64_t per_item = grads.front().dims().voxels();
    const double m = static_cast<double>(per_item) * grads.size();

    Batch<T> out(grads.size());
    for (std::size_t b = 0; b < grads.size(); ++b)
        out[b] = BasicVolume<T>(nc, grads.front().dims());

    for (int c = 0; c < nc; ++c) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::size_t b = 0; b < grads.size(); ++b) {
            const T* dy = grads[b].channel(c);
            const T* xh = save.xhat[b].channel(c);
            for (std::int64_t j = 0; j < per_item; ++j) {
                sum_dy += static_cast<double>(dy[j]);
                sum_dy_xhat += static_cast<double>(dy[j]) * static_cast<double>(xh[j]);
            }
        }
        dgamma[c] += static_cast<T>(sum_dy_xhat);
        dbeta[c] += static_cast<T>(sum_dy);

        const double k = static_cast<double>(gamma[c]) * save.inv_std[c];
        const double mean_dy = sum_dy / m, mean_dy_xhat = sum_dy_xhat / m;
        for (std::size_t b = 0; b < grads.size(); ++b) {
            const T* dy = grads[b].channel(c);
            const T* xh = save.xhat[b].channel(c);
            T* dx = out[b].channel(c);
            for (std::int64_t j = 0; j < per_item; ++j)
                dx[j] = static_cast<T>(k * (static_cast<double>(dy[j]) - mean_dy -
                                            static_cast<double>(xh[j]) * mean_dy_xhat));
        }
    }
    return out;
}

// struct-based wrappers
template <class T>
Batch<T> batchnorm_forward_train(const Batch<T>& xs, BatchNormState<T>& state,
                                 std::type_identity_t<BatchNormSave<T>>* save = nullptr) {
    state.validate();
    return batchnorm_forward_train<T>(xs, state.gamma, state.beta, state.running_mean,
                                      state.running_var, state.momentum, state.epsilon, save);
}

template <class T>
BasicVolume<T> batchnorm_forward_eval(const BasicVolume<T>& x, const BatchNormState<T>& state) {
    state.validate();
    return batchnorm_forward_eval<T>(x, std::span<const T>(state.gamma),
                                     std::span<const T>(state.beta),
                                     std::span<const T>(state.running_mean),
                                     std::span<const T>(state.running_var), state.epsilon);
}

// ---------------------------------------------------------------------------
// 2^3 max pooling with stride 2, and nearest-neighbor 2x upsampling.
// ---------------------------------------------------------------------------

template <class T>
BasicVolume<T> maxpool3d_forward(const BasicVolume<T>& v, std::vector<std::int64_t>* argmax_out) {
    const Dims in = v.dims();
    if (in.d % 2 || in.h % 2 || in.w % 2)
        throw NonDivisibleDims("maxpool needs even extents, got " + to_string(in));
    const Dims od{in.d / 2, in.h / 2, in.w / 2};
    BasicVolume<T> out(v.channels(), od);
    if (argmax_out) argmax_out->assign(out.size(), 0);
    for (int c = 0; c < v.channels(); ++c)
        for (int z = 0; z < od.d; ++z)
            for (int y = 0; y < od.h; ++y)
                for (int x = 0; x < od.w; ++x) {
                    T best{};
                    std::int64_t best_idx = -1;
                    for (int dz = 0; dz < 2; ++dz)
                        for (int dy = 0; dy < 2; ++dy)
                            for (int dx = 0; dx < 2; ++dx) {
                                const std::int64_t idx =
                                    static_cast<std::int64_t>(
                                        v.index(c, 2 * z + dz, 2 * y + dy, 2 * x + dx));
                                const T val = v.raw()[idx];
                                if (best_idx < 0 || val > best) {  // ties: first in scan order
                                    best = val;
                                    best_idx = idx;
                                }
                            }
                    out.at(c, z, y, x) = best;
                    if (argmax_out) (*argmax_out)[out.index(c, z, y, x)] = best_idx;
                }
    return out;
}

template <class T>
BasicVolume<T> maxpool3d_backward(const BasicVolume<T>& grad_out,
                                  const std::vector<std::int64_t>& argmax, int in_channels,
                                  const Dims& in_dims) {
    if (argmax.size() != grad_out.size())
        throw ShapeMismatch("maxpool argmax does not match the gradient");
    BasicVolume<T> g(in_channels, in_dims, T(0));
    for (std::size_t j = 0; j < grad_out.size(); ++j)
        g.raw()[argmax[j]] += grad_out.raw()[j];
    return g;
}

template <class T>
BasicVolume<T> upsample3d_forward(const BasicVolume<T>& v) {
    const Dims in = v.dims();
    BasicVolume<T> out(v.channels(), {in.d * 2, in.h * 2, in.w * 2});
    for (int c = 0; c < v.channels(); ++c)
        for (int z = 0; z < in.d * 2; ++z)
            for (int y = 0; y < in.h * 2; ++y) {
                const T* src = &v.at(c, z / 2, y / 2, 0);
                T* dst = &out.at(c, z, y, 0);
                for (int x = 0; x < in.w * 2; ++x) dst[x] = src[x / 2];
            }
    return out;
}

template <class T>
BasicVolume<T> upsample3d_backward(const BasicVolume<T>& grad_out) {
    const Dims od = grad_out.dims();
    if (od.d % 2 || od.h % 2 || od.w % 2)
        throw NonDivisibleDims("upsample gradient must have even extents");
    BasicVolume<T> g(grad_out.channels(), {od.d / 2, od.h / 2, od.w / 2}, T(0));
    for (int c = 0; c < grad_out.channels(); ++c)
        for (int z = 0; z < od.d; ++z)
            for (int y = 0; y < od.h; ++y) {
                const T* src = &grad_out.at(c, z, y, 0);
                T* dst = &g.at(c, z / 2, y / 2, 0);
                for (int x = 0; x < od.w; ++x)
                    dst[x / 2] += src[x];
            }
    return g;
}

}  // namespace voxseg
