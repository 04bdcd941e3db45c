#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "voxseg/errors.hpp"
#include "voxseg/rng.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

// ---------------------------------------------------------------------------
// Subvolume selection. Training crops are centered on Gaussian draws around
// the volume center so that dense central structures are sampled more often
// than the mostly-empty margins; inference uses a deterministic stride-`side`
// grid (last row shifted flush to the far face) plus optional extra Gaussian
// draws whose overlapping votes smooth seam artifacts.
// ---------------------------------------------------------------------------

struct SamplerConfig {
    double sigma = 0.0;      // <= 0: per-axis default, extent / 5
    int side = 68;           // cubic crop edge, matches the model input
    std::uint64_t seed = 0;  // stream for the Gaussian draws
};

class GaussianSampler {
  public:
    GaussianSampler(Dims dims, const SamplerConfig& cfg)
        : dims_(dims), cfg_(cfg), rng_(cfg.seed) {
        if (cfg.side < 1) throw InvalidConfig("sampler side must be >= 1");
        if (cfg.side > dims.d || cfg.side > dims.h || cfg.side > dims.w)
            throw SubvolumeTooLarge("side " + std::to_string(cfg.side) +
                                    " does not fit in a " + to_string(dims) + " volume");
    }

    // One crop: per axis, draw center ~ N(extent/2, sigma), round half away
    // from zero, take origin = center - side/2, clamp into the valid range.
    SubvolumeRef next() {
        SubvolumeRef ref;
        ref.z = origin_along(dims_.d);
        ref.y = origin_along(dims_.h);
        ref.x = origin_along(dims_.w);
        ref.side = cfg_.side;
        return ref;
    }

    std::vector<SubvolumeRef> sample(int n) {
        if (n < 0) throw InvalidConfig("sample count must be >= 0");
        std::vector<SubvolumeRef> out;
        out.reserve(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) out.push_back(next());
        return out;
    }

    const Dims& dims() const { return dims_; }

  private:
    int origin_along(int extent) {
        const double mu = extent / 2.0;
        const double sigma = cfg_.sigma > 0.0 ? cfg_.sigma : extent / 5.0;
        const long long center = std::llround(rng_.normal(mu, sigma));
        long long origin = center - cfg_.side / 2;
        origin = std::max<long long>(0, std::min<long long>(origin, extent - cfg_.side));
        return static_cast<int>(origin);
    }

    Dims dims_;
    SamplerConfig cfg_;
    Rng rng_;
};

namespace detail {

// Stride-`side` origins from zero; when that leaves a remainder strip the
// last origin is shifted flush so the far face is always covered.
inline std::vector<int> axis_origins(int extent, int side) {
    if (side > extent)
        throw SubvolumeTooLarge("side " + std::to_string(side) + " exceeds extent " +
                                std::to_string(extent));
    std::vector<int> out;
    for (int o = 0; o + side <= extent; o += side) out.push_back(o);
    if (out.back() + side < extent) out.push_back(extent - side);
    return out;
}

}  // namespace detail

struct CoveragePlan {
    Dims dims{};
    int side = 0;
    std::vector<SubvolumeRef> grid;     // deterministic, jointly exhaustive
    std::vector<SubvolumeRef> sampled;  // extra randomized crops

    std::vector<SubvolumeRef> all() const {
        std::vector<SubvolumeRef> out = grid;
        out.insert(out.end(), sampled.begin(), sampled.end());
        return out;
    }
};

inline CoveragePlan plan_inference(Dims dims, const SamplerConfig& cfg, int n_random) {
    if (n_random < 0) throw InvalidConfig("random crop count must be >= 0");
    CoveragePlan plan;
    plan.dims = dims;
    plan.side = cfg.side;
    const std::vector<int> zs = detail::axis_origins(dims.d, cfg.side);
    const std::vector<int> ys = detail::axis_origins(dims.h, cfg.side);
    const std::vector<int> xs = detail::axis_origins(dims.w, cfg.side);
    for (int z : zs)
        for (int y : ys)
            for (int x : xs) plan.grid.push_back(SubvolumeRef{z, y, x, cfg.side});
    if (n_random > 0) {
        GaussianSampler sampler(dims, cfg);
        plan.sampled = sampler.sample(n_random);
    }
    return plan;
}

}  // namespace voxseg
