#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <vector>

#include "voxseg/errors.hpp"
#include "voxseg/model.hpp"
#include "voxseg/preprocess.hpp"
#include "voxseg/sampler.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

// ---------------------------------------------------------------------------
// Majority-vote stitching: every processed crop casts one vote per voxel for
// its predicted class; the stitched label is the class with the most votes,
// ties resolving to the smallest class index. Finalizing demands that every
// voxel was covered at least once.
// ---------------------------------------------------------------------------

class VoteAccumulator {
public:
    VoteAccumulator(Dims dims, int num_classes)
        : dims_(dims), num_classes_(num_classes) {
        if (dims.d < 1 || dims.h < 1 || dims.w < 1)
            throw InvalidConfig("accumulator dims must be positive, got " + to_string(dims));
        if (num_classes < 2 || num_classes > 256)
            throw InvalidConfig("accumulator needs 2..256 classes, got " +
                                std::to_string(num_classes));
        votes_.assign(static_cast<std::size_t>(num_classes) * dims.voxels(), 0);
    }

    Dims dims() const { return dims_; }
    int num_classes() const { return num_classes_; }

    void add(const LabelVolume& sub, const SubvolumeRef& ref) {
        if (!(sub.dims() == Dims{ref.side, ref.side, ref.side}))
            throw ShapeMismatch("crop is " + to_string(sub.dims()) + " but its ref has side " +
                                std::to_string(ref.side));
        if (!ref.fits(dims_))
            throw OutOfBounds("crop at (" + std::to_string(ref.z) + "," + std::to_string(ref.y) +
                              "," + std::to_string(ref.x) + ") side " + std::to_string(ref.side) +
                              " does not fit " + to_string(dims_));
        // Vote counts are uint16; any sane plan casts far fewer than 65535
        // votes per voxel.
        for (int z = 0; z < ref.side; ++z)
            for (int y = 0; y < ref.side; ++y)
                for (int x = 0; x < ref.side; ++x) {
                    const std::uint8_t cls = sub.at(z, y, x);
                    if (cls >= num_classes_)
                        throw ClassOutOfRange("crop label " + std::to_string(cls) +
                                              " exceeds accumulator classes " +
                                              std::to_string(num_classes_));
                    ++votes_[index(cls, ref.z + z, ref.y + y, ref.x + x)];
                }
    }

    std::uint16_t votes_at(int cls, int z, int y, int x) const {
        if (cls < 0 || cls >= num_classes_)
            throw OutOfBounds("class " + std::to_string(cls) + " out of range");
        return votes_[index(cls, z, y, x)];
    }

    LabelVolume finalize() const {
        LabelVolume out(dims_, num_classes_);
        const std::size_t span = dims_.voxels();
        for (std::size_t j = 0; j < span; ++j) {
            int best = 0;
            std::uint32_t best_votes = votes_[j];
            std::uint32_t total = votes_[j];
            for (int c = 1; c < num_classes_; ++c) {
                const std::uint16_t v = votes_[static_cast<std::size_t>(c) * span + j];
                total += v;
                if (v > best_votes) {  // strict: ties keep the smaller class
                    best_votes = v;
                    best = c;
                }
            }
            if (total == 0) {
                const int z = static_cast<int>(j / (static_cast<std::size_t>(dims_.h) * dims_.w));
                const int rem = static_cast<int>(j % (static_cast<std::size_t>(dims_.h) * dims_.w));
                throw EmptyAccumulator("voxel (" + std::to_string(z) + "," +
                                       std::to_string(rem / dims_.w) + "," +
                                       std::to_string(rem % dims_.w) + ") received no votes");
            }
            out.raw()[j] = static_cast<std::uint8_t>(best);
        }
        return out;
    }

private:
    std::size_t index(int cls, int z, int y, int x) const {
        if (z < 0 || y < 0 || x < 0 || z >= dims_.d || y >= dims_.h || x >= dims_.w)
            throw OutOfBounds("vote position out of range");
        return ((static_cast<std::size_t>(cls) * dims_.d + z) * dims_.h + y) * dims_.w + x;
    }

    Dims dims_;
    int num_classes_;
    std::vector<std::uint16_t> votes_;
};

/// Per-voxel argmax over the channel axis; ties pick the smallest channel.
inline LabelVolume argmax_labels(const Volume& probs) {
    if (probs.channels() < 1 || probs.channels() > 256)
        throw InvalidConfig("argmax needs 1..256 channels, got " +
                            std::to_string(probs.channels()));
    LabelVolume out(probs.dims(), probs.channels());
    const std::size_t span = probs.dims().voxels();
    for (std::size_t j = 0; j < span; ++j) {
        int best = 0;
        float best_p = probs.raw()[j];
        for (int c = 1; c < probs.channels(); ++c) {
            const float p = probs.raw()[static_cast<std::size_t>(c) * span + j];
            if (p > best_p) {
                best_p = p;
                best = c;
            }
        }
        out.raw()[j] = static_cast<std::uint8_t>(best);
    }
    return out;
}

/// Runs the model over every crop in the plan and stitches the votes.
/// The same normalization used in training must be supplied here.
inline LabelVolume segment_volume(const ModelSpec& spec, const ModelParams& params,
                                  const Volume& vol, const CoveragePlan& plan,
                                  const NormalizationConfig& norm = {},
                                  const std::function<void(int, int)>& progress = {}) {
    if (!(plan.dims == vol.dims()))
        throw PlanMismatch("plan covers " + to_string(plan.dims) + " but the volume is " +
                           to_string(vol.dims()));
    if (spec.in_channels != vol.channels())
        throw ShapeMismatch("model expects " + std::to_string(spec.in_channels) +
                            " channels, volume has " + std::to_string(vol.channels()));
    const Layout lay = compute_layout(spec);
    VoteAccumulator acc(vol.dims(), spec.num_classes);
    const std::vector<SubvolumeRef> refs = plan.all();
    int done = 0;
    for (const SubvolumeRef& ref : refs) {
        Volume crop = extract_subvolume(vol, ref);
        normalize_inplace(crop, norm);
        const Volume probs = model_forward_eval(spec, lay, params, crop);
        acc.add(argmax_labels(probs), ref);
        ++done;
        if (progress) progress(done, static_cast<int>(refs.size()));
    }
    return acc.finalize();
}

// ---------------------------------------------------------------------------
// Plain-text PGM slice previews (one image per z plane).
// ---------------------------------------------------------------------------

namespace detail {

inline std::filesystem::path slice_path(const std::filesystem::path& dir,
                                        const std::string& stem, int z) {
    std::ostringstream name;
    name << stem << "_z" << std::setw(4) << std::setfill('0') << z << ".pgm";
    return dir / name.str();
}

/// Emits one P2 image; `pixel(y, x)` must return values in [0, 255].
template <class F>
void write_pgm(const std::filesystem::path& path, int h, int w, F&& pixel) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IOFailure("cannot open " + path.string() + " for writing");
    os << "P2\n" << w << " " << h << "\n255\n";
    int line_len = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::string tok = std::to_string(pixel(y, x));
            // The format caps text lines at 70 characters.
            if (line_len + static_cast<int>(tok.size()) + 1 > 68) {
                os << "\n";
                line_len = 0;
            } else if (line_len > 0) {
                os << " ";
                ++line_len;
            }
            os << tok;
            line_len += static_cast<int>(tok.size());
        }
    os << "\n";
    if (!os) throw IOFailure("write failed for " + path.string());
}

}  // namespace detail

/// Label maps are stretched so the largest class index lands on 255.
inline std::vector<std::filesystem::path> write_pgm_slices(
    const LabelVolume& labels, const std::filesystem::path& dir, const std::string& stem) {
    std::filesystem::create_directories(dir);
    const int denom = std::max(labels.num_classes() - 1, 1);
    std::vector<std::filesystem::path> paths;
    for (int z = 0; z < labels.dims().d; ++z) {
        const std::filesystem::path p = detail::slice_path(dir, stem, z);
        detail::write_pgm(p, labels.dims().h, labels.dims().w, [&](int y, int x) {
            return static_cast<int>(labels.at(z, y, x)) * 255 / denom;
        });
        paths.push_back(p);
    }
    return paths;
}

/// One mid-volume slice per axis for quick human inspection, classes mapped
/// to fixed gray levels (largest class index -> 255).
inline std::vector<std::filesystem::path> write_midslice_pgms(
    const LabelVolume& labels, const std::filesystem::path& dir, const std::string& stem) {
    std::filesystem::create_directories(dir);
    const Dims d = labels.dims();
    const int denom = std::max(labels.num_classes() - 1, 1);
    auto level = [&](std::uint8_t cls) { return static_cast<int>(cls) * 255 / denom; };

    std::vector<std::filesystem::path> paths = {dir / (stem + "_mid_z.pgm"),
                                                dir / (stem + "_mid_y.pgm"),
                                                dir / (stem + "_mid_x.pgm")};
    detail::write_pgm(paths[0], d.h, d.w,
                      [&](int y, int x) { return level(labels.at(d.d / 2, y, x)); });
    detail::write_pgm(paths[1], d.d, d.w,
                      [&](int z, int x) { return level(labels.at(z, d.h / 2, x)); });
    detail::write_pgm(paths[2], d.d, d.h,
                      [&](int z, int y) { return level(labels.at(z, y, d.w / 2)); });
    return paths;
}

/// Intensity volumes are min-max scaled over the whole channel.
inline std::vector<std::filesystem::path> write_pgm_slices(
    const Volume& vol, int channel, const std::filesystem::path& dir, const std::string& stem) {
    if (channel < 0 || channel >= vol.channels())
        throw OutOfBounds("channel " + std::to_string(channel) + " out of range");
    std::filesystem::create_directories(dir);
    const float* p = vol.channel(channel);
    const std::size_t span = vol.dims().voxels();
    float lo = p[0], hi = p[0];
    for (std::size_t j = 1; j < span; ++j) {
        lo = std::min(lo, p[j]);
        hi = std::max(hi, p[j]);
    }
    const float scale = hi > lo ? 255.0f / (hi - lo) : 0.0f;
    std::vector<std::filesystem::path> paths;
    for (int z = 0; z < vol.dims().d; ++z) {
        const std::filesystem::path path = detail::slice_path(dir, stem, z);
        detail::write_pgm(path, vol.dims().h, vol.dims().w, [&](int y, int x) {
            return static_cast<int>(std::llround((vol.at(channel, z, y, x) - lo) * scale));
        });
        paths.push_back(path);
    }
    return paths;
}

}  // namespace voxseg
