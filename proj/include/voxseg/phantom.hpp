#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxseg/errors.hpp"
#include "voxseg/rng.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

// ---------------------------------------------------------------------------
// Synthetic "head" phantoms: three concentric, randomly perturbed ellipsoid
// shells (background / gray shell / white core) whose labels are known by
// construction. Intensities are per-tissue means plus Gaussian noise, and a
// configurable fraction of label-boundary voxels can be corrupted to mimic
// imperfect annotations. Everything derives from (seed, volume index), so a
// dataset is reproducible file-for-file.
// ---------------------------------------------------------------------------

struct PhantomSpec {
    Dims dims{64, 64, 64};
    int count = 5;  // volumes per dataset

    // Class means for background (0), gray shell (1), white core (2).
    std::array<double, 3> tissue_means{0.1, 0.5, 0.85};
    double noise_sigma = 0.04;  // additive intensity noise
    double label_noise = 0.0;   // corruption rate over the boundary band
    int noise_band = 1;         // band thickness: voxels within this many
                                // 6-neighbor steps of a class edge

    // Shell geometry: semi-axes as fractions of each half-extent, each axis
    // independently jittered by up to scale_jitter (relative), the center
    // shifted by up to center_jitter (fraction of the extent).
    double outer_scale = 0.80;
    double inner_scale = 0.48;
    double scale_jitter = 0.05;
    double center_jitter = 0.04;

    std::uint64_t seed = 0;

    void validate() const {
        if (dims.d < 4 || dims.h < 4 || dims.w < 4)
            throw InvalidConfig("phantom dims too small: " + to_string(dims));
        if (count < 1) throw InvalidConfig("phantom count must be >= 1");
        if (!(noise_sigma >= 0.0)) throw InvalidConfig("noise_sigma must be >= 0");
        if (!(label_noise >= 0.0 && label_noise < 0.5))
            throw InvalidProbability("label_noise must be in [0, 0.5), got " +
                                     std::to_string(label_noise));
        if (noise_band < 1) throw InvalidConfig("noise_band must be >= 1");
        if (!(outer_scale > 0.0 && outer_scale < 1.0) ||
            !(inner_scale > 0.0 && inner_scale < 1.0) || inner_scale >= outer_scale)
            throw InvalidConfig("shell scales need 0 < inner < outer < 1");
        if (!(scale_jitter >= 0.0 && scale_jitter < 0.5) ||
            !(center_jitter >= 0.0 && center_jitter < 0.5))
            throw InvalidConfig("jitters must be in [0, 0.5)");
        for (double m : tissue_means)
            if (!std::isfinite(m)) throw NonFiniteData("tissue means must be finite");
    }
};

inline constexpr int kPhantomClasses = 3;

struct Phantom {
    Volume image;       // noisy intensities
    LabelVolume clean;  // geometric ground truth
    LabelVolume noisy;  // training labels; equals clean when label_noise == 0
};

/// Marks voxels whose clean label differs from at least one 6-neighbor,
/// then grows the marked set by `radius - 1` further 6-neighbor steps.
inline std::vector<std::uint8_t> boundary_band(const LabelVolume& labels, int radius = 1) {
    if (radius < 1) throw InvalidConfig("band radius must be >= 1");
    const Dims d = labels.dims();
    std::vector<std::uint8_t> band(d.voxels(), 0);
    auto at = [&](int z, int y, int x) { return labels.at(z, y, x); };
    std::size_t j = 0;
    for (int z = 0; z < d.d; ++z)
        for (int y = 0; y < d.h; ++y)
            for (int x = 0; x < d.w; ++x, ++j) {
                const std::uint8_t c = labels.raw()[j];
                const bool edge = (z > 0 && at(z - 1, y, x) != c) ||
                                  (z + 1 < d.d && at(z + 1, y, x) != c) ||
                                  (y > 0 && at(z, y - 1, x) != c) ||
                                  (y + 1 < d.h && at(z, y + 1, x) != c) ||
                                  (x > 0 && at(z, y, x - 1) != c) ||
                                  (x + 1 < d.w && at(z, y, x + 1) != c);
                band[j] = edge ? 1 : 0;
            }
    for (int step = 1; step < radius; ++step) {
        std::vector<std::uint8_t> grown = band;
        auto idx = [&](int z, int y, int x) {
            return (static_cast<std::size_t>(z) * d.h + y) * d.w + x;
        };
        j = 0;
        for (int z = 0; z < d.d; ++z)
            for (int y = 0; y < d.h; ++y)
                for (int x = 0; x < d.w; ++x, ++j) {
                    if (band[j]) continue;
                    const bool near = (z > 0 && band[idx(z - 1, y, x)]) ||
                                      (z + 1 < d.d && band[idx(z + 1, y, x)]) ||
                                      (y > 0 && band[idx(z, y - 1, x)]) ||
                                      (y + 1 < d.h && band[idx(z, y + 1, x)]) ||
                                      (x > 0 && band[idx(z, y, x - 1)]) ||
                                      (x + 1 < d.w && band[idx(z, y, x + 1)]);
                    if (near) grown[j] = 1;
                }
        band.swap(grown);
    }
    return band;
}

/// Each boundary-band voxel is independently rewritten, with probability
/// `rate`, to a uniformly random class different from its clean label.
inline LabelVolume corrupt_boundary_labels(const LabelVolume& clean, double rate, Rng& rng,
                                           int band_radius = 1) {
    if (!(rate >= 0.0 && rate < 0.5))
        throw InvalidProbability("corruption rate must be in [0, 0.5), got " +
                                 std::to_string(rate));
    LabelVolume out = clean;
    if (rate == 0.0) return out;
    const std::vector<std::uint8_t> band = boundary_band(clean, band_radius);
    const int n = clean.num_classes();
    for (std::size_t j = 0; j < band.size(); ++j) {
        if (!band[j] || rng.uniform() >= rate) continue;
        std::uint8_t pick =
            static_cast<std::uint8_t>(rng.uniform_index(static_cast<std::uint64_t>(n - 1)));
        if (pick >= clean.raw()[j]) ++pick;  // skip the clean class
        out.raw()[j] = pick;
    }
    return out;
}

namespace detail {

inline constexpr std::uint64_t kGeoStream = 0x47454f4dull;      // shell geometry
inline constexpr std::uint64_t kNoiseStream = 0x4e4f4953ull;    // intensity noise
inline constexpr std::uint64_t kCorruptStream = 0x434f5252ull;  // label corruption

}  // namespace detail

inline Phantom generate_phantom(const PhantomSpec& spec, int index) {
    spec.validate();
    const Dims d = spec.dims;
    const double ext[3] = {static_cast<double>(d.d), static_cast<double>(d.h),
                           static_cast<double>(d.w)};

    Rng geo(mix_seed(spec.seed, detail::kGeoStream, static_cast<std::uint64_t>(index)));
    double center[3], semi_out[3], semi_in[3];
    for (int a = 0; a < 3; ++a) {
        center[a] = ext[a] / 2.0 + geo.uniform(-spec.center_jitter, spec.center_jitter) * ext[a];
        semi_out[a] = spec.outer_scale * (ext[a] / 2.0) *
                      (1.0 + geo.uniform(-spec.scale_jitter, spec.scale_jitter));
        semi_in[a] = spec.inner_scale * (ext[a] / 2.0) *
                     (1.0 + geo.uniform(-spec.scale_jitter, spec.scale_jitter));
    }

    Phantom out{Volume(1, d), LabelVolume(d, kPhantomClasses), LabelVolume(d, kPhantomClasses)};
    std::size_t j = 0;
    for (int z = 0; z < d.d; ++z)
        for (int y = 0; y < d.h; ++y)
            for (int x = 0; x < d.w; ++x, ++j) {
                const double p[3] = {static_cast<double>(z), static_cast<double>(y),
                                     static_cast<double>(x)};
                double q_in = 0.0, q_out = 0.0;
                for (int a = 0; a < 3; ++a) {
                    const double r = p[a] - center[a];
                    q_in += (r / semi_in[a]) * (r / semi_in[a]);
                    q_out += (r / semi_out[a]) * (r / semi_out[a]);
                }
                out.clean.raw()[j] = q_in <= 1.0 ? 2 : (q_out <= 1.0 ? 1 : 0);
            }

    Rng noise(mix_seed(spec.seed, detail::kNoiseStream, static_cast<std::uint64_t>(index)));
    for (j = 0; j < d.voxels(); ++j) {
        double v = spec.tissue_means[out.clean.raw()[j]];
        if (spec.noise_sigma > 0.0) v += noise.normal(0.0, spec.noise_sigma);
        out.image.raw()[j] = static_cast<float>(v);
    }

    if (spec.label_noise > 0.0) {
        Rng cor(mix_seed(spec.seed, detail::kCorruptStream, static_cast<std::uint64_t>(index)));
        out.noisy = corrupt_boundary_labels(out.clean, spec.label_noise, cor, spec.noise_band);
    } else {
        out.noisy = out.clean;
    }
    return out;
}

// ---------------------------------------------------------------------------
// On-disk datasets: vol_###.vvol / lab_###.vvol pairs plus manifest.json.
// When labels are corrupted the uncorrupted truth is kept alongside as
// lab_clean_###.vvol so evaluations can target it.
// ---------------------------------------------------------------------------

struct DatasetEntry {
    std::filesystem::path image;
    std::filesystem::path labels;
    std::filesystem::path clean_labels;  // empty when labels are already clean
};

struct DatasetIndex {
    Dims dims{};
    int num_classes = 0;
    std::vector<DatasetEntry> entries;
    nlohmann::json manifest;
};

namespace detail {

inline std::string numbered(const char* stem, int i, const char* ext) {
    std::ostringstream os;
    os << stem << "_" << std::setw(3) << std::setfill('0') << i << ext;
    return os.str();
}

}  // namespace detail

inline DatasetIndex write_phantom_dataset(const PhantomSpec& spec,
                                          const std::filesystem::path& dir) {
    spec.validate();
    std::filesystem::create_directories(dir);

    DatasetIndex index;
    index.dims = spec.dims;
    index.num_classes = kPhantomClasses;

    nlohmann::json volumes = nlohmann::json::array();
    for (int i = 0; i < spec.count; ++i) {
        const Phantom ph = generate_phantom(spec, i);
        DatasetEntry entry;
        entry.image = dir / detail::numbered("vol", i, ".vvol");
        entry.labels = dir / detail::numbered("lab", i, ".vvol");
        write_volume(ph.image, entry.image);
        write_labels(ph.noisy, entry.labels);
        nlohmann::json rec{{"image", entry.image.filename().string()},
                           {"labels", entry.labels.filename().string()}};
        if (spec.label_noise > 0.0) {
            entry.clean_labels = dir / detail::numbered("lab_clean", i, ".vvol");
            write_labels(ph.clean, entry.clean_labels);
            rec["clean_labels"] = entry.clean_labels.filename().string();
        }
        volumes.push_back(rec);
        index.entries.push_back(entry);
    }

    nlohmann::json manifest{
        {"format", "voxseg-dataset"},
        {"version", 1},
        {"dims", {spec.dims.d, spec.dims.h, spec.dims.w}},
        {"num_classes", kPhantomClasses},
        {"count", spec.count},
        {"tissue_means", spec.tissue_means},
        {"noise_sigma", spec.noise_sigma},
        {"label_noise", spec.label_noise},
        {"noise_band", spec.noise_band},
        {"outer_scale", spec.outer_scale},
        {"inner_scale", spec.inner_scale},
        {"scale_jitter", spec.scale_jitter},
        {"center_jitter", spec.center_jitter},
        {"seed", spec.seed},
        {"volumes", volumes}};
    index.manifest = manifest;

    std::ofstream os(dir / "manifest.json", std::ios::trunc);
    if (!os) throw IOFailure("cannot open " + (dir / "manifest.json").string());
    os << manifest.dump(2) << "\n";
    if (!os) throw IOFailure("write failed for " + (dir / "manifest.json").string());
    return index;
}

inline DatasetIndex read_dataset_index(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw IOFailure("cannot open " + (dir / "manifest.json").string());
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw InvalidConfig("manifest.json is not valid JSON: " + std::string(e.what()));
    }

    DatasetIndex index;
    index.manifest = manifest;
    try {
        const auto& dims = manifest.at("dims");
        index.dims = Dims{dims.at(0).get<int>(), dims.at(1).get<int>(), dims.at(2).get<int>()};
        index.num_classes = manifest.at("num_classes").get<int>();
        for (const auto& rec : manifest.at("volumes")) {
            DatasetEntry entry;
            entry.image = dir / rec.at("image").get<std::string>();
            entry.labels = dir / rec.at("labels").get<std::string>();
            if (rec.contains("clean_labels"))
                entry.clean_labels = dir / rec.at("clean_labels").get<std::string>();
            index.entries.push_back(entry);
        }
    } catch (const nlohmann::json::exception& e) {
        throw InvalidConfig("manifest.json is missing fields: " + std::string(e.what()));
    }
    return index;
}

struct LoadedDataset {
    std::vector<Volume> images;
    std::vector<LabelVolume> labels;
    std::vector<LabelVolume> clean_labels;  // falls back to labels when absent
};

inline LoadedDataset load_dataset(const DatasetIndex& index) {
    LoadedDataset out;
    for (const DatasetEntry& e : index.entries) {
        out.images.push_back(read_volume(e.image));
        out.labels.push_back(read_labels(e.labels));
        out.clean_labels.push_back(
            e.clean_labels.empty() ? out.labels.back() : read_labels(e.clean_labels));
    }
    return out;
}

}  // namespace voxseg
