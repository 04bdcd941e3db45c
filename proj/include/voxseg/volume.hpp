#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "voxseg/errors.hpp"

namespace voxseg {

struct Dims {
    int d = 0, h = 0, w = 0;

    bool operator==(const Dims&) const = default;
    std::int64_t voxels() const {
        return static_cast<std::int64_t>(d) * h * w;
    }
};

inline std::string to_string(const Dims& x) {
    return std::to_string(x.d) + "x" + std::to_string(x.h) + "x" + std::to_string(x.w);
}

/// Dense 4D array of scalars in channel-major (C, D, H, W) order, innermost
/// stride 1 along W. Holds intensities (one channel per modality) or
/// per-class probability maps (one channel per class).
template <class T>
class BasicVolume {
  public:
    BasicVolume() = default;
    BasicVolume(int channels, Dims dims, T fill = T(0))
        : channels_(channels), dims_(dims),
          data_(static_cast<std::size_t>(channels) * dims.voxels(), fill) {
        if (channels < 1 || dims.d < 1 || dims.h < 1 || dims.w < 1)
            throw InvalidConfig("volume dimensions must be >= 1, got " +
                                std::to_string(channels) + " channels, " + to_string(dims));
    }

    int channels() const { return channels_; }
    const Dims& dims() const { return dims_; }
    std::size_t size() const { return data_.size(); }

    std::size_t index(int c, int z, int y, int x) const {
        return ((static_cast<std::size_t>(c) * dims_.d + z) * dims_.h + y) * dims_.w + x;
    }

    T& at(int c, int z, int y, int x) { return data_[index(c, z, y, x)]; }
    const T& at(int c, int z, int y, int x) const { return data_[index(c, z, y, x)]; }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T* channel(int c) { return data_.data() + static_cast<std::size_t>(c) * dims_.voxels(); }
    const T* channel(int c) const {
        return data_.data() + static_cast<std::size_t>(c) * dims_.voxels();
    }

    std::vector<T>& raw() { return data_; }
    const std::vector<T>& raw() const { return data_; }

    // invariant: all values finite
    void validate_finite() const {
        for (const T& v : data_)
            if (!std::isfinite(static_cast<double>(v)))
                throw NonFiniteData("volume contains a non-finite value");
    }

  private:
    int channels_ = 0;
    Dims dims_{};
    std::vector<T> data_;
};

using Volume = BasicVolume<float>;

template <class T>
using Batch = std::vector<BasicVolume<T>>;

/// Dense 3D array of class indices, one per voxel, each in [0, num_classes).
class LabelVolume {
  public:
    LabelVolume() = default;
    LabelVolume(Dims dims, int num_classes, std::uint8_t fill = 0)
        : dims_(dims), num_classes_(num_classes),
          labels_(static_cast<std::size_t>(dims.voxels()), fill) {
        if (dims.d < 1 || dims.h < 1 || dims.w < 1)
            throw InvalidConfig("label volume dimensions must be >= 1, got " + to_string(dims));
        if (num_classes < 1 || num_classes > 256)
            throw InvalidConfig("num_classes must be in [1, 256], got " +
                                std::to_string(num_classes));
    }

    const Dims& dims() const { return dims_; }
    int num_classes() const { return num_classes_; }
    std::size_t size() const { return labels_.size(); }

    std::size_t index(int z, int y, int x) const {
        return (static_cast<std::size_t>(z) * dims_.h + y) * dims_.w + x;
    }

    std::uint8_t& at(int z, int y, int x) { return labels_[index(z, y, x)]; }
    std::uint8_t at(int z, int y, int x) const { return labels_[index(z, y, x)]; }

    std::vector<std::uint8_t>& raw() { return labels_; }
    const std::vector<std::uint8_t>& raw() const { return labels_; }

    void validate_labels() const {
        for (std::uint8_t v : labels_)
            if (v >= num_classes_)
                throw ClassOutOfRange("label " + std::to_string(int(v)) +
                                      " out of range for " + std::to_string(num_classes_) +
                                      " classes");
    }

  private:
    Dims dims_{};
    int num_classes_ = 0;
    std::vector<std::uint8_t> labels_;
};

/// Cubic crop of side `side` voxels with its origin at (z, y, x).
struct SubvolumeRef {
    int z = 0, y = 0, x = 0;
    int side = 0;

    bool operator==(const SubvolumeRef&) const = default;

    bool fits(const Dims& dims) const {
        return z >= 0 && y >= 0 && x >= 0 && side >= 1 && z + side <= dims.d &&
               y + side <= dims.h && x + side <= dims.w;
    }
};

namespace detail {
inline void check_ref(const SubvolumeRef& ref, const Dims& dims) {
    if (!ref.fits(dims))
        throw OutOfBounds("subvolume origin (" + std::to_string(ref.z) + "," +
                          std::to_string(ref.y) + "," + std::to_string(ref.x) + ") side " +
                          std::to_string(ref.side) + " does not fit in " + to_string(dims));
}
}  // namespace detail

/// Copies an M x side^3 block out of `vol`. The ref must fit; callers that
/// want clamping do it before calling (that is the sampler's job).
template <class T>
BasicVolume<T> extract_subvolume(const BasicVolume<T>& vol, const SubvolumeRef& ref) {
    detail::check_ref(ref, vol.dims());
    const int a = ref.side;
    BasicVolume<T> out(vol.channels(), {a, a, a});
    for (int c = 0; c < vol.channels(); ++c)
        for (int z = 0; z < a; ++z)
            for (int y = 0; y < a; ++y) {
                const T* src = &vol.at(c, ref.z + z, ref.y + y, ref.x);
                T* dst = &out.at(c, z, y, 0);
                std::memcpy(dst, src, sizeof(T) * a);
            }
    return out;
}

inline LabelVolume extract_subvolume(const LabelVolume& vol, const SubvolumeRef& ref) {
    detail::check_ref(ref, vol.dims());
    const int a = ref.side;
    LabelVolume out({a, a, a}, vol.num_classes());
    for (int z = 0; z < a; ++z)
        for (int y = 0; y < a; ++y)
            std::memcpy(out.raw().data() + out.index(z, y, 0),
                        vol.raw().data() + vol.index(ref.z + z, ref.y + y, ref.x),
                        static_cast<std::size_t>(a));
    return out;
}

// ---------------------------------------------------------------------------
// VVOL file format, little-endian throughout:
//   magic "VVOL" | version u32 = 1 | dtype u32 (1 = float32, 2 = uint8 labels)
//   | M u32 | D u32 | H u32 | W u32 | raw data in (C, D, H, W) order.
// Label files use dtype 2, M = 1, and carry num_classes in a trailing u32.
// ---------------------------------------------------------------------------

namespace vvol {

constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kDtypeFloat32 = 1;
constexpr std::uint32_t kDtypeLabelU8 = 2;

struct Header {
    std::uint32_t version = kVersion;
    std::uint32_t dtype = 0;
    std::uint32_t channels = 0;
    Dims dims{};
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                                static_cast<unsigned char>((v >> 8) & 0xff),
                                static_cast<unsigned char>((v >> 16) & 0xff),
                                static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (is.gcount() != 4)
        throw TruncatedFile("file ended inside a u32 field");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32_array(std::ostream& os, const float* p, std::size_t n) {
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * 4));
    } else {
        for (std::size_t i = 0; i < n; ++i)
            put_u32(os, std::bit_cast<std::uint32_t>(p[i]));
    }
}

inline void get_f32_array(std::istream& is, float* p, std::size_t n) {
    if constexpr (std::endian::native == std::endian::little) {
        is.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n * 4));
        if (is.gcount() != static_cast<std::streamsize>(n * 4))
            throw TruncatedFile("file ended inside the data section");
    } else {
        for (std::size_t i = 0; i < n; ++i)
            p[i] = std::bit_cast<float>(get_u32(is));
    }
}

inline Header read_header(std::istream& is, const std::string& path) {
    char magic[4];
    is.read(magic, 4);
    if (is.gcount() != 4)
        throw TruncatedFile(path + ": shorter than the magic");
    if (std::memcmp(magic, "VVOL", 4) != 0)
        throw BadMagic(path + ": not a VVOL file");
    Header h;
    h.version = get_u32(is);
    if (h.version != kVersion)
        throw UnsupportedVersion(path + ": format version " + std::to_string(h.version));
    h.dtype = get_u32(is);
    if (h.dtype != kDtypeFloat32 && h.dtype != kDtypeLabelU8)
        throw UnsupportedDtype(path + ": unknown dtype code " + std::to_string(h.dtype));
    h.channels = get_u32(is);
    const std::uint32_t d = get_u32(is), hh = get_u32(is), w = get_u32(is);
    h.dims = Dims{static_cast<int>(d), static_cast<int>(hh), static_cast<int>(w)};
    if (h.channels < 1 || d < 1 || hh < 1 || w < 1)
        throw TruncatedFile(path + ": degenerate shape in header");
    return h;
}

}  // namespace detail

/// Reads only the fixed-size header; used for fail-fast shape checks.
inline Header peek_header(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw IOFailure("cannot open " + path.string());
    return detail::read_header(is, path.string());
}

}  // namespace vvol

inline void write_volume(const Volume& vol, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os)
        throw IOFailure("cannot open " + path.string() + " for writing");
    os.write("VVOL", 4);
    vvol::detail::put_u32(os, vvol::kVersion);
    vvol::detail::put_u32(os, vvol::kDtypeFloat32);
    vvol::detail::put_u32(os, static_cast<std::uint32_t>(vol.channels()));
    vvol::detail::put_u32(os, static_cast<std::uint32_t>(vol.dims().d));
    vvol::detail::put_u32(os, static_cast<std::uint32_t>(vol.dims().h));
    vvol::detail::put_u32(os, static_cast<std::uint32_t>(vol.dims().w));
    vvol::detail::put_f32_array(os, vol.data(), vol.size());
    if (!os)
        throw IOFailure("write failed for " + path.string());
}

inline Volume read_volume(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw IOFailure("cannot open " + path.string());
    const vvol::Header h = vvol::detail::read_header(is, path.string());
    if (h.dtype != vvol::kDtypeFloat32)
        throw UnsupportedDtype(path.string() + ": expected a float32 volume");
    Volume vol(static_cast<int>(h.channels), h.dims);
    vvol::detail::get_f32_array(is, vol.data(), vol.size());
    vol.validate_finite();
    return vol;
}

inline void write_labels(const LabelVolume& lab, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os)
        throw IOFailure("cannot open " + path.string() + " for writing");
    os.write("VVOL", 4);
    vvol::detail::put_u32(os, vvol::kVersion);
    vvol::detail::put_u32(os, vvol::kDtypeLabelU8);
    vvol::detail::put_u32(os, 1);
    vvol::detail::put_u32(os, static_cast<std::uint32_t>(lab.dims().d));
    vvol::detail::put_u32(os, static_cast<std::uint32_t>(lab.dims().h));
    vvol::detail::put_u32(os, static_cast<std::uint32_t>(lab.dims().w));
    os.write(reinterpret_cast<const char*>(lab.raw().data()),
             static_cast<std::streamsize>(lab.size()));
    vvol::detail::put_u32(os, static_cast<std::uint32_t>(lab.num_classes()));
    if (!os)
        throw IOFailure("write failed for " + path.string());
}

inline LabelVolume read_labels(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw IOFailure("cannot open " + path.string());
    const vvol::Header h = vvol::detail::read_header(is, path.string());
    if (h.dtype != vvol::kDtypeLabelU8)
        throw UnsupportedDtype(path.string() + ": expected a label volume");
    if (h.channels != 1)
        throw UnsupportedDtype(path.string() + ": label volumes are single-channel");
    std::vector<std::uint8_t> data(static_cast<std::size_t>(h.dims.voxels()));
    is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (is.gcount() != static_cast<std::streamsize>(data.size()))
        throw TruncatedFile(path.string() + ": file ended inside the data section");
    const std::uint32_t n = vvol::detail::get_u32(is);
    LabelVolume lab(h.dims, static_cast<int>(n));
    lab.raw() = std::move(data);
    lab.validate_labels();
    return lab;
}

}  // namespace voxseg
