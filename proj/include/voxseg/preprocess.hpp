#pragma once

#include <cmath>
#include <sstream>
#include <string>

#include "voxseg/errors.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

// Intensity normalization applied to every crop before it reaches a model,
// both at training time and at inference time; the two must agree, so the
// choice is recorded in checkpoints as the string form below.

enum class Normalization { MinMax, FixedDivisor };

struct NormalizationConfig {
    Normalization mode = Normalization::MinMax;
    float divisor = 1.0f;  // FixedDivisor only

    void validate() const {
        if (mode == Normalization::FixedDivisor &&
            !(divisor > 0.0f && std::isfinite(divisor)))
            throw InvalidConfig("normalization divisor must be a positive finite value");
    }
};

/// MinMax maps each channel affinely onto [0, 1]; a constant channel becomes
/// all zeros. FixedDivisor divides every voxel by the configured constant.
template <class T>
void normalize_inplace(BasicVolume<T>& v, const NormalizationConfig& cfg) {
    cfg.validate();
    const std::size_t span = v.dims().voxels();
    for (int c = 0; c < v.channels(); ++c) {
        T* p = v.channel(c);
        if (cfg.mode == Normalization::FixedDivisor) {
            const T inv = T(1) / static_cast<T>(cfg.divisor);
            for (std::size_t j = 0; j < span; ++j) p[j] *= inv;
            continue;
        }
        T lo = p[0], hi = p[0];
        for (std::size_t j = 1; j < span; ++j) {
            lo = std::min(lo, p[j]);
            hi = std::max(hi, p[j]);
        }
        if (hi > lo) {
            const T scale = T(1) / (hi - lo);
            for (std::size_t j = 0; j < span; ++j) p[j] = (p[j] - lo) * scale;
        } else {
            for (std::size_t j = 0; j < span; ++j) p[j] = T(0);
        }
    }
}

inline std::string to_string(const NormalizationConfig& cfg) {
    if (cfg.mode == Normalization::MinMax) return "minmax";
    std::ostringstream os;
    os << "divisor=" << cfg.divisor;
    return os.str();
}

inline NormalizationConfig normalization_from_string(const std::string& text) {
    NormalizationConfig cfg;
    if (text == "minmax") return cfg;
    const std::string prefix = "divisor=";
    if (text.rfind(prefix, 0) == 0) {
        cfg.mode = Normalization::FixedDivisor;
        std::size_t used = 0;
        try {
            cfg.divisor = std::stof(text.substr(prefix.size()), &used);
        } catch (const std::exception&) {
            throw InvalidConfig("bad normalization value: " + text);
        }
        if (used != text.size() - prefix.size())
            throw InvalidConfig("bad normalization value: " + text);
        cfg.validate();
        return cfg;
    }
    throw InvalidConfig("unknown normalization mode: " + text);
}

}  // namespace voxseg
