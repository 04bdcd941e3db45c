#pragma once

#include <array>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "voxseg/errors.hpp"
#include "voxseg/model.hpp"
#include "voxseg/phantom.hpp"
#include "voxseg/preprocess.hpp"
#include "voxseg/sampler.hpp"
#include "voxseg/trainer.hpp"

namespace voxseg {

// ---------------------------------------------------------------------------
// Run configuration: a flat `section.key = value` text format. Later
// occurrences of a key win, `#` starts a comment, and command-line overrides
// reuse the same one-line syntax. Every conversion error names the offending
// key so a typo is a one-line fix.
// ---------------------------------------------------------------------------

using ConfigMap = std::map<std::string, std::string>;

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

inline bool valid_key(const std::string& k) {
    if (k.empty()) return false;
    for (char c : k)
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '.' && c != '_' && c != '-')
            return false;
    return true;
}

/// Splits one "key = value" line; `where` names the source for errors.
inline std::pair<std::string, std::string> parse_config_line(const std::string& line,
                                                             const std::string& where) {
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
        throw ConfigError(where + ": expected 'key = value', got \"" + trim(line) + "\"");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!valid_key(key))
        throw ConfigError(where + ": bad key \"" + key + "\"");
    return {key, value};
}

}  // namespace detail

inline ConfigMap parse_config_text(const std::string& text) {
    ConfigMap kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        if (detail::trim(line).empty()) continue;
        auto [key, value] = detail::parse_config_line(line, "line " + std::to_string(lineno));
        kv[key] = value;  // last occurrence wins
    }
    return kv;
}

inline ConfigMap load_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IOFailure("cannot open config file " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    return parse_config_text(os.str());
}

inline void apply_override(ConfigMap& kv, const std::string& assignment) {
    auto [key, value] = detail::parse_config_line(assignment, "override");
    kv[key] = value;
}

namespace detail {

inline long long to_int(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const long long v = std::stoll(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected an integer, got \"" + value + "\"");
    }
}

inline double to_double(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a number, got \"" + value + "\"");
    }
}

inline std::uint64_t to_u64(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const unsigned long long v = std::stoull(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected an unsigned integer, got \"" + value + "\"");
    }
}

inline std::vector<double> to_doubles(const std::string& key, const std::string& value,
                                      std::size_t want) {
    std::istringstream in(value);
    std::vector<double> out;
    std::string tok;
    while (in >> tok) out.push_back(to_double(key, tok));
    if (out.size() != want)
        throw ConfigError(key + ": expected " + std::to_string(want) + " numbers, got \"" +
                          value + "\"");
    return out;
}

}  // namespace detail

struct RunConfig {
    // model
    std::string variant = "meshnet-68";
    int in_channels = 1;
    int num_classes = 3;
    double dropout = 0.25;

    // subvolume sampling (shared by training and inference)
    int side = 68;
    double sigma = 0.0;  // <= 0 derives extent/5

    // training
    int steps = 500;
    int batch_size = 1;
    double alpha = 1e-3, beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;
    int log_every = 10;
    int validate_every = 0;
    int validate_extra_crops = 0;
    std::string normalization = "minmax";

    // inference
    int infer_subvolumes = 200;  // random crops added to the exhaustive grid

    // phantom generation
    Dims phantom_dims{64, 64, 64};
    int phantom_count = 5;
    double phantom_noise_sigma = 0.04;
    double phantom_label_noise = 0.0;
    int phantom_noise_band = 1;
    double phantom_outer = 0.80, phantom_inner = 0.48;
    double phantom_scale_jitter = 0.05, phantom_center_jitter = 0.04;
    std::array<double, 3> phantom_means{0.1, 0.5, 0.85};

    // paths
    std::filesystem::path data_dir, checkpoint, output_dir, log_path;

    std::uint64_t seed = 0;
    bool has_seed = false;  // training refuses to run on an implicit seed

    ModelSpec model_spec() const {
        return build_model(variant, in_channels, num_classes, dropout);
    }

    NormalizationConfig normalization_config() const {
        return normalization_from_string(normalization);
    }

    SamplerConfig sampler_config(std::uint64_t stream_seed) const {
        SamplerConfig sc;
        sc.side = side;
        sc.sigma = sigma;
        sc.seed = stream_seed;
        return sc;
    }

    TrainConfig train_config() const {
        TrainConfig tc;
        tc.adam.alpha = alpha;
        tc.adam.beta1 = beta1;
        tc.adam.beta2 = beta2;
        tc.adam.epsilon = epsilon;
        tc.steps = steps;
        tc.batch_size = batch_size;
        tc.side = side;
        tc.sigma = sigma;
        tc.seed = seed;
        tc.normalization = normalization_config();
        tc.log_every = log_every;
        tc.validate_every = validate_every;
        tc.validate_extra_crops = validate_extra_crops;
        tc.log_path = log_path;
        return tc;
    }

    PhantomSpec phantom_spec() const {
        PhantomSpec ps;
        ps.dims = phantom_dims;
        ps.count = phantom_count;
        ps.tissue_means = phantom_means;
        ps.noise_sigma = phantom_noise_sigma;
        ps.label_noise = phantom_label_noise;
        ps.noise_band = phantom_noise_band;
        ps.outer_scale = phantom_outer;
        ps.inner_scale = phantom_inner;
        ps.scale_jitter = phantom_scale_jitter;
        ps.center_jitter = phantom_center_jitter;
        ps.seed = seed;
        return ps;
    }
};

inline RunConfig make_run_config(const ConfigMap& kv) {
    RunConfig rc;
    for (const auto& [key, value] : kv) {
        if (key == "model.variant") rc.variant = value;
        else if (key == "model.in_channels") rc.in_channels = static_cast<int>(detail::to_int(key, value));
        else if (key == "model.num_classes") rc.num_classes = static_cast<int>(detail::to_int(key, value));
        else if (key == "model.dropout") rc.dropout = detail::to_double(key, value);
        else if (key == "sampler.side") rc.side = static_cast<int>(detail::to_int(key, value));
        else if (key == "sampler.sigma") rc.sigma = detail::to_double(key, value);
        else if (key == "train.steps") rc.steps = static_cast<int>(detail::to_int(key, value));
        else if (key == "train.batch_size") rc.batch_size = static_cast<int>(detail::to_int(key, value));
        else if (key == "train.alpha") rc.alpha = detail::to_double(key, value);
        else if (key == "train.beta1") rc.beta1 = detail::to_double(key, value);
        else if (key == "train.beta2") rc.beta2 = detail::to_double(key, value);
        else if (key == "train.epsilon") rc.epsilon = detail::to_double(key, value);
        else if (key == "train.log_every") rc.log_every = static_cast<int>(detail::to_int(key, value));
        else if (key == "train.validate_every") rc.validate_every = static_cast<int>(detail::to_int(key, value));
        else if (key == "train.validate_extra_crops") rc.validate_extra_crops = static_cast<int>(detail::to_int(key, value));
        else if (key == "train.normalization") rc.normalization = value;
        else if (key == "infer.subvolumes") rc.infer_subvolumes = static_cast<int>(detail::to_int(key, value));
        else if (key == "phantom.dims") {
            std::istringstream in(value);
            std::vector<int> d;
            std::string tok;
            while (in >> tok) d.push_back(static_cast<int>(detail::to_int(key, tok)));
            if (d.size() == 1) d = {d[0], d[0], d[0]};
            if (d.size() != 3)
                throw ConfigError(key + ": expected 1 or 3 integers, got \"" + value + "\"");
            rc.phantom_dims = Dims{d[0], d[1], d[2]};
        }
        else if (key == "phantom.count") rc.phantom_count = static_cast<int>(detail::to_int(key, value));
        else if (key == "phantom.noise_sigma") rc.phantom_noise_sigma = detail::to_double(key, value);
        else if (key == "phantom.label_noise") rc.phantom_label_noise = detail::to_double(key, value);
        else if (key == "phantom.noise_band") rc.phantom_noise_band = static_cast<int>(detail::to_int(key, value));
        else if (key == "phantom.outer_scale") rc.phantom_outer = detail::to_double(key, value);
        else if (key == "phantom.inner_scale") rc.phantom_inner = detail::to_double(key, value);
        else if (key == "phantom.scale_jitter") rc.phantom_scale_jitter = detail::to_double(key, value);
        else if (key == "phantom.center_jitter") rc.phantom_center_jitter = detail::to_double(key, value);
        else if (key == "phantom.means") {
            const std::vector<double> m = detail::to_doubles(key, value, 3);
            rc.phantom_means = {m[0], m[1], m[2]};
        }
        else if (key == "paths.data") rc.data_dir = value;
        else if (key == "paths.checkpoint") rc.checkpoint = value;
        else if (key == "paths.output") rc.output_dir = value;
        else if (key == "paths.log") rc.log_path = value;
        else if (key == "seed") {
            rc.seed = detail::to_u64(key, value);
            rc.has_seed = true;
        }
        else throw ConfigError("unknown config key \"" + key + "\"");
    }
    return rc;
}

}  // namespace voxseg
