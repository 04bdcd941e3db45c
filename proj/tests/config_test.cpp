#include "voxseg/config.hpp"

#include <gtest/gtest.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;
using namespace voxseg;

namespace {

fs::path scratch_file(const std::string& leaf) {
    const fs::path dir =
        fs::temp_directory_path() / ("voxseg_config_test_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    return dir / leaf;
}

TEST(ConfigParseTest, ParsesDottedKeysCommentsAndBlankLines) {
    const std::string text =
        "# run settings\n"
        "train.steps = 250   # inline comment\n"
        "\n"
        "model.variant= meshnet-64\n"
        "  sampler.side =38\n"
        "train.normalization = divisor=255\n"
        "train.steps = 300\n";
    const ConfigMap kv = parse_config_text(text);
    ASSERT_EQ(kv.size(), 4u);
    EXPECT_EQ(kv.at("train.steps"), "300");  // last occurrence wins
    EXPECT_EQ(kv.at("model.variant"), "meshnet-64");
    EXPECT_EQ(kv.at("sampler.side"), "38");
    // values may themselves contain '='; only the first one splits
    EXPECT_EQ(kv.at("train.normalization"), "divisor=255");
}

TEST(ConfigParseTest, RejectsMalformedLinesByNumber) {
    try {
        parse_config_text("a = 1\nb = 2\nnot a key value line\n");
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
    }
    EXPECT_THROW(parse_config_text("bad key! = 1\n"), ConfigError);
    EXPECT_THROW(parse_config_text(" = 1\n"), ConfigError);
}

TEST(ConfigParseTest, FileRoundTripAndMissingFile) {
    const fs::path p = scratch_file("run.cfg");
    {
        std::ofstream out(p);
        out << "train.steps = 7\nseed = 42\n";
    }
    const ConfigMap kv = load_config_file(p);
    EXPECT_EQ(kv.at("train.steps"), "7");
    EXPECT_EQ(kv.at("seed"), "42");
    EXPECT_THROW(load_config_file(p.parent_path() / "does_not_exist.cfg"), IOFailure);
}

TEST(ConfigParseTest, OverridesWinOverFileValues) {
    ConfigMap kv = parse_config_text("train.steps = 100\n");
    apply_override(kv, "train.steps=900");
    apply_override(kv, "train.alpha = 0.01");
    EXPECT_EQ(kv.at("train.steps"), "900");
    EXPECT_EQ(kv.at("train.alpha"), "0.01");
    EXPECT_THROW(apply_override(kv, "no equals sign"), ConfigError);
    EXPECT_THROW(apply_override(kv, "bad key=1"), ConfigError);
}

TEST(RunConfigTest, DefaultsSurviveAnEmptyConfig) {
    const RunConfig rc = make_run_config({});
    EXPECT_EQ(rc.variant, "meshnet-68");
    EXPECT_EQ(rc.in_channels, 1);
    EXPECT_EQ(rc.num_classes, 3);
    EXPECT_DOUBLE_EQ(rc.dropout, 0.25);
    EXPECT_EQ(rc.side, 68);
    EXPECT_EQ(rc.steps, 500);
    EXPECT_EQ(rc.batch_size, 1);
    EXPECT_DOUBLE_EQ(rc.alpha, 1e-3);
    EXPECT_EQ(rc.normalization, "minmax");
    EXPECT_EQ(rc.infer_subvolumes, 200);
    EXPECT_EQ(rc.phantom_dims.d, 64);
    EXPECT_EQ(rc.phantom_count, 5);
    EXPECT_FALSE(rc.has_seed);
}

TEST(RunConfigTest, TypedFieldsConvertAndNameTheKeyOnError) {
    ConfigMap kv;
    kv["train.steps"] = "abc";
    try {
        make_run_config(kv);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("train.steps"), std::string::npos) << e.what();
    }

    kv.clear();
    kv["model.dropout"] = "0.25x";
    EXPECT_THROW(make_run_config(kv), ConfigError);

    kv.clear();
    kv["seed"] = "12.5";
    EXPECT_THROW(make_run_config(kv), ConfigError);

    kv.clear();
    kv["phantom.means"] = "0.1 0.5";  // needs three numbers
    EXPECT_THROW(make_run_config(kv), ConfigError);

    kv.clear();
    kv["totally.unknown"] = "1";
    try {
        make_run_config(kv);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("totally.unknown"), std::string::npos) << e.what();
    }
}

TEST(RunConfigTest, DimsAcceptSingleOrTripleIntegers) {
    ConfigMap kv;
    kv["phantom.dims"] = "48";
    RunConfig rc = make_run_config(kv);
    EXPECT_EQ(rc.phantom_dims, (Dims{48, 48, 48}));

    kv["phantom.dims"] = "32 40 56";
    rc = make_run_config(kv);
    EXPECT_EQ(rc.phantom_dims, (Dims{32, 40, 56}));

    kv["phantom.dims"] = "32 40";
    EXPECT_THROW(make_run_config(kv), ConfigError);
}

TEST(RunConfigTest, SeedPresenceIsTracked) {
    EXPECT_FALSE(make_run_config({}).has_seed);
    ConfigMap kv;
    kv["seed"] = "1234";
    const RunConfig rc = make_run_config(kv);
    EXPECT_TRUE(rc.has_seed);
    EXPECT_EQ(rc.seed, 1234u);
}

TEST(RunConfigTest, AssemblersProduceModuleConfigs) {
    ConfigMap kv = parse_config_text(
        "model.variant = meshnet-32\n"
        "model.num_classes = 3\n"
        "model.dropout = 0.1\n"
        "sampler.side = 32\n"
        "sampler.sigma = 6.5\n"
        "train.steps = 200\n"
        "train.batch_size = 8\n"
        "train.alpha = 0.002\n"
        "train.beta1 = 0.85\n"
        "train.beta2 = 0.995\n"
        "train.epsilon = 1e-7\n"
        "train.log_every = 5\n"
        "train.validate_every = 50\n"
        "train.validate_extra_crops = 4\n"
        "train.normalization = divisor=255\n"
        "infer.subvolumes = 64\n"
        "phantom.dims = 48\n"
        "phantom.count = 3\n"
        "phantom.noise_sigma = 0.02\n"
        "phantom.label_noise = 0.1\n"
        "phantom.outer_scale = 0.75\n"
        "phantom.inner_scale = 0.4\n"
        "phantom.scale_jitter = 0.03\n"
        "phantom.center_jitter = 0.02\n"
        "phantom.means = 0.05 0.45 0.9\n"
        "paths.log = /tmp/run.jsonl\n"
        "seed = 77\n");
    const RunConfig rc = make_run_config(kv);

    const ModelSpec spec = rc.model_spec();
    EXPECT_EQ(spec.name, "meshnet-32");
    EXPECT_EQ(spec.num_classes, 3);

    const TrainConfig tc = rc.train_config();
    EXPECT_EQ(tc.steps, 200);
    EXPECT_EQ(tc.batch_size, 8);
    EXPECT_EQ(tc.side, 32);
    EXPECT_DOUBLE_EQ(tc.sigma, 6.5);
    EXPECT_DOUBLE_EQ(tc.adam.alpha, 0.002);
    EXPECT_DOUBLE_EQ(tc.adam.beta1, 0.85);
    EXPECT_DOUBLE_EQ(tc.adam.beta2, 0.995);
    EXPECT_DOUBLE_EQ(tc.adam.epsilon, 1e-7);
    EXPECT_EQ(tc.log_every, 5);
    EXPECT_EQ(tc.validate_every, 50);
    EXPECT_EQ(tc.validate_extra_crops, 4);
    EXPECT_EQ(tc.seed, 77u);
    EXPECT_EQ(tc.normalization.mode, Normalization::FixedDivisor);
    EXPECT_FLOAT_EQ(tc.normalization.divisor, 255.0f);
    EXPECT_EQ(tc.log_path, fs::path("/tmp/run.jsonl"));

    const PhantomSpec ps = rc.phantom_spec();
    EXPECT_EQ(ps.dims, (Dims{48, 48, 48}));
    EXPECT_EQ(ps.count, 3);
    EXPECT_DOUBLE_EQ(ps.noise_sigma, 0.02);
    EXPECT_DOUBLE_EQ(ps.label_noise, 0.1);
    EXPECT_DOUBLE_EQ(ps.outer_scale, 0.75);
    EXPECT_DOUBLE_EQ(ps.inner_scale, 0.4);
    EXPECT_DOUBLE_EQ(ps.tissue_means[2], 0.9);
    EXPECT_EQ(ps.seed, 77u);
    EXPECT_NO_THROW(ps.validate());

    const SamplerConfig sc = rc.sampler_config(99);
    EXPECT_EQ(sc.side, 32);
    EXPECT_DOUBLE_EQ(sc.sigma, 6.5);
    EXPECT_EQ(sc.seed, 99u);
}

}  // namespace
