#include <gtest/gtest.h>

#include <unistd.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <vector>

#include "voxseg/preprocess.hpp"
#include "voxseg/rng.hpp"
#include "voxseg/stitcher.hpp"

using namespace voxseg;

namespace fs = std::filesystem;

namespace {

fs::path test_dir() {
    const fs::path p =
        fs::temp_directory_path() / ("voxseg_stitcher_test_" + std::to_string(::getpid()));
    fs::create_directories(p);
    return p;
}

LabelVolume uniform_crop(int side, std::uint8_t cls, int num_classes) {
    LabelVolume v(Dims{side, side, side}, num_classes);
    std::fill(v.raw().begin(), v.raw().end(), cls);
    return v;
}

}  // namespace

TEST(NormalizeTest, MinMaxMapsEachChannelOntoUnitRange) {
    Volume v(2, Dims{1, 2, 2});
    float* c0 = v.channel(0);
    float* c1 = v.channel(1);
    const float a[4] = {1.0f, 2.0f, 3.0f, 5.0f};
    const float b[4] = {-10.0f, 0.0f, 30.0f, 10.0f};
    std::copy(a, a + 4, c0);
    std::copy(b, b + 4, c1);

    normalize_inplace(v, NormalizationConfig{});
    EXPECT_FLOAT_EQ(c0[0], 0.0f);
    EXPECT_FLOAT_EQ(c0[1], 0.25f);
    EXPECT_FLOAT_EQ(c0[2], 0.5f);
    EXPECT_FLOAT_EQ(c0[3], 1.0f);
    EXPECT_FLOAT_EQ(c1[0], 0.0f);
    EXPECT_FLOAT_EQ(c1[2], 1.0f);
    EXPECT_FLOAT_EQ(c1[3], 0.5f);
}

TEST(NormalizeTest, ConstantChannelBecomesZeros) {
    Volume v(1, Dims{2, 2, 2}, 7.5f);
    normalize_inplace(v, NormalizationConfig{});
    for (float x : v.raw()) EXPECT_EQ(x, 0.0f);
}

TEST(NormalizeTest, FixedDivisorScalesEveryVoxel) {
    Volume v(1, Dims{1, 1, 4});
    v.raw() = {1.0f, 2.0f, 3.0f, 5.0f};
    normalize_inplace(v, NormalizationConfig{Normalization::FixedDivisor, 4.0f});
    EXPECT_FLOAT_EQ(v.raw()[0], 0.25f);
    EXPECT_FLOAT_EQ(v.raw()[3], 1.25f);

    EXPECT_THROW(
        normalize_inplace(v, NormalizationConfig{Normalization::FixedDivisor, 0.0f}),
        InvalidConfig);
    EXPECT_THROW(
        normalize_inplace(v, NormalizationConfig{Normalization::FixedDivisor, -3.0f}),
        InvalidConfig);
}

TEST(NormalizeTest, StringFormRoundTrips) {
    EXPECT_EQ(to_string(NormalizationConfig{}), "minmax");
    const NormalizationConfig div = normalization_from_string("divisor=255");
    EXPECT_EQ(div.mode, Normalization::FixedDivisor);
    EXPECT_FLOAT_EQ(div.divisor, 255.0f);
    EXPECT_EQ(to_string(div), "divisor=255");
    EXPECT_EQ(normalization_from_string("minmax").mode, Normalization::MinMax);

    EXPECT_THROW(normalization_from_string("zscore"), InvalidConfig);
    EXPECT_THROW(normalization_from_string("divisor="), InvalidConfig);
    EXPECT_THROW(normalization_from_string("divisor=abc"), InvalidConfig);
    EXPECT_THROW(normalization_from_string("divisor=3x"), InvalidConfig);
    EXPECT_THROW(normalization_from_string("divisor=-4"), InvalidConfig);
}

TEST(VoteTest, VotesLandWhereTheCropWasPlaced) {
    VoteAccumulator acc(Dims{4, 4, 4}, 3);
    acc.add(uniform_crop(2, 1, 3), SubvolumeRef{1, 1, 1, 2});
    EXPECT_EQ(acc.votes_at(1, 1, 1, 1), 1);
    EXPECT_EQ(acc.votes_at(1, 2, 2, 2), 1);
    EXPECT_EQ(acc.votes_at(1, 0, 0, 0), 0);
    EXPECT_EQ(acc.votes_at(1, 3, 1, 1), 0);
    EXPECT_EQ(acc.votes_at(0, 1, 1, 1), 0);
    EXPECT_EQ(acc.votes_at(2, 1, 1, 1), 0);
}

TEST(VoteTest, FinalizeMatchesABruteForceRecount) {
    const Dims dims{6, 6, 6};
    const int side = 3, classes = 3;
    Rng rng(404);

    // Exhaustive grid plus random extras, random labels throughout.
    std::vector<SubvolumeRef> refs;
    for (int z : {0, 3})
        for (int y : {0, 3})
            for (int x : {0, 3}) refs.push_back(SubvolumeRef{z, y, x, side});
    for (int i = 0; i < 40; ++i)
        refs.push_back(SubvolumeRef{static_cast<int>(rng.uniform_index(4)),
                                    static_cast<int>(rng.uniform_index(4)),
                                    static_cast<int>(rng.uniform_index(4)), side});

    std::vector<LabelVolume> crops;
    for (std::size_t i = 0; i < refs.size(); ++i) {
        LabelVolume c(Dims{side, side, side}, classes);
        for (std::uint8_t& v : c.raw())
            v = static_cast<std::uint8_t>(rng.uniform_index(classes));
        crops.push_back(std::move(c));
    }

    VoteAccumulator acc(dims, classes);
    std::vector<int> recount(static_cast<std::size_t>(classes) * dims.voxels(), 0);
    for (std::size_t i = 0; i < refs.size(); ++i) {
        acc.add(crops[i], refs[i]);
        for (int z = 0; z < side; ++z)
            for (int y = 0; y < side; ++y)
                for (int x = 0; x < side; ++x) {
                    const int cls = crops[i].at(z, y, x);
                    const std::size_t at =
                        ((static_cast<std::size_t>(cls) * dims.d + refs[i].z + z) * dims.h +
                         refs[i].y + y) *
                            dims.w +
                        refs[i].x + x;
                    ++recount[at];
                }
    }

    const LabelVolume result = acc.finalize();
    const std::size_t span = dims.voxels();
    for (std::size_t j = 0; j < span; ++j) {
        int best = 0, best_votes = recount[j];
        for (int c = 1; c < classes; ++c) {
            const int v = recount[static_cast<std::size_t>(c) * span + j];
            if (v > best_votes) {
                best_votes = v;
                best = c;
            }
        }
        ASSERT_EQ(result.raw()[j], best) << "voxel " << j;
    }
    for (int c = 0; c < classes; ++c) {
        EXPECT_EQ(acc.votes_at(c, 0, 0, 0), recount[static_cast<std::size_t>(c) * span]);
        EXPECT_EQ(acc.votes_at(c, 5, 4, 3),
                  recount[(static_cast<std::size_t>(c) * 6 + 5) * 36 + 4 * 6 + 3]);
    }
}

TEST(VoteTest, AdditionOrderDoesNotMatter) {
    const Dims dims{4, 4, 4};
    Rng rng(77);
    std::vector<SubvolumeRef> refs;
    std::vector<LabelVolume> crops;
    for (int z : {0, 2})
        for (int y : {0, 2})
            for (int x : {0, 2}) refs.push_back(SubvolumeRef{z, y, x, 2});
    for (int i = 0; i < 20; ++i)
        refs.push_back(SubvolumeRef{static_cast<int>(rng.uniform_index(3)),
                                    static_cast<int>(rng.uniform_index(3)),
                                    static_cast<int>(rng.uniform_index(3)), 2});
    for (std::size_t i = 0; i < refs.size(); ++i) {
        LabelVolume c(Dims{2, 2, 2}, 4);
        for (std::uint8_t& v : c.raw()) v = static_cast<std::uint8_t>(rng.uniform_index(4));
        crops.push_back(std::move(c));
    }

    VoteAccumulator fwd(dims, 4);
    for (std::size_t i = 0; i < refs.size(); ++i) fwd.add(crops[i], refs[i]);

    std::vector<std::size_t> order(refs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), std::mt19937(99));
    VoteAccumulator shuffled(dims, 4);
    for (std::size_t i : order) shuffled.add(crops[i], refs[i]);

    EXPECT_EQ(fwd.finalize().raw(), shuffled.finalize().raw());
}

TEST(VoteTest, TiesResolveToTheSmallestClassIndex) {
    VoteAccumulator acc(Dims{2, 2, 2}, 3);
    acc.add(uniform_crop(2, 2, 3), SubvolumeRef{0, 0, 0, 2});
    acc.add(uniform_crop(2, 1, 3), SubvolumeRef{0, 0, 0, 2});
    LabelVolume r = acc.finalize();
    for (std::uint8_t v : r.raw()) EXPECT_EQ(v, 1);  // 1 and 2 tied at one vote

    acc.add(uniform_crop(2, 0, 3), SubvolumeRef{0, 0, 0, 2});
    r = acc.finalize();
    for (std::uint8_t v : r.raw()) EXPECT_EQ(v, 0);  // three-way tie

    acc.add(uniform_crop(2, 2, 3), SubvolumeRef{0, 0, 0, 2});
    r = acc.finalize();
    for (std::uint8_t v : r.raw()) EXPECT_EQ(v, 2);  // 2 now has a strict majority
}

TEST(VoteTest, UncoveredVoxelsAreRejectedAtFinalize) {
    VoteAccumulator acc(Dims{4, 4, 4}, 2);
    acc.add(uniform_crop(2, 1, 2), SubvolumeRef{0, 0, 0, 2});
    EXPECT_THROW(acc.finalize(), EmptyAccumulator);
}

TEST(VoteTest, BogusCropsAreRejected) {
    VoteAccumulator acc(Dims{4, 4, 4}, 3);
    // Hangs over the far edge.
    EXPECT_THROW(acc.add(uniform_crop(2, 0, 3), SubvolumeRef{3, 0, 0, 2}), OutOfBounds);
    // Crop shape disagrees with the ref.
    EXPECT_THROW(acc.add(uniform_crop(3, 0, 3), SubvolumeRef{0, 0, 0, 2}), ShapeMismatch);
    // Label outside the accumulator's class range.
    EXPECT_THROW(acc.add(uniform_crop(2, 3, 4), SubvolumeRef{0, 0, 0, 2}), ClassOutOfRange);
    // Degenerate construction.
    EXPECT_THROW(VoteAccumulator(Dims{0, 4, 4}, 3), InvalidConfig);
    EXPECT_THROW(VoteAccumulator(Dims{4, 4, 4}, 1), InvalidConfig);
}

TEST(ArgmaxTest, PicksTheLargestChannelAndBreaksTiesLow) {
    Volume probs(3, Dims{1, 1, 2});
    // Voxel 0: clear winner class 2. Voxel 1: classes 0 and 1 tie.
    probs.at(0, 0, 0, 0) = 0.1f;
    probs.at(1, 0, 0, 0) = 0.2f;
    probs.at(2, 0, 0, 0) = 0.7f;
    probs.at(0, 0, 0, 1) = 0.4f;
    probs.at(1, 0, 0, 1) = 0.4f;
    probs.at(2, 0, 0, 1) = 0.2f;
    const LabelVolume labels = argmax_labels(probs);
    EXPECT_EQ(labels.at(0, 0, 0), 2);
    EXPECT_EQ(labels.at(0, 0, 1), 0);
    EXPECT_EQ(labels.num_classes(), 3);
}

// A 1x1x1-kernel softmax "network" implements a pure per-voxel decision rule,
// so every crop agrees on overlaps and the stitched result must equal the
// rule applied voxel by voxel to the whole volume.
TEST(SegmentTest, VoxelwiseProbeReproducesItsDecisionRule) {
    ModelSpec spec;
    spec.name = "probe";
    spec.in_channels = 1;
    spec.num_classes = 3;
    spec.layers = {LayerSpec::conv(1, 3, 1, 0, 1, false, Activation::Softmax, 0.0)};
    validate_model(spec);

    const double a[3] = {0.0, 8.0, 16.0};
    const double b[3] = {4.0, 1.0, -6.0};
    ModelParams params = init_params<float>(spec, 1);
    for (int c = 0; c < 3; ++c) {
        params.trainable[c] = static_cast<float>(a[c]);
        params.trainable[3 + c] = static_cast<float>(b[c]);
    }

    const Dims dims{10, 12, 14};
    Volume vol(1, dims);
    Rng rng(31);
    for (float& v : vol.raw()) v = static_cast<float>(rng.uniform());

    SamplerConfig cfg;
    cfg.side = 6;
    cfg.seed = 5;
    const CoveragePlan plan = plan_inference(dims, cfg, 5);
    const LabelVolume result = segment_volume(
        spec, params, vol, plan, NormalizationConfig{Normalization::FixedDivisor, 1.0f});

    for (std::size_t j = 0; j < vol.raw().size(); ++j) {
        const float v = vol.raw()[j];
        int best = 0;
        float best_logit = 0.0f;
        for (int c = 0; c < 3; ++c) {
            const float logit = static_cast<float>(a[c] * static_cast<double>(v) + b[c]);
            if (c == 0 || logit > best_logit) {
                best_logit = logit;
                best = c;
            }
        }
        ASSERT_EQ(result.raw()[j], best) << "voxel " << j << " value " << v;
    }
}

TEST(SegmentTest, MismatchedPlanOrChannelsAreRejected) {
    ModelSpec spec;
    spec.name = "probe";
    spec.in_channels = 1;
    spec.num_classes = 3;
    spec.layers = {LayerSpec::conv(1, 3, 1, 0, 1, false, Activation::Softmax, 0.0)};
    const ModelParams params = init_params<float>(spec, 1);

    SamplerConfig cfg;
    cfg.side = 4;
    const Volume vol(1, Dims{8, 8, 8});
    const CoveragePlan wrong_plan = plan_inference(Dims{12, 8, 8}, cfg, 0);
    EXPECT_THROW(segment_volume(spec, params, vol, wrong_plan), PlanMismatch);

    const Volume two_channel(2, Dims{8, 8, 8});
    const CoveragePlan plan = plan_inference(Dims{8, 8, 8}, cfg, 0);
    EXPECT_THROW(segment_volume(spec, params, two_channel, plan), ShapeMismatch);
}

TEST(PgmTest, LabelSlicesAreValidPlainText) {
    const fs::path dir = test_dir() / "labels";
    LabelVolume labels(Dims{2, 2, 3}, 3);
    const std::uint8_t vals[12] = {0, 1, 2, 2, 1, 0,   // z = 0
                                   1, 1, 1, 0, 0, 2};  // z = 1
    std::copy(std::begin(vals), std::end(vals), labels.raw().begin());

    const auto paths = write_pgm_slices(labels, dir, "seg");
    ASSERT_EQ(paths.size(), 2u);
    EXPECT_EQ(paths[0].filename().string(), "seg_z0000.pgm");
    EXPECT_EQ(paths[1].filename().string(), "seg_z0001.pgm");

    std::ifstream in(paths[0]);
    ASSERT_TRUE(in.good());
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    EXPECT_EQ(magic, "P2");
    EXPECT_EQ(w, 3);
    EXPECT_EQ(h, 2);
    EXPECT_EQ(maxval, 255);
    // Class indices stretch onto 0/127/255.
    const int expect0[6] = {0, 127, 255, 255, 127, 0};
    for (int i = 0; i < 6; ++i) {
        int pix = -1;
        in >> pix;
        EXPECT_EQ(pix, expect0[i]) << "pixel " << i;
    }
    fs::remove_all(dir);
}

TEST(PgmTest, IntensitySlicesStretchToFullRange) {
    const fs::path dir = test_dir() / "intensity";
    Volume vol(1, Dims{1, 2, 2});
    vol.raw() = {1.0f, 2.0f, 3.0f, 5.0f};
    const auto paths = write_pgm_slices(vol, 0, dir, "vol");
    ASSERT_EQ(paths.size(), 1u);

    std::ifstream in(paths[0]);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    EXPECT_EQ(magic, "P2");
    EXPECT_EQ(w, 2);
    EXPECT_EQ(h, 2);
    const int expect[4] = {0, 64, 128, 255};  // (v-1)/4 * 255, rounded half away
    for (int i = 0; i < 4; ++i) {
        int pix = -1;
        in >> pix;
        EXPECT_EQ(pix, expect[i]);
    }
    EXPECT_THROW(write_pgm_slices(vol, 2, dir, "vol"), OutOfBounds);
    fs::remove_all(dir);
}

TEST(PgmTest, MidSlicesCoverAllThreeAxes) {
    const fs::path dir = test_dir() / "mid";
    LabelVolume labels(Dims{4, 6, 8}, 3);
    labels.raw().assign(labels.raw().size(), 0);
    // One marked voxel on each mid plane: (d/2, 1, 3), (z=1, h/2, 5), (0, 2, w/2).
    labels.raw()[(2 * 6 + 1) * 8 + 3] = 2;
    labels.raw()[(1 * 6 + 3) * 8 + 5] = 1;
    labels.raw()[(0 * 6 + 2) * 8 + 4] = 2;

    const auto paths = write_midslice_pgms(labels, dir, "seg");
    ASSERT_EQ(paths.size(), 3u);

    auto read_all = [](const fs::path& p, int& w, int& h) {
        std::ifstream in(p);
        std::string magic;
        int maxval = 0;
        in >> magic >> w >> h >> maxval;
        EXPECT_EQ(magic, "P2");
        EXPECT_EQ(maxval, 255);
        std::vector<int> pix;
        int v;
        while (in >> v) pix.push_back(v);
        return pix;
    };

    int w = 0, h = 0;
    std::vector<int> z = read_all(paths[0], w, h);  // plane at z=2, rows y, cols x
    EXPECT_EQ(w, 8);
    EXPECT_EQ(h, 6);
    ASSERT_EQ(z.size(), 48u);
    EXPECT_EQ(z[1 * 8 + 3], 255);

    std::vector<int> y = read_all(paths[1], w, h);  // plane at y=3, rows z, cols x
    EXPECT_EQ(w, 8);
    EXPECT_EQ(h, 4);
    EXPECT_EQ(y[1 * 8 + 5], 127);

    std::vector<int> x = read_all(paths[2], w, h);  // plane at x=4, rows z, cols y
    EXPECT_EQ(w, 6);
    EXPECT_EQ(h, 4);
    EXPECT_EQ(x[0 * 6 + 2], 255);
    fs::remove_all(dir);
}

TEST(PgmTest, TextLinesStayWithinTheFormatLimit) {
    const fs::path dir = test_dir() / "width";
    LabelVolume labels(Dims{1, 4, 64}, 256);
    for (std::size_t j = 0; j < labels.raw().size(); ++j)
        labels.raw()[j] = static_cast<std::uint8_t>((j * 37 + 11) % 256);
    const auto paths = write_pgm_slices(labels, dir, "wide");
    std::ifstream in(paths[0]);
    std::string line;
    while (std::getline(in, line)) EXPECT_LE(line.size(), 70u);
    fs::remove_all(dir);
}
