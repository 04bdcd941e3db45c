#include <gtest/gtest.h>

#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "voxseg/metrics.hpp"
#include "voxseg/rng.hpp"
#include "voxseg/volume.hpp"

using namespace voxseg;

namespace {

// pred/truth pair with every disagreement case exercised; per-class counts
// worked out by hand from the 8 voxel pairs.
//   pred : 0 0 1 1 2 2 0 1
//   truth: 0 1 1 2 2 0 0 0
LabelVolume tiny_pred() {
    LabelVolume v(Dims{1, 2, 4}, 3);
    const std::uint8_t vals[8] = {0, 0, 1, 1, 2, 2, 0, 1};
    std::copy(std::begin(vals), std::end(vals), v.raw().begin());
    return v;
}

LabelVolume tiny_truth() {
    LabelVolume v(Dims{1, 2, 4}, 3);
    const std::uint8_t vals[8] = {0, 1, 1, 2, 2, 0, 0, 0};
    std::copy(std::begin(vals), std::end(vals), v.raw().begin());
    return v;
}

LabelVolume random_labels(Dims dims, int num_classes, std::uint64_t seed) {
    LabelVolume v(dims, num_classes);
    Rng rng(seed);
    for (std::uint8_t& x : v.raw())
        x = static_cast<std::uint8_t>(rng.uniform_index(num_classes));
    return v;
}

}  // namespace

TEST(ConfusionTest, HandWorkedPairIsCountedExactly) {
    const auto counts = confusion(tiny_pred(), tiny_truth());
    ASSERT_EQ(counts.size(), 3u);

    EXPECT_EQ(counts[0].tp, 2);
    EXPECT_EQ(counts[0].fp, 1);
    EXPECT_EQ(counts[0].fn, 2);
    EXPECT_EQ(counts[0].tn, 3);

    EXPECT_EQ(counts[1].tp, 1);
    EXPECT_EQ(counts[1].fp, 2);
    EXPECT_EQ(counts[1].fn, 1);
    EXPECT_EQ(counts[1].tn, 4);

    EXPECT_EQ(counts[2].tp, 1);
    EXPECT_EQ(counts[2].fp, 1);
    EXPECT_EQ(counts[2].fn, 1);
    EXPECT_EQ(counts[2].tn, 5);

    for (const ConfusionCounts& c : counts) EXPECT_EQ(c.total(), 8);
}

TEST(ConfusionTest, MismatchedShapesAreRejected) {
    LabelVolume a(Dims{2, 2, 2}, 2);
    LabelVolume b(Dims{2, 2, 3}, 2);
    EXPECT_THROW(confusion(a, b), ShapeMismatch);
}

TEST(ConfusionTest, ClassCountIsTheLargerOfTheTwoVolumes) {
    LabelVolume a(Dims{1, 1, 4}, 2);
    LabelVolume b(Dims{1, 1, 4}, 5);
    EXPECT_EQ(confusion(a, b).size(), 5u);
    EXPECT_EQ(confusion(b, a).size(), 5u);
}

TEST(ScalarMetricsTest, WorkedPrecisionRecallF1) {
    // tp=3, fp=1, fn=2: precision 3/4, recall 3/5, F1 = 2*.75*.6/(.75+.6) = 2/3.
    ConfusionCounts c{3, 1, 2, 10};
    EXPECT_DOUBLE_EQ(precision(c), 0.75);
    EXPECT_DOUBLE_EQ(recall(c), 0.6);
    EXPECT_DOUBLE_EQ(f_beta(precision(c), recall(c), 1.0), 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(f_beta(c, 1.0), 2.0 / 3.0);
}

TEST(ScalarMetricsTest, WorkedDice) {
    // tp=1, fp=1, fn=1: 2/(2+1+1) = 0.5.
    EXPECT_DOUBLE_EQ(dice(ConfusionCounts{1, 1, 1, 0}), 0.5);
    // Perfect overlap.
    EXPECT_DOUBLE_EQ(dice(ConfusionCounts{7, 0, 0, 1}), 1.0);
    // Disjoint but both present.
    EXPECT_DOUBLE_EQ(dice(ConfusionCounts{0, 4, 3, 1}), 0.0);
}

TEST(ScalarMetricsTest, FBetaInterpolatesBetweenPrecisionAndRecall) {
    const double p = 0.75, r = 0.6;
    // beta = 0.5 weights precision: 1.25*0.45 / (0.25*0.75 + 0.6) = 5/7.
    EXPECT_DOUBLE_EQ(f_beta(p, r, 0.5), 5.0 / 7.0);
    EXPECT_DOUBLE_EQ(f_beta(p, r, 0.0), p);
    // Large beta approaches recall.
    EXPECT_NEAR(f_beta(p, r, 1e4), r, 1e-6);
    EXPECT_THROW(f_beta(p, r, -1.0), InvalidConfig);
}

TEST(ScalarMetricsTest, DiceEqualsF1OnRandomCounts) {
    Rng rng(2026);
    for (int trial = 0; trial < 200; ++trial) {
        ConfusionCounts c;
        c.tp = static_cast<std::int64_t>(rng.uniform_index(50));
        c.fp = static_cast<std::int64_t>(rng.uniform_index(50));
        c.fn = static_cast<std::int64_t>(rng.uniform_index(50));
        c.tn = 10;
        if (c.tp + c.fp + c.fn == 0) continue;
        EXPECT_DOUBLE_EQ(dice(c), f_beta(c, 1.0));
    }
}

TEST(ScalarMetricsTest, WorkedVolumeDifference) {
    // 966 predicted vs 1000 true voxels: |966-1000|/1000 = 3.4%.
    EXPECT_DOUBLE_EQ(avd_percent(966, 1000), 3.4);
    // Not symmetric in its arguments.
    EXPECT_NEAR(avd_percent(1000, 966), 3.5196687371, 1e-9);
    EXPECT_DOUBLE_EQ(avd_percent(1000, 1000), 0.0);
}

TEST(ScalarMetricsTest, VolumeDifferenceFromCountsUsesPredAndTruthVolumes) {
    Rng rng(7);
    for (int trial = 0; trial < 100; ++trial) {
        ConfusionCounts c;
        c.tp = static_cast<std::int64_t>(rng.uniform_index(40));
        c.fp = static_cast<std::int64_t>(rng.uniform_index(40));
        c.fn = static_cast<std::int64_t>(1 + rng.uniform_index(40));  // truth non-empty
        EXPECT_DOUBLE_EQ(avd_percent(c), avd_percent(c.tp + c.fp, c.tp + c.fn));
    }
}

TEST(ScalarMetricsTest, IntersectionPercentMatchesRecallScaled) {
    ConfusionCounts c{3, 1, 2, 10};
    EXPECT_DOUBLE_EQ(intersection_percent(c), 100.0 * recall(c));
}

TEST(ScalarMetricsTest, EmptyDenominatorsAreUndefinedNotZeroOrOne) {
    const ConfusionCounts absent{0, 0, 0, 10};
    EXPECT_THROW(dice(absent), UndefinedMetric);
    EXPECT_THROW(precision(absent), UndefinedMetric);
    EXPECT_THROW(recall(absent), UndefinedMetric);
    EXPECT_THROW(f_beta(absent, 1.0), UndefinedMetric);
    EXPECT_THROW(avd_percent(absent), UndefinedMetric);
    EXPECT_THROW(intersection_percent(absent), UndefinedMetric);

    // Predicted but never true: recall/avd undefined, precision defined at 0.
    const ConfusionCounts spurious{0, 5, 0, 5};
    EXPECT_DOUBLE_EQ(precision(spurious), 0.0);
    EXPECT_DOUBLE_EQ(dice(spurious), 0.0);
    EXPECT_THROW(recall(spurious), UndefinedMetric);
    EXPECT_THROW(avd_percent(spurious), UndefinedMetric);

    // True but never predicted: precision undefined, recall defined at 0,
    // avd pegs at 100%.
    const ConfusionCounts missed{0, 0, 5, 5};
    EXPECT_THROW(precision(missed), UndefinedMetric);
    EXPECT_DOUBLE_EQ(recall(missed), 0.0);
    EXPECT_DOUBLE_EQ(avd_percent(missed), 100.0);

    EXPECT_THROW(f_beta(0.0, 0.0, 1.0), UndefinedMetric);
}

TEST(ScalarMetricsTest, DiceIsSymmetricInPredictionAndTruth) {
    const LabelVolume a = random_labels(Dims{4, 5, 6}, 3, 11);
    const LabelVolume b = random_labels(Dims{4, 5, 6}, 3, 12);
    const auto ab = confusion(a, b);
    const auto ba = confusion(b, a);
    for (int c = 0; c < 3; ++c) {
        EXPECT_DOUBLE_EQ(dice(ab[c]), dice(ba[c]));
        // Swapping roles exchanges fp and fn.
        EXPECT_EQ(ab[c].fp, ba[c].fn);
        EXPECT_EQ(ab[c].fn, ba[c].fp);
    }
}

TEST(ScalarMetricsTest, ConsistentRelabelingPermutesTheReport) {
    const Dims dims{4, 4, 4};
    const LabelVolume pred = random_labels(dims, 4, 21);
    const LabelVolume truth = random_labels(dims, 4, 22);
    const int perm[4] = {2, 3, 1, 0};

    LabelVolume pred_p(dims, 4), truth_p(dims, 4);
    for (std::size_t j = 0; j < pred.size(); ++j) {
        pred_p.raw()[j] = static_cast<std::uint8_t>(perm[pred.raw()[j]]);
        truth_p.raw()[j] = static_cast<std::uint8_t>(perm[truth.raw()[j]]);
    }

    const auto base = confusion(pred, truth);
    const auto moved = confusion(pred_p, truth_p);
    for (int c = 0; c < 4; ++c) {
        EXPECT_EQ(base[c].tp, moved[perm[c]].tp);
        EXPECT_EQ(base[c].fp, moved[perm[c]].fp);
        EXPECT_EQ(base[c].fn, moved[perm[c]].fn);
        EXPECT_DOUBLE_EQ(dice(base[c]), dice(moved[perm[c]]));
    }
}

TEST(ReportTest, EndToEndMatchesHandComputation) {
    const SegmentationReport rep = evaluate_segmentation(tiny_pred(), tiny_truth());
    ASSERT_EQ(rep.per_class.size(), 3u);

    ASSERT_TRUE(rep.per_class[0].dice);
    EXPECT_DOUBLE_EQ(*rep.per_class[0].dice, 4.0 / 7.0);
    EXPECT_DOUBLE_EQ(*rep.per_class[1].dice, 0.4);
    EXPECT_DOUBLE_EQ(*rep.per_class[2].dice, 0.5);

    EXPECT_DOUBLE_EQ(*rep.per_class[0].precision, 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(*rep.per_class[0].recall, 0.5);
    EXPECT_DOUBLE_EQ(*rep.per_class[0].avd_percent, 25.0);
    EXPECT_DOUBLE_EQ(*rep.per_class[1].avd_percent, 50.0);
    EXPECT_DOUBLE_EQ(*rep.per_class[2].avd_percent, 0.0);

    ASSERT_TRUE(rep.mean_dice);
    EXPECT_DOUBLE_EQ(*rep.mean_dice, (4.0 / 7.0 + 0.4 + 0.5) / 3.0);
}

TEST(ReportTest, AbsentClassesStayUndefinedAndAreSkippedByTheMean) {
    // Both volumes carry 4 classes but only use 0 and 1.
    LabelVolume pred(Dims{1, 2, 2}, 4), truth(Dims{1, 2, 2}, 4);
    pred.raw() = {0, 0, 1, 1};
    truth.raw() = {0, 1, 1, 1};
    const SegmentationReport rep = evaluate_segmentation(pred, truth);
    ASSERT_EQ(rep.per_class.size(), 4u);
    for (int c : {2, 3}) {
        EXPECT_FALSE(rep.per_class[c].dice);
        EXPECT_FALSE(rep.per_class[c].precision);
        EXPECT_FALSE(rep.per_class[c].recall);
        EXPECT_FALSE(rep.per_class[c].avd_percent);
    }
    // dice0 = 2/3 (tp=1,fp=1,fn=0), dice1 = 2*2/(4+0+1) = 0.8.
    EXPECT_DOUBLE_EQ(*rep.mean_dice, (2.0 / 3.0 + 0.8) / 2.0);

    const std::string text = format_report(rep);
    EXPECT_NE(text.find("n/a"), std::string::npos);
    EXPECT_NE(text.find("0.8000"), std::string::npos);
}

TEST(ReportTest, CsvRoundTripsValuesAndLeavesUndefinedCellsEmpty) {
    namespace fs = std::filesystem;
    const fs::path path =
        fs::temp_directory_path() / ("voxseg_metrics_" + std::to_string(::getpid()) + ".csv");

    LabelVolume pred(Dims{1, 2, 2}, 3), truth(Dims{1, 2, 2}, 3);
    pred.raw() = {0, 0, 1, 1};
    truth.raw() = {0, 1, 1, 1};  // class 2 absent everywhere
    write_report_csv(evaluate_segmentation(pred, truth), path);

    std::ifstream in(path);
    ASSERT_TRUE(in.good());
    std::string header, row0, row1, row2;
    std::getline(in, header);
    std::getline(in, row0);
    std::getline(in, row1);
    std::getline(in, row2);
    EXPECT_EQ(header, "class,tp,fp,fn,tn,dice,precision,recall,avd_percent");
    EXPECT_EQ(row0, "0,1,1,0,2,0.6666666667,0.5,1,100");
    EXPECT_EQ(row1, "1,2,0,1,1,0.8,1,0.6666666667,33.33333333");
    EXPECT_EQ(row2, "2,0,0,0,4,,,,");
    fs::remove(path);
}
