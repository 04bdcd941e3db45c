#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "voxseg/errors.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

// ---------------------------------------------------------------------------
// Per-class overlap metrics. Every scalar is computed from a one-vs-rest
// confusion; ratios with an empty denominator are a distinct "undefined"
// state (an exception at the scalar level, an empty optional in reports) and
// are never silently folded to 0 or 1.
// ---------------------------------------------------------------------------

struct ConfusionCounts {
    std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;

    std::int64_t pred_volume() const { return tp + fp; }
    std::int64_t truth_volume() const { return tp + fn; }
    std::int64_t total() const { return tp + fp + fn + tn; }
};

inline std::vector<ConfusionCounts> confusion(const LabelVolume& pred,
                                              const LabelVolume& truth) {
    if (pred.dims() != truth.dims())
        throw ShapeMismatch("prediction is " + to_string(pred.dims()) + ", truth is " +
                            to_string(truth.dims()));
    const int num_classes = std::max(pred.num_classes(), truth.num_classes());
    std::vector<ConfusionCounts> counts(static_cast<std::size_t>(num_classes));
    const std::size_t n = pred.size();
    for (std::size_t j = 0; j < n; ++j) {
        const std::uint8_t p = pred.raw()[j];
        const std::uint8_t t = truth.raw()[j];
        if (p == t) {
            ++counts[p].tp;
        } else {
            ++counts[p].fp;
            ++counts[t].fn;
        }
    }
    for (ConfusionCounts& c : counts)
        c.tn = static_cast<std::int64_t>(n) - c.tp - c.fp - c.fn;
    return counts;
}

/// 2 TP / (2 TP + FN + FP); undefined when the class is absent from both
/// prediction and truth.
inline double dice(const ConfusionCounts& c) {
    const std::int64_t denom = 2 * c.tp + c.fn + c.fp;
    if (denom == 0) throw UndefinedMetric("dice: class absent from prediction and truth");
    return 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

inline double precision(const ConfusionCounts& c) {
    if (c.tp + c.fp == 0) throw UndefinedMetric("precision: class never predicted");
    return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
}

inline double recall(const ConfusionCounts& c) {
    if (c.tp + c.fn == 0) throw UndefinedMetric("recall: class absent from truth");
    return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
}

/// (beta^2 + 1) P R / (beta^2 P + R)
inline double f_beta(double precision, double recall, double beta) {
    if (beta < 0.0) throw InvalidConfig("beta must be >= 0");
    const double b2 = beta * beta;
    const double denom = b2 * precision + recall;
    if (denom == 0.0) throw UndefinedMetric("f_beta: precision and recall are both zero");
    return (b2 + 1.0) * precision * recall / denom;
}

/// Algebraically identical counts form, (b^2+1) TP / ((b^2+1) TP + b^2 FN + FP);
/// stays defined when TP = 0 but the class occurs somewhere.
inline double f_beta(const ConfusionCounts& c, double beta) {
    if (beta < 0.0) throw InvalidConfig("beta must be >= 0");
    const double b2 = beta * beta;
    const double denom = (b2 + 1.0) * static_cast<double>(c.tp) +
                         b2 * static_cast<double>(c.fn) + static_cast<double>(c.fp);
    if (denom == 0.0)
        throw UndefinedMetric("f_beta: class absent from prediction and truth");
    return (b2 + 1.0) * static_cast<double>(c.tp) / denom;
}

/// |V_pred - V_truth| / V_truth * 100
inline double avd_percent(std::int64_t pred_volume, std::int64_t truth_volume) {
    if (truth_volume == 0) throw UndefinedMetric("avd: class absent from truth");
    return 100.0 * static_cast<double>(std::abs(pred_volume - truth_volume)) /
           static_cast<double>(truth_volume);
}

inline double avd_percent(const ConfusionCounts& c) {
    return avd_percent(c.pred_volume(), c.truth_volume());
}

/// Overlap share of the truth volume, 100 TP / V_truth. Offered as an
/// alternative volumetric agreement figure; note it coincides with recall
/// scaled to percent, so reports use the absolute difference form above.
inline double intersection_percent(const ConfusionCounts& c) {
    if (c.truth_volume() == 0)
        throw UndefinedMetric("intersection: class absent from truth");
    return 100.0 * static_cast<double>(c.tp) / static_cast<double>(c.truth_volume());
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct ClassMetrics {
    int class_index = 0;
    ConfusionCounts counts;
    std::optional<double> dice, precision, recall, avd_percent;
};

struct SegmentationReport {
    std::vector<ClassMetrics> per_class;
    std::optional<double> mean_dice;  // over classes whose dice is defined
};

namespace detail {
template <class F>
std::optional<double> defined_or_empty(F&& f) {
    try {
        return f();
    } catch (const UndefinedMetric&) {
        return std::nullopt;
    }
}
}  // namespace detail

inline SegmentationReport evaluate_segmentation(const LabelVolume& pred,
                                                const LabelVolume& truth) {
    const std::vector<ConfusionCounts> counts = confusion(pred, truth);
    SegmentationReport rep;
    double dice_sum = 0.0;
    int dice_n = 0;
    for (std::size_t c = 0; c < counts.size(); ++c) {
        ClassMetrics m;
        m.class_index = static_cast<int>(c);
        m.counts = counts[c];
        m.dice = detail::defined_or_empty([&] { return dice(counts[c]); });
        m.precision = detail::defined_or_empty([&] { return precision(counts[c]); });
        m.recall = detail::defined_or_empty([&] { return recall(counts[c]); });
        m.avd_percent = detail::defined_or_empty([&] { return avd_percent(counts[c]); });
        if (m.dice) {
            dice_sum += *m.dice;
            ++dice_n;
        }
        rep.per_class.push_back(m);
    }
    if (dice_n > 0) rep.mean_dice = dice_sum / dice_n;
    return rep;
}

namespace detail {
inline std::string fmt_metric(const std::optional<double>& v, int prec = 4) {
    if (!v) return "n/a";
    std::ostringstream os;
    os << std::fixed << std::setprecision(prec) << *v;
    return os.str();
}
}  // namespace detail

inline std::string format_report(const SegmentationReport& rep) {
    std::ostringstream os;
    os << "class      dice  precision     recall      avd%\n";
    for (const ClassMetrics& m : rep.per_class) {
        os << std::setw(5) << m.class_index << std::setw(10)
           << detail::fmt_metric(m.dice) << std::setw(11)
           << detail::fmt_metric(m.precision) << std::setw(11)
           << detail::fmt_metric(m.recall) << std::setw(10)
           << detail::fmt_metric(m.avd_percent, 2) << "\n";
    }
    os << "mean dice: " << detail::fmt_metric(rep.mean_dice) << "\n";
    return os.str();
}

inline void write_report_csv(const SegmentationReport& rep,
                             const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IOFailure("cannot open " + path.string() + " for writing");
    os << "class,tp,fp,fn,tn,dice,precision,recall,avd_percent\n";
    auto cell = [](const std::optional<double>& v) {
        if (!v) return std::string();
        std::ostringstream s;
        s << std::setprecision(10) << *v;
        return s.str();
    };
    for (const ClassMetrics& m : rep.per_class) {
        os << m.class_index << ',' << m.counts.tp << ',' << m.counts.fp << ','
           << m.counts.fn << ',' << m.counts.tn << ',' << cell(m.dice) << ','
           << cell(m.precision) << ',' << cell(m.recall) << ',' << cell(m.avd_percent)
           << "\n";
    }
    if (!os) throw IOFailure("write failed for " + path.string());
}

}  // namespace voxseg
