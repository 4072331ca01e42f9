#ifndef DBCE_METRICS_HPP
#define DBCE_METRICS_HPP

#include <cstdio>
#include <string>
#include <vector>

#include "dbce/grid.hpp"

namespace dbce {

struct ConfusionCounts {
    long long tp = 0, fp = 0, fn = 0, tn = 0;

    long long total() const { return tp + fp + fn + tn; }
};

// One-vs-rest counts for class c.
inline ConfusionCounts confusion(const LabelMask& pred, const LabelMask& truth, int c) {
    if (!pred.same_shape(truth))
        throw std::invalid_argument("confusion: prediction/truth dimension mismatch");
    ConfusionCounts k;
    const std::uint8_t* p = pred.data();
    const std::uint8_t* t = truth.data();
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool in_pred = p[i] == c;
        const bool in_truth = t[i] == c;
        if (in_pred && in_truth) ++k.tp;
        else if (in_pred) ++k.fp;
        else if (in_truth) ++k.fn;
        else ++k.tn;
    }
    return k;
}

struct ClassMetrics {
    double dice = 0, iou = 0, precision = 0, recall = 0;
    bool absent_in_both = false; // 0/0 convention applied: scored as 1, flagged
};

// Dice, IoU, precision, recall from counts. 0/0 ratios are 1 when the class
// is absent from both prediction and truth, 0 otherwise.
inline ClassMetrics dice_iou_prec_rec(const ConfusionCounts& k) {
    ClassMetrics m;
    m.absent_in_both = (k.tp + k.fp + k.fn) == 0;
    const double zero_over_zero = m.absent_in_both ? 1.0 : 0.0;
    const auto ratio = [&](double num, double den) {
        return den > 0.0 ? num / den : zero_over_zero;
    };
    m.dice = ratio(2.0 * k.tp, 2.0 * k.tp + k.fp + k.fn);
    m.iou = ratio(static_cast<double>(k.tp), static_cast<double>(k.tp + k.fp + k.fn));
    m.precision = ratio(static_cast<double>(k.tp), static_cast<double>(k.tp + k.fp));
    m.recall = ratio(static_cast<double>(k.tp), static_cast<double>(k.tp + k.fn));
    return m;
}

struct SampleMetrics {
    std::string sample_id;
    std::vector<ClassMetrics> per_class; // indexed by class, 0..C-1
};

inline SampleMetrics sample_metrics(const LabelMask& pred, const LabelMask& truth, int classes,
                                    std::string sample_id = {}) {
    SampleMetrics s;
    s.sample_id = std::move(sample_id);
    s.per_class.reserve(classes);
    for (int c = 0; c < classes; ++c) s.per_class.push_back(dice_iou_prec_rec(confusion(pred, truth, c)));
    return s;
}

// flat: each sample is averaged over its evaluated classes first (entries
// flagged absent-in-both are skipped when anything else remains), then over
// samples. This is the usual per-image protocol of binary benchmarks.
// per_organ: each class is averaged over all samples first (flagged entries
// contribute their conventional 1), then over classes, the way multi-organ
// scan benchmarks report.
enum class AggregateMode { flat, per_organ };

inline AggregateMode parse_aggregate_mode(const std::string& name) {
    if (name == "flat") return AggregateMode::flat;
    if (name == "per_organ") return AggregateMode::per_organ;
    throw std::invalid_argument("unknown aggregate mode '" + name +
                                "' (valid: flat, per_organ)");
}

struct MetricValues {
    double dice = 0, iou = 0, precision = 0, recall = 0;
};

struct MetricsReport {
    int classes = 0;
    bool include_background = false; // background joins the means when set
    AggregateMode mode = AggregateMode::flat;
    std::vector<SampleMetrics> samples;
    std::vector<MetricValues> per_class_mean; // over samples, all classes
    MetricValues overall;                     // per `mode`
};

inline MetricsReport aggregate(const std::vector<SampleMetrics>& samples, AggregateMode mode,
                               bool include_background = false) {
    if (samples.empty()) throw std::invalid_argument("aggregate: no samples");
    const int classes = static_cast<int>(samples.front().per_class.size());
    for (const SampleMetrics& s : samples)
        if (static_cast<int>(s.per_class.size()) != classes)
            throw std::invalid_argument("aggregate: inconsistent class counts");

    MetricsReport report;
    report.classes = classes;
    report.include_background = include_background;
    report.mode = mode;
    report.samples = samples;

    report.per_class_mean.resize(classes);
    for (int c = 0; c < classes; ++c) {
        MetricValues acc;
        for (const SampleMetrics& s : samples) {
            acc.dice += s.per_class[c].dice;
            acc.iou += s.per_class[c].iou;
            acc.precision += s.per_class[c].precision;
            acc.recall += s.per_class[c].recall;
        }
        const double n = static_cast<double>(samples.size());
        report.per_class_mean[c] = {acc.dice / n, acc.iou / n, acc.precision / n, acc.recall / n};
    }

    const int c0 = include_background ? 0 : 1;
    if (c0 >= classes) throw std::invalid_argument("aggregate: no evaluated classes");

    MetricValues overall;
    if (mode == AggregateMode::per_organ) {
        for (int c = c0; c < classes; ++c) {
            overall.dice += report.per_class_mean[c].dice;
            overall.iou += report.per_class_mean[c].iou;
            overall.precision += report.per_class_mean[c].precision;
            overall.recall += report.per_class_mean[c].recall;
        }
        const double k = static_cast<double>(classes - c0);
        overall = {overall.dice / k, overall.iou / k, overall.precision / k, overall.recall / k};
    } else {
        for (const SampleMetrics& s : samples) {
            MetricValues acc;
            int used = 0;
            for (int c = c0; c < classes; ++c) {
                if (s.per_class[c].absent_in_both) continue;
                acc.dice += s.per_class[c].dice;
                acc.iou += s.per_class[c].iou;
                acc.precision += s.per_class[c].precision;
                acc.recall += s.per_class[c].recall;
                ++used;
            }
            if (used == 0) {
                // every evaluated class absent on both sides: conventional 1s
                acc = {1.0, 1.0, 1.0, 1.0};
                used = 1;
            }
            overall.dice += acc.dice / used;
            overall.iou += acc.iou / used;
            overall.precision += acc.precision / used;
            overall.recall += acc.recall / used;
        }
        const double n = static_cast<double>(samples.size());
        overall = {overall.dice / n, overall.iou / n, overall.precision / n, overall.recall / n};
    }
    report.overall = overall;
    return report;
}

namespace detail {

inline std::string format_metric(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

} // namespace detail

// One row per (sample, class), then per-class mean rows, then the overall
// row. Column names are fixed.
inline std::string to_csv(const MetricsReport& report) {
    std::string out = "sample,class,dice,iou,precision,recall\n";
    const auto row = [&](const std::string& sample, const std::string& cls, double d, double i,
                         double p, double r) {
        out += sample + "," + cls + "," + detail::format_metric(d) + "," +
               detail::format_metric(i) + "," + detail::format_metric(p) + "," +
               detail::format_metric(r) + "\n";
    };
    for (const SampleMetrics& s : report.samples)
        for (int c = 0; c < report.classes; ++c)
            row(s.sample_id, std::to_string(c), s.per_class[c].dice, s.per_class[c].iou,
                s.per_class[c].precision, s.per_class[c].recall);
    for (int c = 0; c < report.classes; ++c)
        row("mean", std::to_string(c), report.per_class_mean[c].dice,
            report.per_class_mean[c].iou, report.per_class_mean[c].precision,
            report.per_class_mean[c].recall);
    row("mean", "all", report.overall.dice, report.overall.iou, report.overall.precision,
        report.overall.recall);
    return out;
}

} // namespace dbce

#endif // DBCE_METRICS_HPP
