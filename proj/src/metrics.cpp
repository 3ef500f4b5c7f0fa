#include "m3pt/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <vector>

namespace m3pt {

ConfusionCounts confusion(std::span<const std::uint8_t> predictions, std::span<const std::uint8_t> labels) {
    require(predictions.size() == labels.size(), "confusion: " + std::to_string(predictions.size()) +
                                                     " predictions for " + std::to_string(labels.size()) + " labels");
    require(!labels.empty(), "confusion: empty input");
    ConfusionCounts c;
    for (std::size_t n = 0; n < labels.size(); ++n) {
        const bool p = predictions[n] != 0;
        const bool y = labels[n] != 0;
        if (p && y) ++c.tp;
        else if (p) ++c.fp;
        else if (y) ++c.fn;
        else ++c.tn;
    }
    return c;
}

ConfusionCounts confusion_from_logits(std::span<const double> logits, std::span<const std::uint8_t> labels) {
    std::vector<std::uint8_t> preds(logits.size());
    for (std::size_t n = 0; n < logits.size(); ++n) preds[n] = logits[n] >= 0.0 ? 1 : 0;
    return confusion(preds, labels);
}

MetricValues metrics(const ConfusionCounts& c) {
    const double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp);
    const double tn = static_cast<double>(c.tn), fn = static_cast<double>(c.fn);
    MetricValues m;
    if (c.total() > 0) m.accuracy = (tp + tn) / (tp + fp + tn + fn);
    if (tp + fp > 0) m.precision = tp / (tp + fp);
    else m.precision_degenerate = true;
    if (tp + fn > 0) m.recall = tp / (tp + fn);
    else m.recall_degenerate = true;
    if (m.precision + m.recall > 0) m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
    const double denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
    if (denom > 0) m.mcc = (tp * tn - fp * fn) / std::sqrt(denom);
    else m.mcc_degenerate = true;
    m.nmcc = (m.mcc + 1.0) / 2.0;
    return m;
}

MeanStd mean_std(std::span<const double> values) {
    require(!values.empty(), "mean_std: no values");
    MeanStd r;
    for (double v : values) r.mean += v;
    r.mean /= static_cast<double>(values.size());
    double ss = 0.0;
    for (double v : values) ss += (v - r.mean) * (v - r.mean);
    r.stddev = std::sqrt(ss / static_cast<double>(values.size()));
    return r;
}

AggregateMetrics aggregate(std::span<const MetricValues> folds) {
    require(!folds.empty(), "aggregate: no successful folds");
    auto col = [&](double MetricValues::*field) {
        std::vector<double> v;
        v.reserve(folds.size());
        for (const auto& f : folds) v.push_back(f.*field);
        return mean_std(v);
    };
    AggregateMetrics a;
    a.accuracy = col(&MetricValues::accuracy);
    a.f1 = col(&MetricValues::f1);
    a.precision = col(&MetricValues::precision);
    a.recall = col(&MetricValues::recall);
    a.mcc = col(&MetricValues::mcc);
    a.nmcc = col(&MetricValues::nmcc);
    a.folds = folds.size();
    return a;
}

std::string format_mean_std(const MeanStd& v) {
    char buf[64];
    // keeps "-0.00" out of the tables
    auto tidy = [](double x) { return std::abs(x) < 0.005 ? 0.0 : x; };
    std::snprintf(buf, sizeof buf, "%.2f ± %.2f", tidy(v.mean), tidy(v.stddev));
    return buf;
}

}  // namespace m3pt
