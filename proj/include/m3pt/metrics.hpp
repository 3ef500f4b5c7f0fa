#pragma once

#include "m3pt/common.hpp"

#include <cstdint>
#include <span>
#include <string>

namespace m3pt {

struct ConfusionCounts {
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    std::uint64_t tn = 0;
    std::uint64_t fn = 0;

    std::uint64_t total() const { return tp + fp + tn + fn; }
    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp;
        fp += o.fp;
        tn += o.tn;
        fn += o.fn;
        return *this;
    }
    friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

ConfusionCounts confusion(std::span<const std::uint8_t> predictions, std::span<const std::uint8_t> labels);
// Positive iff logit >= 0, i.e. probability >= 0.5.
ConfusionCounts confusion_from_logits(std::span<const double> logits, std::span<const std::uint8_t> labels);

struct MetricValues {
    double accuracy = 0.0;
    double f1 = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double mcc = 0.0;
    double nmcc = 0.5;
    // Set when a denominator was zero and the value was defined as 0.
    bool precision_degenerate = false;
    bool recall_degenerate = false;
    bool mcc_degenerate = false;

    bool degenerate() const { return precision_degenerate || recall_degenerate || mcc_degenerate; }
};

MetricValues metrics(const ConfusionCounts& counts);

struct MeanStd {
    double mean = 0.0;
    double stddev = 0.0;  // population
};

struct AggregateMetrics {
    MeanStd accuracy, f1, precision, recall, mcc, nmcc;
    std::size_t folds = 0;
};

MeanStd mean_std(std::span<const double> values);
// Throws InvalidArgument on an empty set.
AggregateMetrics aggregate(std::span<const MetricValues> folds);

// "0.90 ± 0.08"
std::string format_mean_std(const MeanStd& v);

}  // namespace m3pt
