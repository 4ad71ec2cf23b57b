#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace advmix {

using ProbRow = std::array<double, 3>;
using ProbMatrix = std::vector<ProbRow>;

// counts[gold][pred]
struct ConfusionMatrix {
    std::array<std::array<long, 3>, 3> counts{};

    void add(int gold, int pred);
    long total() const;
    bool operator==(const ConfusionMatrix&) const = default;
};

struct ClassMetrics {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    long support = 0;
};

struct MetricsReport {
    ConfusionMatrix confusion;
    std::array<ClassMetrics, 3> per_class;  // indexed by label id
    double macro_f1 = 0.0;
    double accuracy = 0.0;
};

ConfusionMatrix confusion_matrix(std::span<const int> preds, std::span<const int> golds);

// Precision/recall/F1 per class with every 0/0 taken as 0; macro-F1 is the
// unweighted mean of the three F1 scores.
MetricsReport compute_metrics(const ConfusionMatrix& confusion);
MetricsReport compute_metrics(std::span<const int> preds, std::span<const int> golds);

// Element-wise mean of equally shaped probability matrices.
ProbMatrix ensemble_average(std::span<const ProbMatrix> candidates);

// Index of the largest entry; ties go to the lowest index.
int argmax_label(const ProbRow& row);
std::vector<int> argmax_labels(const ProbMatrix& probs);

// Half-up rounding used for every printed score.
double round_half_up(double value, int places = 4);

nlohmann::json metrics_to_json(const MetricsReport& report);
// Aligned text block with rows Positive, Negative, Neutral, Macro Average.
std::string format_metrics_table(const MetricsReport& report);

}  // namespace advmix
