#include "advmix/evaluation.hpp"

#include <cmath>
#include <cstdio>

#include "advmix/errors.hpp"
#include "advmix/text.hpp"

namespace advmix {

void ConfusionMatrix::add(int gold, int pred) {
    if (gold < 0 || gold >= kNumClasses || pred < 0 || pred >= kNumClasses) {
        throw IndexError("class index outside [0, 3): gold=" + std::to_string(gold) + " pred=" + std::to_string(pred));
    }
    ++counts[static_cast<std::size_t>(gold)][static_cast<std::size_t>(pred)];
}

long ConfusionMatrix::total() const {
    long n = 0;
    for (const auto& row : counts)
        for (long v : row) n += v;
    return n;
}

ConfusionMatrix confusion_matrix(std::span<const int> preds, std::span<const int> golds) {
    if (preds.size() != golds.size()) {
        throw ShapeError("compute_metrics: " + std::to_string(preds.size()) + " predictions vs " +
                         std::to_string(golds.size()) + " gold labels");
    }
    ConfusionMatrix cm;
    for (std::size_t i = 0; i < preds.size(); ++i) cm.add(golds[i], preds[i]);
    return cm;
}

namespace {
double safe_ratio(double num, double den) { return den == 0.0 ? 0.0 : num / den; }
}  // namespace

MetricsReport compute_metrics(const ConfusionMatrix& confusion) {
    MetricsReport report;
    report.confusion = confusion;
    long correct = 0;
    double f1_sum = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
        const double tp = static_cast<double>(confusion.counts[c][c]);
        long predicted = 0, actual = 0;
        for (std::size_t o = 0; o < 3; ++o) {
            predicted += confusion.counts[o][c];
            actual += confusion.counts[c][o];
        }
        auto& m = report.per_class[c];
        m.precision = safe_ratio(tp, static_cast<double>(predicted));
        m.recall = safe_ratio(tp, static_cast<double>(actual));
        m.f1 = safe_ratio(2.0 * m.precision * m.recall, m.precision + m.recall);
        m.support = actual;
        f1_sum += m.f1;
        correct += confusion.counts[c][c];
    }
    report.macro_f1 = f1_sum / 3.0;
    report.accuracy = safe_ratio(static_cast<double>(correct), static_cast<double>(confusion.total()));
    return report;
}

MetricsReport compute_metrics(std::span<const int> preds, std::span<const int> golds) {
    return compute_metrics(confusion_matrix(preds, golds));
}

ProbMatrix ensemble_average(std::span<const ProbMatrix> candidates) {
    if (candidates.empty()) throw ContractError("ensemble_average: no candidates");
    const std::size_t rows = candidates.front().size();
    for (const auto& m : candidates) {
        if (m.size() != rows) throw ShapeError("ensemble_average: candidates have different row counts");
        for (const auto& row : m) {
            const double s = row[0] + row[1] + row[2];
            if (std::abs(s - 1.0) > 1e-6 || row[0] < 0.0 || row[1] < 0.0 || row[2] < 0.0) {
                throw ContractError("ensemble_average: candidate row is not a probability vector");
            }
        }
    }
    ProbMatrix out(rows, ProbRow{0.0, 0.0, 0.0});
    for (const auto& m : candidates) {
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < 3; ++c) out[r][c] += m[r][c];
    }
    const double n = static_cast<double>(candidates.size());
    for (auto& row : out)
        for (auto& v : row) v /= n;
    return out;
}

int argmax_label(const ProbRow& row) {
    int best = 0;
    for (int c = 1; c < 3; ++c) {
        if (row[static_cast<std::size_t>(c)] > row[static_cast<std::size_t>(best)]) best = c;
    }
    return best;
}

std::vector<int> argmax_labels(const ProbMatrix& probs) {
    std::vector<int> out;
    out.reserve(probs.size());
    for (const auto& row : probs) out.push_back(argmax_label(row));
    return out;
}

double round_half_up(double value, int places) {
    const double scale = std::pow(10.0, places);
    return std::floor(value * scale + 0.5) / scale;
}

nlohmann::json metrics_to_json(const MetricsReport& report) {
    nlohmann::json classes = nlohmann::json::object();
    for (int c = 0; c < kNumClasses; ++c) {
        const auto& m = report.per_class[static_cast<std::size_t>(c)];
        classes[std::string(label_name(c))] = {
            {"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}, {"support", m.support}};
    }
    nlohmann::json confusion = nlohmann::json::array();
    for (const auto& row : report.confusion.counts) confusion.push_back(row);
    return nlohmann::json{{"classes", classes},
                          {"macro_f1", report.macro_f1},
                          {"accuracy", report.accuracy},
                          {"confusion", confusion}};
}

std::string format_metrics_table(const MetricsReport& report) {
    std::string out;
    char line[128];
    std::snprintf(line, sizeof line, "%-15s %10s %10s %10s\n", "", "Precision", "Recall", "F1");
    out += line;
    constexpr std::pair<const char*, int> rows[] = {{"Positive", 2}, {"Negative", 0}, {"Neutral", 1}};
    for (const auto& [name, label] : rows) {
        const auto& m = report.per_class[static_cast<std::size_t>(label)];
        std::snprintf(line, sizeof line, "%-15s %10.4f %10.4f %10.4f\n", name, round_half_up(m.precision),
                      round_half_up(m.recall), round_half_up(m.f1));
        out += line;
    }
    std::snprintf(line, sizeof line, "%-15s %10s %10s %10.4f\n", "Macro Average", "-", "-", round_half_up(report.macro_f1));
    out += line;
    return out;
}

}  // namespace advmix
