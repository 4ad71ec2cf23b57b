#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "advmix/errors.hpp"
#include "advmix/evaluation.hpp"
#include "advmix/random.hpp"
#include "support/score_table.hpp"

using namespace advmix;
using namespace advmix::testing;

namespace {

// Straight from the definitions, one class at a time, no confusion matrix.
struct BruteScores {
    std::array<double, 3> precision{}, recall{}, f1{};
    double macro = 0.0;
};

BruteScores brute_force(const std::vector<int>& preds, const std::vector<int>& golds) {
    BruteScores s;
    for (int c = 0; c < 3; ++c) {
        double tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            if (preds[i] == c && golds[i] == c) tp += 1;
            if (preds[i] == c && golds[i] != c) fp += 1;
            if (preds[i] != c && golds[i] == c) fn += 1;
        }
        s.precision[c] = tp + fp > 0 ? tp / (tp + fp) : 0.0;
        s.recall[c] = tp + fn > 0 ? tp / (tp + fn) : 0.0;
        const double d = s.precision[c] + s.recall[c];
        s.f1[c] = d > 0 ? 2 * s.precision[c] * s.recall[c] / d : 0.0;
        s.macro += s.f1[c] / 3.0;
    }
    return s;
}

ProbRow random_prob_row(Rng& rng) {
    ProbRow r{rng.uniform() + 1e-3, rng.uniform() + 1e-3, rng.uniform() + 1e-3};
    const double s = r[0] + r[1] + r[2];
    for (auto& v : r) v /= s;
    return r;
}

}  // namespace

TEST_CASE("metrics agree with a per-class brute force on random label pairs") {
    Rng rng(11);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 1 + rng.below(40);
        std::vector<int> preds(n), golds(n);
        for (std::size_t i = 0; i < n; ++i) {
            preds[i] = static_cast<int>(rng.below(3));
            golds[i] = static_cast<int>(rng.below(3));
        }
        const auto got = compute_metrics(preds, golds);
        const auto want = brute_force(preds, golds);
        for (int c = 0; c < 3; ++c) {
            CHECK(got.per_class[c].precision == doctest::Approx(want.precision[c]).epsilon(1e-12));
            CHECK(got.per_class[c].recall == doctest::Approx(want.recall[c]).epsilon(1e-12));
            CHECK(got.per_class[c].f1 == doctest::Approx(want.f1[c]).epsilon(1e-12));
        }
        CHECK(got.macro_f1 == doctest::Approx(want.macro).epsilon(1e-12));
        CHECK(got.confusion.total() == static_cast<long>(n));
    }
}

TEST_CASE("published score table is reproduced from a constructed confusion matrix") {
    const auto cm = confusion_for_targets(kTableTargets);
    const auto m = compute_metrics(cm);
    for (int c = 0; c < 3; ++c) {
        CHECK(round_half_up(m.per_class[c].precision) == doctest::Approx(kTablePrecision[c]).epsilon(1e-12));
        CHECK(round_half_up(m.per_class[c].recall) == doctest::Approx(kTableRecall[c]).epsilon(1e-12));
        CHECK(std::abs(m.per_class[c].f1 - kTableF1[c]) <= kTableTolerance);
    }
    CHECK(std::abs(m.macro_f1 - kTableMacroF1) <= kTableTolerance);
    // Macro of the printed F1s is itself the printed macro.
    CHECK(round_half_up((kTableF1[0] + kTableF1[1] + kTableF1[2]) / 3.0) == doctest::Approx(kTableMacroF1));
}

TEST_CASE("perfect predictions score one everywhere") {
    std::vector<int> y{0, 1, 2, 2, 1, 0, 0};
    const auto m = compute_metrics(y, y);
    for (const auto& c : m.per_class) {
        CHECK(c.precision == 1.0);
        CHECK(c.recall == 1.0);
        CHECK(c.f1 == 1.0);
    }
    CHECK(m.macro_f1 == 1.0);
    CHECK(m.accuracy == 1.0);
}

TEST_CASE("absent classes score zero instead of NaN") {
    std::vector<int> preds{0, 0, 0}, golds{0, 0, 0};
    const auto m = compute_metrics(preds, golds);
    CHECK(m.per_class[0].f1 == 1.0);
    CHECK(m.per_class[1].precision == 0.0);
    CHECK(m.per_class[1].recall == 0.0);
    CHECK(m.per_class[1].f1 == 0.0);
    CHECK(m.macro_f1 == doctest::Approx(1.0 / 3.0));

    const auto empty = compute_metrics(ConfusionMatrix{});
    CHECK(empty.macro_f1 == 0.0);
    CHECK(empty.accuracy == 0.0);
}

TEST_CASE("macro-F1 does not depend on example order") {
    Rng rng(5);
    std::vector<int> preds(60), golds(60);
    for (std::size_t i = 0; i < 60; ++i) {
        preds[i] = static_cast<int>(rng.below(3));
        golds[i] = static_cast<int>(rng.below(3));
    }
    const double base = compute_metrics(preds, golds).macro_f1;
    std::vector<std::size_t> order(60);
    std::iota(order.begin(), order.end(), 0);
    for (int rep = 0; rep < 10; ++rep) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        std::vector<int> p2, g2;
        for (auto i : order) {
            p2.push_back(preds[i]);
            g2.push_back(golds[i]);
        }
        CHECK(compute_metrics(p2, g2).macro_f1 == base);
    }
}

TEST_CASE("scorer input errors") {
    std::vector<int> a{0, 1}, b{0};
    CHECK_THROWS_AS(compute_metrics(a, b), ShapeError);
    std::vector<int> bad{0, 3};
    CHECK_THROWS_AS(compute_metrics(bad, a), IndexError);
    std::vector<int> neg{-1, 0};
    CHECK_THROWS_AS(compute_metrics(a, neg), IndexError);
}

TEST_CASE("ensemble average") {
    Rng rng(3);
    ProbMatrix one;
    for (int i = 0; i < 8; ++i) one.push_back(random_prob_row(rng));

    SUBCASE("single candidate is returned unchanged") {
        std::vector<ProbMatrix> c{one};
        CHECK(ensemble_average(c) == one);
    }
    SUBCASE("two one-hot rows split evenly") {
        std::vector<ProbMatrix> c{{{1.0, 0.0, 0.0}}, {{0.0, 1.0, 0.0}}};
        const auto avg = ensemble_average(c);
        REQUIRE(avg.size() == 1);
        CHECK(avg[0][0] == 0.5);
        CHECK(avg[0][1] == 0.5);
        CHECK(avg[0][2] == 0.0);
    }
    SUBCASE("candidate order does not matter and rows stay distributions") {
        std::vector<ProbMatrix> c;
        for (int k = 0; k < 5; ++k) {
            ProbMatrix m;
            for (int i = 0; i < 8; ++i) m.push_back(random_prob_row(rng));
            c.push_back(m);
        }
        const auto avg = ensemble_average(c);
        std::reverse(c.begin(), c.end());
        const auto rev = ensemble_average(c);
        for (std::size_t r = 0; r < avg.size(); ++r) {
            CHECK(avg[r][0] + avg[r][1] + avg[r][2] == doctest::Approx(1.0).epsilon(1e-12));
            for (int k = 0; k < 3; ++k) CHECK(avg[r][k] == doctest::Approx(rev[r][k]).epsilon(1e-14));
        }
    }
    SUBCASE("errors") {
        std::vector<ProbMatrix> none;
        CHECK_THROWS_AS(ensemble_average(none), ContractError);
        std::vector<ProbMatrix> ragged{one, ProbMatrix(one.begin(), one.begin() + 3)};
        CHECK_THROWS_AS(ensemble_average(ragged), ShapeError);
        std::vector<ProbMatrix> unnormalized{{{0.5, 0.5, 0.5}}};
        CHECK_THROWS_AS(ensemble_average(unnormalized), ContractError);
    }
}

TEST_CASE("argmax breaks ties toward the lowest label") {
    CHECK(argmax_label({0.2, 0.5, 0.3}) == 1);
    CHECK(argmax_label({0.4, 0.4, 0.2}) == 0);
    CHECK(argmax_label({0.2, 0.4, 0.4}) == 1);
    CHECK(argmax_label({1.0 / 3, 1.0 / 3, 1.0 / 3}) == 0);
    CHECK(argmax_labels({{0.1, 0.1, 0.8}, {0.9, 0.05, 0.05}}) == std::vector<int>{2, 0});
}

TEST_CASE("round_half_up") {
    CHECK(round_half_up(0.125, 2) == 0.13);
    CHECK(round_half_up(0.375, 2) == 0.38);
    CHECK(round_half_up(0.12344) == doctest::Approx(0.1234).epsilon(1e-15));
    CHECK(round_half_up(0.5, 0) == 1.0);
    CHECK(round_half_up(1.5, 0) == 2.0);
    CHECK(round_half_up(2.5, 0) == 3.0);
}

TEST_CASE("metrics table layout") {
    const auto m = compute_metrics(confusion_for_targets(kTableTargets));
    const auto table = format_metrics_table(m);
    const auto pos = table.find("Positive"), neg = table.find("Negative"), neu = table.find("Neutral"),
               mac = table.find("Macro Average");
    REQUIRE(pos != std::string::npos);
    REQUIRE(neg != std::string::npos);
    REQUIRE(neu != std::string::npos);
    REQUIRE(mac != std::string::npos);
    CHECK(pos < neg);
    CHECK(neg < neu);
    CHECK(neu < mac);
    CHECK(table.find("0.8426") != std::string::npos);
    CHECK(table.find("0.7600") != std::string::npos);
    CHECK(table.find("0.7526") != std::string::npos);

    const auto j = metrics_to_json(m);
    CHECK(j.at("classes").at("positive").at("precision").get<double>() == m.per_class[2].precision);
    CHECK(j.at("confusion").size() == 3);
}
