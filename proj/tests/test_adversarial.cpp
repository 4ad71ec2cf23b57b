#include <cmath>

#include "doctest.h"
#include "advmix/adversarial.hpp"
#include "advmix/errors.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"

using namespace advmix;
using namespace advmix::testing;

namespace {

double example_norm(const Tensor& t, std::size_t b, std::size_t rows) {
    const std::size_t w = t.dim(1), h = t.dim(2);
    double sq = 0.0;
    for (std::size_t i = b * w * h; i < (b * w + rows) * h; ++i) sq += t[i] * t[i];
    return std::sqrt(sq);
}

bool pad_rows_zero(const Tensor& t, std::span<const std::size_t> lengths) {
    const std::size_t w = t.dim(1), h = t.dim(2);
    for (std::size_t b = 0; b < lengths.size(); ++b)
        for (std::size_t i = (b * w + lengths[b]) * h; i < (b + 1) * w * h; ++i)
            if (t[i] != 0.0) return false;
    return true;
}

std::vector<double> grad_or_zero(const Tensor& t) {
    if (!t.has_grad()) return std::vector<double>(t.numel(), 0.0);
    return {t.grad().begin(), t.grad().end()};
}

struct Setup {
    ClassifierModel model;
    Batch batch;
    Tensor x;  // constant embeddings
};

Setup make_setup(std::uint64_t seed, std::size_t batch_size = 4) {
    const auto cfg = tiny_config();
    Rng rng(seed);
    auto model = randomized_model(cfg, seed, 0.3);
    auto batch = make_batch(random_examples(rng, batch_size, cfg), false);
    Tape tape;
    auto x = stop_gradient(model.embed(tape, batch));
    return {std::move(model), std::move(batch), std::move(x)};
}

// KL(p || softmax(f(z))) with frozen parameters, as a plain function of z.
double probe_divergence(const ClassifierModel& model, const Tensor& p, const Tensor& z,
                        std::span<const std::size_t> lengths) {
    Tape tape;
    ForwardOptions frozen;
    frozen.frozen_parameters = true;
    return kl_divergence(tape, p, model.forward_from_embeddings(tape, z, lengths, frozen)).item();
}

}  // namespace

TEST_CASE("adv config") {
    AdvConfig c;
    CHECK(c.epsilon == 2.0);
    CHECK(c.alpha == 1.0);
    CHECK(c.xi == 0.1);
    CHECK_NOTHROW(c.validate());
    c.epsilon = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = AdvConfig{};
    c.alpha = -1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = AdvConfig{};
    c.xi = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    const auto back = nlohmann::json(AdvConfig{3.0, 0.5, 0.2, false}).get<AdvConfig>();
    CHECK(back.epsilon == 3.0);
    CHECK(back.alpha == 0.5);
    CHECK_FALSE(back.enabled);
    CHECK_THROWS_AS(nlohmann::json({{"eps", 1.0}}).get<AdvConfig>(), ConfigError);
}

TEST_CASE("random_direction") {
    const Shape shape{3, 5, 4};
    const std::vector<std::size_t> lengths{5, 2, 3};
    Rng a(1), b(1), c(2);
    const auto d = random_direction(shape, lengths, 0.1, a);
    double sq = 0.0;
    for (double v : d.values()) sq += v * v;
    CHECK(std::abs(std::sqrt(sq) - 0.1) < 1e-10);
    CHECK(pad_rows_zero(d, lengths));
    CHECK(std::ranges::equal(d.values(), random_direction(shape, lengths, 0.1, b).values()));
    CHECK_FALSE(std::ranges::equal(d.values(), random_direction(shape, lengths, 0.1, c).values()));
    CHECK_THROWS_AS(random_direction(shape, lengths, 0.0, a), ContractError);
}

TEST_CASE("normalize_per_example") {
    const std::vector<std::size_t> one{1};
    const auto r = normalize_per_example(Tensor({1, 1, 2}, {3.0, 4.0}), one, 2.0);
    CHECK(std::abs(r[0] - 1.2) < 1e-15);
    CHECK(std::abs(r[1] - 1.6) < 1e-15);

    const auto flat = normalize_per_example(Tensor({1, 1, 2}, {1e-13, 0.0}), one, 2.0);
    CHECK(flat[0] == 0.0);
    CHECK(flat[1] == 0.0);

    // Each example is scaled on its own; pad rows are ignored and zeroed.
    const std::vector<std::size_t> lengths{1, 2};
    const auto mixed = normalize_per_example(Tensor({2, 2, 1}, {3.0, 7.0, 0.0, 5.0}), lengths, 1.0);
    CHECK(mixed[0] == doctest::Approx(1.0));
    CHECK(mixed[1] == 0.0);
    CHECK(mixed[2] == 0.0);
    CHECK(mixed[3] == doctest::Approx(1.0));
}

TEST_CASE("compute_r_adv") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto s = make_setup(seed);
        for (double eps : {1.0, 2.0, 3.0, 5.0}) {
            AdvConfig adv;
            adv.epsilon = eps;
            Rng rng(seed + 100);
            const auto before = s.model.named_parameters();
            std::vector<std::vector<double>> snapshot;
            for (const auto& p : before) snapshot.emplace_back(p.tensor.values().begin(), p.tensor.values().end());

            const auto pert = compute_r_adv(s.model, s.x, s.batch.lengths, adv, rng);
            CHECK(pad_rows_zero(pert.r_adv, s.batch.lengths));
            for (std::size_t b = 0; b < s.batch.size; ++b) {
                CHECK(std::abs(example_norm(pert.r_adv, b, s.batch.lengths[b]) - eps) < 1e-8);
            }
            CHECK_FALSE(pert.r_adv.requires_grad());
            // side-effect free on the parameters
            const auto after = s.model.named_parameters();
            for (std::size_t i = 0; i < after.size(); ++i) {
                CHECK(std::ranges::equal(after[i].tensor.values(), snapshot[i]));
                CHECK_FALSE(after[i].tensor.has_grad());
            }
        }
    }
}

TEST_CASE("the probe gradient matches finite differences") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const auto s = make_setup(seed, 2);
        AdvConfig adv;
        Rng rng(seed), replay(seed);
        const auto pert = compute_r_adv(s.model, s.x, s.batch.lengths, adv, rng);
        const auto d = random_direction(s.x.shape(), s.batch.lengths, adv.xi, replay);
        std::vector<double> z(s.x.numel());
        for (std::size_t i = 0; i < z.size(); ++i) z[i] = s.x[i] + d[i];

        std::vector<double> numeric(z.size());
        for (std::size_t i = 0; i < z.size(); ++i) {
            auto up = z, down = z;
            up[i] += kFiniteDifferenceStep;
            down[i] -= kFiniteDifferenceStep;
            numeric[i] = (probe_divergence(s.model, pert.clean_probs, Tensor(s.x.shape(), up), s.batch.lengths) -
                          probe_divergence(s.model, pert.clean_probs, Tensor(s.x.shape(), down), s.batch.lengths)) /
                         (2.0 * kFiniteDifferenceStep);
        }
        const std::vector<double> analytic(pert.gradient.values().begin(), pert.gradient.values().end());
        CHECK(relative_error(analytic, numeric) < kGradientRelativeTolerance);
    }
}

TEST_CASE("flat divergence gives a zero perturbation") {
    auto s = make_setup(4);
    // A zero head makes the output constant, so g is exactly zero.
    for (auto& v : s.model.classifier_weight.mutable_values()) v = 0.0;
    Rng rng(1);
    const auto pert = compute_r_adv(s.model, s.x, s.batch.lengths, AdvConfig{}, rng);
    for (double v : pert.r_adv.values()) CHECK(v == 0.0);
    AdvConfig off;
    off.enabled = false;
    CHECK_THROWS_AS(compute_r_adv(s.model, s.x, s.batch.lengths, off, rng), ContractError);
}

TEST_CASE("adv_loss") {
    const auto s = make_setup(7);
    const ForwardOptions eval;
    SUBCASE("zero perturbation gives zero loss") {
        Tape tape;
        const auto loss = adv_loss(tape, s.model, s.x, Tensor::zeros(s.x.shape()), s.batch.lengths, eval);
        CHECK(std::abs(loss.item()) < 1e-12);
    }
    SUBCASE("non-negative") {
        Rng rng(3);
        for (int trial = 0; trial < 20; ++trial) {
            const auto pert = compute_r_adv(s.model, s.x, s.batch.lengths, AdvConfig{}, rng);
            Tape tape;
            CHECK(adv_loss(tape, s.model, s.x, pert.r_adv, s.batch.lengths, eval, &pert.clean_probs).item() >= -1e-12);
        }
    }
    SUBCASE("no gradient path through the clean branch") {
        Rng rng(3);
        const auto pert = compute_r_adv(s.model, s.x, s.batch.lengths, AdvConfig{}, rng);
        // With the perturbed branch frozen too, nothing is left to differentiate.
        ForwardOptions frozen;
        frozen.frozen_parameters = true;
        Tape tape;
        const auto loss = adv_loss(tape, s.model, s.x, pert.r_adv, s.batch.lengths, frozen);
        CHECK_FALSE(loss.requires_grad());
        CHECK(tape.size() == 0);

        // With parameters live, the gradient equals that of KL against a
        // separately computed constant target.
        Tape t1;
        auto l1 = adv_loss(t1, s.model, s.x, pert.r_adv, s.batch.lengths, eval);
        backward(l1, t1);
        std::vector<std::vector<double>> g1;
        for (const auto& p : s.model.parameters()) g1.push_back(grad_or_zero(p));
        for (const auto& p : s.model.parameters()) p.zero_grad();
        Tape t2;
        std::vector<double> shifted(s.x.numel());
        for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] = s.x[i] + pert.r_adv[i];
        auto l2 = kl_divergence(t2, pert.clean_probs,
                                s.model.forward_from_embeddings(t2, Tensor(s.x.shape(), shifted), s.batch.lengths, eval));
        backward(l2, t2);
        const auto params = s.model.parameters();
        for (std::size_t i = 0; i < params.size(); ++i) {
            const auto g2 = grad_or_zero(params[i]);
            for (std::size_t k = 0; k < g2.size(); ++k) CHECK(std::abs(g1[i][k] - g2[k]) < 1e-12);
        }
        for (const auto& p : s.model.parameters()) p.zero_grad();
    }
    SUBCASE("shape mismatch") {
        Tape tape;
        CHECK_THROWS_AS(adv_loss(tape, s.model, s.x, Tensor::zeros({1, 1, 1}), s.batch.lengths, eval), ShapeError);
    }
}

TEST_CASE("total_loss") {
    Tape tape;
    const auto ce = Tensor::scalar(0.6931), adv = Tensor::scalar(0.1438);
    CHECK(total_loss(tape, ce, adv, 0.0).item() == 0.6931);
    CHECK(total_loss(tape, ce, Tensor::scalar(0.0), 1.0).item() == 0.6931);
    CHECK(total_loss(tape, ce, adv, 1.0).item() == doctest::Approx(0.8369).epsilon(1e-12));
}

TEST_CASE("the adversarial direction beats random directions of equal norm") {
    const auto s = make_setup(11, 1);
    Rng rng(5), dir_rng(6);
    int wins = 0;
    const int trials = 50;
    for (int t = 0; t < trials; ++t) {
        AdvConfig adv;
        adv.epsilon = 0.5;
        const auto pert = compute_r_adv(s.model, s.x, s.batch.lengths, adv, rng);
        const auto r = random_direction(s.x.shape(), s.batch.lengths, adv.epsilon, dir_rng);
        Tape tape;
        const ForwardOptions eval;
        const double worst = adv_loss(tape, s.model, s.x, pert.r_adv, s.batch.lengths, eval, &pert.clean_probs).item();
        const double random = adv_loss(tape, s.model, s.x, r, s.batch.lengths, eval, &pert.clean_probs).item();
        if (worst > random) ++wins;
    }
    CHECK(wins >= trials * 8 / 10);
}
