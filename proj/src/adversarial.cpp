#include "advmix/adversarial.hpp"

#include <cmath>

#include "advmix/errors.hpp"

namespace advmix {

void AdvConfig::validate() const {
    if (enabled && !(epsilon > 0.0)) throw ConfigError("adv.epsilon must be > 0 when adversarial training is enabled");
    if (!(alpha >= 0.0)) throw ConfigError("adv.alpha must be >= 0");
    if (!(xi > 0.0)) throw ConfigError("adv.xi must be > 0");
}

void to_json(nlohmann::json& j, const AdvConfig& c) {
    j = nlohmann::json{{"enabled", c.enabled}, {"epsilon", c.epsilon}, {"alpha", c.alpha}, {"xi", c.xi}};
}

void from_json(const nlohmann::json& j, AdvConfig& c) {
    if (!j.is_object()) throw ConfigError("adv config must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (key == "enabled") {
            if (!value.is_boolean()) throw ConfigError("adv.enabled must be a boolean");
            c.enabled = value.get<bool>();
            continue;
        }
        double* field = nullptr;
        if (key == "epsilon") field = &c.epsilon;
        else if (key == "alpha") field = &c.alpha;
        else if (key == "xi") field = &c.xi;
        else throw ConfigError("unknown adv config key '" + key + "'");
        if (!value.is_number()) throw ConfigError("adv." + key + " must be a number");
        *field = value.get<double>();
    }
}

namespace {

void check_embedding_shape(const Shape& shape, std::span<const std::size_t> lengths) {
    if (shape.size() != 3) throw ShapeError("expected [B x W x H] embeddings, got " + shape_string(shape));
    if (lengths.size() != shape[0]) throw ShapeError("lengths do not match batch size");
    for (auto len : lengths) {
        if (len > shape[1]) throw ContractError("sequence length exceeds batch width");
    }
}

}  // namespace

Tensor random_direction(const Shape& shape, std::span<const std::size_t> lengths, double xi, Rng& rng) {
    if (!(xi > 0.0)) throw ContractError("random_direction: xi must be > 0");
    check_embedding_shape(shape, lengths);
    const std::size_t width = shape[1], h = shape[2];
    std::vector<double> d(shape_numel(shape), 0.0);
    double sq = 0.0;
    while (sq == 0.0) {
        for (std::size_t b = 0; b < lengths.size(); ++b) {
            for (std::size_t t = 0; t < lengths[b]; ++t) {
                double* row = d.data() + (b * width + t) * h;
                for (std::size_t c = 0; c < h; ++c) {
                    row[c] = rng.normal();
                    sq += row[c] * row[c];
                }
            }
        }
    }
    const double factor = xi / std::sqrt(sq);
    for (auto& v : d) v *= factor;
    return Tensor(shape, std::move(d));
}

Perturbation compute_r_adv(const ClassifierModel& model, const Tensor& x, std::span<const std::size_t> lengths,
                           const AdvConfig& adv, Rng& rng) {
    if (!adv.enabled) throw ContractError("compute_r_adv called with adversarial training disabled");
    check_embedding_shape(x.shape(), lengths);
    ForwardOptions frozen;
    frozen.frozen_parameters = true;

    Tape tape;
    const Tensor x_const = stop_gradient(x);
    const Tensor clean_probs = softmax(tape, model.forward_from_embeddings(tape, x_const, lengths, frozen));

    const Tensor d = random_direction(x.shape(), lengths, adv.xi, rng);
    std::vector<double> probe(x.numel());
    for (std::size_t i = 0; i < probe.size(); ++i) probe[i] = x_const[i] + d[i];
    Tensor x_probe(x.shape(), std::move(probe), true);

    const Tensor probe_logits = model.forward_from_embeddings(tape, x_probe, lengths, frozen);
    const Tensor divergence = kl_divergence(tape, clean_probs, probe_logits);
    tape.backward(divergence);

    Tensor g = x_probe.has_grad() ? Tensor(x.shape(), std::vector<double>(x_probe.grad().begin(), x_probe.grad().end()))
                                  : Tensor::zeros(x.shape());
    Tensor r = normalize_per_example(g, lengths, adv.epsilon);
    return Perturbation{std::move(r), clean_probs, std::move(g)};
}

Tensor normalize_per_example(const Tensor& g, std::span<const std::size_t> lengths, double epsilon) {
    check_embedding_shape(g.shape(), lengths);
    const std::size_t width = g.dim(1), h = g.dim(2);
    std::vector<double> r(g.numel(), 0.0);
    for (std::size_t b = 0; b < lengths.size(); ++b) {
        const std::size_t begin = b * width * h, end = begin + lengths[b] * h;
        double sq = 0.0;
        for (std::size_t i = begin; i < end; ++i) sq += g[i] * g[i];
        const double norm = std::sqrt(sq);
        if (norm < kFlatGradientNorm) continue;
        const double factor = epsilon / norm;
        for (std::size_t i = begin; i < end; ++i) r[i] = factor * g[i];
    }
    return Tensor(g.shape(), std::move(r));
}

Tensor adv_loss(Tape& tape, const ClassifierModel& model, const Tensor& x, const Tensor& r_adv,
                std::span<const std::size_t> lengths, const ForwardOptions& perturbed_options,
                const Tensor* clean_probs) {
    if (r_adv.shape() != x.shape()) {
        throw ShapeError("adv_loss: r_adv " + shape_string(r_adv.shape()) + " does not match x " + shape_string(x.shape()));
    }
    Tensor target;
    if (clean_probs != nullptr) {
        target = stop_gradient(*clean_probs);
    } else {
        ForwardOptions frozen;
        frozen.frozen_parameters = true;
        Tape scratch;
        target = softmax(scratch, model.forward_from_embeddings(scratch, stop_gradient(x), lengths, frozen));
    }
    const Tensor perturbed = add(tape, x, stop_gradient(r_adv));
    return kl_divergence(tape, target, model.forward_from_embeddings(tape, perturbed, lengths, perturbed_options));
}

Tensor total_loss(Tape& tape, const Tensor& ce, const Tensor& adv, double alpha) {
    return add(tape, ce, scale(tape, adv, alpha));
}

}  // namespace advmix
