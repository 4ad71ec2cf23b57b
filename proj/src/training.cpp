#include "advmix/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "advmix/errors.hpp"
#include "advmix/parallel.hpp"

namespace advmix {

namespace {

// Independent RNG streams derived from TrainConfig::seed.
constexpr std::uint64_t kShuffleStream = 1;
constexpr std::uint64_t kDropoutStream = 2;
constexpr std::uint64_t kAdversarialStream = 3;

}  // namespace

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate must be > 0");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ConfigError("train.warmup_fraction must be in [0, 1)");
    if (!(clip_norm >= 0.0)) throw ConfigError("train.clip_norm must be >= 0");
    adv.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},
                       {"epochs", c.epochs},               {"warmup_fraction", c.warmup_fraction},
                       {"seed", c.seed},                   {"clip_norm", c.clip_norm}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    if (!j.is_object()) throw ConfigError("train config must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (key == "batch_size" || key == "epochs" || key == "seed") {
            const bool non_negative =
                value.is_number_unsigned() || (value.is_number_integer() && value.get<std::int64_t>() >= 0);
            if (!non_negative) throw ConfigError("train." + key + " must be a non-negative integer");
            if (key == "batch_size") c.batch_size = value.get<std::size_t>();
            else if (key == "epochs") c.epochs = value.get<std::size_t>();
            else c.seed = value.get<std::uint64_t>();
            continue;
        }
        double* field = nullptr;
        if (key == "learning_rate") field = &c.learning_rate;
        else if (key == "warmup_fraction") field = &c.warmup_fraction;
        else if (key == "clip_norm") field = &c.clip_norm;
        else throw ConfigError("unknown train config key '" + key + "'");
        if (!value.is_number()) throw ConfigError("train." + key + " must be a number");
        *field = value.get<double>();
    }
}

AdamState::AdamState(std::span<const Tensor> params) {
    for (const auto& p : params) {
        m.emplace_back(p.numel(), 0.0);
        v.emplace_back(p.numel(), 0.0);
    }
}

void adam_step(std::span<Tensor> params, AdamState& state, double lr) {
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw ShapeError("adam_step: optimizer state tracks " + std::to_string(state.m.size()) + " tensors, got " +
                         std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (state.m[i].size() != params[i].numel() || state.v[i].size() != params[i].numel()) {
            throw ShapeError("adam_step: state shape mismatch for parameter " + std::to_string(i));
        }
    }
    ++state.t;
    const double t = static_cast<double>(state.t);
    const double correction1 = 1.0 - std::pow(AdamState::beta1, t);
    const double correction2 = 1.0 - std::pow(AdamState::beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        const auto g = p.has_grad() ? p.grad() : std::span<const double>{};
        auto values = p.mutable_values();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t k = 0; k < values.size(); ++k) {
            const double gk = g.empty() ? 0.0 : g[k];
            m[k] = AdamState::beta1 * m[k] + (1.0 - AdamState::beta1) * gk;
            v[k] = AdamState::beta2 * v[k] + (1.0 - AdamState::beta2) * gk * gk;
            const double m_hat = m[k] / correction1;
            const double v_hat = v[k] / correction2;
            values[k] -= lr * m_hat / (std::sqrt(v_hat) + AdamState::eps);
        }
    }
}

double lr_schedule(std::size_t step, std::size_t total_steps, double base_lr, double warmup_fraction) {
    if (total_steps == 0 || step >= total_steps) throw ContractError("lr_schedule: step outside [0, total_steps)");
    // At least one step sits at the peak, even when the warmup rounds up to every step.
    const auto warmup = std::min(static_cast<std::size_t>(std::ceil(warmup_fraction * static_cast<double>(total_steps))),
                                 total_steps - 1);
    if (step < warmup) return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
    return base_lr * static_cast<double>(total_steps - step) / static_cast<double>(total_steps - warmup);
}

double clip_grad_norm(std::span<Tensor> params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params) {
        if (!p.has_grad()) continue;
        for (double g : p.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double factor = max_norm / norm;
        for (auto& p : params) {
            if (!p.has_grad()) continue;
            for (auto& g : p.mutable_grad()) g *= factor;
        }
    }
    return norm;
}

double TrainReport::best_dev_macro_f1() const {
    if (best_epoch == 0 || best_epoch > epochs.size()) return 0.0;
    return epochs[best_epoch - 1].dev.macro_f1;
}

nlohmann::json report_to_json(const TrainReport& report) {
    nlohmann::json epochs = nlohmann::json::array();
    for (const auto& e : report.epochs) {
        epochs.push_back({{"epoch", e.epoch}, {"mean_ce", e.mean_ce}, {"mean_adv", e.mean_adv}, {"dev", metrics_to_json(e.dev)}});
    }
    return nlohmann::json{{"epochs", epochs},
                          {"best_epoch", report.best_epoch},
                          {"best_dev_macro_f1", report.best_dev_macro_f1()},
                          {"best_checkpoint", report.best_checkpoint}};
}

MetricsReport evaluate_model(const ClassifierModel& model, std::span<const EncodedExample> examples) {
    std::vector<int> golds;
    golds.reserve(examples.size());
    for (const auto& ex : examples) {
        if (!ex.label) throw DataError("evaluation set contains an unlabelled example");
        golds.push_back(*ex.label);
    }
    const auto preds = argmax_labels(predict_dataset(model, examples));
    return compute_metrics(preds, golds);
}

TrainResult train(ClassifierModel model, std::span<const EncodedExample> train_set,
                  std::span<const EncodedExample> dev_set, const TrainConfig& config, const TrainCallbacks& callbacks) {
    config.validate();
    if (train_set.empty()) throw DataError("train: empty training set");
    if (dev_set.empty()) throw DataError("train: empty dev set");
    for (const auto& ex : train_set) {
        if (!ex.label) throw DataError("train: training set contains an unlabelled example");
    }

    Rng shuffle_rng(derive_seed(config.seed, kShuffleStream));
    Rng dropout_rng(derive_seed(config.seed, kDropoutStream));
    Rng adv_rng(derive_seed(config.seed, kAdversarialStream));

    auto params = model.parameters();
    AdamState adam(params);
    const std::size_t n = train_set.size();
    const std::size_t batches_per_epoch = (n + config.batch_size - 1) / config.batch_size;
    const std::size_t total_steps = batches_per_epoch * config.epochs;
    const auto& adv = config.adv;

    TrainResult result{{}, model};
    double best_macro = -1.0;
    std::size_t step = 0;
    std::vector<std::size_t> order(n);

    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);

        double ce_sum = 0.0, adv_sum = 0.0;
        for (std::size_t start = 0; start < n; start += config.batch_size, ++step) {
            const std::span<const std::size_t> idx(order.data() + start, std::min(config.batch_size, n - start));
            const Batch batch = make_batch(train_set, idx);
            const double lr = lr_schedule(step, total_steps, config.learning_rate, config.warmup_fraction);

            Tape tape;
            ForwardOptions train_mode;
            train_mode.train = true;
            train_mode.dropout_rng = &dropout_rng;
            const Tensor x = model.embed(tape, batch);
            const Tensor ce = cross_entropy(tape, model.forward_from_embeddings(tape, x, batch.lengths, train_mode), batch.labels);
            Tensor loss = ce;
            double adv_value = 0.0;
            if (adv.enabled) {
                const Perturbation pert = compute_r_adv(model, x, batch.lengths, adv, adv_rng);
                const Tensor adv_term = adv_loss(tape, model, x, pert.r_adv, batch.lengths, train_mode, &pert.clean_probs);
                adv_value = adv_term.item();
                loss = total_loss(tape, ce, adv_term, adv.alpha);
            }
            StepRecord record{step, lr, ce.item(), adv_value, loss.item()};
            if (!std::isfinite(record.ce) || !std::isfinite(record.adv) || !std::isfinite(record.total)) {
                std::ostringstream msg;
                msg << "non-finite loss at step " << step << " (epoch " << epoch << ", lr " << lr << "): ce=" << record.ce
                    << " adv=" << record.adv << " total=" << record.total;
                throw NumericError(msg.str());
            }
            tape.backward(loss);
            if (config.clip_norm > 0.0) clip_grad_norm(params, config.clip_norm);
            adam_step(params, adam, lr);
            model.zero_grad();

            ce_sum += record.ce * static_cast<double>(idx.size());
            adv_sum += record.adv * static_cast<double>(idx.size());
            if (callbacks.on_step) callbacks.on_step(record);
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.mean_ce = ce_sum / static_cast<double>(n);
        rec.mean_adv = adv_sum / static_cast<double>(n);
        rec.dev = evaluate_model(model, dev_set);
        if (rec.dev.macro_f1 > best_macro) {
            best_macro = rec.dev.macro_f1;
            result.report.best_epoch = epoch;
            result.best_model = model;
        }
        result.report.epochs.push_back(rec);
        if (callbacks.on_epoch) callbacks.on_epoch(rec);
    }
    return result;
}

std::vector<FoldOutcome> run_kfold(std::span<const EncodedExample> examples, std::size_t k,
                                   const ModelConfig& model_config, const TrainConfig& config,
                                   std::span<const EncodedExample> test_set, std::size_t workers) {
    if (k < 2) throw ContractError("run_kfold: k must be at least 2");
    const auto splits = kfold_split(examples.size(), k, config.seed);
    std::vector<std::optional<FoldOutcome>> slots(k);
    parallel_for(k, workers, [&](std::size_t fold) {
        const auto& split = splits[fold];
        const auto train_part = gather<EncodedExample>(examples, split.train);
        const auto heldout_part = gather<EncodedExample>(examples, split.heldout);
        TrainConfig fold_config = config;
        fold_config.seed = config.seed + fold;
        auto model = ClassifierModel::init(model_config, fold_config.seed);
        auto result = train(std::move(model), train_part, heldout_part, fold_config);
        FoldOutcome out{fold, std::move(result.report), std::move(result.best_model), split.heldout, {}, {}};
        out.heldout_probs = predict_dataset(out.model, heldout_part);
        out.test_probs = test_set.empty() ? ProbMatrix{} : predict_dataset(out.model, test_set);
        slots[fold] = std::move(out);
    });
    std::vector<FoldOutcome> outcomes;
    for (auto& s : slots) outcomes.push_back(std::move(*s));
    return outcomes;
}

}  // namespace advmix
