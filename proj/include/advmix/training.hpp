#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advmix/adversarial.hpp"
#include "advmix/evaluation.hpp"
#include "advmix/model.hpp"
#include "advmix/text.hpp"
#include "json.hpp"

namespace advmix {

struct TrainConfig {
    double learning_rate = 3e-4;
    std::size_t batch_size = 32;
    std::size_t epochs = 5;
    double warmup_fraction = 0.1;
    std::uint64_t seed = 0;
    double clip_norm = 1.0;  // global gradient-norm cap; 0 disables clipping
    AdvConfig adv;

    void validate() const;
};

// Serializes everything except `adv`, which lives in its own config section.
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct AdamState {
    static constexpr double beta1 = 0.9;
    static constexpr double beta2 = 0.999;
    static constexpr double eps = 1e-8;

    AdamState() = default;
    explicit AdamState(std::span<const Tensor> params);

    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::uint64_t t = 0;
};

/// Bias-corrected Adam update of each parameter from its accumulated grad
/// (parameters without a grad are treated as having a zero gradient).
void adam_step(std::span<Tensor> params, AdamState& state, double lr);

/// Linear warmup from 0 to base_lr over ceil(warmup_fraction * total_steps)
/// (capped at total_steps - 1)
/// steps, then linear decay reaching 0 at total_steps.
double lr_schedule(std::size_t step, std::size_t total_steps, double base_lr, double warmup_fraction);

// Rescales all grads so their joint L2 norm is at most max_norm. Returns the
// norm before clipping.
double clip_grad_norm(std::span<Tensor> params, double max_norm);

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    double mean_ce = 0.0;
    double mean_adv = 0.0;
    MetricsReport dev;
};

struct TrainReport {
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;
    std::string best_checkpoint;

    double best_dev_macro_f1() const;
};

nlohmann::json report_to_json(const TrainReport& report);

struct StepRecord {
    std::size_t step = 0;
    double lr = 0.0;
    double ce = 0.0;
    double adv = 0.0;
    double total = 0.0;
};

struct TrainCallbacks {
    std::function<void(const StepRecord&)> on_step;
    std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
    TrainReport report;
    ClassifierModel best_model;
};

/// Epoch loop: seeded reshuffle, mini-batches (last partial batch kept),
/// cross-entropy plus the adversarial term when enabled, clipping, Adam with
/// the warmup schedule, then dev evaluation. Keeps the model with the best dev
/// macro-F1 (earliest epoch on ties).
TrainResult train(ClassifierModel model, std::span<const EncodedExample> train_set,
                  std::span<const EncodedExample> dev_set, const TrainConfig& config,
                  const TrainCallbacks& callbacks = {});

MetricsReport evaluate_model(const ClassifierModel& model, std::span<const EncodedExample> examples);

struct FoldOutcome {
    std::size_t fold = 0;
    TrainReport report;
    ClassifierModel model;
    std::vector<std::size_t> heldout;  // indices into the training examples
    ProbMatrix heldout_probs;
    ProbMatrix test_probs;
};

/// k-fold cross-validation: fold i trains a fresh model (seed = config.seed + i)
/// on the other folds, selects on fold i, and predicts the shared test set.
/// Folds run on up to `workers` threads; results are ordered by fold.
std::vector<FoldOutcome> run_kfold(std::span<const EncodedExample> examples, std::size_t k,
                                   const ModelConfig& model_config, const TrainConfig& config,
                                   std::span<const EncodedExample> test_set, std::size_t workers = 1);

}  // namespace advmix
