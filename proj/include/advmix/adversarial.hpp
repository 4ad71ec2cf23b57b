#pragma once

#include <span>

#include "advmix/autodiff.hpp"
#include "advmix/model.hpp"
#include "advmix/random.hpp"
#include "json.hpp"

namespace advmix {

struct AdvConfig {
    double epsilon = 2.0;  // L2 norm of each example's perturbation
    double alpha = 1.0;    // weight of the adversarial term
    double xi = 0.1;       // norm of the random probe direction
    bool enabled = true;

    void validate() const;
};

void to_json(nlohmann::json& j, const AdvConfig& c);
void from_json(const nlohmann::json& j, AdvConfig& c);

// Below this per-example gradient norm the divergence is treated as flat and
// the example gets a zero perturbation.
inline constexpr double kFlatGradientNorm = 1e-12;

/// Standard-normal tensor of `shape` ([B, W, H]) rescaled so its L2 norm over
/// all non-pad rows equals `xi`; rows at positions >= lengths[b] are zero.
Tensor random_direction(const Shape& shape, std::span<const std::size_t> lengths, double xi, Rng& rng);

struct Perturbation {
    Tensor r_adv;        // [B, W, H], constant
    Tensor clean_probs;  // [B, C] eval-mode probabilities at x, constant
    Tensor gradient;     // [B, W, H] the raw g before normalization
};

// epsilon * g / ||g||_2 per example, the norm taken over the example's first
// lengths[b] rows; examples with ||g||_2 < kFlatGradientNorm get zeros, as do
// pad rows.
Tensor normalize_per_example(const Tensor& g, std::span<const std::size_t> lengths, double epsilon);

/// One power-iteration step towards the direction that most increases
/// KL(p(.|x) || p(.|x + r)) under a frozen copy of the parameters:
///   g = grad_{x+d} KL(p(.|x) || p(.|x+d)),  r_adv = epsilon * g / ||g||_2
/// with ||g||_2 taken per example over its non-pad rows. Runs on a private
/// tape; model parameters and their gradients are left untouched.
Perturbation compute_r_adv(const ClassifierModel& model, const Tensor& x, std::span<const std::size_t> lengths,
                           const AdvConfig& adv, Rng& rng);

/// KL(p(.|x; frozen) || p(.|x + r_adv; params)). Gradient reaches the
/// parameters only through the perturbed branch. `clean_probs`, when given,
/// is used as the frozen clean distribution instead of recomputing it.
Tensor adv_loss(Tape& tape, const ClassifierModel& model, const Tensor& x, const Tensor& r_adv,
                std::span<const std::size_t> lengths, const ForwardOptions& perturbed_options,
                const Tensor* clean_probs = nullptr);

// ce + alpha * adv
Tensor total_loss(Tape& tape, const Tensor& ce, const Tensor& adv, double alpha);

}  // namespace advmix
