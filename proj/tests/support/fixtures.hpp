#pragma once

// Small models and batches shared by the unit and acceptance tests.

#include <vector>

#include "advmix/model.hpp"
#include "advmix/random.hpp"
#include "advmix/text.hpp"

namespace advmix::testing {

// The gradient-check configuration: V=50, H=8, N=2, A=2, F=16, L=12.
inline ModelConfig tiny_config() {
    ModelConfig c;
    c.vocab_size = 50;
    c.hidden = 8;
    c.layers = 2;
    c.heads = 2;
    c.ffn_dim = 16;
    c.max_len = 12;
    return c;
}

// Compact configuration used for the runtime-bounded experiments.
inline ModelConfig desk_config(std::size_t vocab_size) {
    ModelConfig c;
    c.vocab_size = vocab_size;
    c.hidden = 32;
    c.layers = 2;
    c.heads = 2;
    c.ffn_dim = 64;
    c.max_len = 32;
    return c;
}

// Random labelled examples with lengths in [3, max_len] and ids in [4, V).
inline std::vector<EncodedExample> random_examples(Rng& rng, std::size_t count, const ModelConfig& config) {
    std::vector<EncodedExample> out;
    for (std::size_t i = 0; i < count; ++i) {
        EncodedExample ex;
        ex.length = 3 + rng.below(config.max_len - 2);
        ex.ids.assign(config.max_len, kPadId);
        ex.ids[0] = kClsId;
        for (std::size_t t = 1; t + 1 < ex.length; ++t) ex.ids[t] = 4 + static_cast<int>(rng.below(config.vocab_size - 4));
        ex.ids[ex.length - 1] = kSepId;
        ex.label = static_cast<int>(rng.below(3));
        out.push_back(std::move(ex));
    }
    return out;
}

// Model whose every parameter (norm gains and biases included) is random, so
// gradient checks exercise non-trivial values everywhere.
inline ClassifierModel randomized_model(const ModelConfig& config, std::uint64_t seed, double scale = 0.5) {
    auto model = ClassifierModel::init(config, seed);
    Rng rng(seed ^ 0x5eedULL);
    for (auto& [name, t] : model.named_parameters()) {
        for (auto& v : t.mutable_values()) v = (name.ends_with(".gain") ? 1.0 : 0.0) + scale * rng.normal();
    }
    return model;
}

}  // namespace advmix::testing
