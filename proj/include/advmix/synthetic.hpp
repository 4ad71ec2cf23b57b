#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "advmix/text.hpp"

namespace advmix {

/// Generator for a small labelled code-mixed corpus.
///
/// Two disjoint pseudo-word lexicons stand in for the two languages. Each
/// sentence alternates between them in short runs. A sentence of class y
/// carries one or two cue words of class y (drawn from either language) and,
/// sometimes, cue words of a competing class, so the label is recoverable
/// from cue counts but not always unambiguously. Everything else is filler.
/// Label noise is applied to the training split only.
struct SyntheticConfig {
    std::size_t words_per_language = 250;
    std::size_t cues_per_class = 20;  // per language
    std::size_t train_size = 1500;
    std::size_t dev_size = 500;
    std::size_t test_size = 500;
    double train_label_noise = 0.10;
    std::size_t min_words = 6;
    std::size_t max_words = 14;
    double artifact_rate = 0.1;  // chance of a url / hashtag / @mention token
    std::uint64_t seed = 2020;
};

struct SyntheticCorpus {
    std::vector<RawExample> train;
    std::vector<RawExample> dev;
    std::vector<RawExample> test;
    std::vector<std::string> lexicon_a;
    std::vector<std::string> lexicon_b;
};

SyntheticCorpus make_code_mixed_corpus(const SyntheticConfig& config);

}  // namespace advmix
