#include "advmix/synthetic.hpp"

#include <set>

#include "advmix/errors.hpp"
#include "advmix/random.hpp"

namespace advmix {

namespace {

template <std::size_t N>
const char* pick(Rng& rng, const char* const (&items)[N]) {
    return items[rng.below(N)];
}

// Romanized-Hindi-like syllables.
std::string word_a(Rng& rng) {
    static const char* const consonants[] = {"k", "kh", "g", "ch", "j", "t", "th", "d", "n", "p", "ph",
                                             "b", "bh", "m", "y", "r", "l", "v", "sh", "s", "h"};
    static const char* const vowels[] = {"a", "aa", "i", "ee", "u", "oo", "e", "ai", "o"};
    std::string w;
    const std::size_t syllables = 2 + rng.below(2);
    for (std::size_t s = 0; s < syllables; ++s) w += std::string(pick(rng, consonants)) + pick(rng, vowels);
    return w;
}

// English-like closed syllables.
std::string word_b(Rng& rng) {
    static const char* const onsets[] = {"b", "c", "d", "f", "g", "h", "l", "m", "n", "p",
                                         "r", "s", "w", "st", "tr", "gr", "bl", "pl", "sp", "fr"};
    static const char* const vowels[] = {"e", "i", "o", "u", "ea", "ou", "oi"};
    static const char* const codas[] = {"t", "n", "d", "ck", "ll", "ng", "st", "rm", "mp", "ss", "x", "lf"};
    std::string w;
    const std::size_t syllables = 1 + rng.below(2);
    for (std::size_t s = 0; s < syllables; ++s) w += std::string(pick(rng, onsets)) + pick(rng, vowels) + pick(rng, codas);
    return w;
}

struct Lexicon {
    std::vector<std::string> words;
    // cues[c] are the class-c cue words; fillers are the rest
    std::vector<std::vector<std::string>> cues;
    std::vector<std::string> fillers;
};

Lexicon build_lexicon(Rng& rng, std::string (*make)(Rng&), std::size_t size, std::size_t cues_per_class,
                      std::set<std::string>& taken) {
    Lexicon lex;
    while (lex.words.size() < size) {
        auto w = make(rng);
        if (taken.insert(w).second) lex.words.push_back(std::move(w));
    }
    lex.cues.resize(kNumClasses);
    std::size_t i = 0;
    for (int c = 0; c < kNumClasses; ++c)
        for (std::size_t k = 0; k < cues_per_class; ++k) lex.cues[static_cast<std::size_t>(c)].push_back(lex.words[i++]);
    lex.fillers.assign(lex.words.begin() + static_cast<std::ptrdiff_t>(i), lex.words.end());
    return lex;
}

const std::string& choose(Rng& rng, const std::vector<std::string>& items) { return items[rng.below(items.size())]; }

RawExample make_sentence(Rng& rng, const SyntheticConfig& cfg, const Lexicon (&langs)[2], int label, std::size_t index,
                         const char* split) {
    const std::size_t n = cfg.min_words + rng.below(cfg.max_words - cfg.min_words + 1);

    // Language pattern: runs of 1-3 words alternating between the lexicons.
    std::vector<int> lang(n);
    int current = static_cast<int>(rng.below(2));
    for (std::size_t i = 0; i < n;) {
        const std::size_t run = 1 + rng.below(3);
        for (std::size_t k = 0; k < run && i < n; ++k) lang[i++] = current;
        current = 1 - current;
    }
    std::vector<std::string> words(n);
    for (std::size_t i = 0; i < n; ++i) words[i] = choose(rng, langs[lang[i]].fillers);

    const std::size_t gold_cues = 1 + rng.below(2);
    const double u = rng.uniform();
    const std::size_t rival_cues = u < 0.6 ? 0 : (u < 0.9 ? 1 : 2);
    const int rival = (label + 1 + static_cast<int>(rng.below(2))) % kNumClasses;

    std::vector<std::size_t> slots(n);
    for (std::size_t i = 0; i < n; ++i) slots[i] = i;
    for (std::size_t i = n; i > 1; --i) std::swap(slots[i - 1], slots[rng.below(i)]);
    std::size_t next = 0;
    auto place = [&](int cls, std::size_t count) {
        for (std::size_t k = 0; k < count && next < n; ++k) {
            const std::size_t pos = slots[next++];
            words[pos] = choose(rng, langs[lang[pos]].cues[static_cast<std::size_t>(cls)]);
        }
    };
    place(label, gold_cues);
    place(rival, rival_cues);

    if (rng.bernoulli(cfg.artifact_rate)) {
        static const char* const artifacts[] = {"@user", "#trending", "https://t.co/x1y2", "www.example.com", "@friend"};
        words.insert(words.begin() + static_cast<std::ptrdiff_t>(rng.below(n + 1)), pick(rng, artifacts));
    }

    RawExample ex;
    ex.id = std::string(split) + "-" + std::to_string(index);
    for (std::size_t i = 0; i < words.size(); ++i) ex.text += (i ? " " : "") + words[i];
    ex.label = label;
    return ex;
}

}  // namespace

SyntheticCorpus make_code_mixed_corpus(const SyntheticConfig& cfg) {
    if (cfg.min_words < 3 || cfg.max_words < cfg.min_words) throw ConfigError("synthetic: invalid sentence length range");
    if (cfg.cues_per_class * kNumClasses >= cfg.words_per_language) {
        throw ConfigError("synthetic: cue words must leave room for filler words");
    }
    if (!(cfg.train_label_noise >= 0.0 && cfg.train_label_noise <= 1.0)) throw ConfigError("synthetic: noise must be in [0, 1]");

    Rng lexicon_rng(derive_seed(cfg.seed, 0));
    std::set<std::string> taken;
    const Lexicon langs[2] = {build_lexicon(lexicon_rng, word_a, cfg.words_per_language, cfg.cues_per_class, taken),
                              build_lexicon(lexicon_rng, word_b, cfg.words_per_language, cfg.cues_per_class, taken)};

    SyntheticCorpus corpus;
    corpus.lexicon_a = langs[0].words;
    corpus.lexicon_b = langs[1].words;

    auto generate = [&](std::size_t count, std::uint64_t stream, const char* split, double noise) {
        Rng rng(derive_seed(cfg.seed, stream));
        std::vector<RawExample> out;
        for (std::size_t i = 0; i < count; ++i) {
            const int label = static_cast<int>(rng.below(kNumClasses));
            auto ex = make_sentence(rng, cfg, langs, label, i, split);
            if (noise > 0.0 && rng.bernoulli(noise)) ex.label = (label + 1 + static_cast<int>(rng.below(2))) % kNumClasses;
            out.push_back(std::move(ex));
        }
        return out;
    };
    corpus.train = generate(cfg.train_size, 1, "train", cfg.train_label_noise);
    corpus.dev = generate(cfg.dev_size, 2, "dev", 0.0);
    corpus.test = generate(cfg.test_size, 3, "test", 0.0);
    return corpus;
}

}  // namespace advmix
