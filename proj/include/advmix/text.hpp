#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

namespace advmix {

enum class Sentiment : int { negative = 0, neutral = 1, positive = 2 };

inline constexpr int kNumClasses = 3;

std::string_view label_name(int label);
// Case-sensitive: only "negative", "neutral", "positive" are accepted.
std::optional<int> parse_label(std::string_view text);

struct RawExample {
    std::string id;
    std::string text;
    std::optional<int> label;
};

struct CleanConfig {
    bool remove_urls = true;
    bool remove_hashtags = true;
    bool remove_usernames = true;
    bool lowercase = false;
};

void to_json(nlohmann::json& j, const CleanConfig& c);
void from_json(const nlohmann::json& j, CleanConfig& c);

/// Drops whitespace-delimited tokens that start with http://, https:// or
/// www. (urls), '#' (hashtags) or '@' (usernames) according to `config`,
/// optionally lowercases ASCII letters, and collapses whitespace runs.
/// Prefix matching is case-insensitive so that clean() is idempotent.
std::string clean(std::string_view text, const CleanConfig& config);

// Splits on ASCII whitespace, dropping empty pieces.
std::vector<std::string> split_words(std::string_view text);

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kClsId = 2;
inline constexpr int kSepId = 3;
inline constexpr std::string_view kEndOfWord = "</w>";

/// BPE vocabulary. Ids 0..3 are [PAD], [UNK], [CLS], [SEP]; the remaining ids
/// are the base symbols (characters, with "</w>" glued onto word-final ones)
/// followed by merge outputs in merge order.
class Vocabulary {
public:
    Vocabulary();
    Vocabulary(std::vector<std::pair<std::string, std::string>> merges, std::vector<std::string> tokens);

    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }
    const std::vector<std::string>& tokens() const { return tokens_; }

    std::optional<int> id_of(const std::string& token) const;
    const std::string& token(int id) const;

    // Merge rank of a symbol pair, or nullopt when the pair is never merged.
    std::optional<std::size_t> merge_rank(const std::string& left, const std::string& right) const;

    // Subword segmentation of one cleaned word.
    std::vector<std::string> segment(std::string_view word) const;

    nlohmann::json to_json() const;
    static Vocabulary from_json(const nlohmann::json& j);
    void save(const std::filesystem::path& path) const;
    static Vocabulary load(const std::filesystem::path& path);

private:
    void index();

    std::vector<std::pair<std::string, std::string>> merges_;
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> ids_;
    std::map<std::pair<std::string, std::string>, std::size_t> ranks_;
};

// Splits a word into UTF-8 code points and glues "</w>" onto the last one.
std::vector<std::string> initial_symbols(std::string_view word);

// Number of distinct initial symbols in a corpus; the smallest legal vocabulary
// is this plus the four reserved tokens.
std::size_t base_symbol_count(std::span<const std::string> corpus);

/// Trains BPE merges on `corpus` (already cleaned). Merges the most frequent
/// adjacent pair until `target_vocab_size` is reached or no pair occurs at
/// least twice; ties go to the lexicographically smallest pair.
Vocabulary train_bpe(std::span<const std::string> corpus, std::size_t target_vocab_size);

struct EncodedExample {
    std::vector<int> ids;  // always max_len long
    std::size_t length = 0;
    std::optional<int> label;
};

inline constexpr std::size_t kDefaultMaxLen = 64;

/// Frames the subwords of `text` as [CLS] w1 .. wn [SEP] followed by [PAD],
/// truncating to max_len - 2 subwords. `text` is expected to be cleaned.
EncodedExample encode(std::string_view text, const Vocabulary& vocab, std::size_t max_len = kDefaultMaxLen);

// Inverse of encode up to word-boundary markers; [UNK] renders as "[UNK]".
std::string decode(const EncodedExample& example, const Vocabulary& vocab);

enum class DatasetFormat { tsv, jsonl };

DatasetFormat format_for_path(const std::filesystem::path& path);
std::vector<RawExample> load_dataset(const std::filesystem::path& path, DatasetFormat format);
std::vector<RawExample> load_dataset(const std::filesystem::path& path);
void save_dataset_tsv(const std::filesystem::path& path, std::span<const RawExample> examples);

struct FoldSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> heldout;
};

/// Seeded shuffle followed by k contiguous folds whose sizes differ by at most
/// one. Pair i holds fold i out. Indices refer to the input order.
std::vector<FoldSplit> kfold_split(std::size_t num_examples, std::size_t k, std::uint64_t seed);

template <typename T>
std::vector<T> gather(std::span<const T> items, std::span<const std::size_t> indices) {
    std::vector<T> out;
    out.reserve(indices.size());
    for (auto i : indices) out.push_back(items[i]);
    return out;
}

// Cleans and encodes a whole dataset.
std::vector<EncodedExample> encode_all(std::span<const RawExample> examples, const Vocabulary& vocab,
                                       const CleanConfig& clean_config, std::size_t max_len);

}  // namespace advmix
