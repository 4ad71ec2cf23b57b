#include "advmix/text.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

#include "advmix/errors.hpp"
#include "advmix/random.hpp"

namespace advmix {

namespace {

constexpr std::string_view kLabelNames[] = {"negative", "neutral", "positive"};

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

char ascii_lower(char c) { return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c; }

bool starts_with_ci(std::string_view word, std::string_view prefix) {
    if (word.size() < prefix.size()) return false;
    for (std::size_t i = 0; i < prefix.size(); ++i) {
        if (ascii_lower(word[i]) != prefix[i]) return false;
    }
    return true;
}

std::size_t utf8_length(unsigned char lead) {
    if (lead < 0x80) return 1;
    if ((lead >> 5) == 0x6) return 2;
    if ((lead >> 4) == 0xE) return 3;
    if ((lead >> 3) == 0x1E) return 4;
    return 1;  // stray continuation byte: keep it as its own symbol
}

}  // namespace

std::string_view label_name(int label) {
    if (label < 0 || label >= kNumClasses) throw IndexError("label " + std::to_string(label) + " outside [0, 3)");
    return kLabelNames[label];
}

std::optional<int> parse_label(std::string_view text) {
    for (int i = 0; i < kNumClasses; ++i) {
        if (text == kLabelNames[i]) return i;
    }
    return std::nullopt;
}

void to_json(nlohmann::json& j, const CleanConfig& c) {
    j = nlohmann::json{{"remove_urls", c.remove_urls},
                       {"remove_hashtags", c.remove_hashtags},
                       {"remove_usernames", c.remove_usernames},
                       {"lowercase", c.lowercase}};
}

void from_json(const nlohmann::json& j, CleanConfig& c) {
    if (!j.is_object()) throw ConfigError("clean config must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        bool* field = nullptr;
        if (key == "remove_urls") field = &c.remove_urls;
        else if (key == "remove_hashtags") field = &c.remove_hashtags;
        else if (key == "remove_usernames") field = &c.remove_usernames;
        else if (key == "lowercase") field = &c.lowercase;
        else throw ConfigError("unknown clean config key '" + key + "'");
        if (!value.is_boolean()) throw ConfigError("clean config key '" + key + "' must be a boolean");
        *field = value.get<bool>();
    }
}

std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && is_space(text[i])) ++i;
        const std::size_t start = i;
        while (i < text.size() && !is_space(text[i])) ++i;
        if (i > start) words.emplace_back(text.substr(start, i - start));
    }
    return words;
}

std::string clean(std::string_view text, const CleanConfig& config) {
    std::string out;
    out.reserve(text.size());
    for (auto& word : split_words(text)) {
        if (config.remove_urls &&
            (starts_with_ci(word, "http://") || starts_with_ci(word, "https://") || starts_with_ci(word, "www."))) {
            continue;
        }
        if (config.remove_hashtags && word.front() == '#') continue;
        if (config.remove_usernames && word.front() == '@') continue;
        if (config.lowercase) std::transform(word.begin(), word.end(), word.begin(), ascii_lower);
        if (!out.empty()) out.push_back(' ');
        out += word;
    }
    return out;
}

// ---- Vocabulary -----------------------------------------------------------

Vocabulary::Vocabulary() : tokens_{"[PAD]", "[UNK]", "[CLS]", "[SEP]"} { index(); }

Vocabulary::Vocabulary(std::vector<std::pair<std::string, std::string>> merges, std::vector<std::string> tokens)
    : merges_(std::move(merges)), tokens_(std::move(tokens)) {
    index();
}

void Vocabulary::index() {
    static const char* reserved[] = {"[PAD]", "[UNK]", "[CLS]", "[SEP]"};
    if (tokens_.size() < 4) throw DataError("vocabulary must start with the four reserved tokens");
    for (int i = 0; i < 4; ++i) {
        if (tokens_[i] != reserved[i]) throw DataError("vocabulary id " + std::to_string(i) + " must be " + reserved[i]);
    }
    ids_.clear();
    ranks_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (!ids_.emplace(tokens_[i], static_cast<int>(i)).second) {
            throw DataError("duplicate vocabulary token '" + tokens_[i] + "'");
        }
    }
    for (std::size_t r = 0; r < merges_.size(); ++r) {
        const auto& [left, right] = merges_[r];
        if (!ids_.count(left + right)) throw DataError("merge output '" + left + right + "' missing from tokens");
        ranks_.emplace(merges_[r], r);
    }
}

std::optional<int> Vocabulary::id_of(const std::string& token) const {
    auto it = ids_.find(token);
    if (it == ids_.end()) return std::nullopt;
    return it->second;
}

const std::string& Vocabulary::token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        throw IndexError("token id " + std::to_string(id) + " outside vocabulary");
    }
    return tokens_[static_cast<std::size_t>(id)];
}

std::optional<std::size_t> Vocabulary::merge_rank(const std::string& left, const std::string& right) const {
    auto it = ranks_.find({left, right});
    if (it == ranks_.end()) return std::nullopt;
    return it->second;
}

std::vector<std::string> Vocabulary::segment(std::string_view word) const {
    auto symbols = initial_symbols(word);
    while (symbols.size() > 1) {
        std::optional<std::size_t> best;
        for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
            auto rank = merge_rank(symbols[i], symbols[i + 1]);
            if (rank && (!best || *rank < *best)) best = rank;
        }
        if (!best) break;
        const auto& [left, right] = merges_[*best];
        std::vector<std::string> merged;
        merged.reserve(symbols.size());
        for (std::size_t i = 0; i < symbols.size();) {
            if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
                merged.push_back(left + right);
                i += 2;
            } else {
                merged.push_back(std::move(symbols[i]));
                ++i;
            }
        }
        symbols = std::move(merged);
    }
    return symbols;
}

nlohmann::json Vocabulary::to_json() const {
    nlohmann::json merges = nlohmann::json::array();
    for (const auto& [l, r] : merges_) merges.push_back({l, r});
    return nlohmann::json{{"merges", merges}, {"tokens", tokens_}};
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
    try {
        std::vector<std::pair<std::string, std::string>> merges;
        for (const auto& m : j.at("merges")) {
            if (!m.is_array() || m.size() != 2) throw DataError("each merge must be a [left, right] pair");
            merges.emplace_back(m[0].get<std::string>(), m[1].get<std::string>());
        }
        return Vocabulary(std::move(merges), j.at("tokens").get<std::vector<std::string>>());
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed vocabulary: ") + e.what());
    }
}

void Vocabulary::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write vocabulary to " + path.string());
    out << to_json().dump(1) << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read vocabulary " + path.string());
    try {
        return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError("malformed vocabulary " + path.string() + ": " + e.what());
    }
}

std::vector<std::string> initial_symbols(std::string_view word) {
    std::vector<std::string> symbols;
    for (std::size_t i = 0; i < word.size();) {
        const std::size_t len = std::min(utf8_length(static_cast<unsigned char>(word[i])), word.size() - i);
        symbols.emplace_back(word.substr(i, len));
        i += len;
    }
    if (!symbols.empty()) symbols.back() += kEndOfWord;
    return symbols;
}

std::size_t base_symbol_count(std::span<const std::string> corpus) {
    std::set<std::string> symbols;
    for (const auto& line : corpus) {
        for (const auto& w : split_words(line)) {
            for (auto& s : initial_symbols(w)) symbols.insert(std::move(s));
        }
    }
    return symbols.size();
}

Vocabulary train_bpe(std::span<const std::string> corpus, std::size_t target_vocab_size) {
    std::map<std::string, long> word_counts;
    for (const auto& line : corpus) {
        for (auto& w : split_words(line)) ++word_counts[w];
    }
    if (word_counts.empty()) throw DataError("train_bpe: corpus contains no words");

    // Intern symbols so pair bookkeeping works on integers.
    std::vector<std::string> names;
    std::unordered_map<std::string, int> interned;
    auto intern = [&](const std::string& s) {
        auto [it, fresh] = interned.emplace(s, static_cast<int>(names.size()));
        if (fresh) names.push_back(s);
        return it->second;
    };

    std::set<std::string> base;
    struct Word {
        std::vector<int> symbols;
        long count;
    };
    std::vector<Word> words;
    for (const auto& [w, count] : word_counts) {
        Word word{{}, count};
        for (const auto& s : initial_symbols(w)) {
            base.insert(s);
            word.symbols.push_back(intern(s));
        }
        words.push_back(std::move(word));
    }
    if (target_vocab_size < base.size() + 4) {
        throw ConfigError("vocabulary size " + std::to_string(target_vocab_size) + " is below the " +
                          std::to_string(base.size() + 4) + " base symbols plus reserved tokens");
    }

    std::vector<std::string> tokens{"[PAD]", "[UNK]", "[CLS]", "[SEP]"};
    tokens.insert(tokens.end(), base.begin(), base.end());
    std::set<std::string> known(tokens.begin(), tokens.end());
    std::vector<std::pair<std::string, std::string>> merges;

    auto key = [](int a, int b) { return (static_cast<std::uint64_t>(a) << 32) | static_cast<std::uint32_t>(b); };

    while (tokens.size() < target_vocab_size) {
        std::unordered_map<std::uint64_t, long> pair_counts;
        for (const auto& w : words) {
            for (std::size_t i = 0; i + 1 < w.symbols.size(); ++i) pair_counts[key(w.symbols[i], w.symbols[i + 1])] += w.count;
        }
        long best_count = 0;
        std::pair<int, int> best{-1, -1};
        for (const auto& [k, count] : pair_counts) {
            const int a = static_cast<int>(k >> 32), b = static_cast<int>(k & 0xffffffffu);
            if (count > best_count ||
                (count == best_count && std::tie(names[a], names[b]) < std::tie(names[best.first], names[best.second]))) {
                best_count = count;
                best = {a, b};
            }
        }
        if (best_count < 2) break;

        const std::string merged_name = names[best.first] + names[best.second];
        const int merged = intern(merged_name);
        merges.emplace_back(names[best.first], names[best.second]);
        if (known.insert(merged_name).second) tokens.push_back(merged_name);

        for (auto& w : words) {
            auto& s = w.symbols;
            std::size_t out = 0;
            for (std::size_t i = 0; i < s.size();) {
                if (i + 1 < s.size() && s[i] == best.first && s[i + 1] == best.second) {
                    s[out++] = merged;
                    i += 2;
                } else {
                    s[out++] = s[i++];
                }
            }
            s.resize(out);
        }
    }
    return Vocabulary(std::move(merges), std::move(tokens));
}

// ---- encoding -------------------------------------------------------------

EncodedExample encode(std::string_view text, const Vocabulary& vocab, std::size_t max_len) {
    if (max_len < 4) throw ContractError("encode: max_len must be at least 4");
    EncodedExample ex;
    ex.ids.assign(max_len, kPadId);
    ex.ids[0] = kClsId;
    std::size_t pos = 1;
    const std::size_t limit = max_len - 1;
    for (const auto& word : split_words(text)) {
        if (pos >= limit) break;
        for (const auto& piece : vocab.segment(word)) {
            if (pos >= limit) break;
            ex.ids[pos++] = vocab.id_of(piece).value_or(kUnkId);
        }
    }
    ex.ids[pos++] = kSepId;
    ex.length = pos;
    return ex;
}

std::string decode(const EncodedExample& example, const Vocabulary& vocab) {
    std::string text;
    for (std::size_t i = 1; i + 1 < example.length; ++i) {
        const int id = example.ids[i];
        if (id == kUnkId) {
            text += "[UNK]";
            continue;
        }
        std::string piece = vocab.token(id);
        if (piece.size() >= kEndOfWord.size() && piece.ends_with(kEndOfWord)) {
            piece.resize(piece.size() - kEndOfWord.size());
            piece.push_back(' ');
        }
        text += piece;
    }
    while (!text.empty() && text.back() == ' ') text.pop_back();
    return text;
}

std::vector<EncodedExample> encode_all(std::span<const RawExample> examples, const Vocabulary& vocab,
                                       const CleanConfig& clean_config, std::size_t max_len) {
    std::vector<EncodedExample> out;
    out.reserve(examples.size());
    for (const auto& ex : examples) {
        auto encoded = encode(clean(ex.text, clean_config), vocab, max_len);
        encoded.label = ex.label;
        out.push_back(std::move(encoded));
    }
    return out;
}

// ---- datasets -------------------------------------------------------------

DatasetFormat format_for_path(const std::filesystem::path& path) {
    const auto ext = path.extension().string();
    return (ext == ".jsonl" || ext == ".json") ? DatasetFormat::jsonl : DatasetFormat::tsv;
}

std::vector<RawExample> load_dataset(const std::filesystem::path& path) {
    return load_dataset(path, format_for_path(path));
}

std::vector<RawExample> load_dataset(const std::filesystem::path& path, DatasetFormat format) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open dataset " + path.string());
    std::vector<RawExample> examples;
    std::string line;
    std::size_t line_no = 0;
    auto fail = [&](const std::string& what) {
        throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + what);
    };
    auto label_from = [&](const std::string& text) -> std::optional<int> {
        auto label = parse_label(text);
        if (!label) fail("unknown label '" + text + "'");
        return label;
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        RawExample ex;
        if (format == DatasetFormat::tsv) {
            std::vector<std::string> cols;
            std::stringstream ss(line);
            std::string col;
            while (std::getline(ss, col, '\t')) cols.push_back(col);
            if (!line.empty() && line.back() == '\t') cols.emplace_back();
            if (cols.size() < 2 || cols.size() > 3) fail("expected 2 or 3 tab-separated columns, got " + std::to_string(cols.size()));
            ex.id = cols[0];
            ex.text = cols[1];
            if (cols.size() == 3 && !cols[2].empty()) ex.label = label_from(cols[2]);
        } else {
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(line);
            } catch (const nlohmann::json::parse_error&) {
                fail("invalid JSON");
            }
            if (!j.is_object() || !j.contains("id") || !j.contains("text") || !j["text"].is_string()) {
                fail("expected an object with string \"id\" and \"text\"");
            }
            if (j["id"].is_string()) ex.id = j["id"].get<std::string>();
            else if (j["id"].is_number_integer()) ex.id = std::to_string(j["id"].get<long long>());
            else fail("\"id\" must be a string");
            ex.text = j["text"].get<std::string>();
            if (j.contains("label") && !j["label"].is_null()) {
                if (!j["label"].is_string()) fail("\"label\" must be a string");
                ex.label = label_from(j["label"].get<std::string>());
            }
        }
        if (ex.id.empty()) fail("empty id");
        examples.push_back(std::move(ex));
    }
    return examples;
}

void save_dataset_tsv(const std::filesystem::path& path, std::span<const RawExample> examples) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write dataset " + path.string());
    for (const auto& ex : examples) {
        std::string text = ex.text;
        std::replace_if(text.begin(), text.end(), [](char c) { return c == '\t' || c == '\n' || c == '\r'; }, ' ');
        out << ex.id << '\t' << text;
        if (ex.label) out << '\t' << label_name(*ex.label);
        out << '\n';
    }
}

// ---- k-fold ---------------------------------------------------------------

std::vector<FoldSplit> kfold_split(std::size_t num_examples, std::size_t k, std::uint64_t seed) {
    if (k < 2) throw ContractError("kfold_split: k must be at least 2");
    if (k > num_examples) {
        throw ContractError("kfold_split: k=" + std::to_string(k) + " exceeds the " + std::to_string(num_examples) +
                            " examples");
    }
    std::vector<std::size_t> order(num_examples);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    for (std::size_t i = num_examples; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    std::vector<std::size_t> bounds{0};
    for (std::size_t f = 0; f < k; ++f) bounds.push_back(bounds.back() + num_examples / k + (f < num_examples % k ? 1 : 0));

    std::vector<FoldSplit> folds(k);
    for (std::size_t f = 0; f < k; ++f) {
        for (std::size_t i = 0; i < num_examples; ++i) {
            const bool held = i >= bounds[f] && i < bounds[f + 1];
            (held ? folds[f].heldout : folds[f].train).push_back(order[i]);
        }
    }
    return folds;
}

}  // namespace advmix
