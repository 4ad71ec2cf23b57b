#pragma once

#include <filesystem>
#include <optional>

#include "advmix/adversarial.hpp"
#include "advmix/model.hpp"
#include "advmix/text.hpp"
#include "advmix/training.hpp"
#include "json.hpp"

namespace advmix {

struct DataPaths {
    std::optional<std::filesystem::path> vocab;
    std::optional<std::filesystem::path> train;
    std::optional<std::filesystem::path> dev;
    std::optional<std::filesystem::path> test;
};

/// Everything one experiment needs, read from a JSON document:
///
///   { "clean": {...}, "model": {...}, "train": {...}, "adv": {...},
///     "data": {"vocab", "train", "dev", "test"}, "output_dir": "..." }
///
/// Every section is optional; unknown keys are rejected. Relative paths are
/// resolved against the directory holding the config file. When
/// model.vocab_size is omitted it is taken from the vocabulary.
struct RunConfig {
    CleanConfig clean;
    ModelConfig model;
    bool vocab_size_from_vocabulary = true;
    TrainConfig train;
    DataPaths data;
    std::optional<std::filesystem::path> output_dir;

    static RunConfig parse(const nlohmann::json& j, const std::filesystem::path& base_dir);
    static RunConfig load(const std::filesystem::path& path);

    // Checks value ranges and that every referenced input path exists.
    void validate() const;
    nlohmann::json to_json() const;
};

}  // namespace advmix
