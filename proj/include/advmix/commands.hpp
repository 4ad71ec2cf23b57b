#pragma once

// Implementations behind the advmix command-line tool. Each command validates
// its inputs before touching the filesystem and reports failures by throwing
// the library's error types; exit_code_for() maps them onto process codes.

#include <cstddef>
#include <exception>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "advmix/config.hpp"
#include "advmix/evaluation.hpp"
#include "advmix/training.hpp"

namespace advmix::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kSuccess = 0, kUsageError = 1, kDataError = 2, kNumericError = 3 };

int exit_code_for(const std::exception& e);

// Worker count from ADVMIX_THREADS (default 1).
std::size_t worker_count_from_env();

// Parses "urls,hashtags,usernames,lowercase" (any subset, or "none").
CleanConfig parse_clean_flags(const std::string& flags);
// Parses "1,2,3,5".
std::vector<double> parse_epsilons(const std::string& list);

struct PreprocessOptions {
    fs::path input;
    fs::path output;
    fs::path vocab_out;
    CleanConfig clean;
    std::size_t vocab_size = 2000;
};
void cmd_preprocess(const PreprocessOptions& options, std::ostream& log);

struct TrainOptions {
    fs::path config;
    std::optional<fs::path> train;
    std::optional<fs::path> dev;
    std::optional<fs::path> out_dir;
};
TrainReport cmd_train(const TrainOptions& options, std::ostream& log);

struct AblateOptions {
    fs::path config;
    std::string epsilons = "1,2,3,5";
    std::size_t seeds = 1;
    fs::path out;
    std::size_t workers = 1;
};

struct AblationRow {
    double epsilon = 0.0;  // 0 marks the baseline (adversarial term disabled)
    std::uint64_t seed = 0;
    double dev_macro_f1 = 0.0;
    double test_macro_f1 = 0.0;
};
std::vector<AblationRow> cmd_ablate(const AblateOptions& options, std::ostream& log);

struct EnsembleOptions {
    fs::path config;
    std::size_t k = 10;
    std::optional<fs::path> train;
    std::optional<fs::path> test;
    std::optional<fs::path> out_dir;
    std::size_t workers = 1;
};

struct EnsembleSummary {
    ProbMatrix averaged;
    std::vector<int> predictions;
    std::vector<MetricsReport> fold_metrics;  // empty when the test set is unlabelled
    std::optional<MetricsReport> ensemble_metrics;
};
EnsembleSummary cmd_ensemble(const EnsembleOptions& options, std::ostream& log);

struct EvaluateOptions {
    fs::path predictions;
    fs::path gold;
    std::optional<fs::path> json_out;
};
MetricsReport cmd_evaluate(const EvaluateOptions& options, std::ostream& log);

struct PredictOptions {
    fs::path checkpoint;
    fs::path input;
    fs::path out;
    std::optional<fs::path> vocab;   // default: vocab.json beside the checkpoint
    std::optional<fs::path> config;  // default: run_config.json beside the checkpoint, if present
};
void cmd_predict(const PredictOptions& options, std::ostream& log);

struct SynthOptions {
    fs::path out_dir;
    std::uint64_t seed = 2020;
    std::size_t train_size = 1500;
    std::size_t dev_size = 500;
    std::size_t test_size = 500;
    double noise = 0.1;
};
void cmd_synth(const SynthOptions& options, std::ostream& log);

// Prediction file helpers (`id<TAB>label`).
void write_predictions(const fs::path& path, const std::vector<RawExample>& examples, const std::vector<int>& labels);
std::vector<std::pair<std::string, int>> read_predictions(const fs::path& path);

// Probability CSV helpers (`id,negative,neutral,positive`).
void write_probabilities(const fs::path& path, const std::vector<RawExample>& examples, const ProbMatrix& probs);
ProbMatrix read_probabilities(const fs::path& path);

}  // namespace advmix::cli
