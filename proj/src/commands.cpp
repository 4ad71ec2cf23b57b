#include "advmix/commands.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include "advmix/errors.hpp"
#include "advmix/parallel.hpp"
#include "advmix/synthetic.hpp"

namespace advmix::cli {

namespace {

std::string fixed(double value, int places = 4) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(places) << round_half_up(value, places);
    return os.str();
}

// Shortest text that round-trips the double exactly.
std::string exact(double value) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", value);
    return buf;
}

std::vector<std::string> split(const std::string& text, char sep) {
    std::vector<std::string> parts;
    std::string cur;
    std::istringstream in(text);
    while (std::getline(in, cur, sep)) parts.push_back(cur);
    if (!text.empty() && text.back() == sep) parts.emplace_back();
    return parts;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::ofstream open_out(const fs::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    return out;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
    auto out = open_out(path);
    out << j.dump(2) << "\n";
}

// Config, vocabulary and datasets for one experiment, fully loaded before
// anything is written.
struct Experiment {
    RunConfig config;
    Vocabulary vocab;
    ModelConfig model;
    std::vector<RawExample> train_raw;
    std::vector<RawExample> dev_raw;
    std::vector<RawExample> test_raw;
    std::vector<EncodedExample> train;
    std::vector<EncodedExample> dev;
    std::vector<EncodedExample> test;
};

struct Needs {
    bool dev = false;
    bool test = false;
    bool out_dir = false;
};

std::vector<RawExample> load_labelled(const fs::path& path, const char* role) {
    auto examples = load_dataset(path);
    if (examples.empty()) throw DataError(std::string(role) + " set " + path.string() + " is empty");
    for (const auto& ex : examples) {
        if (!ex.label) throw DataError(std::string(role) + " example '" + ex.id + "' in " + path.string() + " has no label");
    }
    return examples;
}

Experiment load_experiment(RunConfig config, const Needs& needs, std::ostream& log) {
    config.validate();
    if (!config.data.vocab) throw ConfigError("config is missing data.vocab");
    if (!config.data.train) throw ConfigError("no training set: set data.train or pass --train");
    if (needs.dev && !config.data.dev) throw ConfigError("no dev set: set data.dev or pass --dev");
    if (needs.test && !config.data.test) throw ConfigError("no test set: set data.test or pass --test");
    if (needs.out_dir && !config.output_dir) throw ConfigError("no output directory: set output_dir or pass --out-dir");
    if (!config.train.adv.enabled && config.train.adv.alpha > 0.0) {
        log << "warning: adv.enabled is false, alpha=" << config.train.adv.alpha << " is ignored\n";
    }

    Experiment ex;
    ex.vocab = Vocabulary::load(*config.data.vocab);
    ex.model = config.model;
    if (config.vocab_size_from_vocabulary) {
        ex.model.vocab_size = ex.vocab.size();
    } else if (ex.model.vocab_size < ex.vocab.size()) {
        throw ConfigError("model.vocab_size " + std::to_string(ex.model.vocab_size) + " is smaller than the vocabulary (" +
                          std::to_string(ex.vocab.size()) + ")");
    }
    ex.model.validate();

    const auto max_len = ex.model.max_len;
    ex.train_raw = load_labelled(*config.data.train, "training");
    ex.train = encode_all(ex.train_raw, ex.vocab, config.clean, max_len);
    if (config.data.dev) {
        ex.dev_raw = load_labelled(*config.data.dev, "dev");
        ex.dev = encode_all(ex.dev_raw, ex.vocab, config.clean, max_len);
    }
    if (config.data.test) {
        ex.test_raw = load_dataset(*config.data.test);
        if (ex.test_raw.empty()) throw DataError("test set " + config.data.test->string() + " is empty");
        ex.test = encode_all(ex.test_raw, ex.vocab, config.clean, max_len);
    }
    ex.config = std::move(config);
    return ex;
}

bool all_labelled(const std::vector<RawExample>& examples) {
    for (const auto& e : examples)
        if (!e.label) return false;
    return true;
}

std::vector<int> gold_labels(const std::vector<RawExample>& examples) {
    std::vector<int> out;
    out.reserve(examples.size());
    for (const auto& e : examples) out.push_back(*e.label);
    return out;
}

// Files that make an output directory self-describing for cmd_predict.
void write_run_files(const fs::path& dir, const Experiment& ex) {
    ex.vocab.save(dir / "vocab.json");
    RunConfig resolved = ex.config;
    resolved.model = ex.model;
    resolved.vocab_size_from_vocabulary = false;
    write_json(dir / "run_config.json", resolved.to_json());
}

std::string epoch_line(const EpochRecord& rec) {
    return "epoch=" + std::to_string(rec.epoch) + " mean_ce=" + fixed(rec.mean_ce) + " mean_adv=" + fixed(rec.mean_adv) +
           " dev_macro_f1=" + fixed(rec.dev.macro_f1);
}

}  // namespace

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return kUsageError;
    if (dynamic_cast<const NumericError*>(&e)) return kNumericError;
    if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const IndexError*>(&e) ||
        dynamic_cast<const ContractError*>(&e) || dynamic_cast<const ShapeError*>(&e) ||
        dynamic_cast<const fs::filesystem_error*>(&e)) {
        return kDataError;
    }
    return kNumericError;
}

std::size_t worker_count_from_env() {
    const char* raw = std::getenv("ADVMIX_THREADS");
    if (!raw || !*raw) return 1;
    char* end = nullptr;
    const long value = std::strtol(raw, &end, 10);
    if (*end != '\0' || value < 1) throw ConfigError("ADVMIX_THREADS must be a positive integer, got '" + std::string(raw) + "'");
    return static_cast<std::size_t>(value);
}

CleanConfig parse_clean_flags(const std::string& flags) {
    CleanConfig c{false, false, false, false};
    const auto text = trim(flags);
    if (text == "none") return c;
    if (text == "all") return CleanConfig{true, true, true, true};
    for (const auto& raw : split(text, ',')) {
        const auto f = trim(raw);
        if (f == "urls") c.remove_urls = true;
        else if (f == "hashtags") c.remove_hashtags = true;
        else if (f == "usernames") c.remove_usernames = true;
        else if (f == "lowercase") c.lowercase = true;
        else throw ConfigError("unknown clean flag '" + f + "' (expected urls, hashtags, usernames, lowercase, all or none)");
    }
    return c;
}

std::vector<double> parse_epsilons(const std::string& list) {
    std::vector<double> out;
    for (const auto& raw : split(list, ',')) {
        const auto item = trim(raw);
        if (item.empty()) continue;
        std::size_t used = 0;
        double value = 0.0;
        try {
            value = std::stod(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != item.size() || !std::isfinite(value) || value <= 0.0) {
            throw ConfigError("epsilon values must be positive numbers, got '" + item + "'");
        }
        out.push_back(value);
    }
    if (out.empty()) throw ConfigError("epsilon list is empty");
    return out;
}

// --- preprocess -------------------------------------------------------------

void cmd_preprocess(const PreprocessOptions& options, std::ostream& log) {
    auto examples = load_dataset(options.input);
    if (examples.empty()) throw DataError("input " + options.input.string() + " has no records");
    std::vector<std::string> cleaned;
    cleaned.reserve(examples.size());
    for (auto& ex : examples) {
        ex.text = clean(ex.text, options.clean);
        cleaned.push_back(ex.text);
    }
    const auto minimum = base_symbol_count(cleaned) + 4;
    if (options.vocab_size < minimum) {
        throw ConfigError("--vocab-size " + std::to_string(options.vocab_size) + " is below the " +
                          std::to_string(minimum) + " symbols the corpus needs (characters plus reserved tokens)");
    }
    const auto vocab = train_bpe(cleaned, options.vocab_size);

    if (options.output.has_parent_path()) fs::create_directories(options.output.parent_path());
    if (options.vocab_out.has_parent_path()) fs::create_directories(options.vocab_out.parent_path());
    save_dataset_tsv(options.output, examples);
    vocab.save(options.vocab_out);

    std::array<std::size_t, kNumClasses> counts{};
    std::size_t unlabelled = 0;
    for (const auto& ex : examples) {
        if (ex.label) ++counts[static_cast<std::size_t>(*ex.label)];
        else ++unlabelled;
    }
    log << "examples: " << examples.size() << "\n";
    for (int c = 0; c < kNumClasses; ++c) log << "  " << label_name(c) << ": " << counts[static_cast<std::size_t>(c)] << "\n";
    if (unlabelled) log << "  unlabelled: " << unlabelled << "\n";
    log << "vocab size: " << vocab.size() << " (" << vocab.merges().size() << " merges)\n";
}

// --- train ------------------------------------------------------------------

TrainReport cmd_train(const TrainOptions& options, std::ostream& log) {
    auto config = RunConfig::load(options.config);
    if (options.train) config.data.train = *options.train;
    if (options.dev) config.data.dev = *options.dev;
    if (options.out_dir) config.output_dir = *options.out_dir;
    const auto ex = load_experiment(std::move(config), {.dev = true, .test = false, .out_dir = true}, log);

    TrainCallbacks callbacks;
    callbacks.on_epoch = [&](const EpochRecord& rec) { log << epoch_line(rec) << "\n" << std::flush; };
    auto result = train(ClassifierModel::init(ex.model, ex.config.train.seed), ex.train, ex.dev, ex.config.train, callbacks);

    const auto& dir = *ex.config.output_dir;
    fs::create_directories(dir);
    result.report.best_checkpoint = "best.ckpt";
    save_checkpoint(result.best_model, dir / result.report.best_checkpoint);
    write_json(dir / "train_report.json", report_to_json(result.report));
    write_run_files(dir, ex);
    log << "best epoch " << result.report.best_epoch << " dev_macro_f1=" << fixed(result.report.best_dev_macro_f1())
        << "\n";
    return result.report;
}

// --- ablate -----------------------------------------------------------------

std::vector<AblationRow> cmd_ablate(const AblateOptions& options, std::ostream& log) {
    const auto epsilons = parse_epsilons(options.epsilons);
    if (options.seeds < 1) throw ConfigError("--seeds must be at least 1");
    const auto ex = load_experiment(RunConfig::load(options.config), {.dev = true, .test = true, .out_dir = false}, log);
    if (!all_labelled(ex.test_raw)) throw DataError("ablation needs a labelled test set");
    const auto test_gold = gold_labels(ex.test_raw);

    // Row order: baseline seeds first, then each epsilon in list order.
    std::vector<AblationRow> rows;
    for (std::size_t s = 0; s < options.seeds; ++s) rows.push_back({0.0, ex.config.train.seed + s, 0.0, 0.0});
    for (double eps : epsilons)
        for (std::size_t s = 0; s < options.seeds; ++s) rows.push_back({eps, ex.config.train.seed + s, 0.0, 0.0});

    parallel_for(rows.size(), options.workers, [&](std::size_t i) {
        auto& row = rows[i];
        TrainConfig cfg = ex.config.train;
        cfg.seed = row.seed;
        if (row.epsilon == 0.0) {
            cfg.adv.enabled = false;
        } else {
            cfg.adv.enabled = true;
            cfg.adv.epsilon = row.epsilon;
        }
        auto result = train(ClassifierModel::init(ex.model, cfg.seed), ex.train, ex.dev, cfg);
        row.dev_macro_f1 = result.report.best_dev_macro_f1();
        const auto preds = argmax_labels(predict_dataset(result.best_model, ex.test));
        row.test_macro_f1 = compute_metrics(preds, test_gold).macro_f1;
    });

    if (options.out.has_parent_path()) fs::create_directories(options.out.parent_path());
    auto out = open_out(options.out);
    out << "epsilon,seed,dev_macro_f1,test_macro_f1\n";
    for (const auto& r : rows) {
        out << exact(r.epsilon) << "," << r.seed << "," << exact(r.dev_macro_f1) << "," << exact(r.test_macro_f1) << "\n";
    }

    log << "epsilon  runs  test_macro_f1_mean  test_macro_f1_std  dev_macro_f1_mean\n";
    std::vector<double> order{0.0};
    order.insert(order.end(), epsilons.begin(), epsilons.end());
    for (double eps : order) {
        double sum = 0.0, sq = 0.0, dev = 0.0;
        std::size_t n = 0;
        for (const auto& r : rows) {
            if (r.epsilon != eps) continue;
            sum += r.test_macro_f1;
            sq += r.test_macro_f1 * r.test_macro_f1;
            dev += r.dev_macro_f1;
            ++n;
        }
        const double mean = sum / static_cast<double>(n);
        const double var = std::max(0.0, sq / static_cast<double>(n) - mean * mean);
        log << (eps == 0.0 ? std::string("baseline") : exact(eps)) << "  " << n << "  " << fixed(mean) << "  "
            << fixed(std::sqrt(var)) << "  " << fixed(dev / static_cast<double>(n)) << "\n";
    }
    return rows;
}

// --- ensemble ---------------------------------------------------------------

EnsembleSummary cmd_ensemble(const EnsembleOptions& options, std::ostream& log) {
    if (options.k < 1) throw ConfigError("--k must be at least 1");
    auto config = RunConfig::load(options.config);
    if (options.train) config.data.train = *options.train;
    if (options.test) config.data.test = *options.test;
    if (options.out_dir) config.output_dir = *options.out_dir;
    const bool single = options.k == 1;
    const auto ex = load_experiment(std::move(config), {.dev = single, .test = true, .out_dir = true}, log);
    if (!single && options.k > ex.train.size()) {
        throw ConfigError("--k " + std::to_string(options.k) + " exceeds the " + std::to_string(ex.train.size()) +
                          " training examples");
    }

    std::vector<FoldOutcome> folds;
    if (single) {
        // One model on the full training set, selected on the configured dev set.
        auto result = train(ClassifierModel::init(ex.model, ex.config.train.seed), ex.train, ex.dev, ex.config.train);
        FoldOutcome out{0, std::move(result.report), std::move(result.best_model), {}, {}, {}};
        out.test_probs = predict_dataset(out.model, ex.test);
        folds.push_back(std::move(out));
    } else {
        folds = run_kfold(ex.train, options.k, ex.model, ex.config.train, ex.test, options.workers);
    }

    EnsembleSummary summary;
    std::vector<ProbMatrix> candidates;
    for (const auto& f : folds) candidates.push_back(f.test_probs);
    summary.averaged = ensemble_average(candidates);
    summary.predictions = argmax_labels(summary.averaged);

    const bool labelled = all_labelled(ex.test_raw);
    nlohmann::json metrics = nlohmann::json::object();
    if (labelled) {
        const auto gold = gold_labels(ex.test_raw);
        nlohmann::json per_fold = nlohmann::json::array();
        for (const auto& f : folds) {
            summary.fold_metrics.push_back(compute_metrics(argmax_labels(f.test_probs), gold));
            per_fold.push_back(metrics_to_json(summary.fold_metrics.back()));
        }
        summary.ensemble_metrics = compute_metrics(summary.predictions, gold);
        metrics["folds"] = per_fold;
        metrics["ensemble"] = metrics_to_json(*summary.ensemble_metrics);
    }

    const auto& dir = *ex.config.output_dir;
    fs::create_directories(dir);
    const int width = static_cast<int>(std::to_string(folds.size() - 1).size());
    nlohmann::json reports = nlohmann::json::array();
    for (auto& f : folds) {
        std::ostringstream stem;
        stem << "fold_" << std::setw(width) << std::setfill('0') << f.fold;
        f.report.best_checkpoint = stem.str() + ".ckpt";
        save_checkpoint(f.model, dir / f.report.best_checkpoint);
        write_probabilities(dir / (stem.str() + "_test_probs.csv"), ex.test_raw, f.test_probs);
        reports.push_back(report_to_json(f.report));
    }
    write_json(dir / "fold_reports.json", reports);
    write_probabilities(dir / "ensemble_test_probs.csv", ex.test_raw, summary.averaged);
    write_predictions(dir / "predictions.tsv", ex.test_raw, summary.predictions);
    if (labelled) write_json(dir / "metrics.json", metrics);
    write_run_files(dir, ex);

    for (std::size_t i = 0; i < folds.size(); ++i) {
        log << "fold " << folds[i].fold << " best_epoch=" << folds[i].report.best_epoch
            << " dev_macro_f1=" << fixed(folds[i].report.best_dev_macro_f1());
        if (labelled) log << " test_macro_f1=" << fixed(summary.fold_metrics[i].macro_f1);
        log << "\n";
    }
    if (labelled) {
        double mean = 0.0;
        for (const auto& m : summary.fold_metrics) mean += m.macro_f1;
        mean /= static_cast<double>(summary.fold_metrics.size());
        log << "mean fold test_macro_f1=" << fixed(mean) << "\n";
        log << "ensemble of " << folds.size() << ":\n" << format_metrics_table(*summary.ensemble_metrics);
    }
    return summary;
}

// --- evaluate ---------------------------------------------------------------

MetricsReport cmd_evaluate(const EvaluateOptions& options, std::ostream& log) {
    const auto predicted = read_predictions(options.predictions);
    const auto gold = load_dataset(options.gold);

    std::vector<std::string> mismatches;
    const std::size_t common = std::min(predicted.size(), gold.size());
    for (std::size_t i = 0; i < common && mismatches.size() < 5; ++i) {
        if (predicted[i].first != gold[i].id) {
            mismatches.push_back("row " + std::to_string(i + 1) + ": prediction id '" + predicted[i].first +
                                 "' vs gold id '" + gold[i].id + "'");
        }
    }
    if (!mismatches.empty() || predicted.size() != gold.size()) {
        std::string msg = "predictions do not match gold (" + std::to_string(predicted.size()) + " predictions, " +
                          std::to_string(gold.size()) + " gold examples)";
        for (const auto& m : mismatches) msg += "\n  " + m;
        throw DataError(msg);
    }

    std::vector<int> preds, golds;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        if (!gold[i].label) throw DataError("gold example '" + gold[i].id + "' has no label");
        preds.push_back(predicted[i].second);
        golds.push_back(*gold[i].label);
    }
    const auto report = compute_metrics(preds, golds);
    if (options.json_out) write_json(*options.json_out, metrics_to_json(report));

    log << format_metrics_table(report);
    log << "confusion (rows gold, columns predicted; negative, neutral, positive):\n";
    for (const auto& row : report.confusion.counts) log << "  " << row[0] << " " << row[1] << " " << row[2] << "\n";
    return report;
}

// --- predict ----------------------------------------------------------------

void cmd_predict(const PredictOptions& options, std::ostream& log) {
    const auto dir = options.checkpoint.parent_path();
    const fs::path vocab_path = options.vocab.value_or(dir / "vocab.json");
    CleanConfig clean_config;
    const fs::path config_path = options.config.value_or(dir / "run_config.json");
    if (options.config || fs::exists(config_path)) clean_config = RunConfig::load(config_path).clean;

    const auto model = load_checkpoint(options.checkpoint);
    const auto vocab = Vocabulary::load(vocab_path);
    if (vocab.size() > model.config().vocab_size) {
        throw DataError("vocabulary " + vocab_path.string() + " is larger than the checkpoint's embedding table");
    }
    const auto examples = load_dataset(options.input);
    const auto encoded = encode_all(examples, vocab, clean_config, model.config().max_len);
    const auto labels = argmax_labels(predict_dataset(model, encoded));
    if (options.out.has_parent_path()) fs::create_directories(options.out.parent_path());
    write_predictions(options.out, examples, labels);
    log << "wrote " << labels.size() << " predictions to " << options.out.string() << "\n";
}

// --- synth ------------------------------------------------------------------

void cmd_synth(const SynthOptions& options, std::ostream& log) {
    SyntheticConfig cfg;
    cfg.seed = options.seed;
    cfg.train_size = options.train_size;
    cfg.dev_size = options.dev_size;
    cfg.test_size = options.test_size;
    cfg.train_label_noise = options.noise;
    const auto corpus = make_code_mixed_corpus(cfg);
    fs::create_directories(options.out_dir);
    save_dataset_tsv(options.out_dir / "train.tsv", corpus.train);
    save_dataset_tsv(options.out_dir / "dev.tsv", corpus.dev);
    save_dataset_tsv(options.out_dir / "test.tsv", corpus.test);
    log << "wrote " << corpus.train.size() << "/" << corpus.dev.size() << "/" << corpus.test.size()
        << " train/dev/test examples to " << options.out_dir.string() << "\n";
}

// --- file helpers -----------------------------------------------------------

void write_predictions(const fs::path& path, const std::vector<RawExample>& examples, const std::vector<int>& labels) {
    if (examples.size() != labels.size()) throw ContractError("write_predictions: example/label count mismatch");
    auto out = open_out(path);
    for (std::size_t i = 0; i < labels.size(); ++i) out << examples[i].id << "\t" << label_name(labels[i]) << "\n";
}

std::vector<std::pair<std::string, int>> read_predictions(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read " + path.string());
    std::vector<std::pair<std::string, int>> out;
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty()) continue;
        const auto tab = line.find('\t');
        const auto where = path.string() + ":" + std::to_string(number);
        if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
            throw DataError(where + ": expected 'id<TAB>label'");
        }
        const auto label = parse_label(line.substr(tab + 1));
        if (!label) throw DataError(where + ": unknown label '" + line.substr(tab + 1) + "'");
        out.emplace_back(line.substr(0, tab), *label);
    }
    return out;
}

void write_probabilities(const fs::path& path, const std::vector<RawExample>& examples, const ProbMatrix& probs) {
    if (examples.size() != probs.size()) throw ContractError("write_probabilities: example/row count mismatch");
    auto out = open_out(path);
    out << "id," << label_name(0) << "," << label_name(1) << "," << label_name(2) << "\n";
    for (std::size_t i = 0; i < probs.size(); ++i) {
        out << examples[i].id;
        for (double p : probs[i]) out << "," << exact(p);
        out << "\n";
    }
}

ProbMatrix read_probabilities(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read " + path.string());
    ProbMatrix out;
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        if (++number == 1 || line.empty()) continue;
        // The id may itself contain commas; the probabilities are the last three fields.
        ProbRow row{};
        std::size_t end = line.size();
        for (int c = 2; c >= 0; --c) {
            const auto comma = line.rfind(',', end - 1);
            if (comma == std::string::npos) throw DataError(path.string() + ":" + std::to_string(number) + ": expected 4 fields");
            try {
                row[static_cast<std::size_t>(c)] = std::stod(line.substr(comma + 1, end - comma - 1));
            } catch (const std::exception&) {
                throw DataError(path.string() + ":" + std::to_string(number) + ": bad probability");
            }
            end = comma;
        }
        out.push_back(row);
    }
    return out;
}

}  // namespace advmix::cli
