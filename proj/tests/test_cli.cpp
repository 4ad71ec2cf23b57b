#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>

#include "doctest.h"
#include "advmix/commands.hpp"
#include "advmix/errors.hpp"
#include "advmix/synthetic.hpp"
#include "support/tempdir.hpp"

using namespace advmix;
using namespace advmix::cli;
using advmix::test::TempDir;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in);
    return {std::istreambuf_iterator<char>(in), {}};
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

std::size_t count_lines_starting(const std::string& text, const std::string& prefix) {
    std::istringstream in(text);
    std::size_t n = 0;
    for (std::string line; std::getline(in, line);)
        if (line.rfind(prefix, 0) == 0) ++n;
    return n;
}

std::size_t file_count(const fs::path& dir) {
    if (!fs::exists(dir)) return 0;
    return static_cast<std::size_t>(std::distance(fs::directory_iterator(dir), fs::directory_iterator{}));
}

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string(ADVMIX_CLI_PATH) + " " + args + " > '" + log.string() + "' 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// A small corpus, a vocabulary and a run config in a scratch directory.
struct Workspace {
    TempDir dir;
    fs::path config;

    explicit Workspace(bool adv_enabled = false, std::size_t epochs = 2) {
        SyntheticConfig sc;
        sc.train_size = 90;
        sc.dev_size = 30;
        sc.test_size = 24;
        sc.seed = 5;
        const auto corpus = make_code_mixed_corpus(sc);
        save_dataset_tsv(dir / "raw_train.tsv", corpus.train);
        save_dataset_tsv(dir / "dev.tsv", corpus.dev);
        save_dataset_tsv(dir / "test.tsv", corpus.test);

        PreprocessOptions pre;
        pre.input = dir / "raw_train.tsv";
        pre.output = dir / "train.tsv";
        pre.vocab_out = dir / "vocab.json";
        pre.vocab_size = 300;
        std::ostringstream sink;
        cmd_preprocess(pre, sink);

        nlohmann::json cfg = {
            {"model", {{"hidden", 8}, {"layers", 1}, {"heads", 2}, {"ffn_dim", 16}, {"max_len", 24}}},
            {"train", {{"learning_rate", 3e-3}, {"batch_size", 16}, {"epochs", epochs}, {"seed", 3}}},
            {"adv", {{"enabled", adv_enabled}, {"epsilon", 1.0}, {"alpha", 1.0}}},
            {"data", {{"vocab", "vocab.json"}, {"train", "train.tsv"}, {"dev", "dev.tsv"}, {"test", "test.tsv"}}},
            {"output_dir", "out"}};
        config = dir / "config.json";
        write_text(config, cfg.dump(2));
    }

    fs::path operator/(const std::string& name) const { return dir / name; }
};

}  // namespace

TEST_CASE("flag parsing") {
    const auto all = parse_clean_flags("all");
    CHECK(all.lowercase);
    const auto none = parse_clean_flags("none");
    CHECK_FALSE(none.remove_urls);
    CHECK_FALSE(none.remove_hashtags);
    const auto some = parse_clean_flags("urls, lowercase");
    CHECK(some.remove_urls);
    CHECK(some.lowercase);
    CHECK_FALSE(some.remove_usernames);
    CHECK_THROWS_AS(parse_clean_flags("urls,emoji"), ConfigError);

    CHECK(parse_epsilons("1,2,3,5") == std::vector<double>{1, 2, 3, 5});
    CHECK(parse_epsilons(" 0.5 ,") == std::vector<double>{0.5});
    CHECK_THROWS_AS(parse_epsilons(""), ConfigError);
    CHECK_THROWS_AS(parse_epsilons("1,0"), ConfigError);
    CHECK_THROWS_AS(parse_epsilons("1,x"), ConfigError);
}

TEST_CASE("exit code mapping") {
    CHECK(exit_code_for(ConfigError("x")) == kUsageError);
    CHECK(exit_code_for(DataError("x")) == kDataError);
    CHECK(exit_code_for(IndexError("x")) == kDataError);
    CHECK(exit_code_for(NumericError("x")) == kNumericError);
}

TEST_CASE("preprocess writes cleaned data and a vocabulary, reproducibly") {
    TempDir dir;
    write_text(dir / "in.tsv",
               "a1\tbahut accha movie @friend http://x.co #great\tpositive\n"
               "a2\tbakwas film yaar\tnegative\n"
               "a3\tkal dekhte hain www.example.com\tneutral\n");
    PreprocessOptions pre;
    pre.input = dir / "in.tsv";
    pre.output = dir / "out" / "clean.tsv";
    pre.vocab_out = dir / "out" / "vocab.json";
    pre.vocab_size = 60;
    std::ostringstream log;
    cmd_preprocess(pre, log);
    const auto cleaned = load_dataset(pre.output);
    REQUIRE(cleaned.size() == 3);
    CHECK(cleaned[0].text == "bahut accha movie");
    CHECK(cleaned[2].text == "kal dekhte hain");
    CHECK(cleaned[1].label == 0);
    CHECK(log.str().find("examples: 3") != std::string::npos);
    const auto vocab = Vocabulary::load(pre.vocab_out);
    CHECK(vocab.size() <= 60);

    const auto first_data = slurp(pre.output), first_vocab = slurp(pre.vocab_out);
    std::ostringstream again;
    cmd_preprocess(pre, again);
    CHECK(slurp(pre.output) == first_data);
    CHECK(slurp(pre.vocab_out) == first_vocab);

    pre.vocab_size = 5;
    CHECK_THROWS_AS(cmd_preprocess(pre, again), ConfigError);
}

TEST_CASE("train logs every epoch and writes one checkpoint") {
    Workspace ws;
    std::ostringstream log;
    const auto report = cmd_train({ws.config, {}, {}, {}}, log);
    CHECK(count_lines_starting(log.str(), "epoch=") == 2);
    CHECK(log.str().find("warning: adv.enabled is false, alpha=1 is ignored") != std::string::npos);
    CHECK(report.epochs.size() == 2);
    const auto out = ws / "out";
    CHECK(fs::exists(out / "best.ckpt"));
    CHECK(fs::exists(out / "train_report.json"));
    CHECK(fs::exists(out / "vocab.json"));
    CHECK(fs::exists(out / "run_config.json"));
    std::size_t checkpoints = 0;
    for (const auto& e : fs::directory_iterator(out))
        if (e.path().extension() == ".ckpt") ++checkpoints;
    CHECK(checkpoints == 1);

    const auto saved = nlohmann::json::parse(slurp(out / "train_report.json"));
    CHECK(saved.at("best_checkpoint") == "best.ckpt");
    CHECK(saved.at("epochs").size() == 2);

    // Same config, same bytes.
    const auto first_report = slurp(out / "train_report.json"), first_ckpt = slurp(out / "best.ckpt");
    std::ostringstream again;
    cmd_train({ws.config, {}, {}, ws / "out2"}, again);
    CHECK(slurp(ws / "out2" / "train_report.json") == first_report);
    CHECK(slurp(ws / "out2" / "best.ckpt") == first_ckpt);

    // The saved run config reloads into the resolved model.
    const auto resolved = RunConfig::load(out / "run_config.json");
    CHECK(resolved.model.vocab_size == Vocabulary::load(ws / "vocab.json").size());
    CHECK_FALSE(resolved.train.adv.enabled);
}

TEST_CASE("invalid configs fail before anything is written") {
    Workspace ws;
    auto cfg = nlohmann::json::parse(slurp(ws.config));
    std::ostringstream log;

    SUBCASE("bad value") {
        cfg["train"]["batch_size"] = 0;
        write_text(ws.config, cfg.dump());
        CHECK_THROWS_AS(cmd_train({ws.config, {}, {}, {}}, log), ConfigError);
    }
    SUBCASE("unknown key") {
        cfg["model"]["hiden"] = 8;
        write_text(ws.config, cfg.dump());
        CHECK_THROWS_AS(cmd_train({ws.config, {}, {}, {}}, log), ConfigError);
    }
    SUBCASE("missing input") {
        cfg["data"]["dev"] = "nowhere.tsv";
        write_text(ws.config, cfg.dump());
        CHECK_THROWS_AS(cmd_train({ws.config, {}, {}, {}}, log), ConfigError);
    }
    SUBCASE("vocabulary larger than the model allows") {
        cfg["model"]["vocab_size"] = 10;
        write_text(ws.config, cfg.dump());
        CHECK_THROWS_AS(cmd_train({ws.config, {}, {}, {}}, log), ConfigError);
    }
    SUBCASE("malformed dataset") {
        write_text(ws / "dev.tsv", "d1\tok\tpositive\nd2\toops\tgreat\n");
        CHECK_THROWS_AS(cmd_train({ws.config, {}, {}, {}}, log), DataError);
    }
    CHECK(file_count(ws / "out") == 0);
}

TEST_CASE("ablate runs a baseline and every epsilon") {
    Workspace ws(false, 1);
    std::ostringstream log;
    AblateOptions opts;
    opts.config = ws.config;
    opts.epsilons = "1,2,3,5";
    opts.seeds = 1;
    opts.out = ws / "ablation.csv";
    const auto rows = cmd_ablate(opts, log);
    REQUIRE(rows.size() == 5);
    CHECK(rows[0].epsilon == 0.0);
    CHECK(rows[4].epsilon == 5.0);
    const auto csv = slurp(opts.out);
    CHECK(csv.rfind("epsilon,seed,dev_macro_f1,test_macro_f1\n", 0) == 0);
    CHECK(count_lines_starting(csv, "") == 6);

    // The baseline row is exactly what train reports for the same seed.
    std::ostringstream train_log;
    const auto report = cmd_train({ws.config, {}, {}, {}}, train_log);
    CHECK(rows[0].dev_macro_f1 == report.best_dev_macro_f1());
    CHECK(rows[0].seed == 3);
}

TEST_CASE("ensemble writes averaged probabilities and predictions") {
    for (std::size_t k : {1u, 3u}) {
        CAPTURE(k);
        Workspace ws(false, 1);
        std::ostringstream log;
        EnsembleOptions opts;
        opts.config = ws.config;
        opts.k = k;
        const auto summary = cmd_ensemble(opts, log);
        const auto out = ws / "out";
        CHECK(summary.fold_metrics.size() == k);
        REQUIRE(summary.ensemble_metrics.has_value());
        CHECK(summary.averaged.size() == 24);

        const auto probs = read_probabilities(out / "ensemble_test_probs.csv");
        REQUIRE(probs.size() == 24);
        for (const auto& row : probs) CHECK(row[0] + row[1] + row[2] == doctest::Approx(1.0).epsilon(1e-9));

        std::vector<ProbMatrix> folds;
        for (std::size_t f = 0; f < k; ++f) {
            const auto stem = "fold_" + std::to_string(f);
            CHECK(fs::exists(out / (stem + ".ckpt")));
            folds.push_back(read_probabilities(out / (stem + "_test_probs.csv")));
        }
        const auto avg = ensemble_average(folds);
        for (std::size_t r = 0; r < avg.size(); ++r)
            for (int c = 0; c < 3; ++c) CHECK(avg[r][c] == doctest::Approx(probs[r][c]).epsilon(1e-12));

        const auto preds = read_predictions(out / "predictions.tsv");
        const auto test = load_dataset(ws / "test.tsv");
        REQUIRE(preds.size() == test.size());
        for (std::size_t i = 0; i < preds.size(); ++i) {
            CHECK(preds[i].first == test[i].id);
            CHECK(preds[i].second == argmax_label(probs[i]));
        }
        CHECK(fs::exists(out / "metrics.json"));
        CHECK(fs::exists(out / "fold_reports.json"));
    }
}

TEST_CASE("evaluate scores a hand-built prediction file") {
    TempDir dir;
    // gold: 4 negative, 3 neutral, 3 positive
    write_text(dir / "gold.tsv",
               "e0\tx\tnegative\ne1\tx\tnegative\ne2\tx\tnegative\ne3\tx\tnegative\n"
               "e4\tx\tneutral\ne5\tx\tneutral\ne6\tx\tneutral\n"
               "e7\tx\tpositive\ne8\tx\tpositive\ne9\tx\tpositive\n");
    write_text(dir / "pred.tsv",
               "e0\tnegative\ne1\tnegative\ne2\tnegative\ne3\tneutral\n"
               "e4\tneutral\ne5\tneutral\ne6\tpositive\n"
               "e7\tpositive\ne8\tpositive\ne9\tnegative\n");
    std::ostringstream log;
    const auto m = cmd_evaluate({dir / "pred.tsv", dir / "gold.tsv", dir / "m.json"}, log);
    // negative: P 3/4, R 3/4; neutral: P 2/3, R 2/3; positive: P 2/3, R 2/3
    CHECK(m.per_class[0].precision == doctest::Approx(0.75));
    CHECK(m.per_class[0].recall == doctest::Approx(0.75));
    CHECK(m.per_class[1].f1 == doctest::Approx(2.0 / 3.0));
    CHECK(m.per_class[2].f1 == doctest::Approx(2.0 / 3.0));
    CHECK(m.macro_f1 == doctest::Approx((0.75 + 4.0 / 3.0) / 3.0));
    CHECK(m.accuracy == doctest::Approx(0.7));
    CHECK(log.str().find("Macro Average") != std::string::npos);
    CHECK(log.str().find("0.6944") != std::string::npos);
    CHECK(nlohmann::json::parse(slurp(dir / "m.json")).at("macro_f1").get<double>() == m.macro_f1);

    write_text(dir / "bad.tsv", "e0\tnegative\ne1\tnegative\n");
    CHECK_THROWS_AS(cmd_evaluate({dir / "bad.tsv", dir / "gold.tsv", {}}, log), DataError);
    write_text(dir / "swapped.tsv",
               "e1\tnegative\ne0\tnegative\ne2\tnegative\ne3\tneutral\n"
               "e4\tneutral\ne5\tneutral\ne6\tpositive\n"
               "e7\tpositive\ne8\tpositive\ne9\tnegative\n");
    CHECK_THROWS_AS(cmd_evaluate({dir / "swapped.tsv", dir / "gold.tsv", {}}, log), DataError);
}

TEST_CASE("predict keeps input order and agrees with the model") {
    Workspace ws(false, 1);
    std::ostringstream log;
    cmd_train({ws.config, {}, {}, {}}, log);
    const auto out = ws / "out";
    cmd_predict({out / "best.ckpt", ws / "test.tsv", ws / "pred.tsv", {}, {}}, log);
    const auto preds = read_predictions(ws / "pred.tsv");
    const auto test = load_dataset(ws / "test.tsv");
    REQUIRE(preds.size() == test.size());
    for (std::size_t i = 0; i < test.size(); ++i) CHECK(preds[i].first == test[i].id);

    const auto model = load_checkpoint(out / "best.ckpt");
    const auto vocab = Vocabulary::load(out / "vocab.json");
    const auto encoded = encode_all(test, vocab, CleanConfig{}, model.config().max_len);
    const auto expected = argmax_labels(predict_dataset(model, encoded));
    for (std::size_t i = 0; i < test.size(); ++i) CHECK(preds[i].second == expected[i]);

    // Evaluating the written file reproduces the direct score.
    const auto direct = compute_metrics(expected, [&] {
        std::vector<int> g;
        for (const auto& ex : test) g.push_back(*ex.label);
        return g;
    }());
    CHECK(cmd_evaluate({ws / "pred.tsv", ws / "test.tsv", {}}, log).macro_f1 == direct.macro_f1);
}

TEST_CASE("the executable maps failures onto exit codes") {
    Workspace ws(false, 1);
    const auto log = ws / "cli.log";
    CHECK(run_cli("--help", log) == kSuccess);
    CHECK(run_cli("", log) == kUsageError);
    CHECK(run_cli("train", log) == kUsageError);
    CHECK(run_cli("frobnicate", log) == kUsageError);
    CHECK(run_cli("train --config '" + (ws / "missing.json").string() + "'", log) == kUsageError);

    write_text(ws / "broken.tsv", "b1\tpositive\n");
    CHECK(run_cli("evaluate --predictions '" + (ws / "broken.tsv").string() + "' --gold '" + (ws / "test.tsv").string() +
                      "'",
                  log) == kDataError);
    CHECK(slurp(log).rfind("error: ", 0) == 0);

    CHECK(run_cli("train --config '" + ws.config.string() + "'", log) == kSuccess);
    CHECK(count_lines_starting(slurp(log), "epoch=") == 1);
    CHECK(fs::exists(ws / "out" / "best.ckpt"));
}
