#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "advmix/commands.hpp"

namespace cli = advmix::cli;

namespace {

std::optional<std::filesystem::path> optional_path(const std::string& s) {
    if (s.empty()) return std::nullopt;
    return std::filesystem::path(s);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"advmix: adversarially regularized sentiment classifier for code-mixed text"};
    app.require_subcommand(1);

    // preprocess
    cli::PreprocessOptions pre;
    std::string clean_flags = "urls,hashtags,usernames";
    std::string pre_input, pre_output, pre_vocab;
    auto* preprocess = app.add_subcommand("preprocess", "clean a dataset and train a BPE vocabulary");
    preprocess->add_option("--input", pre_input, "input dataset (.tsv or .jsonl)")->required();
    preprocess->add_option("--output", pre_output, "cleaned TSV output")->required();
    preprocess->add_option("--vocab-out", pre_vocab, "vocabulary JSON output")->required();
    preprocess->add_option("--clean-flags", clean_flags, "urls,hashtags,usernames,lowercase | all | none")
        ->capture_default_str();
    preprocess->add_option("--vocab-size", pre.vocab_size, "target vocabulary size")->capture_default_str();

    // train
    std::string config, train_path, dev_path, test_path, out_dir;
    auto* train = app.add_subcommand("train", "train one model and keep the best dev checkpoint");
    train->add_option("--config", config, "run config JSON")->required();
    train->add_option("--train", train_path, "training set (overrides data.train)");
    train->add_option("--dev", dev_path, "dev set (overrides data.dev)");
    train->add_option("--out-dir", out_dir, "output directory (overrides output_dir)");

    // ablate
    cli::AblateOptions ablate_opts;
    std::string ablate_out;
    auto* ablate = app.add_subcommand("ablate", "baseline plus one run per (epsilon, seed)");
    ablate->add_option("--config", config, "run config JSON")->required();
    ablate->add_option("--epsilons", ablate_opts.epsilons, "comma-separated epsilon values")->capture_default_str();
    ablate->add_option("--seeds", ablate_opts.seeds, "seeds per setting")->capture_default_str();
    ablate->add_option("--out", ablate_out, "CSV output")->required();

    // ensemble
    cli::EnsembleOptions ens_opts;
    auto* ensemble = app.add_subcommand("ensemble", "k-fold training with probability-averaged test predictions");
    ensemble->add_option("--config", config, "run config JSON")->required();
    ensemble->add_option("--k", ens_opts.k, "number of folds")->capture_default_str();
    ensemble->add_option("--train", train_path, "training set (overrides data.train)");
    ensemble->add_option("--test", test_path, "test set (overrides data.test)");
    ensemble->add_option("--out-dir", out_dir, "output directory (overrides output_dir)");

    // evaluate
    std::string eval_pred, eval_gold, eval_json;
    auto* evaluate = app.add_subcommand("evaluate", "score a prediction file against gold labels");
    evaluate->add_option("--predictions", eval_pred, "id<TAB>label file")->required();
    evaluate->add_option("--gold", eval_gold, "labelled dataset")->required();
    evaluate->add_option("--json", eval_json, "also write the metrics as JSON");

    // predict
    std::string ckpt, pred_input, pred_out, pred_vocab, pred_config;
    auto* predict = app.add_subcommand("predict", "label a dataset with a checkpoint");
    predict->add_option("--checkpoint", ckpt, "model checkpoint")->required();
    predict->add_option("--input", pred_input, "dataset to label")->required();
    predict->add_option("--out", pred_out, "id<TAB>label output")->required();
    predict->add_option("--vocab", pred_vocab, "vocabulary (default: vocab.json beside the checkpoint)");
    predict->add_option("--config", pred_config, "run config for cleaning (default: run_config.json beside the checkpoint)");

    // synth
    cli::SynthOptions synth_opts;
    std::string synth_out;
    auto* synth = app.add_subcommand("synth", "write the synthetic code-mixed corpus");
    synth->add_option("--out-dir", synth_out, "output directory")->required();
    synth->add_option("--seed", synth_opts.seed, "generator seed")->capture_default_str();
    synth->add_option("--train-size", synth_opts.train_size)->capture_default_str();
    synth->add_option("--dev-size", synth_opts.dev_size)->capture_default_str();
    synth->add_option("--test-size", synth_opts.test_size)->capture_default_str();
    synth->add_option("--noise", synth_opts.noise, "label noise on train")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? cli::kSuccess : cli::kUsageError;
    }

    try {
        if (*preprocess) {
            pre.input = pre_input;
            pre.output = pre_output;
            pre.vocab_out = pre_vocab;
            pre.clean = cli::parse_clean_flags(clean_flags);
            cli::cmd_preprocess(pre, std::cout);
        } else if (*train) {
            cli::cmd_train({config, optional_path(train_path), optional_path(dev_path), optional_path(out_dir)}, std::cout);
        } else if (*ablate) {
            ablate_opts.config = config;
            ablate_opts.out = ablate_out;
            ablate_opts.workers = cli::worker_count_from_env();
            cli::cmd_ablate(ablate_opts, std::cout);
        } else if (*ensemble) {
            ens_opts.config = config;
            ens_opts.train = optional_path(train_path);
            ens_opts.test = optional_path(test_path);
            ens_opts.out_dir = optional_path(out_dir);
            ens_opts.workers = cli::worker_count_from_env();
            cli::cmd_ensemble(ens_opts, std::cout);
        } else if (*evaluate) {
            cli::cmd_evaluate({eval_pred, eval_gold, optional_path(eval_json)}, std::cout);
        } else if (*predict) {
            cli::cmd_predict({ckpt, pred_input, pred_out, optional_path(pred_vocab), optional_path(pred_config)}, std::cout);
        } else if (*synth) {
            synth_opts.out_dir = synth_out;
            cli::cmd_synth(synth_opts, std::cout);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return cli::exit_code_for(e);
    }
    return cli::kSuccess;
}
