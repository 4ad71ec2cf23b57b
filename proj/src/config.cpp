#include "advmix/config.hpp"

#include <fstream>

#include "advmix/errors.hpp"

namespace advmix {

namespace fs = std::filesystem;

RunConfig RunConfig::parse(const nlohmann::json& j, const fs::path& base_dir) {
    if (!j.is_object()) throw ConfigError("run config must be a JSON object");
    RunConfig cfg;
    auto resolve = [&](const nlohmann::json& v, const std::string& key) -> fs::path {
        if (!v.is_string()) throw ConfigError(key + " must be a path string");
        fs::path p = v.get<std::string>();
        return p.is_absolute() ? p : base_dir / p;
    };
    for (const auto& [key, value] : j.items()) {
        if (key == "clean") {
            cfg.clean = value.get<CleanConfig>();
        } else if (key == "model") {
            cfg.model = value.get<ModelConfig>();
            cfg.vocab_size_from_vocabulary = !value.contains("vocab_size");
        } else if (key == "train") {
            // "adv" may already have been read (keys iterate in sorted order).
            const AdvConfig adv = cfg.train.adv;
            cfg.train = value.get<TrainConfig>();
            cfg.train.adv = adv;
        } else if (key == "adv") {
            cfg.train.adv = value.get<AdvConfig>();
        } else if (key == "data") {
            if (!value.is_object()) throw ConfigError("data must be a JSON object");
            for (const auto& [dk, dv] : value.items()) {
                const std::string name = "data." + dk;
                if (dk == "vocab") cfg.data.vocab = resolve(dv, name);
                else if (dk == "train") cfg.data.train = resolve(dv, name);
                else if (dk == "dev") cfg.data.dev = resolve(dv, name);
                else if (dk == "test") cfg.data.test = resolve(dv, name);
                else throw ConfigError("unknown data key '" + dk + "'");
            }
        } else if (key == "output_dir") {
            cfg.output_dir = resolve(value, "output_dir");
        } else {
            throw ConfigError("unknown config key '" + key + "'");
        }
    }
    return cfg;
}

RunConfig RunConfig::load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    try {
        return parse(j, path.parent_path());
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
}

void RunConfig::validate() const {
    if (!vocab_size_from_vocabulary) model.validate();
    else {
        ModelConfig probe = model;
        probe.vocab_size = 1;
        probe.validate();
    }
    train.validate();
    for (const auto* p : {&data.vocab, &data.train, &data.dev, &data.test}) {
        if (*p && !fs::exists(**p)) throw ConfigError("path does not exist: " + (*p)->string());
    }
}

nlohmann::json RunConfig::to_json() const {
    nlohmann::json data = nlohmann::json::object();
    if (this->data.vocab) data["vocab"] = this->data.vocab->string();
    if (this->data.train) data["train"] = this->data.train->string();
    if (this->data.dev) data["dev"] = this->data.dev->string();
    if (this->data.test) data["test"] = this->data.test->string();
    nlohmann::json j{{"clean", clean}, {"model", model}, {"train", train}, {"adv", train.adv}, {"data", data}};
    if (output_dir) j["output_dir"] = output_dir->string();
    return j;
}

}  // namespace advmix
