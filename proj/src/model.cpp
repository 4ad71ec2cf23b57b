#include "advmix/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "advmix/errors.hpp"

namespace advmix {

namespace {

constexpr double kInitStddev = 0.02;
constexpr double kMaskValue = -1e9;

}  // namespace

void ModelConfig::validate() const {
    auto positive = [](std::size_t v, const char* name) {
        if (v == 0) throw ConfigError(std::string("model.") + name + " must be positive");
    };
    positive(vocab_size, "vocab_size");
    positive(hidden, "hidden");
    positive(layers, "layers");
    positive(heads, "heads");
    positive(ffn_dim, "ffn_dim");
    positive(max_len, "max_len");
    if (hidden % heads != 0) throw ConfigError("model.hidden must be divisible by model.heads");
    if (hidden < 2) throw ConfigError("model.hidden must be at least 2");
    if (num_classes != 3) throw ConfigError("model.num_classes must be 3");
    if (max_len < 4) throw ConfigError("model.max_len must be at least 4");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("model.dropout_rate must be in [0, 1)");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"vocab_size", c.vocab_size}, {"hidden", c.hidden},   {"layers", c.layers},
                       {"heads", c.heads},           {"ffn_dim", c.ffn_dim}, {"max_len", c.max_len},
                       {"num_classes", c.num_classes}, {"dropout_rate", c.dropout_rate}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    if (!j.is_object()) throw ConfigError("model config must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        std::size_t* field = nullptr;
        if (key == "vocab_size") field = &c.vocab_size;
        else if (key == "hidden") field = &c.hidden;
        else if (key == "layers") field = &c.layers;
        else if (key == "heads") field = &c.heads;
        else if (key == "ffn_dim") field = &c.ffn_dim;
        else if (key == "max_len") field = &c.max_len;
        else if (key == "num_classes") field = &c.num_classes;
        else if (key == "dropout_rate") {
            if (!value.is_number()) throw ConfigError("model.dropout_rate must be a number");
            c.dropout_rate = value.get<double>();
            continue;
        } else {
            throw ConfigError("unknown model config key '" + key + "'");
        }
        const bool non_negative =
            value.is_number_unsigned() || (value.is_number_integer() && value.get<std::int64_t>() >= 0);
        if (!non_negative) throw ConfigError("model." + key + " must be a non-negative integer");
        *field = value.get<std::size_t>();
    }
}

// ---- batching -------------------------------------------------------------

Batch make_batch(std::span<const EncodedExample> examples, std::span<const std::size_t> indices, bool trim) {
    if (indices.empty()) throw ContractError("make_batch: empty batch");
    Batch batch;
    batch.size = indices.size();
    std::size_t width = 0;
    bool labelled = true;
    for (auto i : indices) {
        const auto& ex = examples[i];
        width = std::max(width, trim ? ex.length : ex.ids.size());
        labelled = labelled && ex.label.has_value();
    }
    batch.width = width;
    batch.ids.reserve(batch.size * width);
    for (auto i : indices) {
        const auto& ex = examples[i];
        if (ex.length < 2 || ex.length > ex.ids.size()) throw ContractError("make_batch: malformed encoded example");
        for (std::size_t t = 0; t < width; ++t) batch.ids.push_back(t < ex.ids.size() ? ex.ids[t] : kPadId);
        batch.lengths.push_back(ex.length);
        if (labelled) batch.labels.push_back(*ex.label);
    }
    return batch;
}

Batch make_batch(std::span<const EncodedExample> examples, bool trim) {
    std::vector<std::size_t> all(examples.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return make_batch(examples, all, trim);
}

// ---- model ----------------------------------------------------------------

ClassifierModel::ClassifierModel(const ModelConfig& config) : config_(config) {
    config_.validate();
    const std::size_t h = config.hidden, f = config.ffn_dim;
    auto param = [](Shape shape, double fill) { return Tensor::filled(std::move(shape), fill, true); };
    token_embedding = param({config.vocab_size, h}, 0.0);
    position_embedding = param({config.max_len, h}, 0.0);
    embedding_norm_gain = param({h}, 1.0);
    embedding_norm_bias = param({h}, 0.0);
    for (std::size_t l = 0; l < config.layers; ++l) {
        EncoderBlock b;
        b.query_weight = param({h, h}, 0.0);
        b.query_bias = param({h}, 0.0);
        b.key_weight = param({h, h}, 0.0);
        b.key_bias = param({h}, 0.0);
        b.value_weight = param({h, h}, 0.0);
        b.value_bias = param({h}, 0.0);
        b.output_weight = param({h, h}, 0.0);
        b.output_bias = param({h}, 0.0);
        b.attention_norm_gain = param({h}, 1.0);
        b.attention_norm_bias = param({h}, 0.0);
        b.ffn_in_weight = param({h, f}, 0.0);
        b.ffn_in_bias = param({f}, 0.0);
        b.ffn_out_weight = param({f, h}, 0.0);
        b.ffn_out_bias = param({h}, 0.0);
        b.ffn_norm_gain = param({h}, 1.0);
        b.ffn_norm_bias = param({h}, 0.0);
        blocks.push_back(std::move(b));
    }
    classifier_weight = param({h, config.num_classes}, 0.0);
    classifier_bias = param({config.num_classes}, 0.0);
}

ClassifierModel::ClassifierModel(const ClassifierModel& other) : ClassifierModel(other.config_) {
    auto dst = named_parameters();
    auto src = other.named_parameters();
    for (std::size_t i = 0; i < dst.size(); ++i) {
        std::ranges::copy(src[i].tensor.values(), dst[i].tensor.mutable_values().begin());
    }
}

ClassifierModel& ClassifierModel::operator=(const ClassifierModel& other) {
    if (this != &other) *this = ClassifierModel(other);
    return *this;
}

std::vector<NamedTensor> ClassifierModel::named_parameters() const {
    std::vector<NamedTensor> out;
    out.push_back({"embeddings.token", token_embedding});
    out.push_back({"embeddings.position", position_embedding});
    out.push_back({"embeddings.norm.gain", embedding_norm_gain});
    out.push_back({"embeddings.norm.bias", embedding_norm_bias});
    for (std::size_t l = 0; l < blocks.size(); ++l) {
        const auto& b = blocks[l];
        const std::string p = "blocks." + std::to_string(l) + ".";
        out.push_back({p + "attention.query.weight", b.query_weight});
        out.push_back({p + "attention.query.bias", b.query_bias});
        out.push_back({p + "attention.key.weight", b.key_weight});
        out.push_back({p + "attention.key.bias", b.key_bias});
        out.push_back({p + "attention.value.weight", b.value_weight});
        out.push_back({p + "attention.value.bias", b.value_bias});
        out.push_back({p + "attention.output.weight", b.output_weight});
        out.push_back({p + "attention.output.bias", b.output_bias});
        out.push_back({p + "attention.norm.gain", b.attention_norm_gain});
        out.push_back({p + "attention.norm.bias", b.attention_norm_bias});
        out.push_back({p + "ffn.in.weight", b.ffn_in_weight});
        out.push_back({p + "ffn.in.bias", b.ffn_in_bias});
        out.push_back({p + "ffn.out.weight", b.ffn_out_weight});
        out.push_back({p + "ffn.out.bias", b.ffn_out_bias});
        out.push_back({p + "ffn.norm.gain", b.ffn_norm_gain});
        out.push_back({p + "ffn.norm.bias", b.ffn_norm_bias});
    }
    out.push_back({"classifier.weight", classifier_weight});
    out.push_back({"classifier.bias", classifier_bias});
    return out;
}

std::vector<Tensor> ClassifierModel::parameters() const {
    std::vector<Tensor> out;
    for (auto& p : named_parameters()) out.push_back(p.tensor);
    return out;
}

void ClassifierModel::zero_grad() {
    for (auto& p : parameters()) p.zero_grad();
}

ClassifierModel ClassifierModel::init(const ModelConfig& config, std::uint64_t seed) {
    ClassifierModel model(config);
    Rng rng(seed);
    for (auto& [name, tensor] : model.named_parameters()) {
        const bool is_weight = name.ends_with(".weight") || name == "embeddings.token" || name == "embeddings.position";
        if (!is_weight) continue;
        for (auto& v : tensor.mutable_values()) v = rng.truncated_normal(kInitStddev);
    }
    return model;
}

Tensor ClassifierModel::embed(Tape& tape, const Batch& batch, bool frozen_parameters) const {
    const std::size_t h = config_.hidden;
    if (batch.width > config_.max_len) {
        throw ShapeError("batch width " + std::to_string(batch.width) + " exceeds max_len " +
                         std::to_string(config_.max_len));
    }
    std::vector<int> positions(batch.size * batch.width);
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i % batch.width);
    const Tensor tokens_table = frozen_parameters ? stop_gradient(token_embedding) : token_embedding;
    const Tensor positions_table = frozen_parameters ? stop_gradient(position_embedding) : position_embedding;
    Tensor tokens = embedding_lookup(tape, tokens_table, batch.ids);
    Tensor pos = gather_rows(tape, positions_table, positions);
    const Tensor gain = frozen_parameters ? stop_gradient(embedding_norm_gain) : embedding_norm_gain;
    const Tensor bias = frozen_parameters ? stop_gradient(embedding_norm_bias) : embedding_norm_bias;
    return reshape(tape, layer_norm(tape, add(tape, tokens, pos), gain, bias), {batch.size, batch.width, h});
}

Tensor ClassifierModel::forward_from_embeddings(Tape& tape, const Tensor& x, std::span<const std::size_t> lengths,
                                                const ForwardOptions& options) const {
    const std::size_t h = config_.hidden, heads = config_.heads, head_dim = h / heads;
    if (x.rank() != 3 || x.dim(2) != h) {
        throw ShapeError("forward: expected embeddings [B x W x " + std::to_string(h) + "], got " + shape_string(x.shape()));
    }
    const std::size_t batch = x.dim(0), width = x.dim(1);
    if (lengths.size() != batch) throw ShapeError("forward: lengths do not match batch size");
    for (auto len : lengths) {
        if (len < 1 || len > width) throw ContractError("forward: sequence length outside [1, width]");
    }
    for (double v : x.values()) {
        if (!std::isfinite(v)) throw NumericError("forward: non-finite input embedding");
    }
    const double rate = config_.dropout_rate;
    const bool use_dropout = options.train && rate > 0.0;
    if (use_dropout && options.dropout_rng == nullptr) throw ContractError("forward: train mode needs a dropout rng");
    auto P = [&](const Tensor& t) { return options.frozen_parameters ? stop_gradient(t) : t; };
    auto drop = [&](const Tensor& t) { return use_dropout ? dropout(tape, t, rate, *options.dropout_rng) : t; };

    std::vector<double> mask(batch * heads * width * width, 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t a = 0; a < heads; ++a) {
            double* m = mask.data() + (b * heads + a) * width * width;
            for (std::size_t i = 0; i < width; ++i)
                for (std::size_t j = lengths[b]; j < width; ++j) m[i * width + j] = kMaskValue;
        }
    }
    const Tensor key_mask({batch * heads, width, width}, std::move(mask));
    const double score_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

    auto split_heads = [&](const Tensor& t) {
        Tensor r = reshape(tape, t, {batch, width, heads, head_dim});
        r = permute(tape, r, {0, 2, 1, 3});
        return reshape(tape, r, {batch * heads, width, head_dim});
    };
    auto linear = [&](const Tensor& in, const Tensor& w, const Tensor& bias) {
        return add(tape, matmul(tape, in, P(w)), P(bias));
    };

    Tensor hidden = reshape(tape, drop(x), {batch * width, h});
    for (const auto& blk : blocks) {
        Tensor q = split_heads(linear(hidden, blk.query_weight, blk.query_bias));
        Tensor k = split_heads(linear(hidden, blk.key_weight, blk.key_bias));
        Tensor v = split_heads(linear(hidden, blk.value_weight, blk.value_bias));
        Tensor scores = scale(tape, matmul(tape, q, transpose(tape, k)), score_scale);
        Tensor attn = softmax(tape, add(tape, scores, key_mask));
        Tensor ctx = matmul(tape, attn, v);
        ctx = reshape(tape, ctx, {batch, heads, width, head_dim});
        ctx = permute(tape, ctx, {0, 2, 1, 3});
        ctx = reshape(tape, ctx, {batch * width, h});
        Tensor attended = drop(linear(ctx, blk.output_weight, blk.output_bias));
        hidden = layer_norm(tape, add(tape, hidden, attended), P(blk.attention_norm_gain), P(blk.attention_norm_bias));

        Tensor inner = relu(tape, linear(hidden, blk.ffn_in_weight, blk.ffn_in_bias));
        Tensor ffn = drop(linear(inner, blk.ffn_out_weight, blk.ffn_out_bias));
        hidden = layer_norm(tape, add(tape, hidden, ffn), P(blk.ffn_norm_gain), P(blk.ffn_norm_bias));
    }
    std::vector<int> cls_rows(batch);
    for (std::size_t b = 0; b < batch; ++b) cls_rows[b] = static_cast<int>(b * width);
    Tensor cls = gather_rows(tape, hidden, cls_rows);
    return linear(cls, classifier_weight, classifier_bias);
}

Tensor ClassifierModel::forward(Tape& tape, const Batch& batch, const ForwardOptions& options) const {
    Tensor x = embed(tape, batch, options.frozen_parameters);
    return forward_from_embeddings(tape, x, batch.lengths, options);
}

Tensor ClassifierModel::predict_proba(const Batch& batch) const {
    Tape tape;
    ForwardOptions options;
    options.frozen_parameters = true;
    return softmax(tape, forward(tape, batch, options));
}

std::vector<std::array<double, 3>> predict_dataset(const ClassifierModel& model,
                                                   std::span<const EncodedExample> examples, std::size_t batch_size) {
    std::vector<std::array<double, 3>> out;
    out.reserve(examples.size());
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < examples.size(); start += batch_size) {
        idx.clear();
        for (std::size_t i = start; i < std::min(examples.size(), start + batch_size); ++i) idx.push_back(i);
        const Tensor probs = model.predict_proba(make_batch(examples, idx));
        for (std::size_t r = 0; r < idx.size(); ++r) out.push_back({probs[r * 3], probs[r * 3 + 1], probs[r * 3 + 2]});
    }
    return out;
}

// ---- checkpoints ----------------------------------------------------------

namespace {

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return v;
}

}  // namespace

void save_checkpoint(const ClassifierModel& model, const std::filesystem::path& path) {
    nlohmann::json manifest = nlohmann::json::array();
    std::uint64_t offset = 0;
    const auto params = model.named_parameters();
    for (const auto& [name, tensor] : params) {
        manifest.push_back({{"name", name}, {"shape", tensor.shape()}, {"offset", offset}, {"count", tensor.numel()}});
        offset += tensor.numel() * sizeof(double);
    }
    nlohmann::json header{{"format_version", kCheckpointVersion},
                          {"config", model.config()},
                          {"parameters", manifest},
                          {"data_bytes", offset}};
    const std::string header_text = header.dump();

    std::string bytes(kCheckpointMagic);
    put_u64(bytes, header_text.size());
    bytes += header_text;
    bytes.reserve(bytes.size() + offset);
    for (const auto& [name, tensor] : params) {
        for (double v : tensor.values()) put_u64(bytes, std::bit_cast<std::uint64_t>(v));
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
}

ClassifierModel load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot read checkpoint " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::size_t prefix = kCheckpointMagic.size() + 8;
    auto corrupt = [&](const std::string& why) { return CheckpointError("corrupt checkpoint " + path.string() + ": " + why); };
    if (bytes.size() < prefix || std::string_view(bytes).substr(0, kCheckpointMagic.size()) != kCheckpointMagic) {
        throw corrupt("missing ADVMIX1 magic");
    }
    const std::uint64_t header_len = get_u64(bytes.data() + kCheckpointMagic.size());
    if (header_len > bytes.size() - prefix) throw corrupt("truncated header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(prefix),
                                       bytes.begin() + static_cast<std::ptrdiff_t>(prefix + header_len));
    } catch (const nlohmann::json::exception& e) {
        throw corrupt(std::string("unreadable header: ") + e.what());
    }
    try {
        const int version = header.at("format_version").get<int>();
        if (version != kCheckpointVersion) {
            throw CheckpointError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                                  std::to_string(kCheckpointVersion) + ")");
        }
        ModelConfig config = header.at("config").get<ModelConfig>();
        ClassifierModel model(config);
        const auto params = model.named_parameters();
        const auto& manifest = header.at("parameters");
        if (manifest.size() != params.size()) throw CheckpointError("parameter count does not match the model config");
        const std::size_t data_start = prefix + header_len;
        const std::uint64_t data_bytes = header.at("data_bytes").get<std::uint64_t>();
        if (bytes.size() - data_start != data_bytes) throw corrupt("parameter data is truncated or has trailing bytes");
        for (std::size_t i = 0; i < params.size(); ++i) {
            const auto& entry = manifest[i];
            Tensor t = params[i].tensor;
            if (entry.at("name").get<std::string>() != params[i].name) {
                throw CheckpointError("unexpected parameter '" + entry.at("name").get<std::string>() + "'");
            }
            if (entry.at("shape").get<Shape>() != t.shape()) {
                throw CheckpointError("shape mismatch for " + params[i].name + ": file " +
                                      shape_string(entry.at("shape").get<Shape>()) + " vs config " +
                                      shape_string(t.shape()));
            }
            const std::uint64_t off = entry.at("offset").get<std::uint64_t>();
            if (off + t.numel() * 8 > data_bytes) throw corrupt("parameter offset out of range");
            const char* src = bytes.data() + data_start + off;
            auto dst = t.mutable_values();
            for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = std::bit_cast<double>(get_u64(src + 8 * k));
        }
        return model;
    } catch (const nlohmann::json::exception& e) {
        throw corrupt(std::string("bad header field: ") + e.what());
    } catch (const ConfigError& e) {
        throw corrupt(std::string("bad config: ") + e.what());
    }
}

}  // namespace advmix
