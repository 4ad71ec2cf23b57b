#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "advmix/autodiff.hpp"
#include "advmix/random.hpp"
#include "advmix/text.hpp"
#include "json.hpp"

namespace advmix {

struct ModelConfig {
    std::size_t vocab_size = 2000;
    std::size_t hidden = 64;
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t ffn_dim = 128;
    std::size_t max_len = 64;
    std::size_t num_classes = 3;
    double dropout_rate = 0.1;

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

struct EncoderBlock {
    Tensor query_weight, query_bias;
    Tensor key_weight, key_bias;
    Tensor value_weight, value_bias;
    Tensor output_weight, output_bias;
    Tensor attention_norm_gain, attention_norm_bias;
    Tensor ffn_in_weight, ffn_in_bias;
    Tensor ffn_out_weight, ffn_out_bias;
    Tensor ffn_norm_gain, ffn_norm_bias;
};

/// A padded group of encoded examples. `width` is the padded sequence length
/// of this batch (the longest example when trimmed, max_len otherwise).
struct Batch {
    std::size_t size = 0;
    std::size_t width = 0;
    std::vector<int> ids;  // size * width, row-major
    std::vector<std::size_t> lengths;
    std::vector<int> labels;  // empty unless every example is labelled
};

Batch make_batch(std::span<const EncodedExample> examples, std::span<const std::size_t> indices, bool trim = true);
Batch make_batch(std::span<const EncodedExample> examples, bool trim = true);

struct ForwardOptions {
    bool train = false;
    Rng* dropout_rng = nullptr;  // required when train and dropout_rate > 0
    // Evaluate with detached parameter copies: no gradient reaches the
    // parameters and nothing parameter-dependent is recorded.
    bool frozen_parameters = false;
};

/// Transformer-encoder classifier: layer-normalized token + learned position
/// embeddings, N post-norm encoder blocks (self-attention, relu feed-forward),
/// and an affine head applied to the [CLS] position.
///
/// Copying a model deep-copies its parameters.
class ClassifierModel {
public:
    explicit ClassifierModel(const ModelConfig& config);  // zero-filled parameters
    ClassifierModel(const ClassifierModel& other);
    ClassifierModel& operator=(const ClassifierModel& other);
    ClassifierModel(ClassifierModel&&) noexcept = default;
    ClassifierModel& operator=(ClassifierModel&&) noexcept = default;

    // Weights ~ Normal(0, 0.02^2) truncated at 2 sigma; biases 0; norm gains 1.
    static ClassifierModel init(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }

    // All parameters in a fixed canonical order.
    std::vector<NamedTensor> named_parameters() const;
    std::vector<Tensor> parameters() const;
    void zero_grad();

    // Layer-normalized sum of token and position embeddings, shape [B, W, H].
    // This is the input the adversarial perturbation is added to.
    Tensor embed(Tape& tape, const Batch& batch, bool frozen_parameters = false) const;
    // Logits [B, C] from input embeddings [B, W, H].
    Tensor forward_from_embeddings(Tape& tape, const Tensor& x, std::span<const std::size_t> lengths,
                                   const ForwardOptions& options) const;
    Tensor forward(Tape& tape, const Batch& batch, const ForwardOptions& options) const;

    // Softmax of eval-mode logits, [B, 3].
    Tensor predict_proba(const Batch& batch) const;

    Tensor token_embedding;
    Tensor position_embedding;
    Tensor embedding_norm_gain;
    Tensor embedding_norm_bias;
    std::vector<EncoderBlock> blocks;
    Tensor classifier_weight;
    Tensor classifier_bias;

private:
    ModelConfig config_;
};

// Probabilities for a whole dataset, evaluated in batches; row i belongs to
// examples[i].
std::vector<std::array<double, 3>> predict_dataset(const ClassifierModel& model,
                                                   std::span<const EncodedExample> examples,
                                                   std::size_t batch_size = 64);

inline constexpr std::string_view kCheckpointMagic = "ADVMIX1";
inline constexpr int kCheckpointVersion = 1;

/// Checkpoint layout: the 7 bytes "ADVMIX1", a little-endian uint64 header
/// length, the JSON header (format version, model config, parameter manifest
/// with names, shapes and byte offsets), then the little-endian float64
/// parameter blobs in manifest order.
void save_checkpoint(const ClassifierModel& model, const std::filesystem::path& path);
ClassifierModel load_checkpoint(const std::filesystem::path& path);

}  // namespace advmix
