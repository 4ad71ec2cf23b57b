#pragma once

// Define-by-run reverse-mode automatic differentiation over dense float64
// tensors. Every differentiable op takes the Tape it records onto; an op whose
// inputs are all constants records nothing and returns a constant.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "advmix/random.hpp"

namespace advmix {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {
struct TensorData {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty until a gradient is accumulated
    bool requires_grad = false;
    std::uint64_t tape_id = 0;  // 0 for leaves and constants
};
}  // namespace detail

/// Handle to a shared tensor buffer. Copying a Tensor aliases the same
/// storage (like a framework tensor handle); use clone() for a deep copy.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor filled(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return data_ != nullptr; }
    const Shape& shape() const { return data_->shape; }
    std::size_t rank() const { return data_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return data_->shape.at(axis); }
    std::size_t numel() const { return data_->values.size(); }

    std::span<const double> values() const { return data_->values; }
    std::span<double> mutable_values() const { return data_->values; }
    double item() const;
    double operator[](std::size_t i) const { return data_->values[i]; }

    bool requires_grad() const { return data_->requires_grad; }
    void set_requires_grad(bool flag);
    bool is_leaf() const { return data_->tape_id == 0; }

    bool has_grad() const { return !data_->grad.empty(); }
    std::span<const double> grad() const;
    // Returns the gradient buffer, allocating zeros on first use.
    std::span<double> mutable_grad() const;
    void zero_grad() const { data_->grad.clear(); }

    Tensor clone() const;
    bool same_storage(const Tensor& other) const { return data_ == other.data_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorData> data) : data_(std::move(data)) {}
    std::shared_ptr<detail::TensorData> data_;

    friend class Tape;
};

/// Ordered record of executed operations. Consumed by exactly one backward
/// pass; recording onto or differentiating a consumed tape throws TapeError.
/// A tape belongs to one thread.
class Tape {
public:
    using BackwardFn = std::function<void(std::span<const double> out_grad)>;

    Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::uint64_t id() const { return id_; }
    bool consumed() const { return consumed_; }
    std::size_t size() const { return nodes_.size(); }

    // Creates the output of an op. When any input requires a gradient the op
    // is appended to the tape and the output is differentiable; otherwise the
    // output is a constant and `backward` is dropped.
    Tensor record(Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
                  BackwardFn backward);
    Tensor record(Shape shape, std::vector<double> values, std::span<const Tensor> inputs,
                  BackwardFn backward);

    void backward(const Tensor& loss);

private:
    struct Node {
        Tensor output;
        BackwardFn backward;
    };

    void check_usable(std::span<const Tensor> inputs) const;

    std::uint64_t id_;
    bool consumed_ = false;
    std::vector<Node> nodes_;
};

// Seeds d(loss)/d(loss) = 1 and propagates through `tape` in reverse order.
void backward(const Tensor& loss, Tape& tape);

// ---- differentiable ops -------------------------------------------------

// 2-D product [m,k]x[k,n], or batched [b,m,k]x[b,k,n].
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
// Elementwise sum; b may also match a trailing suffix of a's shape (broadcast).
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor multiply(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& x, double factor);
Tensor relu(Tape& tape, const Tensor& x);
// Swaps the last two axes (rank 2 or 3).
Tensor transpose(Tape& tape, const Tensor& x);
Tensor reshape(Tape& tape, const Tensor& x, Shape shape);
Tensor permute(Tape& tape, const Tensor& x, const std::vector<std::size_t>& axes);
Tensor concat(Tape& tape, std::span<const Tensor> parts, std::size_t axis);
Tensor sum(Tape& tape, const Tensor& x);
Tensor mean(Tape& tape, const Tensor& x);
// sqrt(sum(x^2)) as a scalar; the gradient at x = 0 is taken as 0.
Tensor l2_norm(Tape& tape, const Tensor& x);

// Softmax over the last axis, max-subtracted.
Tensor softmax(Tape& tape, const Tensor& logits);
Tensor log_softmax(Tape& tape, const Tensor& logits);
// Mean over rows of -log softmax(logits)[label].
Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> labels);
// Mean over rows of sum_c p_c (log p_c - log_softmax(q_logits)_c), with
// 0 log 0 = 0. `p` is treated as a constant; rows must sum to 1 within 1e-8.
Tensor kl_divergence(Tape& tape, const Tensor& p, const Tensor& q_logits);
// Normalizes over the last axis (population variance, epsilon 1e-5), then
// applies gain and bias of shape [H].
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias);
// Row gather from a rank-2 tensor; the gradient scatters additively.
Tensor gather_rows(Tape& tape, const Tensor& table, std::span<const int> rows);
Tensor embedding_lookup(Tape& tape, const Tensor& table, std::span<const int> ids);
// Inverted dropout: zeroes each entry with probability `rate` and rescales
// survivors by 1/(1-rate).
Tensor dropout(Tape& tape, const Tensor& x, double rate, Rng& rng);

inline constexpr double kLayerNormEpsilon = 1e-5;

// Same values, detached: no gradient flows through the result.
Tensor stop_gradient(const Tensor& x);

}  // namespace advmix
