#include "advmix/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>

#include "advmix/errors.hpp"

namespace advmix {

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << 'x';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
    for (auto d : shape) {
        if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape));
    }
    if (shape_numel(shape) != values.size()) {
        throw ShapeError("shape " + shape_string(shape) + " does not hold " + std::to_string(values.size()) +
                         " values");
    }
    data_ = std::make_shared<detail::TensorData>();
    data_->shape = std::move(shape);
    data_->values = std::move(values);
    data_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return filled(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::filled(Shape shape, double value, bool requires_grad) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_string(shape()));
    return data_->values[0];
}

void Tensor::set_requires_grad(bool flag) {
    if (!is_leaf()) throw TapeError("requires_grad can only be changed on leaf tensors");
    data_->requires_grad = flag;
}

std::span<const double> Tensor::grad() const {
    if (data_->grad.empty()) throw TapeError("tensor has no gradient");
    return data_->grad;
}

std::span<double> Tensor::mutable_grad() const {
    if (data_->grad.empty()) data_->grad.assign(data_->values.size(), 0.0);
    return data_->grad;
}

Tensor Tensor::clone() const {
    Tensor copy(data_->shape, data_->values, data_->requires_grad);
    return copy;
}

// ---- Tape -----------------------------------------------------------------

namespace {
std::atomic<std::uint64_t> next_tape_id{1};
}

Tape::Tape() : id_(next_tape_id.fetch_add(1)) {}

void Tape::check_usable(std::span<const Tensor> inputs) const {
    if (consumed_) throw TapeError("tape already consumed by a backward pass");
    for (const auto& t : inputs) {
        if (!t.defined()) throw TapeError("undefined tensor passed to an op");
        const auto owner = t.data_->tape_id;
        if (owner != 0 && owner != id_ && t.requires_grad()) {
            throw TapeError("tensor was produced on a different tape");
        }
    }
}

Tensor Tape::record(Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
                    BackwardFn backward) {
    return record(std::move(shape), std::move(values), std::span<const Tensor>(inputs.begin(), inputs.size()),
                  std::move(backward));
}

Tensor Tape::record(Shape shape, std::vector<double> values, std::span<const Tensor> inputs,
                    BackwardFn backward) {
    check_usable(inputs);
    const bool needs_grad = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    Tensor out(std::move(shape), std::move(values), needs_grad);
    if (needs_grad) {
        out.data_->tape_id = id_;
        nodes_.push_back(Node{out, std::move(backward)});
    }
    return out;
}

void Tape::backward(const Tensor& loss) {
    if (consumed_) throw TapeError("tape already consumed by a backward pass");
    if (!loss.defined() || loss.numel() != 1) {
        throw TapeError("backward requires a scalar loss, got " + (loss.defined() ? shape_string(loss.shape()) : "undefined"));
    }
    if (loss.data_->tape_id != id_) throw TapeError("loss was not produced on this tape");
    consumed_ = true;

    Tensor seed = loss;
    seed.mutable_grad()[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (!it->output.has_grad()) continue;
        it->backward(it->output.grad());
    }
    nodes_.clear();
    nodes_.shrink_to_fit();
}

void backward(const Tensor& loss, Tape& tape) { tape.backward(loss); }

// ---- helpers --------------------------------------------------------------

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
    }
}

void require_finite(std::span<const double> values, const char* op) {
    for (double v : values) {
        if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
    }
}

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* __restrict a, const double* __restrict b,
             double* __restrict c) {
    for (std::size_t i = 0; i < m; ++i) {
        double* __restrict crow = c + i * n;
        const double* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* __restrict brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// dA[m,k] += dC[m,n] * B[k,n]^T, via an explicit transpose of B so the inner
// loop is a contiguous axpy.
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* dc, const double* b, double* da) {
    thread_local std::vector<double> bt;
    bt.resize(k * n);
    for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
    gemm_nn(m, n, k, dc, bt.data(), da);
}

// dB[k,n] += A[m,k]^T * dC[m,n]
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* __restrict a, const double* __restrict dc,
             double* __restrict db) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* drow = dc + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            double* __restrict brow = db + p * n;
            for (std::size_t j = 0; j < n; ++j) brow[j] += av * drow[j];
        }
    }
}

std::size_t last_dim(const Tensor& t) { return t.shape().back(); }

std::vector<std::size_t> strides_of(const Shape& shape) {
    std::vector<std::size_t> strides(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
    return strides;
}

// Softmax rows over the trailing axis into `out`.
void softmax_rows(std::span<const double> in, std::size_t cols, std::span<double> out) {
    const std::size_t rows = in.size() / cols;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = in.data() + r * cols;
        double* y = out.data() + r * cols;
        const double mx = *std::max_element(x, x + cols);
        double total = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            y[c] = std::exp(x[c] - mx);
            total += y[c];
        }
        const double inv = 1.0 / total;
        for (std::size_t c = 0; c < cols; ++c) y[c] *= inv;
    }
}

// log-softmax rows over the trailing axis into `out`.
void log_softmax_rows(std::span<const double> in, std::size_t cols, std::span<double> out) {
    const std::size_t rows = in.size() / cols;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = in.data() + r * cols;
        double* y = out.data() + r * cols;
        const double mx = *std::max_element(x, x + cols);
        double total = 0.0;
        for (std::size_t c = 0; c < cols; ++c) total += std::exp(x[c] - mx);
        const double lse = mx + std::log(total);
        for (std::size_t c = 0; c < cols; ++c) y[c] = x[c] - lse;
    }
}

}  // namespace

// ---- ops ------------------------------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    const bool batched = a.rank() == 3 && b.rank() == 3;
    const bool plain = a.rank() == 2 && b.rank() == 2;
    const std::size_t off = batched ? 1 : 0;
    if ((!batched && !plain) || (batched && a.dim(0) != b.dim(0)) || a.dim(off + 1) != b.dim(off)) {
        throw ShapeError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
    }
    const std::size_t batch = batched ? a.dim(0) : 1;
    const std::size_t m = a.dim(off), k = a.dim(off + 1), n = b.dim(off + 1);
    std::vector<double> out(batch * m * n, 0.0);
    for (std::size_t s = 0; s < batch; ++s) {
        gemm_nn(m, k, n, a.values().data() + s * m * k, b.values().data() + s * k * n, out.data() + s * m * n);
    }
    Shape shape = batched ? Shape{batch, m, n} : Shape{m, n};
    return tape.record(std::move(shape), std::move(out), {a, b}, [a, b, batch, m, k, n](std::span<const double> g) mutable {
        for (std::size_t s = 0; s < batch; ++s) {
            const double* gs = g.data() + s * m * n;
            if (a.requires_grad()) gemm_nt(m, k, n, gs, b.values().data() + s * k * n, a.mutable_grad().data() + s * m * k);
            if (b.requires_grad()) gemm_tn(m, k, n, a.values().data() + s * m * k, gs, b.mutable_grad().data() + s * k * n);
        }
    });
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    const auto& as = a.shape();
    const auto& bs = b.shape();
    const bool suffix = bs.size() <= as.size() && std::equal(bs.rbegin(), bs.rend(), as.rbegin());
    if (!suffix) {
        throw ShapeError("add: shape mismatch " + shape_string(as) + " vs " + shape_string(bs));
    }
    const std::size_t inner = b.numel();
    std::vector<double> out(a.values().begin(), a.values().end());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % inner];
    return tape.record(as, std::move(out), {a, b}, [a, b, inner](std::span<const double> g) mutable {
        if (a.requires_grad()) {
            auto ga = a.mutable_grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (b.requires_grad()) {
            auto gb = b.mutable_grad();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i % inner] += g[i];
        }
    });
}

Tensor multiply(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "multiply");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return tape.record(a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) mutable {
        if (a.requires_grad()) {
            auto ga = a.mutable_grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
        }
        if (b.requires_grad()) {
            auto gb = b.mutable_grad();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
        }
    });
}

Tensor scale(Tape& tape, const Tensor& x, double factor) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
    return tape.record(x.shape(), std::move(out), {x}, [x, factor](std::span<const double> g) mutable {
        auto gx = x.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
    });
}

Tensor relu(Tape& tape, const Tensor& x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
    return tape.record(x.shape(), std::move(out), {x}, [x](std::span<const double> g) mutable {
        auto gx = x.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (x[i] > 0.0) gx[i] += g[i];
        }
    });
}

Tensor transpose(Tape& tape, const Tensor& x) {
    if (x.rank() != 2 && x.rank() != 3) throw ShapeError("transpose: expected rank 2 or 3, got " + shape_string(x.shape()));
    const std::size_t batch = x.rank() == 3 ? x.dim(0) : 1;
    const std::size_t rows = x.dim(x.rank() - 2), cols = x.dim(x.rank() - 1);
    std::vector<double> out(x.numel());
    for (std::size_t s = 0; s < batch; ++s) {
        const double* src = x.values().data() + s * rows * cols;
        double* dst = out.data() + s * rows * cols;
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
    }
    Shape shape = x.shape();
    std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
    return tape.record(std::move(shape), std::move(out), {x}, [x, batch, rows, cols](std::span<const double> g) mutable {
        auto gx = x.mutable_grad();
        for (std::size_t s = 0; s < batch; ++s) {
            const double* src = g.data() + s * rows * cols;
            double* dst = gx.data() + s * rows * cols;
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < cols; ++j) dst[i * cols + j] += src[j * rows + i];
        }
    });
}

Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
    }
    std::vector<double> out(x.values().begin(), x.values().end());
    return tape.record(std::move(shape), std::move(out), {x}, [x](std::span<const double> g) mutable {
        auto gx = x.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

Tensor permute(Tape& tape, const Tensor& x, const std::vector<std::size_t>& axes) {
    const std::size_t rank = x.rank();
    std::vector<bool> seen(rank, false);
    if (axes.size() != rank) throw ShapeError("permute: axis list does not match rank of " + shape_string(x.shape()));
    for (auto ax : axes) {
        if (ax >= rank || seen[ax]) throw ShapeError("permute: invalid axis list");
        seen[ax] = true;
    }
    Shape out_shape(rank);
    for (std::size_t i = 0; i < rank; ++i) out_shape[i] = x.dim(axes[i]);
    const auto in_strides = strides_of(x.shape());
    // source offset for each output position
    std::vector<std::size_t> source(x.numel());
    std::vector<std::size_t> index(rank, 0);
    for (std::size_t flat = 0; flat < source.size(); ++flat) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < rank; ++i) off += index[i] * in_strides[axes[i]];
        source[flat] = off;
        for (std::size_t i = rank; i-- > 0;) {
            if (++index[i] < out_shape[i]) break;
            index[i] = 0;
        }
    }
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[source[i]];
    return tape.record(std::move(out_shape), std::move(out), {x},
                       [x, source = std::move(source)](std::span<const double> g) mutable {
                           auto gx = x.mutable_grad();
                           for (std::size_t i = 0; i < g.size(); ++i) gx[source[i]] += g[i];
                       });
}

Tensor concat(Tape& tape, std::span<const Tensor> parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& first = parts.front().shape();
    if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_string(first));
    std::size_t total_axis = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == first.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
        if (!ok) throw ShapeError("concat: incompatible shapes " + shape_string(first) + " and " + shape_string(s));
        total_axis += s[axis];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
    for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
    Shape shape = first;
    shape[axis] = total_axis;
    std::vector<double> out(shape_numel(shape));
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t chunk = p.dim(axis) * inner;
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(p.values().data() + o * chunk, chunk, out.data() + o * total_axis * inner + offset);
        }
        offset += chunk;
    }
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    return tape.record(std::move(shape), std::move(out), std::span<const Tensor>(inputs),
                       [inputs, axis, outer, inner, total_axis](std::span<const double> g) mutable {
                           std::size_t offset = 0;
                           for (auto& p : inputs) {
                               const std::size_t chunk = p.dim(axis) * inner;
                               if (p.requires_grad()) {
                                   auto gp = p.mutable_grad();
                                   for (std::size_t o = 0; o < outer; ++o) {
                                       const double* src = g.data() + o * total_axis * inner + offset;
                                       for (std::size_t i = 0; i < chunk; ++i) gp[o * chunk + i] += src[i];
                                   }
                               }
                               offset += chunk;
                           }
                       });
}

Tensor sum(Tape& tape, const Tensor& x) {
    double total = 0.0;
    for (double v : x.values()) total += v;
    return tape.record({1}, {total}, {x}, [x](std::span<const double> g) mutable {
        auto gx = x.mutable_grad();
        for (auto& v : gx) v += g[0];
    });
}

Tensor mean(Tape& tape, const Tensor& x) {
    double total = 0.0;
    for (double v : x.values()) total += v;
    const double n = static_cast<double>(x.numel());
    return tape.record({1}, {total / n}, {x}, [x, n](std::span<const double> g) mutable {
        auto gx = x.mutable_grad();
        for (auto& v : gx) v += g[0] / n;
    });
}

Tensor l2_norm(Tape& tape, const Tensor& x) {
    double sq = 0.0;
    for (double v : x.values()) sq += v * v;
    const double norm = std::sqrt(sq);
    return tape.record({1}, {norm}, {x}, [x, norm](std::span<const double> g) mutable {
        if (norm == 0.0) return;
        auto gx = x.mutable_grad();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0] * x[i] / norm;
    });
}

Tensor softmax(Tape& tape, const Tensor& logits) {
    require_finite(logits.values(), "softmax");
    const std::size_t cols = last_dim(logits);
    std::vector<double> out(logits.numel());
    softmax_rows(logits.values(), cols, out);
    std::vector<double> probs(out);
    return tape.record(logits.shape(), std::move(out), {logits},
                       [logits, cols, probs = std::move(probs)](std::span<const double> g) mutable {
                           auto gx = logits.mutable_grad();
                           const std::size_t rows = g.size() / cols;
                           for (std::size_t r = 0; r < rows; ++r) {
                               const double* y = probs.data() + r * cols;
                               const double* gy = g.data() + r * cols;
                               double dot = 0.0;
                               for (std::size_t c = 0; c < cols; ++c) dot += gy[c] * y[c];
                               for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += y[c] * (gy[c] - dot);
                           }
                       });
}

Tensor log_softmax(Tape& tape, const Tensor& logits) {
    require_finite(logits.values(), "log_softmax");
    const std::size_t cols = last_dim(logits);
    std::vector<double> out(logits.numel());
    log_softmax_rows(logits.values(), cols, out);
    std::vector<double> probs(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) probs[i] = std::exp(out[i]);
    return tape.record(logits.shape(), std::move(out), {logits},
                       [logits, cols, probs = std::move(probs)](std::span<const double> g) mutable {
                           auto gx = logits.mutable_grad();
                           const std::size_t rows = g.size() / cols;
                           for (std::size_t r = 0; r < rows; ++r) {
                               const double* gy = g.data() + r * cols;
                               double total = 0.0;
                               for (std::size_t c = 0; c < cols; ++c) total += gy[c];
                               for (std::size_t c = 0; c < cols; ++c)
                                   gx[r * cols + c] += gy[c] - probs[r * cols + c] * total;
                           }
                       });
}

Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> labels) {
    if (logits.rank() != 2) throw ShapeError("cross_entropy: expected [B x C] logits, got " + shape_string(logits.shape()));
    const std::size_t rows = logits.dim(0), cols = logits.dim(1);
    if (labels.size() != rows) {
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) + " rows");
    }
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= cols) {
            throw IndexError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(cols) + ")");
        }
    }
    require_finite(logits.values(), "cross_entropy");
    std::vector<double> logp(logits.numel());
    log_softmax_rows(logits.values(), cols, logp);
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) total -= logp[r * cols + labels[r]];
    std::vector<int> gold(labels.begin(), labels.end());
    return tape.record({1}, {total / static_cast<double>(rows)}, {logits},
                       [logits, rows, cols, gold = std::move(gold), logp = std::move(logp)](std::span<const double> g) mutable {
                           auto gx = logits.mutable_grad();
                           const double w = g[0] / static_cast<double>(rows);
                           for (std::size_t r = 0; r < rows; ++r) {
                               for (std::size_t c = 0; c < cols; ++c) {
                                   const double onehot = static_cast<int>(c) == gold[r] ? 1.0 : 0.0;
                                   gx[r * cols + c] += w * (std::exp(logp[r * cols + c]) - onehot);
                               }
                           }
                       });
}

Tensor kl_divergence(Tape& tape, const Tensor& p, const Tensor& q_logits) {
    require_same_shape(p, q_logits, "kl_divergence");
    if (p.rank() != 2) throw ShapeError("kl_divergence: expected [B x C] inputs, got " + shape_string(p.shape()));
    const std::size_t rows = p.dim(0), cols = p.dim(1);
    std::vector<double> target(p.values().begin(), p.values().end());
    std::vector<double> row_mass(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            const double v = target[r * cols + c];
            if (!(v >= 0.0) || !std::isfinite(v)) throw ContractError("kl_divergence: p contains a negative or non-finite entry");
            s += v;
        }
        if (std::abs(s - 1.0) > 1e-8) {
            throw ContractError("kl_divergence: row " + std::to_string(r) + " of p sums to " + std::to_string(s));
        }
        row_mass[r] = s;
    }
    require_finite(q_logits.values(), "kl_divergence");
    std::vector<double> logq(q_logits.numel());
    log_softmax_rows(q_logits.values(), cols, logq);
    double total = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        if (target[i] > 0.0) total += target[i] * (std::log(target[i]) - logq[i]);
    }
    return tape.record({1}, {total / static_cast<double>(rows)}, {q_logits},
                       [q = q_logits, rows, cols, target = std::move(target), row_mass = std::move(row_mass),
                        logq = std::move(logq)](std::span<const double> g) mutable {
                           auto gq = q.mutable_grad();
                           const double w = g[0] / static_cast<double>(rows);
                           for (std::size_t r = 0; r < rows; ++r) {
                               for (std::size_t c = 0; c < cols; ++c) {
                                   const std::size_t i = r * cols + c;
                                   gq[i] += w * (row_mass[r] * std::exp(logq[i]) - target[i]);
                               }
                           }
                       });
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias) {
    const std::size_t h = last_dim(x);
    if (h < 2) throw ShapeError("layer_norm: trailing dimension must be at least 2");
    if (gain.shape() != Shape{h} || bias.shape() != Shape{h}) {
        throw ShapeError("layer_norm: gain/bias must have shape [" + std::to_string(h) + "]");
    }
    const std::size_t rows = x.numel() / h;
    std::vector<double> xhat(x.numel());
    std::vector<double> inv_std(rows);
    std::vector<double> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.values().data() + r * h;
        double mu = 0.0;
        for (std::size_t c = 0; c < h; ++c) mu += xr[c];
        mu /= static_cast<double>(h);
        double var = 0.0;
        for (std::size_t c = 0; c < h; ++c) var += (xr[c] - mu) * (xr[c] - mu);
        var /= static_cast<double>(h);
        const double is = 1.0 / std::sqrt(var + kLayerNormEpsilon);
        inv_std[r] = is;
        for (std::size_t c = 0; c < h; ++c) {
            const double n = (xr[c] - mu) * is;
            xhat[r * h + c] = n;
            out[r * h + c] = n * gain[c] + bias[c];
        }
    }
    return tape.record(x.shape(), std::move(out), {x, gain, bias},
                       [x, gain, bias, h, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                           std::span<const double> g) mutable {
                           if (gain.requires_grad()) {
                               auto gg = gain.mutable_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) gg[i % h] += g[i] * xhat[i];
                           }
                           if (bias.requires_grad()) {
                               auto gb = bias.mutable_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) gb[i % h] += g[i];
                           }
                           if (!x.requires_grad()) return;
                           auto gx = x.mutable_grad();
                           const double inv_h = 1.0 / static_cast<double>(h);
                           for (std::size_t r = 0; r < rows; ++r) {
                               double mean_d = 0.0, mean_dx = 0.0;
                               for (std::size_t c = 0; c < h; ++c) {
                                   const double d = g[r * h + c] * gain[c];
                                   mean_d += d;
                                   mean_dx += d * xhat[r * h + c];
                               }
                               mean_d *= inv_h;
                               mean_dx *= inv_h;
                               for (std::size_t c = 0; c < h; ++c) {
                                   const double d = g[r * h + c] * gain[c];
                                   gx[r * h + c] += inv_std[r] * (d - mean_d - xhat[r * h + c] * mean_dx);
                               }
                           }
                       });
}

Tensor gather_rows(Tape& tape, const Tensor& table, std::span<const int> rows) {
    if (table.rank() != 2) throw ShapeError("gather_rows: expected a rank-2 table, got " + shape_string(table.shape()));
    if (rows.empty()) throw ShapeError("gather_rows: empty row list");
    const std::size_t n = table.dim(0), h = table.dim(1);
    for (int id : rows) {
        if (id < 0 || static_cast<std::size_t>(id) >= n) {
            throw IndexError("row id " + std::to_string(id) + " outside [0, " + std::to_string(n) + ")");
        }
    }
    std::vector<double> out(rows.size() * h);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy_n(table.values().data() + static_cast<std::size_t>(rows[i]) * h, h, out.data() + i * h);
    }
    std::vector<int> ids(rows.begin(), rows.end());
    return tape.record({rows.size(), h}, std::move(out), {table},
                       [table, h, ids = std::move(ids)](std::span<const double> g) mutable {
                           auto gt = table.mutable_grad();
                           for (std::size_t i = 0; i < ids.size(); ++i) {
                               double* dst = gt.data() + static_cast<std::size_t>(ids[i]) * h;
                               const double* src = g.data() + i * h;
                               for (std::size_t c = 0; c < h; ++c) dst[c] += src[c];
                           }
                       });
}

Tensor embedding_lookup(Tape& tape, const Tensor& table, std::span<const int> ids) {
    return gather_rows(tape, table, ids);
}

Tensor dropout(Tape& tape, const Tensor& x, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) throw ContractError("dropout: rate must be in [0, 1)");
    if (rate == 0.0) return x;
    const double keep = 1.0 / (1.0 - rate);
    std::vector<double> mask(x.numel());
    for (auto& m : mask) m = rng.uniform() < rate ? 0.0 : keep;
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * mask[i];
    return tape.record(x.shape(), std::move(out), {x}, [x, mask = std::move(mask)](std::span<const double> g) mutable {
        auto gx = x.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
    });
}

Tensor stop_gradient(const Tensor& x) {
    return Tensor(x.shape(), std::vector<double>(x.values().begin(), x.values().end()), false);
}

}  // namespace advmix
