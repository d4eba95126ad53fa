#pragma once

// Dense reverse-mode automatic differentiation over row-major tensors.
//
// Every primitive computes its forward value eagerly and, when given a tape
// and at least one input that requires a gradient, records a closure that
// propagates the output gradient into its inputs. Tape::backward replays the
// closures in reverse recording order, which is a valid topological order
// because a primitive can only consume tensors that already exist.

#include "geoformer/error.hpp"
#include "geoformer/rng.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace geoformer::ag {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

/// Tensor storage. Eigen's vectorized kernels peel a different number of
/// leading scalars depending on the address, so unaligned storage would make
/// results depend on where the allocator happened to put a buffer.
template <typename S>
using Buffer = std::vector<S, Eigen::aligned_allocator<S>>;

template <typename S>
struct Node {
    Shape shape;
    Buffer<S> value;
    Buffer<S> grad;
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), S(0));
    }
};

template <typename S>
class Tensor {
  public:
    Tensor() = default;

    Tensor(Shape shape, const std::vector<S>& values, bool requires_grad = false)
        : Tensor(std::move(shape), Buffer<S>(values.begin(), values.end()), requires_grad) {}
    Tensor(Shape shape, std::initializer_list<S> values, bool requires_grad = false)
        : Tensor(std::move(shape), Buffer<S>(values), requires_grad) {}
    Tensor(Shape shape, Buffer<S> values, bool requires_grad = false)
        : node_(std::make_shared<Node<S>>()) {
        if (shape.empty()) throw ShapeError("tensor needs at least one dimension");
        for (auto d : shape)
            if (d == 0) throw ShapeError("zero-sized dimension in " + shape_str(shape));
        if (values.size() != numel_of(shape))
            throw ShapeError(std::to_string(values.size()) + " values for shape " + shape_str(shape));
        node_->shape = std::move(shape);
        node_->value = std::move(values);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = numel_of(shape);
        return Tensor(std::move(shape), Buffer<S>(n, S(0)), requires_grad);
    }

    static Tensor scalar(S v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }
    bool requires_grad() const { return node_->requires_grad; }

    std::span<S> data() { return node_->value; }
    std::span<const S> data() const { return node_->value; }
    S item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }
    S operator[](std::size_t i) const { return node_->value[i]; }

    /// Gradient buffer; allocated (zero-filled) on first access.
    std::span<S> grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    bool has_grad() const { return node_->grad.size() == node_->value.size(); }
    void zero_grad() { node_->grad.assign(node_->value.size(), S(0)); }

    const std::shared_ptr<Node<S>>& node() const { return node_; }

  private:
    std::shared_ptr<Node<S>> node_;
};

template <typename S>
class Tape {
  public:
    using Fn = std::function<void()>;

    void record(std::shared_ptr<Node<S>> output, Fn backward) {
        entries_.push_back({std::move(output), std::move(backward)});
    }

    std::size_t size() const { return entries_.size(); }
    void clear() { entries_.clear(); }

    /// Populates gradients of every tensor reachable from `loss`. Recorded
    /// intermediates are reset first, so calling this twice accumulates
    /// exactly twice into leaf tensors.
    void backward(const Tensor<S>& loss) {
        if (loss.numel() != 1) throw ShapeError("backward needs a scalar loss, got " + shape_str(loss.shape()));
        for (auto& e : entries_) e.output->grad.assign(e.output->value.size(), S(0));
        loss.node()->ensure_grad();
        loss.node()->grad[0] += S(1);
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
    }

  private:
    struct Entry {
        std::shared_ptr<Node<S>> output;
        Fn backward;
    };
    std::vector<Entry> entries_;
};

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<RowMat<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const RowMat<S>>;

namespace detail {

template <typename S>
bool tracks(Tape<S>* tape, std::initializer_list<const Tensor<S>*> inputs) {
    if (!tape) return false;
    for (auto* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

template <typename S>
Tensor<S> make_output(Shape shape, Buffer<S> values, bool track) {
    return Tensor<S>(std::move(shape), std::move(values), track);
}

inline void expect(bool cond, const std::string& what) {
    if (!cond) throw ShapeError(what);
}

/// Uninitialized storage with the same alignment as Buffer.
template <typename S>
std::shared_ptr<S[]> aligned_array(std::size_t n) {
    return std::shared_ptr<S[]>(static_cast<S*>(Eigen::internal::aligned_malloc(n * sizeof(S))),
                                [](S* p) { Eigen::internal::aligned_free(p); });
}

/// Bernoulli(rate) draws cut from 16-bit lanes of one 64-bit word, four
/// per engine call. The rate is quantized to 1/65536.
class DropDraw {
  public:
    DropDraw(Rng& rng, double rate)
        : rng_(rng), threshold_(static_cast<std::uint32_t>(std::lround(rate * 65536.0))) {}

    bool drop() {
        if (left_ == 0) {
            word_ = rng_.next_u64();
            left_ = 4;
        }
        const auto lane = static_cast<std::uint32_t>(word_ & 0xFFFF);
        word_ >>= 16;
        --left_;
        return lane < threshold_;
    }

  private:
    Rng& rng_;
    std::uint32_t threshold_;
    std::uint64_t word_ = 0;
    int left_ = 0;
};

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename S>
Tensor<S> add(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
    detail::expect(a.shape() == b.shape(), "add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Buffer<S> out(a.numel());
    auto av = a.data();
    auto bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    const bool track = detail::tracks(tape, {&a, &b});
    auto y = detail::make_output(a.shape(), std::move(out), track);
    if (track) {
        tape->record(y.node(), [an = a.node(), bn = b.node(), yn = y.node()] {
            for (auto* n : {an.get(), bn.get()}) {
                if (!n->requires_grad) continue;
                n->ensure_grad();
                for (std::size_t i = 0; i < yn->grad.size(); ++i) n->grad[i] += yn->grad[i];
            }
        });
    }
    return y;
}

template <typename S>
Tensor<S> mul(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
    detail::expect(a.shape() == b.shape(), "mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Buffer<S> out(a.numel());
    auto av = a.data();
    auto bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    const bool track = detail::tracks(tape, {&a, &b});
    auto y = detail::make_output(a.shape(), std::move(out), track);
    if (track) {
        tape->record(y.node(), [an = a.node(), bn = b.node(), yn = y.node()] {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < yn->grad.size(); ++i) an->grad[i] += yn->grad[i] * bn->value[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < yn->grad.size(); ++i) bn->grad[i] += yn->grad[i] * an->value[i];
            }
        });
    }
    return y;
}

template <typename S>
Tensor<S> scale(Tape<S>* tape, const Tensor<S>& a, S factor) {
    Buffer<S> out(a.numel());
    auto av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
    const bool track = detail::tracks(tape, {&a});
    auto y = detail::make_output(a.shape(), std::move(out), track);
    if (track) {
        tape->record(y.node(), [an = a.node(), yn = y.node(), factor] {
            an->ensure_grad();
            for (std::size_t i = 0; i < yn->grad.size(); ++i) an->grad[i] += yn->grad[i] * factor;
        });
    }
    return y;
}

/// Adds a bias vector to every row of x[N, C].
template <typename S>
Tensor<S> add_bias(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& bias) {
    detail::expect(x.rank() == 2 && bias.numel() == x.dim(1),
                   "add_bias: " + shape_str(x.shape()) + " + " + shape_str(bias.shape()));
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    Buffer<S> out(x.numel());
    auto xv = x.data();
    auto bv = bias.data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xv[r * cols + c] + bv[c];
    const bool track = detail::tracks(tape, {&x, &bias});
    auto y = detail::make_output(x.shape(), std::move(out), track);
    if (track) {
        tape->record(y.node(), [xn = x.node(), bn = bias.node(), yn = y.node(), rows, cols] {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::size_t i = 0; i < yn->grad.size(); ++i) xn->grad[i] += yn->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) bn->grad[c] += yn->grad[r * cols + c];
            }
        });
    }
    return y;
}

template <typename S>
Tensor<S> sum(Tape<S>* tape, const Tensor<S>& a) {
    S total = 0;
    for (auto v : a.data()) total += v;
    const bool track = detail::tracks(tape, {&a});
    auto y = detail::make_output<S>({1}, {total}, track);
    if (track) {
        tape->record(y.node(), [an = a.node(), yn = y.node()] {
            an->ensure_grad();
            for (auto& g : an->grad) g += yn->grad[0];
        });
    }
    return y;
}

namespace detail {

inline constexpr double kGeluK = 0.7978845608028654; // sqrt(2 / pi)
inline constexpr double kGeluC = 0.044715;

/// out = gelu(x) over n values; out may alias x.
template <typename S>
void gelu_values(const S* x, S* out, Eigen::Index n) {
    using Arr = Eigen::Array<S, Eigen::Dynamic, 1>;
    Eigen::Map<const Arr> xv(x, n);
    Eigen::Map<Arr>(out, n) = S(0.5) * xv * (S(1) + (S(kGeluK) * (xv + S(kGeluC) * xv.cube())).tanh());
}

} // namespace detail

/// GELU, tanh approximation.
template <typename S>
Tensor<S> gelu(Tape<S>* tape, const Tensor<S>& a) {
    using Arr = Eigen::Array<S, Eigen::Dynamic, 1>;
    using ArrMap = Eigen::Map<Arr>;
    using ConstArrMap = Eigen::Map<const Arr>;
    const auto n = static_cast<Eigen::Index>(a.numel());
    Buffer<S> out(a.numel());
    detail::gelu_values(a.data().data(), out.data(), n);
    const bool track = detail::tracks(tape, {&a});
    auto y = detail::make_output(a.shape(), std::move(out), track);
    if (track) {
        tape->record(y.node(), [an = a.node(), yn = y.node(), n] {
            an->ensure_grad();
            constexpr S k = S(detail::kGeluK);
            constexpr S c = S(detail::kGeluC);
            ConstArrMap xv(an->value.data(), n);
            const Arr th = (k * (xv + c * xv.cube())).tanh();
            const Arr slope = S(0.5) * (S(1) + th) + S(0.5) * xv * (S(1) - th.square()) * k * (S(1) + S(3) * c * xv.square());
            ArrMap(an->grad.data(), n) += ConstArrMap(yn->grad.data(), n) * slope;
        });
    }
    return y;
}

/// Inverted dropout: in training mode each element is zeroed with
/// probability `rate` and survivors are scaled by 1 / (1 - rate). Outside
/// training, or at rate 0, the input tensor itself is returned.
template <typename S>
Tensor<S> dropout(Tape<S>* tape, const Tensor<S>& a, double rate, Rng* rng, bool training) {
    if (!training || rate <= 0.0) return a;
    if (rate >= 1.0) throw ConfigError("dropout rate must be below 1");
    if (!rng) throw ConfigError("dropout in training mode needs a random source");
    const S keep_scale = S(1) / S(1.0 - rate);
    detail::DropDraw draw(*rng, rate);
    Buffer<S> mask(a.numel());
    for (auto& m : mask) m = draw.drop() ? S(0) : keep_scale;
    Buffer<S> out(a.numel());
    auto av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * mask[i];
    const bool track = detail::tracks(tape, {&a});
    auto y = detail::make_output(a.shape(), std::move(out), track);
    if (track) {
        tape->record(y.node(), [an = a.node(), yn = y.node(), mask = std::move(mask)] {
            an->ensure_grad();
            for (std::size_t i = 0; i < yn->grad.size(); ++i) an->grad[i] += yn->grad[i] * mask[i];
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename S>
Tensor<S> reshape(Tape<S>* tape, const Tensor<S>& a, Shape shape) {
    detail::expect(numel_of(shape) == a.numel(), "reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
    Buffer<S> out(a.data().begin(), a.data().end());
    const bool track = detail::tracks(tape, {&a});
    auto y = detail::make_output(std::move(shape), std::move(out), track);
    if (track) {
        tape->record(y.node(), [an = a.node(), yn = y.node()] {
            an->ensure_grad();
            for (std::size_t i = 0; i < yn->grad.size(); ++i) an->grad[i] += yn->grad[i];
        });
    }
    return y;
}

/// Swaps the last two axes of a rank-2 or rank-3 tensor.
template <typename S>
Tensor<S> transpose(Tape<S>* tape, const Tensor<S>& a) {
    detail::expect(a.rank() == 2 || a.rank() == 3, "transpose needs rank 2 or 3, got " + shape_str(a.shape()));
    const std::size_t g = a.rank() == 3 ? a.dim(0) : 1;
    const std::size_t m = a.dim(a.rank() - 2), n = a.dim(a.rank() - 1);
    Buffer<S> out(a.numel());
    auto av = a.data();
    for (std::size_t b = 0; b < g; ++b)
        MatMap<S>(out.data() + b * m * n, n, m) = ConstMatMap<S>(av.data() + b * m * n, m, n).transpose();
    Shape shape = a.shape();
    std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
    const bool track = detail::tracks(tape, {&a});
    auto y = detail::make_output(std::move(shape), std::move(out), track);
    if (track) {
        tape->record(y.node(), [an = a.node(), yn = y.node(), g, m, n] {
            an->ensure_grad();
            for (std::size_t b = 0; b < g; ++b)
                MatMap<S>(an->grad.data() + b * m * n, m, n) +=
                    ConstMatMap<S>(yn->grad.data() + b * m * n, n, m).transpose();
        });
    }
    return y;
}

/// [A, B, C, D] -> [A, C, B, D]. Used to move attention heads next to the
/// batch axis and back.
template <typename S>
Tensor<S> permute_0213(Tape<S>* tape, const Tensor<S>& a) {
    detail::expect(a.rank() == 4, "permute_0213 needs rank 4, got " + shape_str(a.shape()));
    const std::size_t A = a.dim(0), B = a.dim(1), C = a.dim(2), D = a.dim(3);
    Buffer<S> out(a.numel());
    auto av = a.data();
    for (std::size_t i = 0; i < A; ++i)
        for (std::size_t j = 0; j < B; ++j)
            for (std::size_t k = 0; k < C; ++k)
                std::copy_n(av.data() + ((i * B + j) * C + k) * D, D, out.data() + ((i * C + k) * B + j) * D);
    const bool track = detail::tracks(tape, {&a});
    auto y = detail::make_output<S>({A, C, B, D}, std::move(out), track);
    if (track) {
        tape->record(y.node(), [an = a.node(), yn = y.node(), A, B, C, D] {
            an->ensure_grad();
            for (std::size_t i = 0; i < A; ++i)
                for (std::size_t j = 0; j < B; ++j)
                    for (std::size_t k = 0; k < C; ++k) {
                        S* dst = an->grad.data() + ((i * B + j) * C + k) * D;
                        const S* src = yn->grad.data() + ((i * C + k) * B + j) * D;
                        for (std::size_t l = 0; l < D; ++l) dst[l] += src[l];
                    }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Products

template <typename S>
Tensor<S> matmul(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
    detail::expect(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                   "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Buffer<S> out(m * n);
    MatMap<S>(out.data(), m, n).noalias() = ConstMatMap<S>(a.data().data(), m, k) * ConstMatMap<S>(b.data().data(), k, n);
    const bool track = detail::tracks(tape, {&a, &b});
    auto y = detail::make_output<S>({m, n}, std::move(out), track);
    if (track) {
        tape->record(y.node(), [an = a.node(), bn = b.node(), yn = y.node(), m, k, n] {
            ConstMatMap<S> g(yn->grad.data(), m, n);
            if (an->requires_grad) {
                an->ensure_grad();
                MatMap<S>(an->grad.data(), m, k).noalias() += g * ConstMatMap<S>(bn->value.data(), k, n).transpose();
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                MatMap<S>(bn->grad.data(), k, n).noalias() += ConstMatMap<S>(an->value.data(), m, k).transpose() * g;
            }
        });
    }
    return y;
}

/// Batched product a[G, m, k] x b[G, k, n] -> [G, m, n].
template <typename S>
Tensor<S> bmm(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
    detail::expect(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1),
                   "bmm: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::size_t G = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    Buffer<S> out(G * m * n);
    for (std::size_t g = 0; g < G; ++g)
        MatMap<S>(out.data() + g * m * n, m, n).noalias() =
            ConstMatMap<S>(a.data().data() + g * m * k, m, k) * ConstMatMap<S>(b.data().data() + g * k * n, k, n);
    const bool track = detail::tracks(tape, {&a, &b});
    auto y = detail::make_output<S>({G, m, n}, std::move(out), track);
    if (track) {
        tape->record(y.node(), [an = a.node(), bn = b.node(), yn = y.node(), G, m, k, n] {
            if (an->requires_grad) an->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (std::size_t g = 0; g < G; ++g) {
                ConstMatMap<S> gy(yn->grad.data() + g * m * n, m, n);
                if (an->requires_grad)
                    MatMap<S>(an->grad.data() + g * m * k, m, k).noalias() +=
                        gy * ConstMatMap<S>(bn->value.data() + g * k * n, k, n).transpose();
                if (bn->requires_grad)
                    MatMap<S>(bn->grad.data() + g * k * n, k, n).noalias() +=
                        ConstMatMap<S>(an->value.data() + g * m * k, m, k).transpose() * gy;
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Normalization and attention pieces

inline constexpr double kMaskValue = -1e9;

/// Adds kMaskValue above the diagonal of every [T, T] slice of x[G, T, T].
template <typename S>
Tensor<S> causal_mask(Tape<S>* tape, const Tensor<S>& a) {
    detail::expect(a.rank() == 3 && a.dim(1) == a.dim(2), "causal_mask needs [G, T, T], got " + shape_str(a.shape()));
    const std::size_t G = a.dim(0), T = a.dim(1);
    Buffer<S> out(a.data().begin(), a.data().end());
    for (std::size_t g = 0; g < G; ++g)
        for (std::size_t i = 0; i < T; ++i)
            for (std::size_t j = i + 1; j < T; ++j) out[(g * T + i) * T + j] += S(kMaskValue);
    const bool track = detail::tracks(tape, {&a});
    auto y = detail::make_output(a.shape(), std::move(out), track);
    if (track) {
        tape->record(y.node(), [an = a.node(), yn = y.node()] {
            an->ensure_grad();
            for (std::size_t i = 0; i < yn->grad.size(); ++i) an->grad[i] += yn->grad[i];
        });
    }
    return y;
}

/// Softmax over the last axis, with max subtraction.
template <typename S>
Tensor<S> softmax(Tape<S>* tape, const Tensor<S>& a) {
    const std::size_t n = a.shape().back();
    const std::size_t rows = a.numel() / n;
    Buffer<S> out(a.numel());
    auto av = a.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const S* x = av.data() + r * n;
        S* p = out.data() + r * n;
        const S mx = *std::max_element(x, x + n);
        S total = 0;
        for (std::size_t j = 0; j < n; ++j) total += p[j] = std::exp(x[j] - mx);
        const S inv = S(1) / total;
        for (std::size_t j = 0; j < n; ++j) p[j] *= inv;
    }
    const bool track = detail::tracks(tape, {&a});
    auto y = detail::make_output(a.shape(), std::move(out), track);
    if (track) {
        tape->record(y.node(), [an = a.node(), yn = y.node(), rows, n] {
            an->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const S* p = yn->value.data() + r * n;
                const S* g = yn->grad.data() + r * n;
                S dot = 0;
                for (std::size_t j = 0; j < n; ++j) dot += p[j] * g[j];
                S* ga = an->grad.data() + r * n;
                for (std::size_t j = 0; j < n; ++j) ga[j] += p[j] * (g[j] - dot);
            }
        });
    }
    return y;
}

/// Causal scaled dot-product attention over q, k, v [G, T, hd]:
///   softmax(mask(q k^T * scale)) with dropout on the weights, times v.
/// Equivalent to composing bmm, scale, causal_mask, softmax, dropout and bmm,
/// but only the lower triangle of each [T, T] slice is ever computed.
template <typename S>
Tensor<S> causal_attention(Tape<S>* tape, const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v, S scale,
                           double rate = 0.0, Rng* rng = nullptr, bool training = false) {
    detail::expect(q.rank() == 3 && q.shape() == k.shape() && q.shape() == v.shape(),
                   "causal_attention: " + shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                       shape_str(v.shape()));
    const bool drop = training && rate > 0.0;
    if (drop && rate >= 1.0) throw ConfigError("dropout rate must be below 1");
    if (drop && !rng) throw ConfigError("dropout in training mode needs a random source");
    const std::size_t G = q.dim(0), T = q.dim(1), D = q.dim(2);
    const S keep_scale = drop ? S(1) / S(1.0 - rate) : S(1);
    using Row = Eigen::Map<Eigen::Array<S, 1, Eigen::Dynamic>>;

    // Only lower triangles are written or read; the rest stays uninitialized.
    auto probs = detail::aligned_array<S>(G * T * T);
    auto mask = drop ? detail::aligned_array<S>(G * T * T) : std::shared_ptr<S[]>();
    Buffer<S> out(G * T * D);
    RowMat<S> scores(T, T), weights(T, T);
    std::optional<detail::DropDraw> draw;
    if (drop) draw.emplace(*rng, rate);

    for (std::size_t g = 0; g < G; ++g) {
        ConstMatMap<S> qg(q.data().data() + g * T * D, T, D);
        ConstMatMap<S> kg(k.data().data() + g * T * D, T, D);
        ConstMatMap<S> vg(v.data().data() + g * T * D, T, D);
        scores.template triangularView<Eigen::Lower>() = qg * kg.transpose();
        for (std::size_t i = 0; i < T; ++i) {
            const auto n = static_cast<Eigen::Index>(i + 1);
            Row p(probs.get() + (g * T + i) * T, n);
            Row w(weights.row(i).data(), n);
            p = scores.row(i).head(n).array() * scale;
            p = (p - p.maxCoeff()).exp();
            p /= p.sum();
            if (drop) {
                Row m(mask.get() + (g * T + i) * T, n);
                for (Eigen::Index j = 0; j < n; ++j) m[j] = draw->drop() ? S(0) : keep_scale;
                w = p * m;
            } else {
                w = p;
            }
        }
        MatMap<S>(out.data() + g * T * D, T, D).noalias() = weights.template triangularView<Eigen::Lower>() * vg;
    }

    const bool track = detail::tracks(tape, {&q, &k, &v});
    auto y = detail::make_output<S>({G, T, D}, std::move(out), track);
    if (track) {
        tape->record(y.node(), [qn = q.node(), kn = k.node(), vn = v.node(), yn = y.node(), probs, mask, G, T, D,
                                scale, drop] {
            for (auto* n : {qn.get(), kn.get(), vn.get()})
                if (n->requires_grad) n->ensure_grad();
            RowMat<S> weights(T, T), dweights(T, T);
            for (std::size_t g = 0; g < G; ++g) {
                ConstMatMap<S> dy(yn->grad.data() + g * T * D, T, D);
                ConstMatMap<S> qg(qn->value.data() + g * T * D, T, D);
                ConstMatMap<S> kg(kn->value.data() + g * T * D, T, D);
                ConstMatMap<S> vg(vn->value.data() + g * T * D, T, D);
                dweights.template triangularView<Eigen::Lower>() = dy * vg.transpose();
                for (std::size_t i = 0; i < T; ++i) {
                    const auto n = static_cast<Eigen::Index>(i + 1);
                    Row p(probs.get() + (g * T + i) * T, n);
                    Row w(weights.row(i).data(), n);
                    Row dw(dweights.row(i).data(), n);
                    if (drop) {
                        Row m(mask.get() + (g * T + i) * T, n);
                        w = p * m;
                        dw *= m;
                    } else {
                        w = p;
                    }
                    // dweights becomes the score gradient in place
                    const S dot = (p * dw).sum();
                    dw = p * (dw - dot) * scale;
                }
                if (vn->requires_grad)
                    MatMap<S>(vn->grad.data() + g * T * D, T, D).noalias() +=
                        weights.template triangularView<Eigen::Lower>().transpose() * dy;
                if (qn->requires_grad)
                    MatMap<S>(qn->grad.data() + g * T * D, T, D).noalias() +=
                        dweights.template triangularView<Eigen::Lower>() * kg;
                if (kn->requires_grad)
                    MatMap<S>(kn->grad.data() + g * T * D, T, D).noalias() +=
                        dweights.template triangularView<Eigen::Lower>().transpose() * qg;
            }
        });
    }
    return y;
}

/// Layer normalization over the last axis of x[N, C].
template <typename S>
Tensor<S> layer_norm(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias,
                     S eps = S(1e-5)) {
    detail::expect(x.rank() == 2 && gain.numel() == x.dim(1) && bias.numel() == x.dim(1),
                   "layer_norm: " + shape_str(x.shape()) + " with gain " + shape_str(gain.shape()));
    const std::size_t rows = x.dim(0), C = x.dim(1);
    Buffer<S> out(x.numel()), xhat(x.numel()), rstd(rows);
    auto xv = x.data();
    auto gv = gain.data();
    auto bv = bias.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const S* row = xv.data() + r * C;
        S mean = 0;
        for (std::size_t c = 0; c < C; ++c) mean += row[c];
        mean /= S(C);
        S var = 0;
        for (std::size_t c = 0; c < C; ++c) var += (row[c] - mean) * (row[c] - mean);
        var /= S(C);
        rstd[r] = S(1) / std::sqrt(var + eps);
        for (std::size_t c = 0; c < C; ++c) {
            const S h = (row[c] - mean) * rstd[r];
            xhat[r * C + c] = h;
            out[r * C + c] = h * gv[c] + bv[c];
        }
    }
    const bool track = detail::tracks(tape, {&x, &gain, &bias});
    auto y = detail::make_output(x.shape(), std::move(out), track);
    if (track) {
        tape->record(y.node(), [xn = x.node(), gn = gain.node(), bn = bias.node(), yn = y.node(),
                                xhat = std::move(xhat), rstd = std::move(rstd), rows, C] {
            if (gn->requires_grad) gn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            if (xn->requires_grad) xn->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const S* g = yn->grad.data() + r * C;
                const S* h = xhat.data() + r * C;
                S mean_gh = 0, mean_ghh = 0;
                for (std::size_t c = 0; c < C; ++c) {
                    const S gh = g[c] * gn->value[c];
                    mean_gh += gh;
                    mean_ghh += gh * h[c];
                    if (gn->requires_grad) gn->grad[c] += g[c] * h[c];
                    if (bn->requires_grad) bn->grad[c] += g[c];
                }
                if (!xn->requires_grad) continue;
                mean_gh /= S(C);
                mean_ghh /= S(C);
                S* gx = xn->grad.data() + r * C;
                for (std::size_t c = 0; c < C; ++c)
                    gx[c] += rstd[r] * (g[c] * gn->value[c] - mean_gh - h[c] * mean_ghh);
            }
        });
    }
    return y;
}

/// Gathers rows of table[V, C]; backward scatter-adds into the gathered rows.
template <typename S>
Tensor<S> embedding(Tape<S>* tape, const Tensor<S>& table, std::span<const int> ids) {
    detail::expect(table.rank() == 2, "embedding table must be rank 2");
    detail::expect(!ids.empty(), "embedding with no ids");
    const std::size_t V = table.dim(0), C = table.dim(1);
    Buffer<S> out(ids.size() * C);
    auto tv = table.data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V)
            throw RangeError("embedding id " + std::to_string(ids[i]) + " outside [0, " + std::to_string(V) + ")");
        std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * C, C, out.data() + i * C);
    }
    const bool track = detail::tracks(tape, {&table});
    auto y = detail::make_output<S>({ids.size(), C}, std::move(out), track);
    if (track) {
        tape->record(y.node(), [tn = table.node(), yn = y.node(), ids = std::vector<int>(ids.begin(), ids.end()), C] {
            tn->ensure_grad();
            for (std::size_t i = 0; i < ids.size(); ++i) {
                S* dst = tn->grad.data() + static_cast<std::size_t>(ids[i]) * C;
                const S* src = yn->grad.data() + i * C;
                for (std::size_t c = 0; c < C; ++c) dst[c] += src[c];
            }
        });
    }
    return y;
}

inline constexpr int kIgnoreTarget = -1;

/// Mean cross-entropy of logits[N, V] against targets; rows whose target is
/// kIgnoreTarget are excluded from the mean.
template <typename S>
Tensor<S> cross_entropy(Tape<S>* tape, const Tensor<S>& logits, std::span<const int> targets) {
    detail::expect(logits.rank() == 2 && logits.dim(0) == targets.size(),
                   "cross_entropy: logits " + shape_str(logits.shape()) + " vs " + std::to_string(targets.size()) + " targets");
    const std::size_t N = logits.dim(0), V = logits.dim(1);
    std::size_t counted = 0;
    for (auto t : targets) {
        if (t == kIgnoreTarget) continue;
        if (t < 0 || static_cast<std::size_t>(t) >= V) throw RangeError("target id " + std::to_string(t) + " outside vocabulary");
        ++counted;
    }
    if (counted == 0) throw ConfigError("cross_entropy: every position is ignored");

    Buffer<S> probs(N * V, S(0));
    auto lv = logits.data();
    S total = 0;
    for (std::size_t r = 0; r < N; ++r) {
        if (targets[r] == kIgnoreTarget) continue;
        const S* x = lv.data() + r * V;
        S* p = probs.data() + r * V;
        const S mx = *std::max_element(x, x + V);
        S z = 0;
        for (std::size_t j = 0; j < V; ++j) z += p[j] = std::exp(x[j] - mx);
        for (std::size_t j = 0; j < V; ++j) p[j] /= z;
        total += -(x[targets[r]] - mx - std::log(z));
    }
    const S inv_count = S(1) / S(counted);
    const bool track = detail::tracks(tape, {&logits});
    auto y = detail::make_output<S>({1}, {total * inv_count}, track);
    if (track) {
        tape->record(y.node(), [ln = logits.node(), yn = y.node(), probs = std::move(probs),
                                tg = std::vector<int>(targets.begin(), targets.end()), N, V, inv_count] {
            ln->ensure_grad();
            const S g = yn->grad[0] * inv_count;
            for (std::size_t r = 0; r < N; ++r) {
                if (tg[r] == kIgnoreTarget) continue;
                S* dst = ln->grad.data() + r * V;
                const S* p = probs.data() + r * V;
                for (std::size_t j = 0; j < V; ++j) dst[j] += g * p[j];
                dst[tg[r]] -= g;
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Gradient checking

/// Compares the analytic gradient of the scalar function `f` at `x` with
/// central differences. Returns the largest
///   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
/// over all coordinates of x.
template <typename S, typename F>
double grad_check(F&& f, Tensor<S>& x, double step = 1e-5) {
    Tape<S> tape;
    x.zero_grad();
    Tensor<S> y = f(&tape, x);
    tape.backward(y);
    const Buffer<S> analytic(x.grad().begin(), x.grad().end());

    double worst = 0.0;
    auto xv = x.data();
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const S orig = xv[i];
        xv[i] = orig + S(step);
        const double up = static_cast<double>(f(static_cast<Tape<S>*>(nullptr), x).item());
        xv[i] = orig - S(step);
        const double down = static_cast<double>(f(static_cast<Tape<S>*>(nullptr), x).item());
        xv[i] = orig;
        const double numeric = (up - down) / (2.0 * step);
        const double a = static_cast<double>(analytic[i]);
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(a - numeric) / denom);
    }
    return worst;
}

} // namespace geoformer::ag
