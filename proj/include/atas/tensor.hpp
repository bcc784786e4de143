#pragma once

// Dense f64 tensors with reverse-mode gradient propagation.
//
// Every op returns a fresh tensor; values are immutable once created. When an
// input requires gradients the op records a backward closure on the result
// node, so the reachable graph from any scalar doubles as the tape. backward()
// replays those closures once each, in reverse creation order.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "atas/error.hpp"

namespace atas {

using Shape = std::vector<std::size_t>;

namespace detail {

inline std::uint64_t next_seq() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}

struct TensorNode {
    Shape shape;
    std::vector<double> value;
    bool requires_grad = false;
    std::vector<double> grad; // allocated lazily, same length as value
    std::uint64_t seq = 0;
    std::vector<std::shared_ptr<TensorNode>> inputs;
    std::function<void(TensorNode&)> backprop;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

inline std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

} // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (detail::numel(shape) != data.size()) {
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        }
        auto node = std::make_shared<detail::TensorNode>();
        node->shape = std::move(shape);
        node->value = std::move(data);
        node->requires_grad = requires_grad;
        node->seq = detail::next_seq();
        Tensor t;
        t.node_ = std::move(node);
        t.debug_check_finite();
        return t;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<double> data(detail::numel(shape), 0.0);
        return from(std::move(shape), std::move(data), requires_grad);
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        std::vector<double> data(detail::numel(shape), v);
        return from(std::move(shape), std::move(data), requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from(Shape{}, std::vector<double>{v}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }

    const Shape& shape() const { return checked_node().shape; }

    std::size_t rank() const { return shape().size(); }

    std::size_t size() const { return checked_node().value.size(); }

    std::size_t dim(std::size_t i) const {
        const Shape& s = shape();
        if (i >= s.size()) throw DimensionError("dim index out of range for shape " + shape_str(s));
        return s[i];
    }

    std::size_t rows() const { return rank() == 2 ? dim(0) : throw_not_matrix(); }
    std::size_t cols() const { return rank() == 2 ? dim(1) : throw_not_matrix(); }

    const std::vector<double>& data() const { return checked_node().value; }

    double at(std::size_t i) const { return checked_node().value.at(i); }

    double at(std::size_t r, std::size_t c) const {
        if (rank() != 2) throw_not_matrix();
        return checked_node().value[r * dim(1) + c];
    }

    bool is_scalar() const { return size() == 1 && rank() <= 1; }

    double item() const {
        if (size() != 1) throw ContractError("item() requires a scalar tensor, got shape " + shape_str(shape()));
        return checked_node().value[0];
    }

    bool requires_grad() const { return checked_node().requires_grad; }

    // Zero-filled until backward() has touched this leaf.
    std::vector<double> grad() const {
        const auto& n = checked_node();
        if (n.grad.size() == n.value.size()) return n.grad;
        return std::vector<double>(n.value.size(), 0.0);
    }

    void zero_grad() const {
        auto& n = checked_node();
        std::fill(n.grad.begin(), n.grad.end(), 0.0);
    }

    // Same values, detached from the graph.
    Tensor detach() const {
        const auto& n = checked_node();
        return from(n.shape, n.value, false);
    }

    Tensor clone(bool requires_grad) const {
        const auto& n = checked_node();
        return from(n.shape, n.value, requires_grad);
    }

    std::shared_ptr<detail::TensorNode> node() const { return node_; }

    void debug_check_finite() const {
#ifndef NDEBUG
        for (double v : checked_node().value) {
            if (std::isnan(v)) throw ContractError("NaN produced in tensor of shape " + shape_str(shape()));
        }
#endif
    }

private:
    detail::TensorNode& checked_node() const {
        if (!node_) throw ContractError("use of an undefined tensor");
        return *node_;
    }

    [[noreturn]] std::size_t throw_not_matrix() const {
        throw DimensionError("expected a rank-2 tensor, got shape " + shape_str(shape()));
    }

    std::shared_ptr<detail::TensorNode> node_;
};

namespace detail {

inline Tensor make_op(Shape shape, std::vector<double> value,
                      std::vector<Tensor> inputs,
                      std::function<void(TensorNode&)> backprop) {
    bool needs_grad = false;
    for (const Tensor& t : inputs) {
        if (t.requires_grad()) {
            needs_grad = true;
            break;
        }
    }
    Tensor out = Tensor::from(std::move(shape), std::move(value), needs_grad);
    if (needs_grad) {
        auto node = out.node();
        node->inputs.reserve(inputs.size());
        for (const Tensor& t : inputs) node->inputs.push_back(t.node());
        node->backprop = std::move(backprop);
    }
    return out;
}

inline void accumulate(const std::shared_ptr<TensorNode>& n, std::size_t i, double g) {
    if (!n->requires_grad) return;
    n->ensure_grad();
    n->grad[i] += g;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch: " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
}

} // namespace detail

// The materialized reverse schedule for one scalar loss: all grad-requiring
// ops reachable from it, ordered by creation. replay() visits each exactly
// once, newest first.
class GradTape {
public:
    static GradTape record(const Tensor& loss) {
        if (!loss.defined() || loss.size() != 1) {
            throw ContractError("backward requires a scalar loss, got shape " +
                                (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
        }
        GradTape tape;
        tape.loss_ = loss.node();
        if (!tape.loss_->requires_grad) return tape;

        std::unordered_set<const detail::TensorNode*> seen;
        std::vector<std::shared_ptr<detail::TensorNode>> stack{tape.loss_};
        seen.insert(tape.loss_.get());
        while (!stack.empty()) {
            auto n = stack.back();
            stack.pop_back();
            tape.ops_.push_back(n);
            for (const auto& in : n->inputs) {
                if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in);
            }
        }
        std::sort(tape.ops_.begin(), tape.ops_.end(),
                  [](const auto& a, const auto& b) { return a->seq > b->seq; });
        return tape;
    }

    std::size_t num_ops() const { return ops_.size(); }

    void replay() {
        if (!loss_ || !loss_->requires_grad) return;
        loss_->ensure_grad();
        loss_->grad[0] += 1.0;
        for (const auto& n : ops_) {
            if (n->backprop) n->backprop(*n);
        }
    }

private:
    std::shared_ptr<detail::TensorNode> loss_;
    std::vector<std::shared_ptr<detail::TensorNode>> ops_;
};

// Populates grad buffers of every requires_grad leaf reachable from loss.
// Gradients accumulate across calls; clear leaves between steps.
inline void backward(const Tensor& loss) {
    GradTape::record(loss).replay();
}

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> v(a.size());
    const auto& da = a.data();
    const auto& db = b.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = da[i] + db[i];
    return detail::make_op(a.shape(), std::move(v), {a, b}, [](detail::TensorNode& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            detail::accumulate(self.inputs[0], i, self.grad[i]);
            detail::accumulate(self.inputs[1], i, self.grad[i]);
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> v(a.size());
    const auto& da = a.data();
    const auto& db = b.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = da[i] - db[i];
    return detail::make_op(a.shape(), std::move(v), {a, b}, [](detail::TensorNode& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            detail::accumulate(self.inputs[0], i, self.grad[i]);
            detail::accumulate(self.inputs[1], i, -self.grad[i]);
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> v(a.size());
    const auto& da = a.data();
    const auto& db = b.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = da[i] * db[i];
    return detail::make_op(a.shape(), std::move(v), {a, b}, [](detail::TensorNode& self) {
        const auto& va = self.inputs[0]->value;
        const auto& vb = self.inputs[1]->value;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            detail::accumulate(self.inputs[0], i, self.grad[i] * vb[i]);
            detail::accumulate(self.inputs[1], i, self.grad[i] * va[i]);
        }
    });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> v(a.size());
    const auto& da = a.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = da[i] * c;
    return detail::make_op(a.shape(), std::move(v), {a}, [c](detail::TensorNode& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) detail::accumulate(self.inputs[0], i, self.grad[i] * c);
    });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> v(a.size());
    const auto& da = a.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = da[i] + c;
    return detail::make_op(a.shape(), std::move(v), {a}, [](detail::TensorNode& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) detail::accumulate(self.inputs[0], i, self.grad[i]);
    });
}

inline Tensor exp(const Tensor& a) {
    std::vector<double> v(a.size());
    const auto& da = a.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::exp(da[i]);
    return detail::make_op(a.shape(), std::move(v), {a}, [](detail::TensorNode& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) detail::accumulate(self.inputs[0], i, self.grad[i] * self.value[i]);
    });
}

inline Tensor log(const Tensor& a) {
    std::vector<double> v(a.size());
    const auto& da = a.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::log(da[i]);
    return detail::make_op(a.shape(), std::move(v), {a}, [](detail::TensorNode& self) {
        const auto& x = self.inputs[0]->value;
        for (std::size_t i = 0; i < self.grad.size(); ++i) detail::accumulate(self.inputs[0], i, self.grad[i] / x[i]);
    });
}

// exact erf form: gelu(x) = x * Phi(x)
inline Tensor gelu(const Tensor& a) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    std::vector<double> v(a.size());
    const auto& da = a.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = da[i] * 0.5 * (1.0 + std::erf(da[i] * inv_sqrt2));
    }
    return detail::make_op(a.shape(), std::move(v), {a}, [](detail::TensorNode& self) {
        constexpr double is2 = 0.70710678118654752440;
        constexpr double inv_sqrt2pi = 0.39894228040143267794;
        const auto& x = self.inputs[0]->value;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            double cdf = 0.5 * (1.0 + std::erf(x[i] * is2));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * x[i] * x[i]);
            detail::accumulate(self.inputs[0], i, self.grad[i] * (cdf + x[i] * pdf));
        }
    });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return detail::make_op(Shape{}, {s}, {a}, [](detail::TensorNode& self) {
        double g = self.grad[0];
        for (std::size_t i = 0; i < self.inputs[0]->value.size(); ++i) detail::accumulate(self.inputs[0], i, g);
    });
}

inline Tensor mean(const Tensor& a) {
    if (a.size() == 0) throw DimensionError("mean of an empty tensor");
    double s = 0.0;
    for (double v : a.data()) s += v;
    double inv_n = 1.0 / static_cast<double>(a.size());
    return detail::make_op(Shape{}, {s * inv_n}, {a}, [inv_n](detail::TensorNode& self) {
        double g = self.grad[0] * inv_n;
        for (std::size_t i = 0; i < self.inputs[0]->value.size(); ++i) detail::accumulate(self.inputs[0], i, g);
    });
}

inline Tensor dot(const Tensor& a, const Tensor& b) { return sum(mul(a, b)); }

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (detail::numel(shape) != a.size()) {
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    return detail::make_op(std::move(shape), a.data(), {a}, [](detail::TensorNode& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) detail::accumulate(self.inputs[0], i, self.grad[i]);
    });
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw DimensionError("transpose: expected a matrix, got shape " + shape_str(a.shape()));
    std::size_t r = a.rows(), c = a.cols();
    std::vector<double> v(r * c);
    const auto& da = a.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) v[j * r + i] = da[i * c + j];
    return detail::make_op(Shape{c, r}, std::move(v), {a}, [r, c](detail::TensorNode& self) {
        for (std::size_t j = 0; j < c; ++j)
            for (std::size_t i = 0; i < r; ++i)
                detail::accumulate(self.inputs[0], i * c + j, self.grad[j * r + i]);
    });
}

inline Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
    if (a.rank() != 2) throw DimensionError("slice_rows: expected a matrix, got shape " + shape_str(a.shape()));
    if (start + count > a.rows()) {
        throw DimensionError("slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                             ") out of range for shape " + shape_str(a.shape()));
    }
    std::size_t c = a.cols();
    const auto& da = a.data();
    std::vector<double> v(da.begin() + static_cast<std::ptrdiff_t>(start * c),
                          da.begin() + static_cast<std::ptrdiff_t>((start + count) * c));
    return detail::make_op(Shape{count, c}, std::move(v), {a}, [start, c](detail::TensorNode& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            detail::accumulate(self.inputs[0], start * c + i, self.grad[i]);
    });
}

inline Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
    if (a.rank() != 2) throw DimensionError("slice_cols: expected a matrix, got shape " + shape_str(a.shape()));
    if (start + count > a.cols()) {
        throw DimensionError("slice_cols: cols [" + std::to_string(start) + ", " + std::to_string(start + count) +
                             ") out of range for shape " + shape_str(a.shape()));
    }
    std::size_t r = a.rows(), c = a.cols();
    std::vector<double> v(r * count);
    const auto& da = a.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < count; ++j) v[i * count + j] = da[i * c + start + j];
    return detail::make_op(Shape{r, count}, std::move(v), {a}, [r, c, start, count](detail::TensorNode& self) {
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < count; ++j)
                detail::accumulate(self.inputs[0], i * c + start + j, self.grad[i * count + j]);
    });
}

inline Tensor row(const Tensor& a, std::size_t r) {
    return reshape(slice_rows(a, r, 1), Shape{a.cols()});
}

inline Tensor slice(const Tensor& a, std::size_t start, std::size_t count) {
    if (a.rank() != 1) throw DimensionError("slice: expected a vector, got shape " + shape_str(a.shape()));
    if (start + count > a.size()) {
        throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + count) +
                             ") out of range for shape " + shape_str(a.shape()));
    }
    const auto& da = a.data();
    std::vector<double> v(da.begin() + static_cast<std::ptrdiff_t>(start),
                          da.begin() + static_cast<std::ptrdiff_t>(start + count));
    return detail::make_op(Shape{count}, std::move(v), {a}, [start](detail::TensorNode& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) detail::accumulate(self.inputs[0], start + i, self.grad[i]);
    });
}

inline Tensor index(const Tensor& a, std::size_t i) {
    if (a.rank() != 1) throw DimensionError("index: expected a vector, got shape " + shape_str(a.shape()));
    if (i >= a.size()) throw DimensionError("index " + std::to_string(i) + " out of range for shape " + shape_str(a.shape()));
    return detail::make_op(Shape{}, {a.at(i)}, {a}, [i](detail::TensorNode& self) {
        detail::accumulate(self.inputs[0], i, self.grad[0]);
    });
}

inline Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& indices) {
    if (a.rank() != 2) throw DimensionError("gather_rows: expected a matrix, got shape " + shape_str(a.shape()));
    std::size_t c = a.cols();
    std::vector<double> v(indices.size() * c);
    const auto& da = a.data();
    for (std::size_t k = 0; k < indices.size(); ++k) {
        if (indices[k] >= a.rows()) {
            throw DimensionError("gather_rows: index " + std::to_string(indices[k]) +
                                 " out of range for shape " + shape_str(a.shape()));
        }
        std::copy(da.begin() + static_cast<std::ptrdiff_t>(indices[k] * c),
                  da.begin() + static_cast<std::ptrdiff_t>((indices[k] + 1) * c),
                  v.begin() + static_cast<std::ptrdiff_t>(k * c));
    }
    auto idx = indices;
    return detail::make_op(Shape{indices.size(), c}, std::move(v), {a}, [idx, c](detail::TensorNode& self) {
        for (std::size_t k = 0; k < idx.size(); ++k)
            for (std::size_t j = 0; j < c; ++j)
                detail::accumulate(self.inputs[0], idx[k] * c + j, self.grad[k * c + j]);
    });
}

// Stacks 1-D inputs (one row each) and 2-D inputs (their rows) into a matrix.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no inputs");
    std::size_t c = parts[0].rank() == 1 ? parts[0].size() : parts[0].cols();
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        std::size_t pc = p.rank() == 1 ? p.size() : (p.rank() == 2 ? p.cols() : 0);
        if (p.rank() > 2 || pc != c) {
            throw DimensionError("concat_rows: incompatible part of shape " + shape_str(p.shape()) +
                                 " (want width " + std::to_string(c) + ")");
        }
        total += p.rank() == 1 ? 1 : p.rows();
    }
    std::vector<double> v;
    v.reserve(total * c);
    for (const Tensor& p : parts) v.insert(v.end(), p.data().begin(), p.data().end());
    return detail::make_op(Shape{total, c}, std::move(v), parts, [](detail::TensorNode& self) {
        std::size_t off = 0;
        for (auto& in : self.inputs) {
            for (std::size_t i = 0; i < in->value.size(); ++i) detail::accumulate(in, i, self.grad[off + i]);
            off += in->value.size();
        }
    });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no inputs");
    std::size_t r = parts[0].rows();
    std::size_t total = 0;
    std::vector<std::size_t> widths;
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.rows() != r) {
            throw DimensionError("concat_cols: incompatible part of shape " + shape_str(p.shape()) +
                                 " (want " + std::to_string(r) + " rows)");
        }
        widths.push_back(p.cols());
        total += p.cols();
    }
    std::vector<double> v(r * total);
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto& dp = parts[k].data();
        for (std::size_t i = 0; i < r; ++i)
            std::copy(dp.begin() + static_cast<std::ptrdiff_t>(i * widths[k]),
                      dp.begin() + static_cast<std::ptrdiff_t>((i + 1) * widths[k]),
                      v.begin() + static_cast<std::ptrdiff_t>(i * total + off));
        off += widths[k];
    }
    return detail::make_op(Shape{r, total}, std::move(v), parts, [r, total, widths](detail::TensorNode& self) {
        std::size_t off2 = 0;
        for (std::size_t k = 0; k < self.inputs.size(); ++k) {
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < widths[k]; ++j)
                    detail::accumulate(self.inputs[k], i * widths[k] + j, self.grad[i * total + off2 + j]);
            off2 += widths[k];
        }
    });
}

inline Tensor stack_scalars(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("stack_scalars: no inputs");
    std::vector<double> v(parts.size());
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (parts[i].size() != 1) {
            throw DimensionError("stack_scalars: part " + std::to_string(i) + " has shape " + shape_str(parts[i].shape()));
        }
        v[i] = parts[i].item();
    }
    return detail::make_op(Shape{parts.size()}, std::move(v), parts, [](detail::TensorNode& self) {
        for (std::size_t i = 0; i < self.inputs.size(); ++i) detail::accumulate(self.inputs[i], 0, self.grad[i]);
    });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
        Shape sa = a.defined() ? a.shape() : Shape{};
        Shape sb = b.defined() ? b.shape() : Shape{};
        throw DimensionError("matmul: inner dimensions disagree: " + shape_str(sa) + " vs " + shape_str(sb));
    }
    std::size_t m = a.rows(), k = a.cols(), p = b.cols();
    std::vector<double> v(m * p, 0.0);
    const double* da = a.data().data();
    const double* db = b.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        double* out = v.data() + i * p;
        for (std::size_t t = 0; t < k; ++t) {
            double aik = da[i * k + t];
            const double* brow = db + t * p;
            for (std::size_t j = 0; j < p; ++j) out[j] += aik * brow[j];
        }
    }
    return detail::make_op(Shape{m, p}, std::move(v), {a, b}, [m, k, p](detail::TensorNode& self) {
        const auto& va = self.inputs[0]->value;
        const auto& vb = self.inputs[1]->value;
        const auto& g = self.grad;
        if (self.inputs[0]->requires_grad) {
            self.inputs[0]->ensure_grad();
            auto& ga = self.inputs[0]->grad;
            // dA = G * B^T
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < p; ++j) {
                    double gij = g[i * p + j];
                    if (gij == 0.0) continue;
                    for (std::size_t t = 0; t < k; ++t) ga[i * k + t] += gij * vb[t * p + j];
                }
        }
        if (self.inputs[1]->requires_grad) {
            self.inputs[1]->ensure_grad();
            auto& gb = self.inputs[1]->grad;
            // dB = A^T * G
            for (std::size_t t = 0; t < k; ++t)
                for (std::size_t i = 0; i < m; ++i) {
                    double ait = va[i * k + t];
                    if (ait == 0.0) continue;
                    for (std::size_t j = 0; j < p; ++j) gb[t * p + j] += ait * g[i * p + j];
                }
        }
    });
}

// mat: r x c, vec: c; adds vec to every row
inline Tensor add_rowvec(const Tensor& mat, const Tensor& vec) {
    if (mat.rank() != 2 || vec.rank() != 1 || mat.cols() != vec.size()) {
        throw DimensionError("add_rowvec: shape mismatch: " + shape_str(mat.shape()) + " vs " + shape_str(vec.shape()));
    }
    std::size_t r = mat.rows(), c = mat.cols();
    std::vector<double> v(r * c);
    const auto& dm = mat.data();
    const auto& dv = vec.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) v[i * c + j] = dm[i * c + j] + dv[j];
    return detail::make_op(Shape{r, c}, std::move(v), {mat, vec}, [r, c](detail::TensorNode& self) {
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) {
                detail::accumulate(self.inputs[0], i * c + j, self.grad[i * c + j]);
                detail::accumulate(self.inputs[1], j, self.grad[i * c + j]);
            }
    });
}

// ---------------------------------------------------------------------------
// normalization and similarity
// ---------------------------------------------------------------------------

namespace detail {

inline void softmax_into(const double* x, double* y, std::size_t n, double temperature) {
    double m = x[0];
    for (std::size_t i = 1; i < n; ++i) m = std::max(m, x[i]);
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = std::exp((x[i] - m) / temperature);
        z += y[i];
    }
    for (std::size_t i = 0; i < n; ++i) y[i] /= z;
}

// dL/dx_j = (y_j / tau) * (g_j - sum_i g_i y_i)
inline void softmax_backward_row(const double* y, const double* g, double* gx, std::size_t n, double temperature) {
    double inner = 0.0;
    for (std::size_t i = 0; i < n; ++i) inner += g[i] * y[i];
    for (std::size_t j = 0; j < n; ++j) gx[j] += (y[j] / temperature) * (g[j] - inner);
}

} // namespace detail

// Stable softmax over a vector of logits; max subtraction keeps exp in range.
inline Tensor softmax(const Tensor& x, double temperature) {
    if (temperature <= 0.0) throw ParameterError("softmax: temperature must be > 0, got " + std::to_string(temperature));
    if (x.rank() != 1 || x.size() == 0) {
        throw DimensionError("softmax: expected a nonempty vector, got shape " + shape_str(x.shape()));
    }
    std::size_t n = x.size();
    std::vector<double> v(n);
    detail::softmax_into(x.data().data(), v.data(), n, temperature);
    return detail::make_op(Shape{n}, std::move(v), {x}, [n, temperature](detail::TensorNode& self) {
        if (!self.inputs[0]->requires_grad) return;
        self.inputs[0]->ensure_grad();
        detail::softmax_backward_row(self.value.data(), self.grad.data(), self.inputs[0]->grad.data(), n, temperature);
    });
}

inline Tensor softmax_rows(const Tensor& x, double temperature) {
    if (temperature <= 0.0) throw ParameterError("softmax_rows: temperature must be > 0, got " + std::to_string(temperature));
    if (x.rank() != 2) throw DimensionError("softmax_rows: expected a matrix, got shape " + shape_str(x.shape()));
    std::size_t r = x.rows(), c = x.cols();
    std::vector<double> v(r * c);
    for (std::size_t i = 0; i < r; ++i)
        detail::softmax_into(x.data().data() + i * c, v.data() + i * c, c, temperature);
    return detail::make_op(Shape{r, c}, std::move(v), {x}, [r, c, temperature](detail::TensorNode& self) {
        if (!self.inputs[0]->requires_grad) return;
        self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
            detail::softmax_backward_row(self.value.data() + i * c, self.grad.data() + i * c,
                                         self.inputs[0]->grad.data() + i * c, c, temperature);
    });
}

namespace detail {

inline double row_norm_or_throw(const double* x, std::size_t n, const char* op) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += x[i] * x[i];
    double norm = std::sqrt(s);
    if (norm == 0.0) throw DegenerateInputError(std::string(op) + ": zero-norm vector");
    return norm;
}

} // namespace detail

inline Tensor l2_normalize(const Tensor& x) {
    if (x.rank() != 1 || x.size() == 0) {
        throw DimensionError("l2_normalize: expected a nonempty vector, got shape " + shape_str(x.shape()));
    }
    std::size_t n = x.size();
    double norm = detail::row_norm_or_throw(x.data().data(), n, "l2_normalize");
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = x.data()[i] / norm;
    return detail::make_op(Shape{n}, std::move(v), {x}, [n, norm](detail::TensorNode& self) {
        if (!self.inputs[0]->requires_grad) return;
        self.inputs[0]->ensure_grad();
        const double* y = self.value.data();
        const double* g = self.grad.data();
        double yg = 0.0;
        for (std::size_t i = 0; i < n; ++i) yg += y[i] * g[i];
        for (std::size_t i = 0; i < n; ++i) self.inputs[0]->grad[i] += (g[i] - y[i] * yg) / norm;
    });
}

inline Tensor l2_normalize_rows(const Tensor& x) {
    if (x.rank() != 2) throw DimensionError("l2_normalize_rows: expected a matrix, got shape " + shape_str(x.shape()));
    std::size_t r = x.rows(), c = x.cols();
    std::vector<double> v(r * c);
    std::vector<double> norms(r);
    for (std::size_t i = 0; i < r; ++i) {
        norms[i] = detail::row_norm_or_throw(x.data().data() + i * c, c, "l2_normalize_rows");
        for (std::size_t j = 0; j < c; ++j) v[i * c + j] = x.data()[i * c + j] / norms[i];
    }
    return detail::make_op(Shape{r, c}, std::move(v), {x}, [r, c, norms](detail::TensorNode& self) {
        if (!self.inputs[0]->requires_grad) return;
        self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < r; ++i) {
            const double* y = self.value.data() + i * c;
            const double* g = self.grad.data() + i * c;
            double yg = 0.0;
            for (std::size_t j = 0; j < c; ++j) yg += y[j] * g[j];
            for (std::size_t j = 0; j < c; ++j) self.inputs[0]->grad[i * c + j] += (g[j] - y[j] * yg) / norms[i];
        }
    });
}

inline Tensor cosine_sim(const Tensor& a, const Tensor& b) {
    if (a.rank() != 1 || b.rank() != 1 || a.size() != b.size() || a.size() == 0) {
        throw DimensionError("cosine_sim: expected same-length vectors, got " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
    std::size_t n = a.size();
    double na = detail::row_norm_or_throw(a.data().data(), n, "cosine_sim");
    double nb = detail::row_norm_or_throw(b.data().data(), n, "cosine_sim");
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a.data()[i] * b.data()[i];
    double phi = s / (na * nb);
    return detail::make_op(Shape{}, {phi}, {a, b}, [n, na, nb, phi](detail::TensorNode& self) {
        double g = self.grad[0];
        const auto& va = self.inputs[0]->value;
        const auto& vb = self.inputs[1]->value;
        for (std::size_t i = 0; i < n; ++i) {
            detail::accumulate(self.inputs[0], i, g * (vb[i] / (na * nb) - phi * va[i] / (na * na)));
            detail::accumulate(self.inputs[1], i, g * (va[i] / (na * nb) - phi * vb[i] / (nb * nb)));
        }
    });
}

// All pairwise cosine similarities between rows of a (n x d) and rows of b (m x d).
inline Tensor cosine_sim_matrix(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols()) {
        throw DimensionError("cosine_sim_matrix: shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    return matmul(l2_normalize_rows(a), transpose(l2_normalize_rows(b)));
}

// Row-wise layer norm with learned gain/bias over the last dimension.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
    if (x.rank() != 2) throw DimensionError("layer_norm: expected a matrix, got shape " + shape_str(x.shape()));
    std::size_t r = x.rows(), c = x.cols();
    if (gain.rank() != 1 || bias.rank() != 1 || gain.size() != c || bias.size() != c) {
        throw DimensionError("layer_norm: gain/bias must have length " + std::to_string(c) + ", got " +
                             shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
    }
    std::vector<double> v(r * c);
    std::vector<double> xhat(r * c);
    std::vector<double> inv_sigma(r);
    const auto& dx = x.data();
    const auto& dg = gain.data();
    const auto& db = bias.data();
    for (std::size_t i = 0; i < r; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += dx[i * c + j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            double d = dx[i * c + j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(c);
        inv_sigma[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j) {
            xhat[i * c + j] = (dx[i * c + j] - mu) * inv_sigma[i];
            v[i * c + j] = dg[j] * xhat[i * c + j] + db[j];
        }
    }
    return detail::make_op(Shape{r, c}, std::move(v), {x, gain, bias},
                           [r, c, xhat, inv_sigma](detail::TensorNode& self) {
        const auto& dg = self.inputs[1]->value;
        for (std::size_t i = 0; i < r; ++i) {
            const double* g = self.grad.data() + i * c;
            const double* xh = xhat.data() + i * c;
            for (std::size_t j = 0; j < c; ++j) {
                detail::accumulate(self.inputs[1], j, g[j] * xh[j]);
                detail::accumulate(self.inputs[2], j, g[j]);
            }
            if (self.inputs[0]->requires_grad) {
                self.inputs[0]->ensure_grad();
                double mean_gh = 0.0, mean_ghx = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    double gh = g[j] * dg[j];
                    mean_gh += gh;
                    mean_ghx += gh * xh[j];
                }
                mean_gh /= static_cast<double>(c);
                mean_ghx /= static_cast<double>(c);
                for (std::size_t j = 0; j < c; ++j) {
                    double gh = g[j] * dg[j];
                    self.inputs[0]->grad[i * c + j] += inv_sigma[i] * (gh - mean_gh - xh[j] * mean_ghx);
                }
            }
        }
    });
}

// log(sum(exp(x))) with the max pulled out as a constant; gradient equals softmax(x).
inline Tensor log_sum_exp(const Tensor& x) {
    if (x.rank() != 1 || x.size() == 0) {
        throw DimensionError("log_sum_exp: expected a nonempty vector, got shape " + shape_str(x.shape()));
    }
    double m = x.data()[0];
    for (double v : x.data()) m = std::max(m, v);
    return add_scalar(log(sum(exp(add_scalar(x, -m)))), m);
}

} // namespace atas
