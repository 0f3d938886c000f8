#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "modalanchor/errors.hpp"
#include "modalanchor/format.hpp"

namespace modalanchor {

namespace detail {

inline std::size_t shape_size(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

struct Node {
    std::vector<std::size_t> shape;
    std::vector<double> values;
    bool requires_grad = false;
    std::string name;  // nonempty only for named leaves (parameters)
    std::uint64_t seq = 0;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad, accumulates into parents' grads. Null for leaves.
    std::function<void(const Node&)> backprop;
    std::vector<double> grad;

    bool is_leaf() const { return parents.empty() && !backprop; }
};

inline std::uint64_t next_seq() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

// Dense kernels. All accumulate into C so the same code serves forward
// (zero-initialized C) and gradient accumulation.
inline void mm_nn(const double* a, const double* b, double* c,
                  std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C(m×n) += A(m×k) · B(n×k)^T
inline void mm_nt(const double* a, const double* b, double* c,
                  std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C(m×n) += A(k×m)^T · B(k×n)
inline void mm_tn(const double* a, const double* b, double* c,
                  std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = a + p * m;
        const double* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

// Dense tensor with reverse-mode autodiff. Value semantics over a shared
// immutable node; ops build a define-by-run graph that lives as long as any
// tensor referencing it.
class Tensor {
public:
    Tensor() = default;

    static Tensor from_values(std::vector<double> values, std::vector<std::size_t> shape,
                              bool requires_grad = false, std::string name = {}) {
        if (detail::shape_size(shape) != values.size()) {
            throw ShapeError("tensor: data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_string(shape));
        }
        auto node = std::make_shared<detail::Node>();
        node->shape = std::move(shape);
        node->values = std::move(values);
        node->requires_grad = requires_grad;
        node->name = std::move(name);
        node->seq = detail::next_seq();
        return Tensor(std::move(node));
    }

    static Tensor scalar(double v) { return from_values({v}, {}); }

    static Tensor zeros(std::vector<std::size_t> shape) {
        std::vector<double> v(detail::shape_size(shape), 0.0);
        return from_values(std::move(v), std::move(shape));
    }

    static Tensor full(std::vector<std::size_t> shape, double fill) {
        std::vector<double> v(detail::shape_size(shape), fill);
        return from_values(std::move(v), std::move(shape));
    }

    static Tensor parameter(std::string name, std::vector<double> values,
                            std::vector<std::size_t> shape, bool requires_grad = true) {
        return from_values(std::move(values), std::move(shape), requires_grad, std::move(name));
    }

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return node_->shape; }
    const std::vector<double>& values() const { return node_->values; }
    bool requires_grad() const { return node_->requires_grad; }
    const std::string& name() const { return node_->name; }
    std::size_t size() const { return node_->values.size(); }
    std::size_t rank() const { return node_->shape.size(); }

    bool is_scalar() const { return node_->shape.empty(); }

    double scalar_value() const {
        if (!is_scalar()) {
            throw ContractError("scalar_value: tensor has shape " + shape_string(shape()));
        }
        return node_->values[0];
    }

    double at(std::size_t i) const { return node_->values.at(i); }
    double at(std::size_t r, std::size_t c) const {
        if (rank() != 2) throw ContractError("at(r,c): tensor is not a matrix");
        return node_->values[r * node_->shape[1] + c];
    }

    std::size_t rows() const {
        if (rank() != 2) throw ContractError("rows: tensor is not a matrix");
        return node_->shape[0];
    }
    std::size_t cols() const {
        if (rank() != 2) throw ContractError("cols: tensor is not a matrix");
        return node_->shape[1];
    }

    // Gradient accumulated by the most recent backward() that reached this
    // leaf; empty tensor if none did.
    Tensor grad() const {
        if (node_->grad.empty()) return Tensor();
        return from_values(node_->grad, node_->shape);
    }

    std::shared_ptr<detail::Node> node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::Node> node_;

    friend Tensor make_op_node(std::vector<std::size_t>, std::vector<double>,
                               std::vector<Tensor>, std::function<void(const detail::Node&)>);
};

inline Tensor make_op_node(std::vector<std::size_t> shape, std::vector<double> values,
                           std::vector<Tensor> inputs,
                           std::function<void(const detail::Node&)> backprop) {
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->values = std::move(values);
    node->seq = detail::next_seq();
    bool grad = false;
    for (const auto& t : inputs) grad = grad || t.requires_grad();
    node->requires_grad = grad;
    if (grad) {
        node->parents.reserve(inputs.size());
        for (const auto& t : inputs) node->parents.push_back(t.node());
        node->backprop = std::move(backprop);
    }
    return Tensor(std::move(node));
}

namespace detail {

inline void ensure_grad(Node& n) {
    if (n.grad.size() != n.values.size()) n.grad.assign(n.values.size(), 0.0);
}

inline void accumulate(Node& n, std::size_t i, double v) { n.grad[i] += v; }

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " do not conform");
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops. Shapes must match exactly, or one operand may be a
// rank-0 scalar; anything else is rejected loudly.
// ---------------------------------------------------------------------------

namespace detail {

enum class Elementwise { add, sub, mul, div };

inline Tensor elementwise(const char* opname, Elementwise op, const Tensor& a, const Tensor& b) {
    const bool a_scalar = a.is_scalar();
    const bool b_scalar = b.is_scalar();
    if (!a_scalar && !b_scalar) check_same_shape(opname, a, b);

    const Tensor& big = a_scalar ? b : a;
    std::vector<double> out(big.size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = a_scalar ? av[0] : av[i];
        const double y = b_scalar ? bv[0] : bv[i];
        switch (op) {
            case Elementwise::add: out[i] = x + y; break;
            case Elementwise::sub: out[i] = x - y; break;
            case Elementwise::mul: out[i] = x * y; break;
            case Elementwise::div: out[i] = x / y; break;
        }
    }

    return make_op_node(big.shape(), std::move(out), {a, b},
        [op, a_scalar, b_scalar](const Node& self) {
            Node& pa = *self.parents[0];
            Node& pb = *self.parents[1];
            const std::size_t n = self.values.size();
            if (pa.requires_grad) {
                ensure_grad(pa);
                for (std::size_t i = 0; i < n; ++i) {
                    const double g = self.grad[i];
                    double d = 0.0;
                    switch (op) {
                        case Elementwise::add:
                        case Elementwise::sub: d = g; break;
                        case Elementwise::mul: d = g * (b_scalar ? pb.values[0] : pb.values[i]); break;
                        case Elementwise::div: d = g / (b_scalar ? pb.values[0] : pb.values[i]); break;
                    }
                    pa.grad[a_scalar ? 0 : i] += d;
                }
            }
            if (pb.requires_grad) {
                ensure_grad(pb);
                for (std::size_t i = 0; i < n; ++i) {
                    const double g = self.grad[i];
                    const double x = a_scalar ? pa.values[0] : pa.values[i];
                    const double y = b_scalar ? pb.values[0] : pb.values[i];
                    double d = 0.0;
                    switch (op) {
                        case Elementwise::add: d = g; break;
                        case Elementwise::sub: d = -g; break;
                        case Elementwise::mul: d = g * x; break;
                        case Elementwise::div: d = -g * x / (y * y); break;
                    }
                    pb.grad[b_scalar ? 0 : i] += d;
                }
            }
        });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::elementwise("add", detail::Elementwise::add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::elementwise("sub", detail::Elementwise::sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::elementwise("mul", detail::Elementwise::mul, a, b); }
inline Tensor div(const Tensor& a, const Tensor& b) { return detail::elementwise("div", detail::Elementwise::div, a, b); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

inline Tensor scale(const Tensor& a, double c) { return mul(a, Tensor::scalar(c)); }

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw ShapeError("matmul: operands must be matrices, got " + shape_string(a.shape()) +
                         " and " + shape_string(b.shape()));
    }
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions differ: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> out(m * n, 0.0);
    detail::mm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);

    return make_op_node({m, n}, std::move(out), {a, b},
        [m, k, n](const detail::Node& self) {
            detail::Node& pa = *self.parents[0];
            detail::Node& pb = *self.parents[1];
            if (pa.requires_grad) {  // dA += G · B^T
                detail::ensure_grad(pa);
                detail::mm_nt(self.grad.data(), pb.values.data(), pa.grad.data(), m, n, k);
            }
            if (pb.requires_grad) {  // dB += A^T · G
                detail::ensure_grad(pb);
                detail::mm_tn(pa.values.data(), self.grad.data(), pb.grad.data(), k, m, n);
            }
        });
}

// A · B^T without materializing the transpose; the workhorse for cosine
// similarity matrices.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw ShapeError("matmul_nt: operands must be matrices, got " + shape_string(a.shape()) +
                         " and " + shape_string(b.shape()));
    }
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_nt: shared dimension differs: " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    std::vector<double> out(m * n, 0.0);
    detail::mm_nt(a.values().data(), b.values().data(), out.data(), m, k, n);

    return make_op_node({m, n}, std::move(out), {a, b},
        [m, k, n](const detail::Node& self) {
            detail::Node& pa = *self.parents[0];
            detail::Node& pb = *self.parents[1];
            if (pa.requires_grad) {  // dA += G · B
                detail::ensure_grad(pa);
                detail::mm_nn(self.grad.data(), pb.values.data(), pa.grad.data(), m, n, k);
            }
            if (pb.requires_grad) {  // dB += G^T · A
                detail::ensure_grad(pb);
                detail::mm_tn(self.grad.data(), pa.values.data(), pb.grad.data(), n, m, k);
            }
        });
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) {
        throw ShapeError("transpose: operand must be a matrix, got " + shape_string(a.shape()));
    }
    const std::size_t r = a.rows(), c = a.cols();
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.values()[i * c + j];

    return make_op_node({c, r}, std::move(out), {a},
        [r, c](const detail::Node& self) {
            detail::Node& pa = *self.parents[0];
            if (!pa.requires_grad) return;
            detail::ensure_grad(pa);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) pa.grad[i * c + j] += self.grad[j * r + i];
        });
}

inline Tensor diag(const Tensor& a) {
    if (a.rank() != 2 || a.rows() != a.cols()) {
        throw ShapeError("diag: operand must be a square matrix, got " + shape_string(a.shape()));
    }
    const std::size_t n = a.rows();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.values()[i * n + i];

    return make_op_node({n}, std::move(out), {a},
        [n](const detail::Node& self) {
            detail::Node& pa = *self.parents[0];
            if (!pa.requires_grad) return;
            detail::ensure_grad(pa);
            for (std::size_t i = 0; i < n; ++i) pa.grad[i * n + i] += self.grad[i];
        });
}

// Broadcast row-vector addition: X (N×d) + b (d).
inline Tensor add_rows(const Tensor& x, const Tensor& b) {
    if (x.rank() != 2 || b.rank() != 1 || b.shape()[0] != x.cols()) {
        throw ShapeError("add_rows: shapes " + shape_string(x.shape()) + " and " +
                         shape_string(b.shape()) + " do not conform");
    }
    const std::size_t n = x.rows(), d = x.cols();
    std::vector<double> out(n * d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x.values()[i * d + j] + b.values()[j];

    return make_op_node({n, d}, std::move(out), {x, b},
        [n, d](const detail::Node& self) {
            detail::Node& px = *self.parents[0];
            detail::Node& pb = *self.parents[1];
            if (px.requires_grad) {
                detail::ensure_grad(px);
                for (std::size_t i = 0; i < n * d; ++i) px.grad[i] += self.grad[i];
            }
            if (pb.requires_grad) {
                detail::ensure_grad(pb);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < d; ++j) pb.grad[j] += self.grad[i * d + j];
            }
        });
}

// ---------------------------------------------------------------------------
// Reductions and elementwise unary ops
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.values()) acc += v;
    return make_op_node({}, {acc}, {a},
        [](const detail::Node& self) {
            detail::Node& pa = *self.parents[0];
            if (!pa.requires_grad) return;
            detail::ensure_grad(pa);
            const double g = self.grad[0];
            for (double& d : pa.grad) d += g;
        });
}

inline Tensor mean(const Tensor& a) {
    const std::size_t n = a.size();
    if (n == 0) throw ShapeError("mean: empty tensor");
    double acc = 0.0;
    for (double v : a.values()) acc += v;
    return make_op_node({}, {acc / static_cast<double>(n)}, {a},
        [n](const detail::Node& self) {
            detail::Node& pa = *self.parents[0];
            if (!pa.requires_grad) return;
            detail::ensure_grad(pa);
            const double g = self.grad[0] / static_cast<double>(n);
            for (double& d : pa.grad) d += g;
        });
}

namespace detail {

template <typename Fwd, typename Bwd>
Tensor unary(const Tensor& a, Fwd fwd, Bwd bwd) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(a.values()[i]);
    return make_op_node(a.shape(), std::move(out), {a},
        [bwd](const Node& self) {
            Node& pa = *self.parents[0];
            if (!pa.requires_grad) return;
            ensure_grad(pa);
            for (std::size_t i = 0; i < self.values.size(); ++i)
                pa.grad[i] += self.grad[i] * bwd(pa.values[i], self.values[i]);
        });
}

}  // namespace detail

inline Tensor relu(const Tensor& a) {
    return detail::unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                         [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor tanh_op(const Tensor& a) {
    return detail::unary(a, [](double x) { return std::tanh(x); },
                         [](double, double y) { return 1.0 - y * y; });
}

inline Tensor exp_op(const Tensor& a) {
    return detail::unary(a, [](double x) { return std::exp(x); },
                         [](double, double y) { return y; });
}

inline Tensor log_op(const Tensor& a) {
    return detail::unary(a, [](double x) { return std::log(x); },
                         [](double x, double) { return 1.0 / x; });
}

// Subgradient 0 at the kink.
inline Tensor abs_op(const Tensor& a) {
    return detail::unary(a, [](double x) { return std::fabs(x); },
                         [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

// ---------------------------------------------------------------------------
// Row-structured ops: softmax / logsumexp over the last axis, row
// normalization, embedding lookup.
// ---------------------------------------------------------------------------

namespace detail {

inline std::pair<std::size_t, std::size_t> row_layout(const Tensor& a, const char* op) {
    if (a.rank() == 1) return {1, a.shape()[0]};
    if (a.rank() == 2) return {a.shape()[0], a.shape()[1]};
    throw ShapeError(std::string(op) + ": operand must be a vector or matrix, got " +
                     shape_string(a.shape()));
}

}  // namespace detail

inline Tensor softmax(const Tensor& a) {
    auto [rows, cols] = detail::row_layout(a, "softmax");
    if (cols == 0) throw ShapeError("softmax: empty rows");
    std::vector<double> out(a.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = a.values().data() + r * cols;
        double* y = out.data() + r * cols;
        double m = x[0];
        for (std::size_t j = 1; j < cols; ++j) m = std::max(m, x[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            y[j] = std::exp(x[j] - m);
            z += y[j];
        }
        for (std::size_t j = 0; j < cols; ++j) y[j] /= z;
    }
    return make_op_node(a.shape(), std::move(out), {a},
        [rows, cols](const detail::Node& self) {
            detail::Node& pa = *self.parents[0];
            if (!pa.requires_grad) return;
            detail::ensure_grad(pa);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = self.values.data() + r * cols;
                const double* g = self.grad.data() + r * cols;
                double dot = 0.0;
                for (std::size_t j = 0; j < cols; ++j) dot += g[j] * y[j];
                double* d = pa.grad.data() + r * cols;
                for (std::size_t j = 0; j < cols; ++j) d[j] += y[j] * (g[j] - dot);
            }
        });
}

// Row-wise log(sum(exp(x))); N×M -> N (or vector -> scalar-like length-1).
inline Tensor logsumexp(const Tensor& a) {
    auto [rows, cols] = detail::row_layout(a, "logsumexp");
    if (cols == 0) throw ShapeError("logsumexp: empty rows");
    std::vector<double> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = a.values().data() + r * cols;
        double m = x[0];
        for (std::size_t j = 1; j < cols; ++j) m = std::max(m, x[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < cols; ++j) z += std::exp(x[j] - m);
        out[r] = m + std::log(z);
    }
    return make_op_node({rows}, std::move(out), {a},
        [rows, cols](const detail::Node& self) {
            detail::Node& pa = *self.parents[0];
            if (!pa.requires_grad) return;
            detail::ensure_grad(pa);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* x = pa.values.data() + r * cols;
                const double lse = self.values[r];
                const double g = self.grad[r];
                double* d = pa.grad.data() + r * cols;
                for (std::size_t j = 0; j < cols; ++j) d[j] += g * std::exp(x[j] - lse);
            }
        });
}

// Row-wise L2 normalization; rows with norm below eps are scaled by 1/eps.
inline Tensor l2_normalize(const Tensor& a) {
    constexpr double kEps = 1e-12;
    auto [rows, cols] = detail::row_layout(a, "l2_normalize");
    if (cols == 0) throw ShapeError("l2_normalize: empty rows");
    std::vector<double> out(a.size());
    std::vector<double> norms(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = a.values().data() + r * cols;
        double sq = 0.0;
        for (std::size_t j = 0; j < cols; ++j) sq += x[j] * x[j];
        const double n = std::max(std::sqrt(sq), kEps);
        norms[r] = n;
        double* y = out.data() + r * cols;
        for (std::size_t j = 0; j < cols; ++j) y[j] = x[j] / n;
    }
    return make_op_node(a.shape(), std::move(out), {a},
        [rows, cols, norms](const detail::Node& self) {
            detail::Node& pa = *self.parents[0];
            if (!pa.requires_grad) return;
            detail::ensure_grad(pa);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = self.values.data() + r * cols;
                const double* g = self.grad.data() + r * cols;
                double dot = 0.0;
                for (std::size_t j = 0; j < cols; ++j) dot += g[j] * y[j];
                double* d = pa.grad.data() + r * cols;
                const double n = norms[r];
                for (std::size_t j = 0; j < cols; ++j) d[j] += (g[j] - y[j] * dot) / n;
            }
        });
}

inline Tensor concat(const Tensor& a, const Tensor& b) {
    if (a.rank() != b.rank()) {
        throw ShapeError("concat: ranks differ: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
    }
    std::vector<std::size_t> shape = a.shape();
    if (a.rank() == 1) {
        shape[0] += b.shape()[0];
    } else if (a.rank() == 2) {
        if (a.cols() != b.cols()) {
            throw ShapeError("concat: column counts differ: " + shape_string(a.shape()) + " vs " +
                             shape_string(b.shape()));
        }
        shape[0] += b.shape()[0];
    } else {
        throw ShapeError("concat: operands must be vectors or matrices");
    }
    std::vector<double> out;
    out.reserve(a.size() + b.size());
    out.insert(out.end(), a.values().begin(), a.values().end());
    out.insert(out.end(), b.values().begin(), b.values().end());
    const std::size_t split = a.size();

    return make_op_node(std::move(shape), std::move(out), {a, b},
        [split](const detail::Node& self) {
            detail::Node& pa = *self.parents[0];
            detail::Node& pb = *self.parents[1];
            if (pa.requires_grad) {
                detail::ensure_grad(pa);
                for (std::size_t i = 0; i < split; ++i) pa.grad[i] += self.grad[i];
            }
            if (pb.requires_grad) {
                detail::ensure_grad(pb);
                for (std::size_t i = split; i < self.values.size(); ++i)
                    pb.grad[i - split] += self.grad[i];
            }
        });
}

// Mean-pooled embedding lookup: rows of `table` (vocab×d) indexed by each
// token sequence, averaged per sequence. Gradient scatters 1/L into every
// looked-up row (repeats accumulate).
inline Tensor embed_mean(const Tensor& table, const std::vector<std::vector<int>>& tokens) {
    if (table.rank() != 2) {
        throw ShapeError("embed_mean: table must be a matrix, got " + shape_string(table.shape()));
    }
    if (tokens.empty()) throw ShapeError("embed_mean: empty token batch");
    const std::size_t vocab = table.rows(), d = table.cols(), n = tokens.size();
    std::vector<double> out(n * d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& seq = tokens[i];
        if (seq.empty()) throw ShapeError("embed_mean: empty token sequence at row " + std::to_string(i));
        for (int t : seq) {
            if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
                throw ShapeError("embed_mean: token " + std::to_string(t) + " out of vocabulary " +
                                 std::to_string(vocab));
            }
            const double* row = table.values().data() + static_cast<std::size_t>(t) * d;
            double* y = out.data() + i * d;
            for (std::size_t j = 0; j < d; ++j) y[j] += row[j];
        }
        const double inv = 1.0 / static_cast<double>(seq.size());
        double* y = out.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) y[j] *= inv;
    }

    return make_op_node({n, d}, std::move(out), {table},
        [tokens, d](const detail::Node& self) {
            detail::Node& pt = *self.parents[0];
            if (!pt.requires_grad) return;
            detail::ensure_grad(pt);
            for (std::size_t i = 0; i < tokens.size(); ++i) {
                const double inv = 1.0 / static_cast<double>(tokens[i].size());
                const double* g = self.grad.data() + i * d;
                for (int t : tokens[i]) {
                    double* row = pt.grad.data() + static_cast<std::size_t>(t) * d;
                    for (std::size_t j = 0; j < d; ++j) row[j] += g[j] * inv;
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

using GradientMap = std::map<std::string, Tensor>;

// Reverse-mode sweep from a scalar loss. Construction order is a valid
// topological order, so reachable nodes are processed by descending sequence
// id. Grads of reachable nodes are cleared first; named requires-grad leaves
// are returned by name.
inline GradientMap backward(const Tensor& loss) {
    if (!loss.defined() || !loss.is_scalar()) {
        throw ContractError("backward: loss must be a scalar, got " +
                            (loss.defined() ? shape_string(loss.shape()) : std::string("<empty>")));
    }
    GradientMap grads;
    if (!loss.requires_grad()) return grads;

    std::vector<detail::Node*> order;
    {
        std::unordered_set<const detail::Node*> seen;
        std::vector<detail::Node*> stack{loss.node().get()};
        seen.insert(loss.node().get());
        while (!stack.empty()) {
            detail::Node* n = stack.back();
            stack.pop_back();
            order.push_back(n);
            for (const auto& p : n->parents) {
                if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
            }
        }
    }
    std::sort(order.begin(), order.end(),
              [](const detail::Node* a, const detail::Node* b) { return a->seq > b->seq; });

    for (detail::Node* n : order) n->grad.assign(n->values.size(), 0.0);
    loss.node()->grad[0] = 1.0;

    for (detail::Node* n : order) {
        if (n->backprop) n->backprop(*n);
    }
    for (detail::Node* n : order) {
        if (n->is_leaf() && !n->name.empty()) {
            grads.emplace(n->name, Tensor::from_values(n->grad, n->shape));
        }
    }
    return grads;
}

}  // namespace modalanchor
