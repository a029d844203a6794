#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "prodseek/tensor.hpp"

namespace prodseek {

namespace detail {

// C (n×m) += A (n×k) · B (k×m)
inline void mm_nn_acc(const double* A, const double* B, double* C, int n, int k, int m) {
    for (int i = 0; i < n; ++i) {
        const double* arow = A + static_cast<std::size_t>(i) * k;
        double* crow = C + static_cast<std::size_t>(i) * m;
        for (int kk = 0; kk < k; ++kk) {
            const double a = arow[kk];
            const double* brow = B + static_cast<std::size_t>(kk) * m;
            for (int j = 0; j < m; ++j) crow[j] += a * brow[j];
        }
    }
}

// C (n×k) += A (n×m) · Bᵀ, with B stored (k×m)
inline void mm_nt_acc(const double* A, const double* B, double* C, int n, int k, int m) {
    for (int i = 0; i < n; ++i) {
        const double* arow = A + static_cast<std::size_t>(i) * m;
        double* crow = C + static_cast<std::size_t>(i) * k;
        for (int j = 0; j < k; ++j) {
            const double* brow = B + static_cast<std::size_t>(j) * m;
            double s = 0.0;
            for (int t = 0; t < m; ++t) s += arow[t] * brow[t];
            crow[j] += s;
        }
    }
}

// C (k×m) += Aᵀ · B, with A stored (n×k), B stored (n×m)
inline void mm_tn_acc(const double* A, const double* B, double* C, int n, int k, int m) {
    for (int i = 0; i < n; ++i) {
        const double* arow = A + static_cast<std::size_t>(i) * k;
        const double* brow = B + static_cast<std::size_t>(i) * m;
        for (int j = 0; j < k; ++j) {
            const double a = arow[j];
            double* crow = C + static_cast<std::size_t>(j) * m;
            for (int t = 0; t < m; ++t) crow[t] += a * brow[t];
        }
    }
}

inline double gelu_fwd(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline double gelu_deriv(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
    const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014326779;  // 1/sqrt(2π)
    return cdf + x * pdf;
}

}  // namespace detail

// Handle into a Tape node.
struct Value {
    int idx = -1;
};

// Append-only reverse-mode tape over rank-2 double tensors. Scalars are 1×1.
// backward() visits nodes in reverse insertion order exactly once, so gradient
// accumulation order is fixed and runs are bit-reproducible.
class Tape {
public:
    enum class Op {
        Leaf,
        Constant,
        Add,
        Sub,
        Mul,
        Div,
        Minimum,
        Maximum,
        Scale,
        Log,
        Exp,
        Sigmoid,
        Gelu,
        Sqrt,
        Matmul,
        Transpose,
        Concat,
        Slice,
        GatherRows,
        Reshape,
        Sum,
        Mean,
        Softmax,
        LogSumExp,
        LayerNorm,
        Embedding,
        L1Distance,
    };

    // ---- node construction -------------------------------------------------

    // Binds an external tensor. The same tensor bound twice yields the same
    // node; gradients written back into t.grad after backward when
    // t.requires_grad is set.
    Value leaf(TensorF& t) {
        if (t.shape.size() != 2) {
            throw std::invalid_argument("leaf: tape tensors are rank 2, got " + shape_str(t.shape));
        }
        auto it = leaf_ids_.find(&t);
        if (it != leaf_ids_.end()) return Value{it->second};
        Node n;
        n.op = Op::Leaf;
        n.shape = t.shape;
        n.bound = &t;
        const int idx = push(std::move(n));
        leaf_ids_.emplace(&t, idx);
        return Value{idx};
    }

    Value constant(std::vector<int> shape, std::vector<double> data) {
        if (shape.size() != 2) {
            throw std::invalid_argument("constant: tape tensors are rank 2, got " + shape_str(shape));
        }
        if (static_cast<std::int64_t>(data.size()) != shape_numel(shape)) {
            throw std::invalid_argument("constant: data length does not match shape " + shape_str(shape));
        }
        Node n;
        n.op = Op::Constant;
        n.shape = std::move(shape);
        n.value = std::move(data);
        return Value{push(std::move(n))};
    }

    Value constant(const TensorF& t) { return constant(t.shape, t.data); }
    Value scalar(double v) { return constant({1, 1}, {v}); }

    // ---- elementwise binary (limited broadcasting) --------------------------
    // Shapes must be equal per axis or 1 on one side; a 1×1 operand broadcasts
    // against anything.

    Value add(Value a, Value b) { return binary(Op::Add, a, b); }
    Value sub(Value a, Value b) { return binary(Op::Sub, a, b); }
    Value mul(Value a, Value b) { return binary(Op::Mul, a, b); }
    Value div(Value a, Value b) { return binary(Op::Div, a, b); }
    Value minimum(Value a, Value b) { return binary(Op::Minimum, a, b); }
    Value maximum(Value a, Value b) { return binary(Op::Maximum, a, b); }

    Value scale(Value a, double c) {
        Node n = unary_node(Op::Scale, a);
        n.c = c;
        const auto& av = val(a);
        for (std::size_t i = 0; i < av.size(); ++i) n.value[i] = c * av[i];
        return finish(std::move(n));
    }

    Value log(Value a) {
        Node n = unary_node(Op::Log, a);
        const auto& av = val(a);
        for (std::size_t i = 0; i < av.size(); ++i) n.value[i] = std::log(av[i]);
        return finish(std::move(n));
    }

    Value exp(Value a) {
        Node n = unary_node(Op::Exp, a);
        const auto& av = val(a);
        for (std::size_t i = 0; i < av.size(); ++i) n.value[i] = std::exp(av[i]);
        return finish(std::move(n));
    }

    Value sigmoid(Value a) {
        Node n = unary_node(Op::Sigmoid, a);
        const auto& av = val(a);
        for (std::size_t i = 0; i < av.size(); ++i) n.value[i] = 1.0 / (1.0 + std::exp(-av[i]));
        return finish(std::move(n));
    }

    Value gelu(Value a) {
        Node n = unary_node(Op::Gelu, a);
        const auto& av = val(a);
        for (std::size_t i = 0; i < av.size(); ++i) n.value[i] = detail::gelu_fwd(av[i]);
        return finish(std::move(n));
    }

    Value sqrt(Value a) {
        Node n = unary_node(Op::Sqrt, a);
        const auto& av = val(a);
        for (std::size_t i = 0; i < av.size(); ++i) n.value[i] = std::sqrt(av[i]);
        return finish(std::move(n));
    }

    // ---- linear algebra ------------------------------------------------------

    Value matmul(Value a, Value b) {
        const auto& as = shape(a);
        const auto& bs = shape(b);
        if (as[1] != bs[0]) {
            throw std::invalid_argument("matmul: incompatible shapes " + shape_str(as) + " and " +
                                        shape_str(bs));
        }
        Node n;
        n.op = Op::Matmul;
        n.parents = {a.idx, b.idx};
        n.shape = {as[0], bs[1]};
        n.value.assign(static_cast<std::size_t>(as[0]) * bs[1], 0.0);
        detail::mm_nn_acc(val(a).data(), val(b).data(), n.value.data(), as[0], as[1], bs[1]);
        return finish(std::move(n));
    }

    Value transpose(Value a) {
        const auto& as = shape(a);
        Node n;
        n.op = Op::Transpose;
        n.parents = {a.idx};
        n.shape = {as[1], as[0]};
        n.value.resize(val(a).size());
        const auto& av = val(a);
        for (int i = 0; i < as[0]; ++i)
            for (int j = 0; j < as[1]; ++j)
                n.value[static_cast<std::size_t>(j) * as[0] + i] = av[static_cast<std::size_t>(i) * as[1] + j];
        return finish(std::move(n));
    }

    // ---- structural ----------------------------------------------------------

    Value concat(const std::vector<Value>& xs, int axis) {
        if (xs.empty()) throw std::invalid_argument("concat: no inputs");
        if (axis != 0 && axis != 1) throw std::invalid_argument("concat: axis must be 0 or 1");
        const int other = 1 - axis;
        const auto& s0 = shape(xs[0]);
        int total = 0;
        for (const Value& x : xs) {
            const auto& s = shape(x);
            if (s[other] != s0[other]) {
                throw std::invalid_argument("concat: mismatched shapes " + shape_str(s0) + " and " +
                                            shape_str(s) + " along axis " + std::to_string(axis));
            }
            total += s[axis];
        }
        Node n;
        n.op = Op::Concat;
        n.axis = axis;
        for (const Value& x : xs) n.parents.push_back(x.idx);
        n.shape = axis == 0 ? std::vector<int>{total, s0[1]} : std::vector<int>{s0[0], total};
        n.value.resize(static_cast<std::size_t>(n.shape[0]) * n.shape[1]);
        if (axis == 0) {
            std::size_t off = 0;
            for (const Value& x : xs) {
                const auto& xv = val(x);
                std::copy(xv.begin(), xv.end(), n.value.begin() + off);
                off += xv.size();
            }
        } else {
            int coff = 0;
            for (const Value& x : xs) {
                const auto& xs_ = shape(x);
                const auto& xv = val(x);
                for (int i = 0; i < xs_[0]; ++i)
                    std::copy(xv.begin() + static_cast<std::size_t>(i) * xs_[1],
                              xv.begin() + static_cast<std::size_t>(i + 1) * xs_[1],
                              n.value.begin() + static_cast<std::size_t>(i) * total + coff);
                coff += xs_[1];
            }
        }
        return finish(std::move(n));
    }

    Value slice(Value a, int axis, int start, int len) {
        const auto& as = shape(a);
        if (axis != 0 && axis != 1) throw std::invalid_argument("slice: axis must be 0 or 1");
        if (start < 0 || len <= 0 || start + len > as[axis]) {
            throw std::invalid_argument("slice: range [" + std::to_string(start) + "," +
                                        std::to_string(start + len) + ") out of bounds for shape " +
                                        shape_str(as) + " axis " + std::to_string(axis));
        }
        Node n;
        n.op = Op::Slice;
        n.parents = {a.idx};
        n.axis = axis;
        n.start = start;
        n.shape = axis == 0 ? std::vector<int>{len, as[1]} : std::vector<int>{as[0], len};
        n.value.resize(static_cast<std::size_t>(n.shape[0]) * n.shape[1]);
        const auto& av = val(a);
        if (axis == 0) {
            std::copy(av.begin() + static_cast<std::size_t>(start) * as[1],
                      av.begin() + static_cast<std::size_t>(start + len) * as[1], n.value.begin());
        } else {
            for (int i = 0; i < as[0]; ++i)
                std::copy(av.begin() + static_cast<std::size_t>(i) * as[1] + start,
                          av.begin() + static_cast<std::size_t>(i) * as[1] + start + len,
                          n.value.begin() + static_cast<std::size_t>(i) * len);
        }
        return finish(std::move(n));
    }

    // out[i] = a[rows[i]]; duplicate rows are allowed, grads scatter-add.
    Value gather_rows(Value a, std::vector<int> rows) {
        const auto& as = shape(a);
        for (int r : rows) {
            if (r < 0 || r >= as[0]) {
                throw std::invalid_argument("gather_rows: row " + std::to_string(r) +
                                            " out of bounds for shape " + shape_str(as));
            }
        }
        Node n;
        n.op = Op::GatherRows;
        n.parents = {a.idx};
        n.ids = std::move(rows);
        n.shape = {static_cast<int>(n.ids.size()), as[1]};
        n.value.resize(static_cast<std::size_t>(n.shape[0]) * n.shape[1]);
        const auto& av = val(a);
        for (std::size_t i = 0; i < n.ids.size(); ++i)
            std::copy(av.begin() + static_cast<std::size_t>(n.ids[i]) * as[1],
                      av.begin() + static_cast<std::size_t>(n.ids[i] + 1) * as[1],
                      n.value.begin() + i * as[1]);
        return finish(std::move(n));
    }

    Value reshape(Value a, std::vector<int> new_shape) {
        if (new_shape.size() != 2) throw std::invalid_argument("reshape: target rank must be 2");
        if (shape_numel(new_shape) != shape_numel(shape(a))) {
            throw std::invalid_argument("reshape: cannot reshape " + shape_str(shape(a)) + " to " +
                                        shape_str(new_shape));
        }
        Node n;
        n.op = Op::Reshape;
        n.parents = {a.idx};
        n.shape = std::move(new_shape);
        n.value = val(a);
        return finish(std::move(n));
    }

    // ---- reductions (reduced axis kept with extent 1) ------------------------

    Value sum(Value a, int axis) { return reduce(Op::Sum, a, axis); }
    Value mean(Value a, int axis) { return reduce(Op::Mean, a, axis); }

    Value softmax(Value a, int axis) {
        check_axis("softmax", axis);
        Node n = unary_node(Op::Softmax, a);
        n.axis = axis;
        const auto& as = shape(a);
        const auto& av = val(a);
        for_each_lane(as, axis, [&](int base, int stride, int len) {
            double mx = av[base];
            for (int t = 1; t < len; ++t) mx = std::max(mx, av[base + static_cast<std::size_t>(t) * stride]);
            double z = 0.0;
            for (int t = 0; t < len; ++t) {
                const std::size_t p = base + static_cast<std::size_t>(t) * stride;
                n.value[p] = std::exp(av[p] - mx);
                z += n.value[p];
            }
            for (int t = 0; t < len; ++t) n.value[base + static_cast<std::size_t>(t) * stride] /= z;
        });
        return finish(std::move(n));
    }

    Value logsumexp(Value a, int axis) {
        check_axis("logsumexp", axis);
        const auto& as = shape(a);
        Node n;
        n.op = Op::LogSumExp;
        n.parents = {a.idx};
        n.axis = axis;
        n.shape = axis == 0 ? std::vector<int>{1, as[1]} : std::vector<int>{as[0], 1};
        n.value.resize(static_cast<std::size_t>(n.shape[0]) * n.shape[1]);
        const auto& av = val(a);
        int lane = 0;
        for_each_lane(as, axis, [&](int base, int stride, int len) {
            double mx = av[base];
            for (int t = 1; t < len; ++t) mx = std::max(mx, av[base + static_cast<std::size_t>(t) * stride]);
            double z = 0.0;
            for (int t = 0; t < len; ++t) z += std::exp(av[base + static_cast<std::size_t>(t) * stride] - mx);
            n.value[lane++] = mx + std::log(z);
        });
        return finish(std::move(n));
    }

    // Row-wise normalization to zero mean / unit variance, no affine part.
    Value layer_norm(Value a) {
        Node n = unary_node(Op::LayerNorm, a);
        const auto& as = shape(a);
        const auto& av = val(a);
        const int m = as[1];
        for (int i = 0; i < as[0]; ++i) {
            const double* row = av.data() + static_cast<std::size_t>(i) * m;
            double* out = n.value.data() + static_cast<std::size_t>(i) * m;
            double mu = 0.0;
            for (int j = 0; j < m; ++j) mu += row[j];
            mu /= m;
            double var = 0.0;
            for (int j = 0; j < m; ++j) var += (row[j] - mu) * (row[j] - mu);
            var /= m;
            const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
            for (int j = 0; j < m; ++j) out[j] = (row[j] - mu) * inv;
        }
        return finish(std::move(n));
    }

    Value embedding(Value table, const std::vector<int>& ids) {
        const auto& ts = shape(table);
        for (int id : ids) {
            if (id < 0 || id >= ts[0]) {
                throw std::invalid_argument("embedding: id " + std::to_string(id) +
                                            " out of range for table " + shape_str(ts));
            }
        }
        Node n;
        n.op = Op::Embedding;
        n.parents = {table.idx};
        n.ids = ids;
        n.shape = {static_cast<int>(ids.size()), ts[1]};
        n.value.resize(static_cast<std::size_t>(n.shape[0]) * n.shape[1]);
        const auto& tv = val(table);
        for (std::size_t i = 0; i < ids.size(); ++i)
            std::copy(tv.begin() + static_cast<std::size_t>(ids[i]) * ts[1],
                      tv.begin() + static_cast<std::size_t>(ids[i] + 1) * ts[1],
                      n.value.begin() + i * ts[1]);
        return finish(std::move(n));
    }

    // Σ|a−b| over all elements; shapes must match exactly.
    Value l1_distance(Value a, Value b) {
        if (shape(a) != shape(b)) {
            throw std::invalid_argument("l1_distance: shape mismatch " + shape_str(shape(a)) + " vs " +
                                        shape_str(shape(b)));
        }
        Node n;
        n.op = Op::L1Distance;
        n.parents = {a.idx, b.idx};
        n.shape = {1, 1};
        const auto& av = val(a);
        const auto& bv = val(b);
        double s = 0.0;
        for (std::size_t i = 0; i < av.size(); ++i) s += std::abs(av[i] - bv[i]);
        n.value = {s};
        return finish(std::move(n));
    }

    // ---- access ---------------------------------------------------------------

    const std::vector<int>& shape(Value v) const { return at(v).shape; }
    const std::vector<double>& val(Value v) const { return node_val(at(v)); }
    const std::vector<double>& grad(Value v) const { return at(v).grad; }

    double scalar_value(Value v) const {
        const auto& d = val(v);
        if (d.size() != 1) {
            throw std::invalid_argument("scalar_value: node has shape " + shape_str(shape(v)));
        }
        return d[0];
    }

    std::size_t num_nodes() const { return nodes_.size(); }

    void clear() {
        nodes_.clear();
        leaf_ids_.clear();
    }

    // ---- reverse pass -----------------------------------------------------------

    // Seeds d(loss)/d(loss)=1 and propagates to every node, then accumulates
    // (+=) into the grad of each bound requires_grad leaf. Every requires_grad
    // leaf on the tape ends up with an allocated grad.
    void backward(Value loss) {
        const Node& ln = at(loss);
        if (shape_numel(ln.shape) != 1) {
            throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(ln.shape));
        }
        for (int i = 0; i <= loss.idx; ++i) {
            nodes_[static_cast<std::size_t>(i)].grad.assign(node_val(nodes_[static_cast<std::size_t>(i)]).size(),
                                                            0.0);
        }
        nodes_[static_cast<std::size_t>(loss.idx)].grad[0] = 1.0;
        for (int i = loss.idx; i >= 0; --i) backprop_node(i);
        for (auto& node : nodes_) {
            if (node.op == Op::Leaf && node.bound->requires_grad) {
                auto& g = node.bound->ensure_grad();
                for (std::size_t j = 0; j < node.grad.size(); ++j) g[j] += node.grad[j];
            }
        }
    }

private:
    static constexpr double kLayerNormEps = 1e-12;

    struct Node {
        Op op;
        std::vector<int> parents;
        std::vector<int> shape;
        std::vector<double> value;  // unset for Leaf (bound tensor holds the data)
        std::vector<double> grad;
        TensorF* bound = nullptr;
        int axis = 0;
        int start = 0;
        double c = 0.0;
        std::vector<int> ids;
    };

    std::vector<Node> nodes_;
    std::unordered_map<const TensorF*, int> leaf_ids_;

    static const char* op_name(Op op) {
        switch (op) {
            case Op::Leaf: return "leaf";
            case Op::Constant: return "constant";
            case Op::Add: return "add";
            case Op::Sub: return "sub";
            case Op::Mul: return "mul";
            case Op::Div: return "div";
            case Op::Minimum: return "minimum";
            case Op::Maximum: return "maximum";
            case Op::Scale: return "scale";
            case Op::Log: return "log";
            case Op::Exp: return "exp";
            case Op::Sigmoid: return "sigmoid";
            case Op::Gelu: return "gelu";
            case Op::Sqrt: return "sqrt";
            case Op::Matmul: return "matmul";
            case Op::Transpose: return "transpose";
            case Op::Concat: return "concat";
            case Op::Slice: return "slice";
            case Op::GatherRows: return "gather_rows";
            case Op::Reshape: return "reshape";
            case Op::Sum: return "sum";
            case Op::Mean: return "mean";
            case Op::Softmax: return "softmax";
            case Op::LogSumExp: return "logsumexp";
            case Op::LayerNorm: return "layer_norm";
            case Op::Embedding: return "embedding";
            case Op::L1Distance: return "l1_distance";
        }
        return "?";
    }

    static const std::vector<double>& node_val(const Node& n) {
        return n.bound ? n.bound->data : n.value;
    }

    const Node& at(Value v) const {
        if (v.idx < 0 || v.idx >= static_cast<int>(nodes_.size())) {
            throw std::invalid_argument("Tape: invalid value handle");
        }
        return nodes_[static_cast<std::size_t>(v.idx)];
    }

    int push(Node&& n) {
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    Value finish(Node&& n) {
        for (double v : n.value) {
            if (!std::isfinite(v)) {
                throw std::runtime_error(std::string("op ") + op_name(n.op) + ": non-finite value produced");
            }
        }
        return Value{push(std::move(n))};
    }

    Node unary_node(Op op, Value a) {
        Node n;
        n.op = op;
        n.parents = {a.idx};
        n.shape = shape(a);
        n.value.resize(val(a).size());
        return n;
    }

    static void check_axis(const char* op, int axis) {
        if (axis != 0 && axis != 1) {
            throw std::invalid_argument(std::string(op) + ": axis must be 0 or 1, got " + std::to_string(axis));
        }
    }

    // Iterates over the 1-D lanes along `axis` of an (r×c) tensor.
    template <typename F>
    static void for_each_lane(const std::vector<int>& s, int axis, F&& f) {
        if (axis == 1) {
            for (int i = 0; i < s[0]; ++i) f(i * s[1], 1, s[1]);
        } else {
            for (int j = 0; j < s[1]; ++j) f(j, s[1], s[0]);
        }
    }

    static bool bcast_shape(const std::vector<int>& a, const std::vector<int>& b, std::vector<int>& out) {
        out.resize(2);
        for (int d = 0; d < 2; ++d) {
            if (a[d] == b[d] || b[d] == 1) {
                out[d] = a[d];
            } else if (a[d] == 1) {
                out[d] = b[d];
            } else {
                return false;
            }
        }
        return true;
    }

    // Applies f(out_index, a_index, b_index) over the broadcast domain.
    template <typename F>
    static void bcast_apply(const std::vector<int>& os, const std::vector<int>& as,
                            const std::vector<int>& bs, F&& f) {
        const std::size_t ar_str = as[0] == 1 ? 0 : static_cast<std::size_t>(as[1]);
        const std::size_t ac_str = as[1] == 1 ? 0 : 1;
        const std::size_t br_str = bs[0] == 1 ? 0 : static_cast<std::size_t>(bs[1]);
        const std::size_t bc_str = bs[1] == 1 ? 0 : 1;
        std::size_t o = 0;
        for (int i = 0; i < os[0]; ++i) {
            std::size_t ai = static_cast<std::size_t>(i) * ar_str;
            std::size_t bi = static_cast<std::size_t>(i) * br_str;
            for (int j = 0; j < os[1]; ++j, ++o) {
                f(o, ai + static_cast<std::size_t>(j) * ac_str, bi + static_cast<std::size_t>(j) * bc_str);
            }
        }
    }

    Value binary(Op op, Value a, Value b) {
        const auto& as = shape(a);
        const auto& bs = shape(b);
        Node n;
        n.op = op;
        n.parents = {a.idx, b.idx};
        if (!bcast_shape(as, bs, n.shape)) {
            throw std::invalid_argument(std::string(op_name(op)) + ": incompatible shapes " + shape_str(as) +
                                        " and " + shape_str(bs));
        }
        n.value.resize(static_cast<std::size_t>(n.shape[0]) * n.shape[1]);
        const auto& av = val(a);
        const auto& bv = val(b);
        switch (op) {
            case Op::Add:
                bcast_apply(n.shape, as, bs, [&](std::size_t o, std::size_t i, std::size_t j) {
                    n.value[o] = av[i] + bv[j];
                });
                break;
            case Op::Sub:
                bcast_apply(n.shape, as, bs, [&](std::size_t o, std::size_t i, std::size_t j) {
                    n.value[o] = av[i] - bv[j];
                });
                break;
            case Op::Mul:
                bcast_apply(n.shape, as, bs, [&](std::size_t o, std::size_t i, std::size_t j) {
                    n.value[o] = av[i] * bv[j];
                });
                break;
            case Op::Div:
                bcast_apply(n.shape, as, bs, [&](std::size_t o, std::size_t i, std::size_t j) {
                    n.value[o] = av[i] / bv[j];
                });
                break;
            case Op::Minimum:
                bcast_apply(n.shape, as, bs, [&](std::size_t o, std::size_t i, std::size_t j) {
                    n.value[o] = av[i] <= bv[j] ? av[i] : bv[j];
                });
                break;
            case Op::Maximum:
                bcast_apply(n.shape, as, bs, [&](std::size_t o, std::size_t i, std::size_t j) {
                    n.value[o] = av[i] >= bv[j] ? av[i] : bv[j];
                });
                break;
            default:
                throw std::logic_error("binary: not a binary op");
        }
        return finish(std::move(n));
    }

    Value reduce(Op op, Value a, int axis) {
        check_axis(op == Op::Sum ? "sum" : "mean", axis);
        const auto& as = shape(a);
        Node n;
        n.op = op;
        n.parents = {a.idx};
        n.axis = axis;
        n.shape = axis == 0 ? std::vector<int>{1, as[1]} : std::vector<int>{as[0], 1};
        n.value.assign(static_cast<std::size_t>(n.shape[0]) * n.shape[1], 0.0);
        const auto& av = val(a);
        int lane = 0;
        for_each_lane(as, axis, [&](int base, int stride, int len) {
            double s = 0.0;
            for (int t = 0; t < len; ++t) s += av[base + static_cast<std::size_t>(t) * stride];
            n.value[lane++] = op == Op::Sum ? s : s / len;
        });
        return finish(std::move(n));
    }

    std::vector<double>& pgrad(int idx) { return nodes_[static_cast<std::size_t>(idx)].grad; }
    const std::vector<double>& pval(int idx) const { return node_val(nodes_[static_cast<std::size_t>(idx)]); }
    const std::vector<int>& pshape(int idx) const { return nodes_[static_cast<std::size_t>(idx)].shape; }

    void backprop_node(int i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        const auto& g = n.grad;
        switch (n.op) {
            case Op::Leaf:
            case Op::Constant:
                break;
            case Op::Add: {
                bcast_apply(n.shape, pshape(n.parents[0]), pshape(n.parents[1]),
                            [&](std::size_t o, std::size_t ia, std::size_t ib) {
                                pgrad(n.parents[0])[ia] += g[o];
                                pgrad(n.parents[1])[ib] += g[o];
                            });
                break;
            }
            case Op::Sub: {
                bcast_apply(n.shape, pshape(n.parents[0]), pshape(n.parents[1]),
                            [&](std::size_t o, std::size_t ia, std::size_t ib) {
                                pgrad(n.parents[0])[ia] += g[o];
                                pgrad(n.parents[1])[ib] -= g[o];
                            });
                break;
            }
            case Op::Mul: {
                const auto& av = pval(n.parents[0]);
                const auto& bv = pval(n.parents[1]);
                bcast_apply(n.shape, pshape(n.parents[0]), pshape(n.parents[1]),
                            [&](std::size_t o, std::size_t ia, std::size_t ib) {
                                pgrad(n.parents[0])[ia] += g[o] * bv[ib];
                                pgrad(n.parents[1])[ib] += g[o] * av[ia];
                            });
                break;
            }
            case Op::Div: {
                const auto& av = pval(n.parents[0]);
                const auto& bv = pval(n.parents[1]);
                bcast_apply(n.shape, pshape(n.parents[0]), pshape(n.parents[1]),
                            [&](std::size_t o, std::size_t ia, std::size_t ib) {
                                pgrad(n.parents[0])[ia] += g[o] / bv[ib];
                                pgrad(n.parents[1])[ib] -= g[o] * av[ia] / (bv[ib] * bv[ib]);
                            });
                break;
            }
            case Op::Minimum: {
                const auto& av = pval(n.parents[0]);
                const auto& bv = pval(n.parents[1]);
                bcast_apply(n.shape, pshape(n.parents[0]), pshape(n.parents[1]),
                            [&](std::size_t o, std::size_t ia, std::size_t ib) {
                                if (av[ia] <= bv[ib])
                                    pgrad(n.parents[0])[ia] += g[o];
                                else
                                    pgrad(n.parents[1])[ib] += g[o];
                            });
                break;
            }
            case Op::Maximum: {
                const auto& av = pval(n.parents[0]);
                const auto& bv = pval(n.parents[1]);
                bcast_apply(n.shape, pshape(n.parents[0]), pshape(n.parents[1]),
                            [&](std::size_t o, std::size_t ia, std::size_t ib) {
                                if (av[ia] >= bv[ib])
                                    pgrad(n.parents[0])[ia] += g[o];
                                else
                                    pgrad(n.parents[1])[ib] += g[o];
                            });
                break;
            }
            case Op::Scale: {
                auto& pg = pgrad(n.parents[0]);
                for (std::size_t t = 0; t < g.size(); ++t) pg[t] += n.c * g[t];
                break;
            }
            case Op::Log: {
                const auto& av = pval(n.parents[0]);
                auto& pg = pgrad(n.parents[0]);
                for (std::size_t t = 0; t < g.size(); ++t) pg[t] += g[t] / av[t];
                break;
            }
            case Op::Exp: {
                auto& pg = pgrad(n.parents[0]);
                for (std::size_t t = 0; t < g.size(); ++t) pg[t] += g[t] * n.value[t];
                break;
            }
            case Op::Sigmoid: {
                auto& pg = pgrad(n.parents[0]);
                for (std::size_t t = 0; t < g.size(); ++t) pg[t] += g[t] * n.value[t] * (1.0 - n.value[t]);
                break;
            }
            case Op::Gelu: {
                const auto& av = pval(n.parents[0]);
                auto& pg = pgrad(n.parents[0]);
                for (std::size_t t = 0; t < g.size(); ++t) pg[t] += g[t] * detail::gelu_deriv(av[t]);
                break;
            }
            case Op::Sqrt: {
                auto& pg = pgrad(n.parents[0]);
                for (std::size_t t = 0; t < g.size(); ++t) pg[t] += g[t] * 0.5 / n.value[t];
                break;
            }
            case Op::Matmul: {
                const auto& as = pshape(n.parents[0]);
                const auto& bs = pshape(n.parents[1]);
                detail::mm_nt_acc(g.data(), pval(n.parents[1]).data(), pgrad(n.parents[0]).data(), as[0],
                                  as[1], bs[1]);
                detail::mm_tn_acc(pval(n.parents[0]).data(), g.data(), pgrad(n.parents[1]).data(), as[0],
                                  as[1], bs[1]);
                break;
            }
            case Op::Transpose: {
                auto& pg = pgrad(n.parents[0]);
                const auto& ps = pshape(n.parents[0]);
                for (int r = 0; r < ps[0]; ++r)
                    for (int c2 = 0; c2 < ps[1]; ++c2)
                        pg[static_cast<std::size_t>(r) * ps[1] + c2] +=
                            g[static_cast<std::size_t>(c2) * ps[0] + r];
                break;
            }
            case Op::Concat: {
                if (n.axis == 0) {
                    std::size_t off = 0;
                    for (int p : n.parents) {
                        auto& pg = pgrad(p);
                        for (std::size_t t = 0; t < pg.size(); ++t) pg[t] += g[off + t];
                        off += pg.size();
                    }
                } else {
                    const int total = n.shape[1];
                    int coff = 0;
                    for (int p : n.parents) {
                        const auto& ps = pshape(p);
                        auto& pg = pgrad(p);
                        for (int r = 0; r < ps[0]; ++r)
                            for (int c2 = 0; c2 < ps[1]; ++c2)
                                pg[static_cast<std::size_t>(r) * ps[1] + c2] +=
                                    g[static_cast<std::size_t>(r) * total + coff + c2];
                        coff += ps[1];
                    }
                }
                break;
            }
            case Op::Slice: {
                auto& pg = pgrad(n.parents[0]);
                const auto& ps = pshape(n.parents[0]);
                if (n.axis == 0) {
                    for (std::size_t t = 0; t < g.size(); ++t)
                        pg[static_cast<std::size_t>(n.start) * ps[1] + t] += g[t];
                } else {
                    for (int r = 0; r < n.shape[0]; ++r)
                        for (int c2 = 0; c2 < n.shape[1]; ++c2)
                            pg[static_cast<std::size_t>(r) * ps[1] + n.start + c2] +=
                                g[static_cast<std::size_t>(r) * n.shape[1] + c2];
                }
                break;
            }
            case Op::GatherRows: {
                auto& pg = pgrad(n.parents[0]);
                const int m = n.shape[1];
                for (std::size_t r = 0; r < n.ids.size(); ++r)
                    for (int c2 = 0; c2 < m; ++c2)
                        pg[static_cast<std::size_t>(n.ids[r]) * m + c2] += g[r * m + c2];
                break;
            }
            case Op::Reshape: {
                auto& pg = pgrad(n.parents[0]);
                for (std::size_t t = 0; t < g.size(); ++t) pg[t] += g[t];
                break;
            }
            case Op::Sum:
            case Op::Mean: {
                auto& pg = pgrad(n.parents[0]);
                const auto& ps = pshape(n.parents[0]);
                int lane = 0;
                for_each_lane(ps, n.axis, [&](int base, int stride, int len) {
                    const double gv = n.op == Op::Sum ? g[lane] : g[lane] / len;
                    ++lane;
                    for (int t = 0; t < len; ++t) pg[base + static_cast<std::size_t>(t) * stride] += gv;
                });
                break;
            }
            case Op::Softmax: {
                auto& pg = pgrad(n.parents[0]);
                const auto& ps = pshape(n.parents[0]);
                for_each_lane(ps, n.axis, [&](int base, int stride, int len) {
                    double dot = 0.0;
                    for (int t = 0; t < len; ++t) {
                        const std::size_t p = base + static_cast<std::size_t>(t) * stride;
                        dot += g[p] * n.value[p];
                    }
                    for (int t = 0; t < len; ++t) {
                        const std::size_t p = base + static_cast<std::size_t>(t) * stride;
                        pg[p] += n.value[p] * (g[p] - dot);
                    }
                });
                break;
            }
            case Op::LogSumExp: {
                auto& pg = pgrad(n.parents[0]);
                const auto& ps = pshape(n.parents[0]);
                const auto& av = pval(n.parents[0]);
                int lane = 0;
                for_each_lane(ps, n.axis, [&](int base, int stride, int len) {
                    const double gv = g[lane];
                    const double lse = n.value[lane];
                    ++lane;
                    for (int t = 0; t < len; ++t) {
                        const std::size_t p = base + static_cast<std::size_t>(t) * stride;
                        pg[p] += gv * std::exp(av[p] - lse);
                    }
                });
                break;
            }
            case Op::LayerNorm: {
                auto& pg = pgrad(n.parents[0]);
                const auto& ps = pshape(n.parents[0]);
                const auto& av = pval(n.parents[0]);
                const int m = ps[1];
                for (int r = 0; r < ps[0]; ++r) {
                    const std::size_t base = static_cast<std::size_t>(r) * m;
                    double mu = 0.0;
                    for (int j = 0; j < m; ++j) mu += av[base + j];
                    mu /= m;
                    double var = 0.0;
                    for (int j = 0; j < m; ++j) var += (av[base + j] - mu) * (av[base + j] - mu);
                    var /= m;
                    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
                    double gmean = 0.0, gymean = 0.0;
                    for (int j = 0; j < m; ++j) {
                        gmean += g[base + j];
                        gymean += g[base + j] * n.value[base + j];
                    }
                    gmean /= m;
                    gymean /= m;
                    for (int j = 0; j < m; ++j) {
                        pg[base + j] += inv * (g[base + j] - gmean - n.value[base + j] * gymean);
                    }
                }
                break;
            }
            case Op::Embedding: {
                auto& pg = pgrad(n.parents[0]);
                const int m = n.shape[1];
                for (std::size_t r = 0; r < n.ids.size(); ++r)
                    for (int c2 = 0; c2 < m; ++c2)
                        pg[static_cast<std::size_t>(n.ids[r]) * m + c2] += g[r * m + c2];
                break;
            }
            case Op::L1Distance: {
                const auto& av = pval(n.parents[0]);
                const auto& bv = pval(n.parents[1]);
                auto& ga = pgrad(n.parents[0]);
                auto& gb = pgrad(n.parents[1]);
                const double gv = g[0];
                for (std::size_t t = 0; t < av.size(); ++t) {
                    const double d = av[t] - bv[t];
                    const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                    ga[t] += gv * s;
                    gb[t] -= gv * s;
                }
                break;
            }
        }
    }
};

}  // namespace prodseek
