#ifndef OTFE_GRAPH_HPP
#define OTFE_GRAPH_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "otfe/matrix.hpp"

namespace otfe {

// Reverse-mode tape over dense matrices with a fixed operation set.
// Nodes are appended in execution order; gradients() walks the tape
// backwards once, accumulating in that fixed order so results are
// deterministic. A single Graph instance is confined to one execution
// context; parameters enter as leaves and are read-only during a pass.

struct NodeId {
    int v = -1;
    bool valid() const { return v >= 0; }
};

namespace detail {
constexpr double kNormEps = 1e-12;   // zero-row guard for l2 normalization
constexpr double kLayerNormEps = 1e-5;

template <typename T>
inline T gelu_value(T x) {
    return T(0.5) * x * (T(1) + static_cast<T>(std::erf(static_cast<double>(x) / std::sqrt(2.0))));
}

template <typename T>
inline T gelu_grad(T x) {
    const double xd = static_cast<double>(x);
    const double cdf = 0.5 * (1.0 + std::erf(xd / std::sqrt(2.0)));
    const double pdf = std::exp(-0.5 * xd * xd) / std::sqrt(2.0 * 3.14159265358979323846);
    return static_cast<T>(cdf + xd * pdf);
}
}  // namespace detail

template <typename T>
class Graph {
public:
    enum class Op : std::uint8_t {
        Leaf,
        Constant,
        MatMul,
        Add,
        AddRowBias,
        AddScalar,
        Scale,          // multiply or divide by a compile-time constant
        ScaleByNode,    // broadcast-multiply by a 1x1 node
        Hadamard,
        RowL2Normalize,
        MaskedSoftmax,
        MaskedLogSoftmax,
        MaskedRowMax,
        MaskedMean,
        LayerNorm,
        Gelu,
        Transpose,
        SliceCols,
        ConcatCols,
        SumAll,
        StackScalars,
        MaskRows,
    };

    // ---- leaves and constants -------------------------------------------

    NodeId leaf(Matrix<T> value, std::string name = {}) {
        NodeId id = push(Op::Leaf, std::move(value), {}, true);
        node(id).name = std::move(name);
        leaves_.push_back(id.v);
        return id;
    }

    NodeId constant(Matrix<T> value) { return push(Op::Constant, std::move(value), {}, false); }

    NodeId scalar_constant(T x) {
        Matrix<T> m(1, 1);
        m(0, 0) = x;
        return constant(std::move(m));
    }

    // ---- ops -------------------------------------------------------------

    NodeId matmul(NodeId a, NodeId b) {
        const Matrix<T>& A = value(a);
        const Matrix<T>& B = value(b);
        if (A.cols() != B.rows())
            throw ShapeError("matmul: incompatible shapes " + A.shape_str() + " * " + B.shape_str());
        Matrix<T> C(A.rows(), B.cols());
        for (int i = 0; i < A.rows(); ++i)
            for (int k = 0; k < A.cols(); ++k) {
                const T aik = A(i, k);
                if (aik == T(0)) continue;
                const T* brow = B.row(k);
                T* crow = C.row(i);
                for (int j = 0; j < B.cols(); ++j) crow[j] += aik * brow[j];
            }
        return push(Op::MatMul, std::move(C), {a, b});
    }

    NodeId add(NodeId a, NodeId b) {
        const Matrix<T>& A = value(a);
        const Matrix<T>& B = value(b);
        if (!A.same_shape(B))
            throw ShapeError("add: shape mismatch " + A.shape_str() + " vs " + B.shape_str());
        Matrix<T> C = A;
        for (std::size_t i = 0; i < C.size(); ++i) C.data()[i] += B.data()[i];
        return push(Op::Add, std::move(C), {a, b});
    }

    // X (n x d) + bias (1 x d), broadcast over rows.
    NodeId add_row_bias(NodeId x, NodeId bias) {
        const Matrix<T>& X = value(x);
        const Matrix<T>& B = value(bias);
        if (B.rows() != 1 || B.cols() != X.cols())
            throw ShapeError("add-row-bias: bias " + B.shape_str() + " vs input " + X.shape_str());
        Matrix<T> C = X;
        for (int r = 0; r < C.rows(); ++r)
            for (int c = 0; c < C.cols(); ++c) C(r, c) += B(0, c);
        return push(Op::AddRowBias, std::move(C), {x, bias});
    }

    // X + s, s a 1x1 node broadcast to every entry.
    NodeId add_scalar(NodeId x, NodeId s) {
        const Matrix<T>& X = value(x);
        const Matrix<T>& S = value(s);
        if (S.rows() != 1 || S.cols() != 1) throw ShapeError("add-scalar: scalar operand must be 1x1");
        Matrix<T> C = X;
        for (std::size_t i = 0; i < C.size(); ++i) C.data()[i] += S(0, 0);
        return push(Op::AddScalar, std::move(C), {x, s});
    }

    NodeId scale(NodeId x, double c) {
        Matrix<T> C = value(x);
        for (std::size_t i = 0; i < C.size(); ++i) C.data()[i] = static_cast<T>(C.data()[i] * static_cast<T>(c));
        NodeId id = push(Op::Scale, std::move(C), {x});
        node(id).c = c;
        node(id).divide = false;
        return id;
    }

    // X / c elementwise. Division (not reciprocal multiply) so that
    // expressions like (1 + p) / (1 + p) come out exactly 1.
    NodeId divide(NodeId x, double c) {
        if (c == 0.0) throw ShapeError("divide: zero divisor");
        Matrix<T> C = value(x);
        for (std::size_t i = 0; i < C.size(); ++i) C.data()[i] = static_cast<T>(C.data()[i] / static_cast<T>(c));
        NodeId id = push(Op::Scale, std::move(C), {x});
        node(id).c = c;
        node(id).divide = true;
        return id;
    }

    NodeId scale_by(NodeId x, NodeId s) {
        const Matrix<T>& X = value(x);
        const Matrix<T>& S = value(s);
        if (S.rows() != 1 || S.cols() != 1) throw ShapeError("scale-by: scalar operand must be 1x1");
        Matrix<T> C = X;
        for (std::size_t i = 0; i < C.size(); ++i) C.data()[i] *= S(0, 0);
        return push(Op::ScaleByNode, std::move(C), {x, s});
    }

    NodeId hadamard(NodeId a, NodeId b) {
        const Matrix<T>& A = value(a);
        const Matrix<T>& B = value(b);
        if (!A.same_shape(B))
            throw ShapeError("hadamard: shape mismatch " + A.shape_str() + " vs " + B.shape_str());
        Matrix<T> C = A;
        for (std::size_t i = 0; i < C.size(); ++i) C.data()[i] *= B.data()[i];
        return push(Op::Hadamard, std::move(C), {a, b});
    }

    NodeId row_l2_normalize(NodeId x, bool strict = false) {
        const Matrix<T>& X = value(x);
        Matrix<T> C(X.rows(), X.cols());
        std::vector<T> norms(static_cast<std::size_t>(X.rows()));
        for (int r = 0; r < X.rows(); ++r) {
            double s = 0;
            for (int c = 0; c < X.cols(); ++c) s += static_cast<double>(X(r, c)) * X(r, c);
            const double n = std::sqrt(s);
            if (n == 0.0 && strict)
                throw ShapeError("row-l2-normalize: zero row " + std::to_string(r) + " in strict mode");
            norms[static_cast<std::size_t>(r)] = static_cast<T>(n);
            if (n < detail::kNormEps) continue;  // row stays zero
            for (int c = 0; c < X.cols(); ++c) C(r, c) = static_cast<T>(X(r, c) / static_cast<T>(n));
        }
        NodeId id = push(Op::RowL2Normalize, std::move(C), {x});
        node(id).aux = std::move(norms);
        return id;
    }

    // Softmax along each row over active columns; inactive columns get 0.
    NodeId masked_softmax(NodeId x, const Mask& mask) {
        check_col_mask("masked-softmax", value(x), mask);
        const Matrix<T>& X = value(x);
        Matrix<T> C(X.rows(), X.cols());
        for (int r = 0; r < X.rows(); ++r) {
            T mx = lowest();
            for (int c = 0; c < X.cols(); ++c)
                if (mask.active(c)) mx = std::max(mx, X(r, c));
            T z = 0;
            for (int c = 0; c < X.cols(); ++c)
                if (mask.active(c)) {
                    C(r, c) = static_cast<T>(std::exp(static_cast<double>(X(r, c) - mx)));
                    z += C(r, c);
                }
            for (int c = 0; c < X.cols(); ++c)
                if (mask.active(c)) C(r, c) /= z;
        }
        NodeId id = push(Op::MaskedSoftmax, std::move(C), {x});
        node(id).mask = mask;
        return id;
    }

    // log softmax along each row over active columns; inactive columns get 0.
    // Kept fused so large logit scales stay finite.
    NodeId masked_log_softmax(NodeId x, const Mask& mask) {
        check_col_mask("masked-log-softmax", value(x), mask);
        const Matrix<T>& X = value(x);
        Matrix<T> C(X.rows(), X.cols());
        for (int r = 0; r < X.rows(); ++r) {
            T mx = lowest();
            for (int c = 0; c < X.cols(); ++c)
                if (mask.active(c)) mx = std::max(mx, X(r, c));
            double z = 0;
            for (int c = 0; c < X.cols(); ++c)
                if (mask.active(c)) z += std::exp(static_cast<double>(X(r, c) - mx));
            const T lse = mx + static_cast<T>(std::log(z));
            for (int c = 0; c < X.cols(); ++c)
                if (mask.active(c)) C(r, c) = X(r, c) - lse;
        }
        NodeId id = push(Op::MaskedLogSoftmax, std::move(C), {x});
        node(id).mask = mask;
        return id;
    }

    // Per-row max over active columns -> n x 1. Ties resolved to the lowest
    // column index (also the subgradient choice in backward).
    NodeId masked_row_max(NodeId x, const Mask& mask) {
        check_col_mask("masked-row-max", value(x), mask);
        const Matrix<T>& X = value(x);
        Matrix<T> C(X.rows(), 1);
        std::vector<int> arg(static_cast<std::size_t>(X.rows()), -1);
        for (int r = 0; r < X.rows(); ++r) {
            T best = lowest();
            int bj = -1;
            for (int c = 0; c < X.cols(); ++c)
                if (mask.active(c) && X(r, c) > best) {
                    best = X(r, c);
                    bj = c;
                }
            C(r, 0) = best;
            arg[static_cast<std::size_t>(r)] = bj;
        }
        NodeId id = push(Op::MaskedRowMax, std::move(C), {x});
        node(id).mask = mask;
        node(id).argmax = std::move(arg);
        return id;
    }

    // Mean over active rows -> 1 x d.
    NodeId masked_mean(NodeId x, const Mask& mask) {
        const Matrix<T>& X = value(x);
        if (mask.size() != X.rows())
            throw ShapeError("masked-mean: mask length " + std::to_string(mask.size()) +
                             " vs rows " + std::to_string(X.rows()));
        mask.require_nonempty("masked-mean");
        const int m = mask.active_count();
        Matrix<T> C(1, X.cols());
        for (int r = 0; r < X.rows(); ++r)
            if (mask.active(r))
                for (int c = 0; c < X.cols(); ++c) C(0, c) += X(r, c);
        for (int c = 0; c < X.cols(); ++c) C(0, c) /= static_cast<T>(m);
        NodeId id = push(Op::MaskedMean, std::move(C), {x});
        node(id).mask = mask;
        return id;
    }

    NodeId layer_norm(NodeId x, NodeId gain, NodeId bias) {
        const Matrix<T>& X = value(x);
        const Matrix<T>& G = value(gain);
        const Matrix<T>& B = value(bias);
        if (G.rows() != 1 || G.cols() != X.cols() || B.rows() != 1 || B.cols() != X.cols())
            throw ShapeError("layer-norm: gain/bias must be 1x" + std::to_string(X.cols()));
        const int d = X.cols();
        Matrix<T> C(X.rows(), d);
        Matrix<T> xhat(X.rows(), d);
        std::vector<T> inv_std(static_cast<std::size_t>(X.rows()));
        for (int r = 0; r < X.rows(); ++r) {
            double mu = 0;
            for (int c = 0; c < d; ++c) mu += X(r, c);
            mu /= d;
            double var = 0;
            for (int c = 0; c < d; ++c) {
                const double t = X(r, c) - mu;
                var += t * t;
            }
            var /= d;
            const double inv = 1.0 / std::sqrt(var + detail::kLayerNormEps);
            inv_std[static_cast<std::size_t>(r)] = static_cast<T>(inv);
            for (int c = 0; c < d; ++c) {
                xhat(r, c) = static_cast<T>((X(r, c) - mu) * inv);
                C(r, c) = G(0, c) * xhat(r, c) + B(0, c);
            }
        }
        NodeId id = push(Op::LayerNorm, std::move(C), {x, gain, bias});
        node(id).saved = std::move(xhat);
        node(id).aux = std::move(inv_std);
        return id;
    }

    NodeId gelu(NodeId x) {
        Matrix<T> C = value(x);
        for (std::size_t i = 0; i < C.size(); ++i) C.data()[i] = detail::gelu_value(C.data()[i]);
        return push(Op::Gelu, std::move(C), {x});
    }

    NodeId transpose(NodeId x) {
        const Matrix<T>& X = value(x);
        Matrix<T> C(X.cols(), X.rows());
        for (int r = 0; r < X.rows(); ++r)
            for (int c = 0; c < X.cols(); ++c) C(c, r) = X(r, c);
        return push(Op::Transpose, std::move(C), {x});
    }

    // Row-wise cosine similarity matrix: (n x d, m x d) -> n x m.
    // Recorded as normalize + normalize + matmul on the tape.
    NodeId cosine_matrix(NodeId a, NodeId b, bool strict = false) {
        const Matrix<T>& A = value(a);
        const Matrix<T>& B = value(b);
        if (A.cols() != B.cols())
            throw ShapeError("cosine-matrix: width mismatch " + A.shape_str() + " vs " + B.shape_str());
        NodeId an = row_l2_normalize(a, strict);
        NodeId bn = row_l2_normalize(b, strict);
        return matmul(an, transpose(bn));
    }

    NodeId slice_cols(NodeId x, int j0, int j1) {
        const Matrix<T>& X = value(x);
        if (j0 < 0 || j1 > X.cols() || j0 >= j1)
            throw ShapeError("slice-cols: bad range [" + std::to_string(j0) + "," + std::to_string(j1) +
                             ") for " + X.shape_str());
        Matrix<T> C(X.rows(), j1 - j0);
        for (int r = 0; r < X.rows(); ++r)
            for (int c = j0; c < j1; ++c) C(r, c - j0) = X(r, c);
        NodeId id = push(Op::SliceCols, std::move(C), {x});
        node(id).j0 = j0;
        node(id).j1 = j1;
        return id;
    }

    NodeId concat_cols(const std::vector<NodeId>& parts) {
        if (parts.empty()) throw ShapeError("concat-cols: no inputs");
        const int rows = value(parts[0]).rows();
        int cols = 0;
        for (NodeId p : parts) {
            if (value(p).rows() != rows) throw ShapeError("concat-cols: row mismatch");
            cols += value(p).cols();
        }
        Matrix<T> C(rows, cols);
        int off = 0;
        for (NodeId p : parts) {
            const Matrix<T>& P = value(p);
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < P.cols(); ++c) C(r, off + c) = P(r, c);
            off += P.cols();
        }
        return push(Op::ConcatCols, std::move(C), parts);
    }

    NodeId sum_all(NodeId x) {
        const Matrix<T>& X = value(x);
        Matrix<T> C(1, 1);
        T s = 0;
        for (std::size_t i = 0; i < X.size(); ++i) s += X.data()[i];
        C(0, 0) = s;
        return push(Op::SumAll, std::move(C), {x});
    }

    // Assemble a rows x cols matrix from 1x1 nodes, row-major.
    NodeId stack_scalars(int rows, int cols, const std::vector<NodeId>& cells) {
        if (static_cast<int>(cells.size()) != rows * cols)
            throw ShapeError("stack-scalars: expected " + std::to_string(rows * cols) + " cells, got " +
                             std::to_string(cells.size()));
        Matrix<T> C(rows, cols);
        for (int i = 0; i < rows * cols; ++i) {
            const Matrix<T>& V = value(cells[static_cast<std::size_t>(i)]);
            if (V.rows() != 1 || V.cols() != 1) throw ShapeError("stack-scalars: cell is not 1x1");
            C.data()[i] = V(0, 0);
        }
        return push(Op::StackScalars, std::move(C), cells);
    }

    // Zero out inactive rows.
    NodeId mask_rows(NodeId x, const Mask& mask) {
        const Matrix<T>& X = value(x);
        if (mask.size() != X.rows())
            throw ShapeError("mask-rows: mask length " + std::to_string(mask.size()) + " vs rows " +
                             std::to_string(X.rows()));
        mask.require_nonempty("mask-rows");
        Matrix<T> C = X;
        for (int r = 0; r < X.rows(); ++r)
            if (!mask.active(r))
                for (int c = 0; c < X.cols(); ++c) C(r, c) = T(0);
        NodeId id = push(Op::MaskRows, std::move(C), {x});
        node(id).mask = mask;
        return id;
    }

    // Name-based dispatch over the fixed op set.
    NodeId forward_op(std::string_view name, const std::vector<NodeId>& inputs, const Mask* mask = nullptr) {
        auto need = [&](std::size_t n) {
            if (inputs.size() != n)
                throw ShapeError(std::string(name) + ": expected " + std::to_string(n) + " inputs, got " +
                                 std::to_string(inputs.size()));
        };
        auto need_mask = [&]() -> const Mask& {
            if (mask == nullptr) throw ShapeError(std::string(name) + ": mask required");
            mask->require_nonempty(std::string(name).c_str());
            return *mask;
        };
        if (name == "matmul") { need(2); return matmul(inputs[0], inputs[1]); }
        if (name == "add") { need(2); return add(inputs[0], inputs[1]); }
        if (name == "scale") { need(2); return scale_by(inputs[0], inputs[1]); }
        if (name == "row-l2-normalize") { need(1); return row_l2_normalize(inputs[0]); }
        if (name == "masked-softmax") { need(1); return masked_softmax(inputs[0], need_mask()); }
        if (name == "masked-row-max") { need(1); return masked_row_max(inputs[0], need_mask()); }
        if (name == "masked-mean") { need(1); return masked_mean(inputs[0], need_mask()); }
        if (name == "layer-norm") { need(3); return layer_norm(inputs[0], inputs[1], inputs[2]); }
        if (name == "gelu") { need(1); return gelu(inputs[0]); }
        if (name == "cosine-matrix") { need(2); return cosine_matrix(inputs[0], inputs[1]); }
        if (name == "transpose") { need(1); return transpose(inputs[0]); }
        throw ShapeError("forward_op: unknown op '" + std::string(name) + "'");
    }

    // ---- access ------------------------------------------------------------

    const Matrix<T>& value(NodeId id) const { return nodes_[static_cast<std::size_t>(id.v)].value; }
    T scalar(NodeId id) const {
        const Matrix<T>& m = value(id);
        if (m.rows() != 1 || m.cols() != 1) throw ShapeError("scalar: node is " + m.shape_str());
        return m(0, 0);
    }
    const std::string& leaf_name(NodeId id) const { return nodes_[static_cast<std::size_t>(id.v)].name; }
    const std::vector<int>& leaf_ids() const { return leaves_; }
    std::size_t node_count() const { return nodes_.size(); }

    // ---- backward ------------------------------------------------------------

    // dLoss/dLeaf for every leaf; unused leaves map to zero matrices.
    std::map<int, Matrix<T>> gradients(NodeId loss) {
        const Matrix<T>& L = value(loss);
        if (L.rows() != 1 || L.cols() != 1)
            throw ShapeError("gradients: loss must be scalar, got " + L.shape_str());

        std::vector<Matrix<T>> grad(static_cast<std::size_t>(loss.v) + 1);
        grad[static_cast<std::size_t>(loss.v)] = Matrix<T>(1, 1, T(1));

        for (int i = loss.v; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            Matrix<T>& g = grad[static_cast<std::size_t>(i)];
            if (g.empty() || !n.requires_grad) continue;
            backward_node(n, g, grad);
            if (n.op != Op::Leaf) g = Matrix<T>();  // free intermediate grads early
        }

        std::map<int, Matrix<T>> out;
        for (int lid : leaves_) {
            const Node& n = nodes_[static_cast<std::size_t>(lid)];
            if (lid <= loss.v && !grad[static_cast<std::size_t>(lid)].empty())
                out[lid] = std::move(grad[static_cast<std::size_t>(lid)]);
            else
                out[lid] = Matrix<T>(n.value.rows(), n.value.cols());
        }
        return out;
    }

private:
    struct Node {
        Op op;
        Matrix<T> value;
        std::vector<int> in;
        bool requires_grad = false;
        std::string name;        // leaves only
        double c = 0;            // Scale
        bool divide = false;     // Scale
        int j0 = 0, j1 = 0;      // SliceCols
        Mask mask;               // masked ops
        std::vector<T> aux;      // norms (RowL2Normalize), inv_std (LayerNorm)
        Matrix<T> saved;         // xhat (LayerNorm)
        std::vector<int> argmax; // MaskedRowMax
    };

    static T lowest() { return std::numeric_limits<T>::lowest(); }

    Node& node(NodeId id) { return nodes_[static_cast<std::size_t>(id.v)]; }

    static void check_col_mask(const char* op, const Matrix<T>& x, const Mask& mask) {
        if (mask.size() != x.cols())
            throw ShapeError(std::string(op) + ": mask length " + std::to_string(mask.size()) +
                             " vs cols " + std::to_string(x.cols()));
        mask.require_nonempty(op);
    }

    NodeId push(Op op, Matrix<T> value, const std::vector<NodeId>& inputs, bool requires_grad = false) {
        Node n;
        n.op = op;
        n.value = std::move(value);
        n.in.reserve(inputs.size());
        for (NodeId i : inputs) {
            n.in.push_back(i.v);
            if (nodes_[static_cast<std::size_t>(i.v)].requires_grad) requires_grad = true;
        }
        n.requires_grad = requires_grad || op == Op::Leaf;
        nodes_.push_back(std::move(n));
        return NodeId{static_cast<int>(nodes_.size()) - 1};
    }

    Matrix<T>& grad_of(int idx, std::vector<Matrix<T>>& grad) {
        Matrix<T>& g = grad[static_cast<std::size_t>(idx)];
        if (g.empty()) {
            const Matrix<T>& v = nodes_[static_cast<std::size_t>(idx)].value;
            g = Matrix<T>(v.rows(), v.cols());
        }
        return g;
    }

    bool wants_grad(int idx) const { return nodes_[static_cast<std::size_t>(idx)].requires_grad; }

    void backward_node(Node& n, const Matrix<T>& g, std::vector<Matrix<T>>& grad) {
        switch (n.op) {
            case Op::Leaf:
            case Op::Constant:
                return;
            case Op::MatMul: {
                const Matrix<T>& A = nodes_[static_cast<std::size_t>(n.in[0])].value;
                const Matrix<T>& B = nodes_[static_cast<std::size_t>(n.in[1])].value;
                if (wants_grad(n.in[0])) {
                    Matrix<T>& da = grad_of(n.in[0], grad);
                    for (int i = 0; i < A.rows(); ++i)
                        for (int j = 0; j < B.cols(); ++j) {
                            const T gij = g(i, j);
                            if (gij == T(0)) continue;
                            for (int k = 0; k < A.cols(); ++k) da(i, k) += gij * B(k, j);
                        }
                }
                if (wants_grad(n.in[1])) {
                    Matrix<T>& db = grad_of(n.in[1], grad);
                    for (int i = 0; i < A.rows(); ++i)
                        for (int k = 0; k < A.cols(); ++k) {
                            const T aik = A(i, k);
                            if (aik == T(0)) continue;
                            for (int j = 0; j < B.cols(); ++j) db(k, j) += aik * g(i, j);
                        }
                }
                return;
            }
            case Op::Add: {
                for (int s = 0; s < 2; ++s)
                    if (wants_grad(n.in[static_cast<std::size_t>(s)])) {
                        Matrix<T>& d = grad_of(n.in[static_cast<std::size_t>(s)], grad);
                        for (std::size_t i = 0; i < d.size(); ++i) d.data()[i] += g.data()[i];
                    }
                return;
            }
            case Op::AddRowBias: {
                if (wants_grad(n.in[0])) {
                    Matrix<T>& dx = grad_of(n.in[0], grad);
                    for (std::size_t i = 0; i < dx.size(); ++i) dx.data()[i] += g.data()[i];
                }
                if (wants_grad(n.in[1])) {
                    Matrix<T>& db = grad_of(n.in[1], grad);
                    for (int r = 0; r < g.rows(); ++r)
                        for (int c = 0; c < g.cols(); ++c) db(0, c) += g(r, c);
                }
                return;
            }
            case Op::AddScalar: {
                if (wants_grad(n.in[0])) {
                    Matrix<T>& dx = grad_of(n.in[0], grad);
                    for (std::size_t i = 0; i < dx.size(); ++i) dx.data()[i] += g.data()[i];
                }
                if (wants_grad(n.in[1])) {
                    Matrix<T>& ds = grad_of(n.in[1], grad);
                    T s = 0;
                    for (std::size_t i = 0; i < g.size(); ++i) s += g.data()[i];
                    ds(0, 0) += s;
                }
                return;
            }
            case Op::Scale: {
                if (!wants_grad(n.in[0])) return;
                Matrix<T>& dx = grad_of(n.in[0], grad);
                const T c = static_cast<T>(n.c);
                if (n.divide)
                    for (std::size_t i = 0; i < dx.size(); ++i) dx.data()[i] += g.data()[i] / c;
                else
                    for (std::size_t i = 0; i < dx.size(); ++i) dx.data()[i] += g.data()[i] * c;
                return;
            }
            case Op::ScaleByNode: {
                const Matrix<T>& X = nodes_[static_cast<std::size_t>(n.in[0])].value;
                const T s = nodes_[static_cast<std::size_t>(n.in[1])].value(0, 0);
                if (wants_grad(n.in[0])) {
                    Matrix<T>& dx = grad_of(n.in[0], grad);
                    for (std::size_t i = 0; i < dx.size(); ++i) dx.data()[i] += g.data()[i] * s;
                }
                if (wants_grad(n.in[1])) {
                    Matrix<T>& ds = grad_of(n.in[1], grad);
                    T acc = 0;
                    for (std::size_t i = 0; i < g.size(); ++i) acc += g.data()[i] * X.data()[i];
                    ds(0, 0) += acc;
                }
                return;
            }
            case Op::Hadamard: {
                const Matrix<T>& A = nodes_[static_cast<std::size_t>(n.in[0])].value;
                const Matrix<T>& B = nodes_[static_cast<std::size_t>(n.in[1])].value;
                if (wants_grad(n.in[0])) {
                    Matrix<T>& da = grad_of(n.in[0], grad);
                    for (std::size_t i = 0; i < da.size(); ++i) da.data()[i] += g.data()[i] * B.data()[i];
                }
                if (wants_grad(n.in[1])) {
                    Matrix<T>& db = grad_of(n.in[1], grad);
                    for (std::size_t i = 0; i < db.size(); ++i) db.data()[i] += g.data()[i] * A.data()[i];
                }
                return;
            }
            case Op::RowL2Normalize: {
                if (!wants_grad(n.in[0])) return;
                Matrix<T>& dx = grad_of(n.in[0], grad);
                const Matrix<T>& Y = n.value;
                for (int r = 0; r < Y.rows(); ++r) {
                    const T norm = n.aux[static_cast<std::size_t>(r)];
                    if (static_cast<double>(norm) < detail::kNormEps) continue;
                    T dot = 0;
                    for (int c = 0; c < Y.cols(); ++c) dot += g(r, c) * Y(r, c);
                    for (int c = 0; c < Y.cols(); ++c) dx(r, c) += (g(r, c) - dot * Y(r, c)) / norm;
                }
                return;
            }
            case Op::MaskedSoftmax: {
                if (!wants_grad(n.in[0])) return;
                Matrix<T>& dx = grad_of(n.in[0], grad);
                const Matrix<T>& Y = n.value;
                for (int r = 0; r < Y.rows(); ++r) {
                    T s = 0;
                    for (int c = 0; c < Y.cols(); ++c)
                        if (n.mask.active(c)) s += g(r, c) * Y(r, c);
                    for (int c = 0; c < Y.cols(); ++c)
                        if (n.mask.active(c)) dx(r, c) += Y(r, c) * (g(r, c) - s);
                }
                return;
            }
            case Op::MaskedLogSoftmax: {
                if (!wants_grad(n.in[0])) return;
                Matrix<T>& dx = grad_of(n.in[0], grad);
                const Matrix<T>& Y = n.value;
                for (int r = 0; r < Y.rows(); ++r) {
                    T gsum = 0;
                    for (int c = 0; c < Y.cols(); ++c)
                        if (n.mask.active(c)) gsum += g(r, c);
                    for (int c = 0; c < Y.cols(); ++c)
                        if (n.mask.active(c)) {
                            const T p = static_cast<T>(std::exp(static_cast<double>(Y(r, c))));
                            dx(r, c) += g(r, c) - p * gsum;
                        }
                }
                return;
            }
            case Op::MaskedRowMax: {
                if (!wants_grad(n.in[0])) return;
                Matrix<T>& dx = grad_of(n.in[0], grad);
                for (int r = 0; r < n.value.rows(); ++r) {
                    const int j = n.argmax[static_cast<std::size_t>(r)];
                    if (j >= 0) dx(r, j) += g(r, 0);
                }
                return;
            }
            case Op::MaskedMean: {
                if (!wants_grad(n.in[0])) return;
                Matrix<T>& dx = grad_of(n.in[0], grad);
                const T m = static_cast<T>(n.mask.active_count());
                for (int r = 0; r < dx.rows(); ++r)
                    if (n.mask.active(r))
                        for (int c = 0; c < dx.cols(); ++c) dx(r, c) += g(0, c) / m;
                return;
            }
            case Op::LayerNorm: {
                const Matrix<T>& xhat = n.saved;
                const Matrix<T>& G = nodes_[static_cast<std::size_t>(n.in[1])].value;
                const int d = xhat.cols();
                if (wants_grad(n.in[1])) {
                    Matrix<T>& dg = grad_of(n.in[1], grad);
                    for (int r = 0; r < xhat.rows(); ++r)
                        for (int c = 0; c < d; ++c) dg(0, c) += g(r, c) * xhat(r, c);
                }
                if (wants_grad(n.in[2])) {
                    Matrix<T>& db = grad_of(n.in[2], grad);
                    for (int r = 0; r < xhat.rows(); ++r)
                        for (int c = 0; c < d; ++c) db(0, c) += g(r, c);
                }
                if (wants_grad(n.in[0])) {
                    Matrix<T>& dx = grad_of(n.in[0], grad);
                    for (int r = 0; r < xhat.rows(); ++r) {
                        const T inv = n.aux[static_cast<std::size_t>(r)];
                        double q_mean = 0, qx_mean = 0;
                        for (int c = 0; c < d; ++c) {
                            const double q = static_cast<double>(g(r, c)) * G(0, c);
                            q_mean += q;
                            qx_mean += q * xhat(r, c);
                        }
                        q_mean /= d;
                        qx_mean /= d;
                        for (int c = 0; c < d; ++c) {
                            const double q = static_cast<double>(g(r, c)) * G(0, c);
                            dx(r, c) += static_cast<T>(inv * (q - q_mean - xhat(r, c) * qx_mean));
                        }
                    }
                }
                return;
            }
            case Op::Gelu: {
                if (!wants_grad(n.in[0])) return;
                Matrix<T>& dx = grad_of(n.in[0], grad);
                const Matrix<T>& X = nodes_[static_cast<std::size_t>(n.in[0])].value;
                for (std::size_t i = 0; i < dx.size(); ++i)
                    dx.data()[i] += g.data()[i] * detail::gelu_grad(X.data()[i]);
                return;
            }
            case Op::Transpose: {
                if (!wants_grad(n.in[0])) return;
                Matrix<T>& dx = grad_of(n.in[0], grad);
                for (int r = 0; r < g.rows(); ++r)
                    for (int c = 0; c < g.cols(); ++c) dx(c, r) += g(r, c);
                return;
            }
            case Op::SliceCols: {
                if (!wants_grad(n.in[0])) return;
                Matrix<T>& dx = grad_of(n.in[0], grad);
                for (int r = 0; r < g.rows(); ++r)
                    for (int c = 0; c < g.cols(); ++c) dx(r, n.j0 + c) += g(r, c);
                return;
            }
            case Op::ConcatCols: {
                int off = 0;
                for (int src : n.in) {
                    const int w = nodes_[static_cast<std::size_t>(src)].value.cols();
                    if (wants_grad(src)) {
                        Matrix<T>& d = grad_of(src, grad);
                        for (int r = 0; r < g.rows(); ++r)
                            for (int c = 0; c < w; ++c) d(r, c) += g(r, off + c);
                    }
                    off += w;
                }
                return;
            }
            case Op::SumAll: {
                if (!wants_grad(n.in[0])) return;
                Matrix<T>& dx = grad_of(n.in[0], grad);
                const T s = g(0, 0);
                for (std::size_t i = 0; i < dx.size(); ++i) dx.data()[i] += s;
                return;
            }
            case Op::StackScalars: {
                for (std::size_t i = 0; i < n.in.size(); ++i)
                    if (wants_grad(n.in[i])) grad_of(n.in[i], grad)(0, 0) += g.data()[i];
                return;
            }
            case Op::MaskRows: {
                if (!wants_grad(n.in[0])) return;
                Matrix<T>& dx = grad_of(n.in[0], grad);
                for (int r = 0; r < dx.rows(); ++r)
                    if (n.mask.active(r))
                        for (int c = 0; c < dx.cols(); ++c) dx(r, c) += g(r, c);
                return;
            }
        }
    }

    std::vector<Node> nodes_;
    std::vector<int> leaves_;
};

using GraphF = Graph<float>;
using GraphD = Graph<double>;

}  // namespace otfe

#endif
