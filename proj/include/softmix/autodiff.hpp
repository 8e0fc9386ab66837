#pragma once

#include <vector>

#include "softmix/tensor.hpp"

namespace softmix::ad {

// Handle into a Tape. Only valid for the tape that created it.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape over Tensor values. Build a graph forward, call
// backward() on a 1x1 loss, then read grad() off the leaves. Gradient
// work is skipped for subgraphs where no leaf requires a gradient.
class Tape {
public:
    // Owning leaf.
    Var leaf(Tensor value, bool requires_grad);
    // Non-owning leaf; `value` must outlive the tape's use. Lets frozen
    // model parameters participate without copying them per graph.
    Var leaf_ref(const Tensor* value, bool requires_grad);
    Var constant(Tensor value) { return leaf(std::move(value), false); }
    Var constant_ref(const Tensor* value) { return leaf_ref(value, false); }

    Var add(Var a, Var b);                  // same shape
    Var sub(Var a, Var b);                  // same shape
    Var mul(Var a, Var b);                  // elementwise, same shape
    Var scale(Var a, double c);             // c * a
    Var mul_scalar(Var a, Var s);           // s is 1x1
    Var matmul(Var a, Var b);               // (m,k) x (k,n)
    Var matmul_nt(Var a, Var b);            // A * B^T, (m,k) x (n,k)
    Var add_rowvec(Var a, Var r);           // broadcast 1xN row over MxN
    Var slice_cols(Var a, int c0, int len);
    Var concat_cols(const std::vector<Var>& parts);
    Var concat_rows(const std::vector<Var>& parts);
    Var select_rows(Var a, std::vector<int> idx);           // gather
    Var add_rows_at(Var a, Var b, std::vector<int> rows);   // scatter-add b into a
    Var softmax_rows(Var a);
    Var log_softmax_rows(Var a);
    Var layer_norm_rows(Var a, Var gain, Var bias, double eps);
    Var gelu(Var a);
    Var logv(Var a);
    Var expv(Var a);
    Var pick(Var a, int r, int c);          // 1x1
    Var sum(Var a);                         // 1x1

    const Tensor& value(Var v) const;
    bool requires_grad(Var v) const;
    // Gradient accumulated by the last backward(); empty tensor if the
    // node never required one.
    const Tensor& grad(Var v) const;

    void backward(Var loss);  // loss must be 1x1
    void reset();             // drop all nodes, keep allocations
    size_t size() const { return nodes_.size(); }

private:
    enum class Op {
        Leaf, Add, Sub, Mul, Scale, MulScalar, MatMul, MatMulNT, AddRowVec,
        SliceCols, ConcatCols, ConcatRows, SelectRows, AddRowsAt,
        SoftmaxRows, LogSoftmaxRows, LayerNorm, Gelu, Log, Exp, Pick, Sum,
    };

    struct Node {
        Op op = Op::Leaf;
        int a = -1, b = -1, c = -1;     // generic input slots
        std::vector<int> inputs;        // concat
        std::vector<int> idx;           // row/col indices
        double d0 = 0.0;                // scale factor or eps
        int i0 = 0, i1 = 0;             // pick coords / slice offsets
        Tensor val;
        const Tensor* ref = nullptr;    // leaf_ref payload
        Tensor grad;
        bool needs_grad = false;
        bool has_grad = false;
    };

    std::vector<Node> nodes_;
    Tensor empty_;

    const Tensor& val_of(int id) const {
        const Node& n = nodes_[id];
        return n.ref ? *n.ref : n.val;
    }
    Node& ensure_grad(int id);
    void accum(int id, const Tensor& g);
    int push(Node&& n);
    void check(Var v) const;
    void backward_node(int id);
};

}  // namespace softmix::ad
