#include "softmix/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

namespace softmix::ad {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<EMat>;
using CMap = Eigen::Map<const EMat>;

CMap cmap(const Tensor& t) { return CMap(t.v.data(), t.rows, t.cols); }
Map map(Tensor& t) { return Map(t.v.data(), t.rows, t.cols); }

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

int Tape::push(Node&& n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

void Tape::check(Var v) const {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
        throw InternalError("Tape: invalid Var");
}

Var Tape::leaf(Tensor value, bool requires_grad) {
    Node n;
    n.op = Op::Leaf;
    n.val = std::move(value);
    n.needs_grad = requires_grad;
    return {push(std::move(n))};
}

Var Tape::leaf_ref(const Tensor* value, bool requires_grad) {
    Node n;
    n.op = Op::Leaf;
    n.ref = value;
    n.needs_grad = requires_grad;
    return {push(std::move(n))};
}

const Tensor& Tape::value(Var v) const {
    check(v);
    return val_of(v.id);
}

bool Tape::requires_grad(Var v) const {
    check(v);
    return nodes_[v.id].needs_grad;
}

const Tensor& Tape::grad(Var v) const {
    check(v);
    const Node& n = nodes_[v.id];
    return n.has_grad ? n.grad : empty_;
}

Tape::Node& Tape::ensure_grad(int id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
        const Tensor& v = val_of(id);
        if (!n.grad.same_shape(v)) n.grad = Tensor(v.rows, v.cols);
        else n.grad.fill(0.0);
        n.has_grad = true;
    }
    return n;
}

void Tape::accum(int id, const Tensor& g) {
    if (!nodes_[id].needs_grad) return;
    ensure_grad(id).grad.add_(g);
}

void Tape::reset() {
    nodes_.clear();
}

// ---------------------------------------------------------------------
// forward ops
// ---------------------------------------------------------------------

Var Tape::add(Var a, Var b) {
    check(a); check(b);
    const Tensor& ta = val_of(a.id);
    const Tensor& tb = val_of(b.id);
    if (!ta.same_shape(tb)) throw InternalError("add: shape mismatch");
    Node n;
    n.op = Op::Add;
    n.a = a.id; n.b = b.id;
    n.needs_grad = nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
    n.val = ta;
    n.val.add_(tb);
    return {push(std::move(n))};
}

Var Tape::sub(Var a, Var b) {
    check(a); check(b);
    const Tensor& ta = val_of(a.id);
    const Tensor& tb = val_of(b.id);
    if (!ta.same_shape(tb)) throw InternalError("sub: shape mismatch");
    Node n;
    n.op = Op::Sub;
    n.a = a.id; n.b = b.id;
    n.needs_grad = nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
    n.val = ta;
    for (size_t i = 0; i < n.val.v.size(); ++i) n.val.v[i] -= tb.v[i];
    return {push(std::move(n))};
}

Var Tape::mul(Var a, Var b) {
    check(a); check(b);
    const Tensor& ta = val_of(a.id);
    const Tensor& tb = val_of(b.id);
    if (!ta.same_shape(tb)) throw InternalError("mul: shape mismatch");
    Node n;
    n.op = Op::Mul;
    n.a = a.id; n.b = b.id;
    n.needs_grad = nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
    n.val = ta;
    for (size_t i = 0; i < n.val.v.size(); ++i) n.val.v[i] *= tb.v[i];
    return {push(std::move(n))};
}

Var Tape::scale(Var a, double c) {
    check(a);
    Node n;
    n.op = Op::Scale;
    n.a = a.id;
    n.d0 = c;
    n.needs_grad = nodes_[a.id].needs_grad;
    n.val = val_of(a.id);
    n.val.scale_(c);
    return {push(std::move(n))};
}

Var Tape::mul_scalar(Var a, Var s) {
    check(a); check(s);
    const Tensor& ts = val_of(s.id);
    if (ts.rows != 1 || ts.cols != 1) throw InternalError("mul_scalar: s not 1x1");
    Node n;
    n.op = Op::MulScalar;
    n.a = a.id; n.b = s.id;
    n.needs_grad = nodes_[a.id].needs_grad || nodes_[s.id].needs_grad;
    n.val = val_of(a.id);
    n.val.scale_(ts.v[0]);
    return {push(std::move(n))};
}

Var Tape::matmul(Var a, Var b) {
    check(a); check(b);
    const Tensor& ta = val_of(a.id);
    const Tensor& tb = val_of(b.id);
    if (ta.cols != tb.rows) throw InternalError("matmul: inner dim mismatch");
    Node n;
    n.op = Op::MatMul;
    n.a = a.id; n.b = b.id;
    n.needs_grad = nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
    n.val = Tensor(ta.rows, tb.cols);
    map(n.val).noalias() = cmap(ta) * cmap(tb);
    return {push(std::move(n))};
}

Var Tape::matmul_nt(Var a, Var b) {
    check(a); check(b);
    const Tensor& ta = val_of(a.id);
    const Tensor& tb = val_of(b.id);
    if (ta.cols != tb.cols) throw InternalError("matmul_nt: inner dim mismatch");
    Node n;
    n.op = Op::MatMulNT;
    n.a = a.id; n.b = b.id;
    n.needs_grad = nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
    n.val = Tensor(ta.rows, tb.rows);
    map(n.val).noalias() = cmap(ta) * cmap(tb).transpose();
    return {push(std::move(n))};
}

Var Tape::add_rowvec(Var a, Var r) {
    check(a); check(r);
    const Tensor& ta = val_of(a.id);
    const Tensor& tr = val_of(r.id);
    if (tr.rows != 1 || tr.cols != ta.cols) throw InternalError("add_rowvec: bad row shape");
    Node n;
    n.op = Op::AddRowVec;
    n.a = a.id; n.b = r.id;
    n.needs_grad = nodes_[a.id].needs_grad || nodes_[r.id].needs_grad;
    n.val = ta;
    for (int i = 0; i < ta.rows; ++i) {
        double* out = n.val.row(i);
        for (int j = 0; j < ta.cols; ++j) out[j] += tr.v[j];
    }
    return {push(std::move(n))};
}

Var Tape::slice_cols(Var a, int c0, int len) {
    check(a);
    const Tensor& ta = val_of(a.id);
    if (c0 < 0 || len <= 0 || c0 + len > ta.cols) throw InternalError("slice_cols: out of range");
    Node n;
    n.op = Op::SliceCols;
    n.a = a.id;
    n.i0 = c0; n.i1 = len;
    n.needs_grad = nodes_[a.id].needs_grad;
    n.val = Tensor(ta.rows, len);
    for (int i = 0; i < ta.rows; ++i)
        std::copy(ta.row(i) + c0, ta.row(i) + c0 + len, n.val.row(i));
    return {push(std::move(n))};
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw InternalError("concat_cols: empty");
    int rows = -1, cols = 0;
    for (Var p : parts) {
        check(p);
        const Tensor& t = val_of(p.id);
        if (rows < 0) rows = t.rows;
        if (t.rows != rows) throw InternalError("concat_cols: row mismatch");
        cols += t.cols;
    }
    Node n;
    n.op = Op::ConcatCols;
    n.val = Tensor(rows, cols);
    int off = 0;
    for (Var p : parts) {
        const Tensor& t = val_of(p.id);
        for (int i = 0; i < rows; ++i)
            std::copy(t.row(i), t.row(i) + t.cols, n.val.row(i) + off);
        off += t.cols;
        n.inputs.push_back(p.id);
        n.needs_grad = n.needs_grad || nodes_[p.id].needs_grad;
    }
    return {push(std::move(n))};
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw InternalError("concat_rows: empty");
    int cols = -1, rows = 0;
    for (Var p : parts) {
        check(p);
        const Tensor& t = val_of(p.id);
        if (cols < 0) cols = t.cols;
        if (t.cols != cols) throw InternalError("concat_rows: col mismatch");
        rows += t.rows;
    }
    Node n;
    n.op = Op::ConcatRows;
    n.val = Tensor(rows, cols);
    int off = 0;
    for (Var p : parts) {
        const Tensor& t = val_of(p.id);
        std::copy(t.v.begin(), t.v.end(), n.val.row(off));
        off += t.rows;
        n.inputs.push_back(p.id);
        n.needs_grad = n.needs_grad || nodes_[p.id].needs_grad;
    }
    return {push(std::move(n))};
}

Var Tape::select_rows(Var a, std::vector<int> idx) {
    check(a);
    const Tensor& ta = val_of(a.id);
    for (int i : idx)
        if (i < 0 || i >= ta.rows) throw InternalError("select_rows: index out of range");
    Node n;
    n.op = Op::SelectRows;
    n.a = a.id;
    n.needs_grad = nodes_[a.id].needs_grad;
    n.val = Tensor(static_cast<int>(idx.size()), ta.cols);
    for (size_t j = 0; j < idx.size(); ++j)
        std::copy(ta.row(idx[j]), ta.row(idx[j]) + ta.cols, n.val.row(static_cast<int>(j)));
    n.idx = std::move(idx);
    return {push(std::move(n))};
}

Var Tape::add_rows_at(Var a, Var b, std::vector<int> rows) {
    check(a); check(b);
    const Tensor& ta = val_of(a.id);
    const Tensor& tb = val_of(b.id);
    if (static_cast<int>(rows.size()) != tb.rows || ta.cols != tb.cols)
        throw InternalError("add_rows_at: shape mismatch");
    for (int i : rows)
        if (i < 0 || i >= ta.rows) throw InternalError("add_rows_at: index out of range");
    Node n;
    n.op = Op::AddRowsAt;
    n.a = a.id; n.b = b.id;
    n.needs_grad = nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
    n.val = ta;
    for (size_t j = 0; j < rows.size(); ++j) {
        double* out = n.val.row(rows[j]);
        const double* src = tb.row(static_cast<int>(j));
        for (int c = 0; c < ta.cols; ++c) out[c] += src[c];
    }
    n.idx = std::move(rows);
    return {push(std::move(n))};
}

Var Tape::softmax_rows(Var a) {
    check(a);
    const Tensor& ta = val_of(a.id);
    Node n;
    n.op = Op::SoftmaxRows;
    n.a = a.id;
    n.needs_grad = nodes_[a.id].needs_grad;
    n.val = Tensor(ta.rows, ta.cols);
    for (int i = 0; i < ta.rows; ++i) {
        const double* x = ta.row(i);
        double* y = n.val.row(i);
        double mx = x[0];
        for (int j = 1; j < ta.cols; ++j) mx = std::max(mx, x[j]);
        double s = 0;
        for (int j = 0; j < ta.cols; ++j) {
            y[j] = std::exp(x[j] - mx);
            s += y[j];
        }
        double inv = 1.0 / s;
        for (int j = 0; j < ta.cols; ++j) y[j] *= inv;
    }
    return {push(std::move(n))};
}

Var Tape::log_softmax_rows(Var a) {
    check(a);
    const Tensor& ta = val_of(a.id);
    Node n;
    n.op = Op::LogSoftmaxRows;
    n.a = a.id;
    n.needs_grad = nodes_[a.id].needs_grad;
    n.val = Tensor(ta.rows, ta.cols);
    for (int i = 0; i < ta.rows; ++i) {
        const double* x = ta.row(i);
        double* y = n.val.row(i);
        double mx = x[0];
        for (int j = 1; j < ta.cols; ++j) mx = std::max(mx, x[j]);
        double s = 0;
        for (int j = 0; j < ta.cols; ++j) s += std::exp(x[j] - mx);
        double lse = mx + std::log(s);
        for (int j = 0; j < ta.cols; ++j) y[j] = x[j] - lse;
    }
    return {push(std::move(n))};
}

Var Tape::layer_norm_rows(Var a, Var gain, Var bias, double eps) {
    check(a); check(gain); check(bias);
    const Tensor& ta = val_of(a.id);
    const Tensor& tg = val_of(gain.id);
    const Tensor& tb = val_of(bias.id);
    if (tg.rows != 1 || tg.cols != ta.cols || tb.rows != 1 || tb.cols != ta.cols)
        throw InternalError("layer_norm_rows: bad gain/bias shape");
    Node n;
    n.op = Op::LayerNorm;
    n.a = a.id; n.b = gain.id; n.c = bias.id;
    n.d0 = eps;
    n.needs_grad = nodes_[a.id].needs_grad || nodes_[gain.id].needs_grad || nodes_[bias.id].needs_grad;
    n.val = Tensor(ta.rows, ta.cols);
    for (int i = 0; i < ta.rows; ++i) {
        const double* x = ta.row(i);
        double* y = n.val.row(i);
        double mu = 0;
        for (int j = 0; j < ta.cols; ++j) mu += x[j];
        mu /= ta.cols;
        double var = 0;
        for (int j = 0; j < ta.cols; ++j) var += (x[j] - mu) * (x[j] - mu);
        var /= ta.cols;
        double rstd = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < ta.cols; ++j) y[j] = tg.v[j] * ((x[j] - mu) * rstd) + tb.v[j];
    }
    return {push(std::move(n))};
}

Var Tape::gelu(Var a) {
    check(a);
    const Tensor& ta = val_of(a.id);
    Node n;
    n.op = Op::Gelu;
    n.a = a.id;
    n.needs_grad = nodes_[a.id].needs_grad;
    n.val = Tensor(ta.rows, ta.cols);
    for (size_t i = 0; i < ta.v.size(); ++i) {
        double x = ta.v[i];
        n.val.v[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
    }
    return {push(std::move(n))};
}

Var Tape::logv(Var a) {
    check(a);
    const Tensor& ta = val_of(a.id);
    Node n;
    n.op = Op::Log;
    n.a = a.id;
    n.needs_grad = nodes_[a.id].needs_grad;
    n.val = Tensor(ta.rows, ta.cols);
    for (size_t i = 0; i < ta.v.size(); ++i) n.val.v[i] = std::log(ta.v[i]);
    return {push(std::move(n))};
}

Var Tape::expv(Var a) {
    check(a);
    const Tensor& ta = val_of(a.id);
    Node n;
    n.op = Op::Exp;
    n.a = a.id;
    n.needs_grad = nodes_[a.id].needs_grad;
    n.val = Tensor(ta.rows, ta.cols);
    for (size_t i = 0; i < ta.v.size(); ++i) n.val.v[i] = std::exp(ta.v[i]);
    return {push(std::move(n))};
}

Var Tape::pick(Var a, int r, int c) {
    check(a);
    const Tensor& ta = val_of(a.id);
    if (r < 0 || r >= ta.rows || c < 0 || c >= ta.cols) throw InternalError("pick: out of range");
    Node n;
    n.op = Op::Pick;
    n.a = a.id;
    n.i0 = r; n.i1 = c;
    n.needs_grad = nodes_[a.id].needs_grad;
    n.val = Tensor::scalar(ta.at(r, c));
    return {push(std::move(n))};
}

Var Tape::sum(Var a) {
    check(a);
    const Tensor& ta = val_of(a.id);
    double s = 0;
    for (double x : ta.v) s += x;
    Node n;
    n.op = Op::Sum;
    n.a = a.id;
    n.needs_grad = nodes_[a.id].needs_grad;
    n.val = Tensor::scalar(s);
    return {push(std::move(n))};
}

// ---------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------

void Tape::backward(Var loss) {
    check(loss);
    const Tensor& lv = val_of(loss.id);
    if (lv.rows != 1 || lv.cols != 1) throw InternalError("backward: loss must be 1x1");
    ensure_grad(loss.id).grad.v[0] = 1.0;
    for (int id = loss.id; id >= 0; --id) {
        Node& n = nodes_[id];
        if (!n.has_grad || !n.needs_grad || n.op == Op::Leaf) continue;
        backward_node(id);
    }
}

void Tape::backward_node(int id) {
    Node& n = nodes_[id];
    const Tensor& g = n.grad;
    auto wants = [&](int in) { return in >= 0 && nodes_[in].needs_grad; };

    switch (n.op) {
        case Op::Leaf:
            break;
        case Op::Add:
            if (wants(n.a)) accum(n.a, g);
            if (wants(n.b)) accum(n.b, g);
            break;
        case Op::Sub: {
            if (wants(n.a)) accum(n.a, g);
            if (wants(n.b)) {
                Node& nb = ensure_grad(n.b);
                for (size_t i = 0; i < g.v.size(); ++i) nb.grad.v[i] -= g.v[i];
            }
            break;
        }
        case Op::Mul: {
            if (wants(n.a)) {
                const Tensor& tb = val_of(n.b);
                Node& na = ensure_grad(n.a);
                for (size_t i = 0; i < g.v.size(); ++i) na.grad.v[i] += g.v[i] * tb.v[i];
            }
            if (wants(n.b)) {
                const Tensor& ta = val_of(n.a);
                Node& nb = ensure_grad(n.b);
                for (size_t i = 0; i < g.v.size(); ++i) nb.grad.v[i] += g.v[i] * ta.v[i];
            }
            break;
        }
        case Op::Scale: {
            if (wants(n.a)) {
                Node& na = ensure_grad(n.a);
                for (size_t i = 0; i < g.v.size(); ++i) na.grad.v[i] += g.v[i] * n.d0;
            }
            break;
        }
        case Op::MulScalar: {
            double s = val_of(n.b).v[0];
            if (wants(n.a)) {
                Node& na = ensure_grad(n.a);
                for (size_t i = 0; i < g.v.size(); ++i) na.grad.v[i] += g.v[i] * s;
            }
            if (wants(n.b)) {
                const Tensor& ta = val_of(n.a);
                double acc = 0;
                for (size_t i = 0; i < g.v.size(); ++i) acc += g.v[i] * ta.v[i];
                ensure_grad(n.b).grad.v[0] += acc;
            }
            break;
        }
        case Op::MatMul: {
            const Tensor& ta = val_of(n.a);
            const Tensor& tb = val_of(n.b);
            if (wants(n.a)) {
                Node& na = ensure_grad(n.a);
                map(na.grad).noalias() += cmap(g) * cmap(tb).transpose();
            }
            if (wants(n.b)) {
                Node& nb = ensure_grad(n.b);
                map(nb.grad).noalias() += cmap(ta).transpose() * cmap(g);
            }
            break;
        }
        case Op::MatMulNT: {
            // C = A * B^T
            const Tensor& ta = val_of(n.a);
            const Tensor& tb = val_of(n.b);
            if (wants(n.a)) {
                Node& na = ensure_grad(n.a);
                map(na.grad).noalias() += cmap(g) * cmap(tb);
            }
            if (wants(n.b)) {
                Node& nb = ensure_grad(n.b);
                map(nb.grad).noalias() += cmap(g).transpose() * cmap(ta);
            }
            break;
        }
        case Op::AddRowVec: {
            if (wants(n.a)) accum(n.a, g);
            if (wants(n.b)) {
                Node& nb = ensure_grad(n.b);
                for (int i = 0; i < g.rows; ++i) {
                    const double* gr = g.row(i);
                    for (int j = 0; j < g.cols; ++j) nb.grad.v[j] += gr[j];
                }
            }
            break;
        }
        case Op::SliceCols: {
            if (wants(n.a)) {
                Node& na = ensure_grad(n.a);
                for (int i = 0; i < g.rows; ++i) {
                    const double* gr = g.row(i);
                    double* ar = na.grad.row(i) + n.i0;
                    for (int j = 0; j < g.cols; ++j) ar[j] += gr[j];
                }
            }
            break;
        }
        case Op::ConcatCols: {
            int off = 0;
            for (int in : n.inputs) {
                const Tensor& t = val_of(in);
                if (wants(in)) {
                    Node& ni = ensure_grad(in);
                    for (int i = 0; i < g.rows; ++i) {
                        const double* gr = g.row(i) + off;
                        double* ir = ni.grad.row(i);
                        for (int j = 0; j < t.cols; ++j) ir[j] += gr[j];
                    }
                }
                off += t.cols;
            }
            break;
        }
        case Op::ConcatRows: {
            int off = 0;
            for (int in : n.inputs) {
                const Tensor& t = val_of(in);
                if (wants(in)) {
                    Node& ni = ensure_grad(in);
                    for (size_t i = 0; i < t.v.size(); ++i)
                        ni.grad.v[i] += g.v[static_cast<size_t>(off) * g.cols + i];
                }
                off += t.rows;
            }
            break;
        }
        case Op::SelectRows: {
            if (wants(n.a)) {
                Node& na = ensure_grad(n.a);
                for (size_t j = 0; j < n.idx.size(); ++j) {
                    const double* gr = g.row(static_cast<int>(j));
                    double* ar = na.grad.row(n.idx[j]);
                    for (int c = 0; c < g.cols; ++c) ar[c] += gr[c];
                }
            }
            break;
        }
        case Op::AddRowsAt: {
            if (wants(n.a)) accum(n.a, g);
            if (wants(n.b)) {
                Node& nb = ensure_grad(n.b);
                for (size_t j = 0; j < n.idx.size(); ++j) {
                    const double* gr = g.row(n.idx[j]);
                    double* br = nb.grad.row(static_cast<int>(j));
                    for (int c = 0; c < g.cols; ++c) br[c] += gr[c];
                }
            }
            break;
        }
        case Op::SoftmaxRows: {
            if (wants(n.a)) {
                Node& na = ensure_grad(n.a);
                for (int i = 0; i < g.rows; ++i) {
                    const double* y = n.val.row(i);
                    const double* gr = g.row(i);
                    double dot = 0;
                    for (int j = 0; j < g.cols; ++j) dot += gr[j] * y[j];
                    double* ar = na.grad.row(i);
                    for (int j = 0; j < g.cols; ++j) ar[j] += y[j] * (gr[j] - dot);
                }
            }
            break;
        }
        case Op::LogSoftmaxRows: {
            if (wants(n.a)) {
                Node& na = ensure_grad(n.a);
                for (int i = 0; i < g.rows; ++i) {
                    const double* y = n.val.row(i);  // log-probs
                    const double* gr = g.row(i);
                    double gsum = 0;
                    for (int j = 0; j < g.cols; ++j) gsum += gr[j];
                    double* ar = na.grad.row(i);
                    for (int j = 0; j < g.cols; ++j) ar[j] += gr[j] - std::exp(y[j]) * gsum;
                }
            }
            break;
        }
        case Op::LayerNorm: {
            const Tensor& ta = val_of(n.a);
            const Tensor& tg = val_of(n.b);
            int cols = ta.cols;
            for (int i = 0; i < ta.rows; ++i) {
                const double* x = ta.row(i);
                const double* gr = g.row(i);
                double mu = 0;
                for (int j = 0; j < cols; ++j) mu += x[j];
                mu /= cols;
                double var = 0;
                for (int j = 0; j < cols; ++j) var += (x[j] - mu) * (x[j] - mu);
                var /= cols;
                double rstd = 1.0 / std::sqrt(var + n.d0);
                if (wants(n.b) || wants(n.c)) {
                    Node* ngain = wants(n.b) ? &ensure_grad(n.b) : nullptr;
                    Node* nbias = wants(n.c) ? &ensure_grad(n.c) : nullptr;
                    for (int j = 0; j < cols; ++j) {
                        double xhat = (x[j] - mu) * rstd;
                        if (ngain) ngain->grad.v[j] += gr[j] * xhat;
                        if (nbias) nbias->grad.v[j] += gr[j];
                    }
                }
                if (wants(n.a)) {
                    Node& na = ensure_grad(n.a);
                    double m1 = 0, m2 = 0;  // mean(dxhat), mean(dxhat * xhat)
                    for (int j = 0; j < cols; ++j) {
                        double xhat = (x[j] - mu) * rstd;
                        double dxhat = gr[j] * tg.v[j];
                        m1 += dxhat;
                        m2 += dxhat * xhat;
                    }
                    m1 /= cols;
                    m2 /= cols;
                    double* ar = na.grad.row(i);
                    for (int j = 0; j < cols; ++j) {
                        double xhat = (x[j] - mu) * rstd;
                        double dxhat = gr[j] * tg.v[j];
                        ar[j] += rstd * (dxhat - m1 - xhat * m2);
                    }
                }
            }
            break;
        }
        case Op::Gelu: {
            if (wants(n.a)) {
                const Tensor& ta = val_of(n.a);
                Node& na = ensure_grad(n.a);
                for (size_t i = 0; i < g.v.size(); ++i) {
                    double x = ta.v[i];
                    double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                    double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                    na.grad.v[i] += g.v[i] * (cdf + x * pdf);
                }
            }
            break;
        }
        case Op::Log: {
            if (wants(n.a)) {
                const Tensor& ta = val_of(n.a);
                Node& na = ensure_grad(n.a);
                for (size_t i = 0; i < g.v.size(); ++i) na.grad.v[i] += g.v[i] / ta.v[i];
            }
            break;
        }
        case Op::Exp: {
            if (wants(n.a)) {
                Node& na = ensure_grad(n.a);
                for (size_t i = 0; i < g.v.size(); ++i) na.grad.v[i] += g.v[i] * n.val.v[i];
            }
            break;
        }
        case Op::Pick: {
            if (wants(n.a)) ensure_grad(n.a).grad.at(n.i0, n.i1) += g.v[0];
            break;
        }
        case Op::Sum: {
            if (wants(n.a)) {
                Node& na = ensure_grad(n.a);
                for (double& x : na.grad.v) x += g.v[0];
            }
            break;
        }
    }
}

}  // namespace softmix::ad
