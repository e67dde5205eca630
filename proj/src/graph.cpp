#include "genrec/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "genrec/errors.hpp"

namespace genrec {

namespace {

[[noreturn]] void fail(const std::string& op, size_t node_id, const std::string& what) {
    throw GraphError(op + ": " + what + " (node " + std::to_string(node_id) + ")");
}

void check_same_graph(const std::string& op, size_t node_id, Var a, Var b) {
    if (a.g != b.g) fail(op, node_id, "operands belong to different graphs");
}

// C (m,n) += A (m,k) @ B (k,n)
void matmul_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

std::vector<int64_t> iota_index(int64_t start, int64_t len) {
    std::vector<int64_t> idx(static_cast<size_t>(len));
    for (int64_t i = 0; i < len; ++i) idx[static_cast<size_t>(i)] = start + i;
    return idx;
}

} // namespace

Var Graph::make(Op op, std::vector<int> inputs, Tensor value, bool needs_grad, std::vector<int64_t> iattrs,
                double dattr, std::vector<int64_t> index) {
    Node n;
    n.op = op;
    n.inputs = std::move(inputs);
    n.value = std::move(value);
    n.iattrs = std::move(iattrs);
    n.dattr = dattr;
    n.index = std::move(index);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

void Graph::accumulate(std::vector<int>& grad_of, int input, Var contrib) {
    int& slot = grad_of[static_cast<size_t>(input)];
    if (slot < 0) {
        slot = contrib.id;
    } else {
        slot = add(Var{this, slot}, contrib).id;
    }
}

std::vector<Var> Graph::gradients(Var loss, const std::vector<Var>& wrt) {
    if (!loss.valid() || loss.g != this) throw GraphError("gradients: loss is not a node of this graph");
    if (node(loss.id).value.size() != 1) {
        throw GraphError("gradients: loss must be scalar, got shape " + node(loss.id).value.shape_str() + " (node " +
                         std::to_string(loss.id) + ")");
    }
    for (const Var& w : wrt) {
        if (!w.valid() || w.g != this) throw GraphError("gradients: wrt var is not a node of this graph");
    }

    std::vector<int> grad_of(static_cast<size_t>(loss.id) + 1, -1);
    grad_of[static_cast<size_t>(loss.id)] = constant(*this, Tensor::full({1}, 1.0)).id;

    for (int nid = loss.id; nid >= 0; --nid) {
        const int gid = grad_of[static_cast<size_t>(nid)];
        if (gid < 0) continue;
        if (!node(nid).needs_grad) continue; // nothing upstream wants this gradient
        emit_backward(nid, Var{this, gid}, grad_of);
    }

    std::vector<Var> out;
    out.reserve(wrt.size());
    for (const Var& w : wrt) {
        int gid = w.id <= loss.id ? grad_of[static_cast<size_t>(w.id)] : -1;
        if (gid < 0) {
            out.push_back(constant(*this, Tensor::zeros(node(w.id).value.shape())));
        } else {
            out.push_back(Var{this, gid});
        }
    }
    return out;
}

void Graph::emit_backward(int nid, Var gout, std::vector<int>& grad_of) {
    const Node& n = node(nid);
    const auto in = [&](size_t i) { return Var{this, n.inputs[i]}; };
    const auto wants = [&](size_t i) { return node(n.inputs[i]).needs_grad; };

    switch (n.op) {
        case Op::kConst:
        case Op::kLeaf:
            return;
        case Op::kAdd:
            if (wants(0)) accumulate(grad_of, n.inputs[0], gout);
            if (wants(1)) accumulate(grad_of, n.inputs[1], gout);
            return;
        case Op::kSub:
            if (wants(0)) accumulate(grad_of, n.inputs[0], gout);
            if (wants(1)) accumulate(grad_of, n.inputs[1], scale(gout, -1.0));
            return;
        case Op::kMul:
            if (wants(0)) accumulate(grad_of, n.inputs[0], mul(gout, in(1)));
            if (wants(1)) accumulate(grad_of, n.inputs[1], mul(gout, in(0)));
            return;
        case Op::kScale:
            if (wants(0)) accumulate(grad_of, n.inputs[0], scale(gout, n.dattr));
            return;
        case Op::kAddScalar:
            if (wants(0)) accumulate(grad_of, n.inputs[0], gout);
            return;
        case Op::kPow:
            if (wants(0)) accumulate(grad_of, n.inputs[0], mul(gout, scale(pow_elem(in(0), n.dattr - 1.0), n.dattr)));
            return;
        case Op::kRelu: {
            if (!wants(0)) return;
            const Tensor& x = node(n.inputs[0]).value;
            Tensor mask = Tensor::uninitialized(x.shape());
            const double* px = x.data();
            double* pm = mask.data();
            for (int64_t i = 0; i < x.size(); ++i) pm[i] = px[i] > 0.0 ? 1.0 : 0.0;
            accumulate(grad_of, n.inputs[0], mul(gout, constant(*this, std::move(mask))));
            return;
        }
        case Op::kStopGrad:
            return;
        case Op::kMixedSt:
            // gradient flows to the soft input only
            if (wants(1)) accumulate(grad_of, n.inputs[1], gout);
            return;
        case Op::kMatmul:
            if (wants(0)) accumulate(grad_of, n.inputs[0], matmul(gout, transpose(in(1))));
            if (wants(1)) accumulate(grad_of, n.inputs[1], matmul(transpose(in(0)), gout));
            return;
        case Op::kBmm:
            if (wants(0)) accumulate(grad_of, n.inputs[0], bmm(gout, permute(in(1), {0, 2, 1})));
            if (wants(1)) accumulate(grad_of, n.inputs[1], bmm(permute(in(0), {0, 2, 1}), gout));
            return;
        case Op::kPermute: {
            if (!wants(0)) return;
            std::vector<int64_t> inv(n.iattrs.size());
            for (size_t i = 0; i < n.iattrs.size(); ++i) inv[static_cast<size_t>(n.iattrs[i])] = static_cast<int64_t>(i);
            accumulate(grad_of, n.inputs[0], permute(gout, inv));
            return;
        }
        case Op::kReshape:
            if (wants(0)) accumulate(grad_of, n.inputs[0], reshape(gout, node(n.inputs[0]).value.shape()));
            return;
        case Op::kGatherRows:
            if (wants(0)) accumulate(grad_of, n.inputs[0], scatter_add_rows(gout, n.index, node(n.inputs[0]).value.dim(0)));
            return;
        case Op::kScatterAddRows:
            if (wants(0)) accumulate(grad_of, n.inputs[0], gather_rows(gout, n.index));
            return;
        case Op::kConcat0: {
            int64_t offset = 0;
            for (size_t i = 0; i < n.inputs.size(); ++i) {
                const int64_t len = node(n.inputs[i]).value.dim(0);
                if (wants(i)) accumulate(grad_of, n.inputs[i], slice0(gout, offset, len));
                offset += len;
            }
            return;
        }
        case Op::kSlice0:
            if (wants(0)) {
                accumulate(grad_of, n.inputs[0],
                           scatter_add_rows(gout, iota_index(n.iattrs[0], n.iattrs[1]), node(n.inputs[0]).value.dim(0)));
            }
            return;
        case Op::kBroadcastRows:
            if (wants(0)) accumulate(grad_of, n.inputs[0], col_sum(gout));
            return;
        case Op::kColSum:
            if (wants(0)) accumulate(grad_of, n.inputs[0], broadcast_rows(gout, node(n.inputs[0]).value.dim(0)));
            return;
        case Op::kLastSum:
            if (wants(0)) accumulate(grad_of, n.inputs[0], broadcast_last(gout, node(n.inputs[0]).value.last_dim()));
            return;
        case Op::kBroadcastLast:
            if (wants(0)) accumulate(grad_of, n.inputs[0], last_sum(gout));
            return;
        case Op::kSumAll:
            if (wants(0)) accumulate(grad_of, n.inputs[0], broadcast_scalar(gout, node(n.inputs[0]).value.shape()));
            return;
        case Op::kBroadcastScalar:
            if (wants(0)) accumulate(grad_of, n.inputs[0], sum_all(gout));
            return;
        case Op::kSoftmax: {
            if (!wants(0)) return;
            Var y{this, nid};
            Var gy = mul(gout, y);
            Var s = last_sum(gy);
            accumulate(grad_of, n.inputs[0], mul(y, sub(gout, broadcast_last(s, n.value.last_dim()))));
            return;
        }
        case Op::kLogSoftmax: {
            if (!wants(0)) return;
            Var sm = softmax_last(in(0));
            Var s = last_sum(gout);
            accumulate(grad_of, n.inputs[0], sub(gout, mul(sm, broadcast_last(s, n.value.last_dim()))));
            return;
        }
        case Op::kSqDist: {
            // out_ik = ||a_i - b_k||^2
            Var a = in(0), b = in(1);
            const int64_t d = node(n.inputs[0]).value.dim(1);
            const int64_t kk = node(n.inputs[1]).value.dim(0);
            if (wants(0)) {
                Var rs = broadcast_last(last_sum(gout), d); // (m,d) of row sums
                accumulate(grad_of, n.inputs[0], scale(sub(mul(a, rs), matmul(gout, b)), 2.0));
            }
            if (wants(1)) {
                Var cs = broadcast_last(reshape(col_sum(gout), {kk, 1}), d); // (K,d) of col sums
                accumulate(grad_of, n.inputs[1], scale(sub(mul(b, cs), matmul(transpose(gout), a)), 2.0));
            }
            return;
        }
        case Op::kPickLast:
            if (wants(0)) accumulate(grad_of, n.inputs[0], pick_scatter(gout, n.index, node(n.inputs[0]).value.last_dim()));
            return;
        case Op::kPickScatter:
            if (wants(0)) accumulate(grad_of, n.inputs[0], pick_last(gout, n.index));
            return;
    }
}

// ---------------------------------------------------------------------------
// builders
// ---------------------------------------------------------------------------

Var constant(Graph& g, Tensor t) { return g.make(Graph::Op::kConst, {}, std::move(t), false); }

Var leaf(Graph& g, Tensor t) { return g.make(Graph::Op::kLeaf, {}, std::move(t), true); }

namespace {

Tensor elementwise(const std::string& op, size_t nid, const Tensor& a, const Tensor& b, bool is_add, bool is_sub) {
    if (!a.same_shape(b)) fail(op, nid, "shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    Tensor out = Tensor::uninitialized(a.shape());
    const int64_t sz = a.size();
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    if (is_add) {
        for (int64_t i = 0; i < sz; ++i) po[i] = pa[i] + pb[i];
    } else if (is_sub) {
        for (int64_t i = 0; i < sz; ++i) po[i] = pa[i] - pb[i];
    } else {
        for (int64_t i = 0; i < sz; ++i) po[i] = pa[i] * pb[i];
    }
    return out;
}

} // namespace

Var add(Var a, Var b) {
    Graph& g = *a.g;
    check_same_graph("add", g.node_count(), a, b);
    Tensor out = elementwise("add", g.node_count(), g.value(a), g.value(b), true, false);
    return g.make(Graph::Op::kAdd, {a.id, b.id}, std::move(out), g.node(a.id).needs_grad || g.node(b.id).needs_grad);
}

Var sub(Var a, Var b) {
    Graph& g = *a.g;
    check_same_graph("sub", g.node_count(), a, b);
    Tensor out = elementwise("sub", g.node_count(), g.value(a), g.value(b), false, true);
    return g.make(Graph::Op::kSub, {a.id, b.id}, std::move(out), g.node(a.id).needs_grad || g.node(b.id).needs_grad);
}

Var mul(Var a, Var b) {
    Graph& g = *a.g;
    check_same_graph("mul", g.node_count(), a, b);
    Tensor out = elementwise("mul", g.node_count(), g.value(a), g.value(b), false, false);
    return g.make(Graph::Op::kMul, {a.id, b.id}, std::move(out), g.node(a.id).needs_grad || g.node(b.id).needs_grad);
}

Var scale(Var a, double c) {
    Graph& g = *a.g;
    const Tensor& x = g.value(a);
    Tensor out = Tensor::uninitialized(x.shape());
    const double* px = x.data();
    double* po = out.data();
    for (int64_t i = 0; i < x.size(); ++i) po[i] = c * px[i];
    return g.make(Graph::Op::kScale, {a.id}, std::move(out), g.node(a.id).needs_grad, {}, c);
}

Var add_scalar(Var a, double c) {
    Graph& g = *a.g;
    const Tensor& x = g.value(a);
    Tensor out = Tensor::uninitialized(x.shape());
    const double* px = x.data();
    double* po = out.data();
    for (int64_t i = 0; i < x.size(); ++i) po[i] = px[i] + c;
    return g.make(Graph::Op::kAddScalar, {a.id}, std::move(out), g.node(a.id).needs_grad, {}, c);
}

Var pow_elem(Var a, double p) {
    Graph& g = *a.g;
    const Tensor& x = g.value(a);
    Tensor out = Tensor::uninitialized(x.shape());
    const double* px = x.data();
    double* po = out.data();
    for (int64_t i = 0; i < x.size(); ++i) po[i] = std::pow(px[i], p);
    return g.make(Graph::Op::kPow, {a.id}, std::move(out), g.node(a.id).needs_grad, {}, p);
}

Var relu(Var a) {
    Graph& g = *a.g;
    const Tensor& x = g.value(a);
    Tensor out = Tensor::uninitialized(x.shape());
    const double* px = x.data();
    double* po = out.data();
    for (int64_t i = 0; i < x.size(); ++i) po[i] = px[i] > 0.0 ? px[i] : 0.0;
    return g.make(Graph::Op::kRelu, {a.id}, std::move(out), g.node(a.id).needs_grad);
}

Var stop_gradient(Var a) {
    Graph& g = *a.g;
    return g.make(Graph::Op::kStopGrad, {a.id}, g.value(a), false);
}

Var mixed_straight_through(Var hard, Var soft) {
    Graph& g = *hard.g;
    check_same_graph("mixed_straight_through", g.node_count(), hard, soft);
    if (!g.value(hard).same_shape(g.value(soft))) {
        fail("mixed_straight_through", g.node_count(),
             "shape mismatch " + g.value(hard).shape_str() + " vs " + g.value(soft).shape_str());
    }
    return g.make(Graph::Op::kMixedSt, {hard.id, soft.id}, g.value(hard), g.node(soft.id).needs_grad);
}

Var matmul(Var a, Var b) {
    Graph& g = *a.g;
    check_same_graph("matmul", g.node_count(), a, b);
    const Tensor& x = g.value(a);
    const Tensor& y = g.value(b);
    if (x.rank() != 2 || y.rank() != 2) fail("matmul", g.node_count(), "expects rank-2 operands");
    if (x.dim(1) != y.dim(0)) {
        fail("matmul", g.node_count(), "inner dimensions " + x.shape_str() + " vs " + y.shape_str());
    }
    Tensor out({x.dim(0), y.dim(1)});
    matmul_acc(x.data(), y.data(), out.data(), x.dim(0), x.dim(1), y.dim(1));
    return g.make(Graph::Op::kMatmul, {a.id, b.id}, std::move(out), g.node(a.id).needs_grad || g.node(b.id).needs_grad);
}

Var bmm(Var a, Var b) {
    Graph& g = *a.g;
    check_same_graph("bmm", g.node_count(), a, b);
    const Tensor& x = g.value(a);
    const Tensor& y = g.value(b);
    if (x.rank() != 3 || y.rank() != 3) fail("bmm", g.node_count(), "expects rank-3 operands");
    if (x.dim(0) != y.dim(0) || x.dim(2) != y.dim(1)) {
        fail("bmm", g.node_count(), "incompatible shapes " + x.shape_str() + " vs " + y.shape_str());
    }
    const int64_t batch = x.dim(0), m = x.dim(1), k = x.dim(2), n = y.dim(2);
    Tensor out({batch, m, n});
    for (int64_t bi = 0; bi < batch; ++bi) {
        matmul_acc(x.data() + bi * m * k, y.data() + bi * k * n, out.data() + bi * m * n, m, k, n);
    }
    return g.make(Graph::Op::kBmm, {a.id, b.id}, std::move(out), g.node(a.id).needs_grad || g.node(b.id).needs_grad);
}

Var permute(Var a, std::vector<int64_t> perm) {
    Graph& g = *a.g;
    const Tensor& x = g.value(a);
    const int r = x.rank();
    if (static_cast<int>(perm.size()) != r) fail("permute", g.node_count(), "permutation rank mismatch");
    std::vector<int64_t> out_shape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[static_cast<size_t>(i)] = x.dim(static_cast<int>(perm[static_cast<size_t>(i)]));

    std::vector<int64_t> in_strides(static_cast<size_t>(r), 1);
    for (int i = r - 2; i >= 0; --i) in_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(i) + 1] * x.dim(i + 1);
    std::vector<int64_t> gather_strides(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) gather_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];

    Tensor out = Tensor::uninitialized(out_shape);
    const double* px = x.data();
    double* po = out.data();

    // fast paths for the layouts attention uses constantly
    if (r == 2 && perm[0] == 1) {
        const int64_t m = x.dim(0), n = x.dim(1);
        for (int64_t j = 0; j < n; ++j) {
            for (int64_t i = 0; i < m; ++i) po[j * m + i] = px[i * n + j];
        }
    } else if (r == 3 && perm[0] == 0 && perm[1] == 2) {
        const int64_t b = x.dim(0), m = x.dim(1), n = x.dim(2);
        for (int64_t bi = 0; bi < b; ++bi) {
            const double* src = px + bi * m * n;
            double* dst = po + bi * m * n;
            for (int64_t j = 0; j < n; ++j) {
                for (int64_t i = 0; i < m; ++i) dst[j * m + i] = src[i * n + j];
            }
        }
    } else if (r == 4 && perm[0] == 0 && perm[1] == 2 && perm[2] == 1 && perm[3] == 3) {
        const int64_t d0 = x.dim(0), d1 = x.dim(1), d2 = x.dim(2), d3 = x.dim(3);
        for (int64_t a0 = 0; a0 < d0; ++a0) {
            for (int64_t a2 = 0; a2 < d2; ++a2) {
                for (int64_t a1 = 0; a1 < d1; ++a1) {
                    std::memcpy(po + ((a0 * d2 + a2) * d1 + a1) * d3, px + ((a0 * d1 + a1) * d2 + a2) * d3,
                                static_cast<size_t>(d3) * sizeof(double));
                }
            }
        }
    } else {
        const int64_t total = out.size();
        std::vector<int64_t> coord(static_cast<size_t>(r), 0);
        for (int64_t lin = 0; lin < total; ++lin) {
            int64_t src = 0;
            for (int i = 0; i < r; ++i) src += coord[static_cast<size_t>(i)] * gather_strides[static_cast<size_t>(i)];
            po[lin] = px[src];
            for (int i = r - 1; i >= 0; --i) {
                if (++coord[static_cast<size_t>(i)] < out_shape[static_cast<size_t>(i)]) break;
                coord[static_cast<size_t>(i)] = 0;
            }
        }
    }
    return g.make(Graph::Op::kPermute, {a.id}, std::move(out), g.node(a.id).needs_grad, std::move(perm));
}

Var transpose(Var a) { return permute(a, {1, 0}); }

Var reshape(Var a, std::vector<int64_t> shape) {
    Graph& g = *a.g;
    const Tensor& x = g.value(a);
    if (shape_numel(shape) != x.size()) {
        fail("reshape", g.node_count(), "cannot reshape " + x.shape_str() + " to " + shape_to_string(shape));
    }
    Tensor out = Tensor::reshaped_view(x, shape);
    return g.make(Graph::Op::kReshape, {a.id}, std::move(out), g.node(a.id).needs_grad, std::move(shape));
}

Var gather_rows(Var a, std::vector<int64_t> idx) {
    Graph& g = *a.g;
    const Tensor& x = g.value(a);
    if (x.rank() < 1) fail("gather_rows", g.node_count(), "expects rank >= 1");
    const int64_t rows = x.dim(0);
    const int64_t row_size = rows == 0 ? 0 : x.size() / rows;
    std::vector<int64_t> out_shape = x.shape();
    out_shape[0] = static_cast<int64_t>(idx.size());
    Tensor out = Tensor::uninitialized(out_shape);
    for (size_t i = 0; i < idx.size(); ++i) {
        const int64_t r = idx[i];
        if (r < 0 || r >= rows) fail("gather_rows", g.node_count(), "row index " + std::to_string(r) + " out of range");
        std::memcpy(out.data() + static_cast<int64_t>(i) * row_size, x.data() + r * row_size,
                    static_cast<size_t>(row_size) * sizeof(double));
    }
    return g.make(Graph::Op::kGatherRows, {a.id}, std::move(out), g.node(a.id).needs_grad, {}, 0.0, std::move(idx));
}

Var scatter_add_rows(Var a, std::vector<int64_t> idx, int64_t out_rows) {
    Graph& g = *a.g;
    const Tensor& x = g.value(a);
    if (x.rank() < 1 || x.dim(0) != static_cast<int64_t>(idx.size())) {
        fail("scatter_add_rows", g.node_count(), "index length must equal dim0");
    }
    const int64_t row_size = x.dim(0) == 0 ? 0 : x.size() / x.dim(0);
    std::vector<int64_t> out_shape = x.shape();
    out_shape[0] = out_rows;
    Tensor out(out_shape);
    for (size_t i = 0; i < idx.size(); ++i) {
        const int64_t r = idx[i];
        if (r < 0 || r >= out_rows) fail("scatter_add_rows", g.node_count(), "row index out of range");
        const double* src = x.data() + static_cast<int64_t>(i) * row_size;
        double* dst = out.data() + r * row_size;
        for (int64_t j = 0; j < row_size; ++j) dst[j] += src[j];
    }
    return g.make(Graph::Op::kScatterAddRows, {a.id}, std::move(out), g.node(a.id).needs_grad, {out_rows}, 0.0,
                  std::move(idx));
}

Var concat0(const std::vector<Var>& parts) {
    if (parts.empty()) throw GraphError("concat0: empty input list");
    Graph& g = *parts[0].g;
    const Tensor& first = g.value(parts[0]);
    std::vector<int64_t> out_shape = first.shape();
    int64_t rows = 0;
    bool needs = false;
    for (const Var& p : parts) {
        check_same_graph("concat0", g.node_count(), parts[0], p);
        const Tensor& t = g.value(p);
        if (t.rank() != first.rank()) fail("concat0", g.node_count(), "rank mismatch among parts");
        for (int i = 1; i < t.rank(); ++i) {
            if (t.dim(i) != first.dim(i)) fail("concat0", g.node_count(), "trailing dims differ among parts");
        }
        rows += t.dim(0);
        needs = needs || g.node(p.id).needs_grad;
    }
    out_shape[0] = rows;
    Tensor out = Tensor::uninitialized(out_shape);
    int64_t offset = 0;
    std::vector<int> input_ids;
    input_ids.reserve(parts.size());
    for (const Var& p : parts) {
        const Tensor& t = g.value(p);
        std::memcpy(out.data() + offset, t.data(), static_cast<size_t>(t.size()) * sizeof(double));
        offset += t.size();
        input_ids.push_back(p.id);
    }
    return g.make(Graph::Op::kConcat0, std::move(input_ids), std::move(out), needs);
}

Var slice0(Var a, int64_t start, int64_t len) {
    Graph& g = *a.g;
    const Tensor& x = g.value(a);
    if (x.rank() < 1 || start < 0 || len < 0 || start + len > x.dim(0)) {
        fail("slice0", g.node_count(), "slice [" + std::to_string(start) + "," + std::to_string(start + len) +
                                           ") out of range for " + x.shape_str());
    }
    const int64_t row_size = x.dim(0) == 0 ? 0 : x.size() / x.dim(0);
    std::vector<int64_t> out_shape = x.shape();
    out_shape[0] = len;
    Tensor out = Tensor::uninitialized(out_shape);
    std::memcpy(out.data(), x.data() + start * row_size, static_cast<size_t>(len * row_size) * sizeof(double));
    return g.make(Graph::Op::kSlice0, {a.id}, std::move(out), g.node(a.id).needs_grad, {start, len});
}

Var broadcast_rows(Var v, int64_t rows) {
    Graph& g = *v.g;
    const Tensor& x = g.value(v);
    if (x.rank() != 1) fail("broadcast_rows", g.node_count(), "expects rank-1 input, got " + x.shape_str());
    Tensor out = Tensor::uninitialized({rows, x.dim(0)});
    for (int64_t i = 0; i < rows; ++i) {
        std::memcpy(out.data() + i * x.dim(0), x.data(), static_cast<size_t>(x.dim(0)) * sizeof(double));
    }
    return g.make(Graph::Op::kBroadcastRows, {v.id}, std::move(out), g.node(v.id).needs_grad, {rows});
}

Var col_sum(Var a) {
    Graph& g = *a.g;
    const Tensor& x = g.value(a);
    if (x.rank() != 2) fail("col_sum", g.node_count(), "expects rank-2 input, got " + x.shape_str());
    Tensor out({x.dim(1)});
    for (int64_t i = 0; i < x.dim(0); ++i) {
        const double* row = x.data() + i * x.dim(1);
        for (int64_t j = 0; j < x.dim(1); ++j) out[j] += row[j];
    }
    return g.make(Graph::Op::kColSum, {a.id}, std::move(out), g.node(a.id).needs_grad);
}

Var last_sum(Var a) {
    Graph& g = *a.g;
    const Tensor& x = g.value(a);
    if (x.rank() < 1) fail("last_sum", g.node_count(), "expects rank >= 1");
    std::vector<int64_t> out_shape = x.shape();
    out_shape.back() = 1;
    Tensor out = Tensor::uninitialized(out_shape);
    const int64_t n = x.last_dim();
    const int64_t rows = x.lead_size();
    double* po = out.data();
    for (int64_t i = 0; i < rows; ++i) {
        const double* row = x.data() + i * n;
        double s = 0.0;
        for (int64_t j = 0; j < n; ++j) s += row[j];
        po[i] = s;
    }
    return g.make(Graph::Op::kLastSum, {a.id}, std::move(out), g.node(a.id).needs_grad);
}

Var broadcast_last(Var a, int64_t n) {
    Graph& g = *a.g;
    const Tensor& x = g.value(a);
    if (x.rank() < 1 || x.last_dim() != 1) fail("broadcast_last", g.node_count(), "expects trailing dim 1, got " + x.shape_str());
    std::vector<int64_t> out_shape = x.shape();
    out_shape.back() = n;
    Tensor out = Tensor::uninitialized(out_shape);
    const double* px = x.data();
    double* po = out.data();
    for (int64_t i = 0; i < x.size(); ++i) {
        double* dst = po + i * n;
        for (int64_t j = 0; j < n; ++j) dst[j] = px[i];
    }
    return g.make(Graph::Op::kBroadcastLast, {a.id}, std::move(out), g.node(a.id).needs_grad, {n});
}

Var sum_all(Var a) {
    Graph& g = *a.g;
    const Tensor& x = g.value(a);
    const double* px = x.data();
    double s = 0.0;
    for (int64_t i = 0; i < x.size(); ++i) s += px[i];
    return g.make(Graph::Op::kSumAll, {a.id}, Tensor::scalar(s), g.node(a.id).needs_grad);
}

Var broadcast_scalar(Var s, std::vector<int64_t> shape) {
    Graph& g = *s.g;
    const Tensor& x = g.value(s);
    if (x.size() != 1) fail("broadcast_scalar", g.node_count(), "expects scalar input, got " + x.shape_str());
    Tensor out = Tensor::full(shape, x[0]);
    return g.make(Graph::Op::kBroadcastScalar, {s.id}, std::move(out), g.node(s.id).needs_grad, std::move(shape));
}

Var mean_all(Var a) {
    const int64_t n = a.g->value(a).size();
    return scale(sum_all(a), n == 0 ? 0.0 : 1.0 / static_cast<double>(n));
}

Var softmax_last(Var a) {
    Graph& g = *a.g;
    const Tensor& x = g.value(a);
    if (x.rank() < 1 || x.last_dim() == 0) fail("softmax_last", g.node_count(), "expects nonempty rows");
    Tensor out = Tensor::uninitialized(x.shape());
    const int64_t n = x.last_dim();
    const int64_t rows = x.lead_size();
    const double* px = x.data();
    double* po = out.data();
    for (int64_t i = 0; i < rows; ++i) {
        const double* row = px + i * n;
        double* orow = po + i * n;
        double m = row[0];
        for (int64_t j = 1; j < n; ++j) m = std::max(m, row[j]);
        double s = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            orow[j] = std::exp(row[j] - m);
            s += orow[j];
        }
        for (int64_t j = 0; j < n; ++j) orow[j] /= s;
    }
    return g.make(Graph::Op::kSoftmax, {a.id}, std::move(out), g.node(a.id).needs_grad);
}

Var log_softmax_last(Var a) {
    Graph& g = *a.g;
    const Tensor& x = g.value(a);
    if (x.rank() < 1 || x.last_dim() == 0) fail("log_softmax_last", g.node_count(), "expects nonempty rows");
    Tensor out = Tensor::uninitialized(x.shape());
    const int64_t n = x.last_dim();
    const int64_t rows = x.lead_size();
    const double* px = x.data();
    double* po = out.data();
    for (int64_t i = 0; i < rows; ++i) {
        const double* row = px + i * n;
        double* orow = po + i * n;
        double m = row[0];
        for (int64_t j = 1; j < n; ++j) m = std::max(m, row[j]);
        double s = 0.0;
        for (int64_t j = 0; j < n; ++j) s += std::exp(row[j] - m);
        const double lse = m + std::log(s);
        for (int64_t j = 0; j < n; ++j) orow[j] = row[j] - lse;
    }
    return g.make(Graph::Op::kLogSoftmax, {a.id}, std::move(out), g.node(a.id).needs_grad);
}

Var sqdist(Var a, Var b) {
    Graph& g = *a.g;
    check_same_graph("sqdist", g.node_count(), a, b);
    const Tensor& x = g.value(a);
    const Tensor& y = g.value(b);
    if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(1)) {
        fail("sqdist", g.node_count(), "expects (m,d) and (K,d), got " + x.shape_str() + " and " + y.shape_str());
    }
    const int64_t m = x.dim(0), kk = y.dim(0), d = x.dim(1);
    Tensor out = Tensor::uninitialized({m, kk});
    double* pout = out.data();
    for (int64_t i = 0; i < m; ++i) {
        const double* xi = x.data() + i * d;
        double* orow = pout + i * kk;
        for (int64_t k2 = 0; k2 < kk; ++k2) {
            const double* yk = y.data() + k2 * d;
            double s = 0.0;
            for (int64_t j = 0; j < d; ++j) {
                const double diff = xi[j] - yk[j];
                s += diff * diff;
            }
            orow[k2] = s;
        }
    }
    return g.make(Graph::Op::kSqDist, {a.id, b.id}, std::move(out), g.node(a.id).needs_grad || g.node(b.id).needs_grad);
}

Var pick_last(Var a, std::vector<int64_t> idx) {
    Graph& g = *a.g;
    const Tensor& x = g.value(a);
    if (x.rank() != 2 || x.dim(0) != static_cast<int64_t>(idx.size())) {
        fail("pick_last", g.node_count(), "expects (m,n) with m indices");
    }
    Tensor out = Tensor::uninitialized({x.dim(0)});
    const double* px = x.data();
    double* po = out.data();
    for (int64_t i = 0; i < x.dim(0); ++i) {
        const int64_t j = idx[static_cast<size_t>(i)];
        if (j < 0 || j >= x.dim(1)) fail("pick_last", g.node_count(), "column index out of range");
        po[i] = px[i * x.dim(1) + j];
    }
    return g.make(Graph::Op::kPickLast, {a.id}, std::move(out), g.node(a.id).needs_grad, {}, 0.0, std::move(idx));
}

Var pick_scatter(Var a, std::vector<int64_t> idx, int64_t n) {
    Graph& g = *a.g;
    const Tensor& x = g.value(a);
    if (x.rank() != 1 || x.dim(0) != static_cast<int64_t>(idx.size())) {
        fail("pick_scatter", g.node_count(), "expects (m) with m indices");
    }
    Tensor out({x.dim(0), n});
    for (int64_t i = 0; i < x.dim(0); ++i) {
        const int64_t j = idx[static_cast<size_t>(i)];
        if (j < 0 || j >= n) fail("pick_scatter", g.node_count(), "column index out of range");
        out[i * n + j] = x[i];
    }
    return g.make(Graph::Op::kPickScatter, {a.id}, std::move(out), g.node(a.id).needs_grad, {n}, 0.0, std::move(idx));
}

Var affine(Var x, Var w, Var b) {
    Var y = matmul(x, w);
    return add(y, broadcast_rows(b, y.g->value(y).dim(0)));
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
    Graph& g = *x.g;
    const Tensor& xv = g.value(x);
    if (xv.rank() != 2) fail("layer_norm", g.node_count(), "expects rank-2 input, got " + xv.shape_str());
    const int64_t rows = xv.dim(0);
    const int64_t n = xv.dim(1);
    Var mu = scale(last_sum(x), 1.0 / static_cast<double>(n));
    Var centered = sub(x, broadcast_last(mu, n));
    Var var = scale(last_sum(mul(centered, centered)), 1.0 / static_cast<double>(n));
    Var inv = pow_elem(add_scalar(var, eps), -0.5);
    Var norm = mul(centered, broadcast_last(inv, n));
    return add(mul(norm, broadcast_rows(gamma, rows)), broadcast_rows(beta, rows));
}

Var cross_entropy_from_logits(Var logits, std::vector<int64_t> targets) {
    return scale(pick_last(log_softmax_last(logits), std::move(targets)), -1.0);
}

Var SgTape::sg(Var v) {
    switch (mode_) {
        case Mode::kLive:
            return stop_gradient(v);
        case Mode::kRecord:
            recorded_.push_back(v.g->value(v));
            return stop_gradient(v);
        case Mode::kReplay: {
            if (cursor_ >= recorded_.size()) throw GraphError("SgTape replay ran past the recorded branches");
            return constant(*v.g, recorded_[cursor_++]);
        }
    }
    throw GraphError("SgTape: invalid mode");
}

Var SgTape::mixed(Var hard, Var soft) {
    switch (mode_) {
        case Mode::kLive:
            return mixed_straight_through(hard, soft);
        case Mode::kRecord: {
            Graph& g = *hard.g;
            const Tensor& h = g.value(hard);
            const Tensor& s = g.value(soft);
            Tensor diff(h.shape());
            for (int64_t i = 0; i < h.size(); ++i) diff[i] = h[i] - s[i];
            recorded_.push_back(std::move(diff));
            return mixed_straight_through(hard, soft);
        }
        case Mode::kReplay: {
            if (cursor_ >= recorded_.size()) throw GraphError("SgTape replay ran past the recorded branches");
            return add(soft, constant(*soft.g, recorded_[cursor_++]));
        }
    }
    throw GraphError("SgTape: invalid mode");
}

} // namespace genrec
