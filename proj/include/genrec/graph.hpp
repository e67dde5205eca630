#pragma once

#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include "genrec/tensor.hpp"

namespace genrec {

class Graph;

// Handle to a node in a Graph. Cheap to copy; valid while the graph lives.
struct Var {
    Graph* g = nullptr;
    int id = -1;
    bool valid() const { return g != nullptr && id >= 0; }
};

// Reverse-mode tape with eager evaluation: every builder computes its value
// immediately and records the node. Backward passes emit new nodes built from
// the same primitives, so gradients are themselves differentiable — this is
// what makes the one-step unrolled meta-gradient work without special cases.
class Graph {
public:
    enum class Op : uint8_t {
        kConst,
        kLeaf,
        kAdd,
        kSub,
        kMul,
        kScale,
        kAddScalar,
        kPow,
        kRelu,
        kStopGrad,
        kMixedSt,
        kMatmul,
        kBmm,
        kPermute,
        kReshape,
        kGatherRows,
        kScatterAddRows,
        kConcat0,
        kSlice0,
        kBroadcastRows,
        kColSum,
        kLastSum,
        kBroadcastLast,
        kSumAll,
        kBroadcastScalar,
        kSoftmax,
        kLogSoftmax,
        kSqDist,
        kPickLast,
        kPickScatter,
    };

    struct Node {
        Op op;
        std::vector<int> inputs;
        Tensor value;
        std::vector<int64_t> iattrs; // op-specific: permutation, target shape, slice bounds, ...
        double dattr = 0.0;          // op-specific scalar: scale factor, exponent, added constant
        std::vector<int64_t> index;  // gather / scatter / pick indices
        bool needs_grad = false;
    };

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    const Tensor& value(Var v) const { return node(v.id).value; }
    const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
    size_t node_count() const { return nodes_.size(); }

    Var make(Op op, std::vector<int> inputs, Tensor value, bool needs_grad, std::vector<int64_t> iattrs = {},
             double dattr = 0.0, std::vector<int64_t> index = {});

    // d(loss)/d(each wrt), emitted as graph nodes. Nodes unreachable from the
    // loss get explicit zero constants. Throws if loss is not scalar.
    std::vector<Var> gradients(Var loss, const std::vector<Var>& wrt);

private:
    void emit_backward(int nid, Var gout, std::vector<int>& grad_of);
    void accumulate(std::vector<int>& grad_of, int input, Var contrib);

    std::deque<Node> nodes_;
};

// ---- sources ----
Var constant(Graph& g, Tensor t);
Var leaf(Graph& g, Tensor t);

// ---- elementwise ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var pow_elem(Var a, double p);
Var relu(Var a);
Var stop_gradient(Var a);
// forward value is `hard` bit-for-bit; gradient flows only to `soft`
Var mixed_straight_through(Var hard, Var soft);

// ---- linear algebra ----
Var matmul(Var a, Var b);                 // (m,k) @ (k,n)
Var bmm(Var a, Var b);                    // (B,m,k) @ (B,k,n)
Var permute(Var a, std::vector<int64_t> perm);
Var transpose(Var a);                     // rank-2 convenience
Var reshape(Var a, std::vector<int64_t> shape);

// ---- structure ----
Var gather_rows(Var a, std::vector<int64_t> idx);                  // rows of dim0
Var scatter_add_rows(Var a, std::vector<int64_t> idx, int64_t out_rows);
Var concat0(const std::vector<Var>& parts);
Var slice0(Var a, int64_t start, int64_t len);

// ---- reductions / broadcasts ----
Var broadcast_rows(Var v, int64_t rows);  // (n) -> (rows,n)
Var col_sum(Var a);                       // (m,n) -> (n)
Var last_sum(Var a);                      // (...,n) -> (...,1)
Var broadcast_last(Var a, int64_t n);     // (...,1) -> (...,n)
Var sum_all(Var a);                       // -> (1)
Var broadcast_scalar(Var s, std::vector<int64_t> shape);
Var mean_all(Var a);

// ---- nonlinear rows ----
Var softmax_last(Var a);      // max-subtracted, rows over last dim
Var log_softmax_last(Var a);
Var sqdist(Var a, Var b);     // (m,d),(K,d) -> (m,K) of squared distances

// ---- indexed picks ----
Var pick_last(Var a, std::vector<int64_t> idx);                 // (m,n),(m) -> (m)
Var pick_scatter(Var a, std::vector<int64_t> idx, int64_t n);   // (m) -> (m,n)

// ---- composites ----
Var affine(Var x, Var w, Var b);                                   // x@w + b
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-6);     // rank-2 rows
Var cross_entropy_from_logits(Var logits, std::vector<int64_t> targets); // per-row NLL (m)

// Record/replay for stop-gradient branches. A straight-through forward is
// locally constant in the protected inputs, so a finite-difference oracle must
// differentiate the composite with each sg branch frozen at its base-point
// value. kRecord captures those values during a base forward; kReplay rebuilds
// the same loss with the captured constants substituted. Builders call
// tape.sg/tape.mixed instead of the raw ops; a null tape means kLive.
class SgTape {
public:
    enum class Mode { kLive, kRecord, kReplay };

    explicit SgTape(Mode mode) : mode_(mode) {}

    Var sg(Var v);
    Var mixed(Var hard, Var soft);
    void rewind() { cursor_ = 0; }

    // replay tape over the branches captured by a kRecord pass
    SgTape replay_copy() const {
        SgTape t(Mode::kReplay);
        t.recorded_ = recorded_;
        return t;
    }

    static Var apply_sg(SgTape* tape, Var v) { return tape ? tape->sg(v) : stop_gradient(v); }
    static Var apply_mixed(SgTape* tape, Var hard, Var soft) {
        return tape ? tape->mixed(hard, soft) : mixed_straight_through(hard, soft);
    }

private:
    Mode mode_;
    std::vector<Tensor> recorded_;
    size_t cursor_ = 0;
};

} // namespace genrec
