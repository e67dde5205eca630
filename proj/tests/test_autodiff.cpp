#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "genrec/errors.hpp"
#include "genrec/graph.hpp"
#include "genrec/params.hpp"
#include "genrec/rng.hpp"
#include "support/finite_diff.hpp"

using namespace genrec;
using genrec::testing::finite_diff_gradient;
using genrec::testing::worst_grad_mismatch;

namespace {

Tensor random_tensor(std::vector<int64_t> shape, Rng& rng, double scl = 1.0) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = scl * rng.next_normal();
    return t;
}

// A composite that exercises every primitive at least once. Scalar output.
Var kitchen_sink_loss(Graph& g, const ParamVars& v, const Tensor& x_in) {
    Var x = constant(g, x_in); // (3,4)
    Var a = affine(x, v.at("w1"), v.at("b1"));                        // matmul + broadcast_rows, (3,5)
    Var h = relu(a);
    Var ln = layer_norm(h, v.at("gamma"), v.at("beta"));              // pow/add_scalar/last_sum/broadcast_last inside
    Var sm = softmax_last(ln);
    Var lsm = log_softmax_last(ln);
    Var sq = sqdist(ln, v.at("cb"));                                  // (3,6)
    Var picked = pick_last(lsm, {1, 0, 3});                           // (3)
    Var gat = gather_rows(ln, {2, 0, 1, 1});                          // (4,5)
    Var sca = scatter_add_rows(gat, {0, 2, 1, 0}, 3);                 // (3,5)
    Var cc = concat0({sca, ln});                                      // (6,5)
    Var sl = slice0(cc, 1, 4);                                        // (4,5)
    Var pm = permute(reshape(sl, {2, 2, 5}), {1, 0, 2});              // (2,2,5)
    Var bm = bmm(pm, permute(pm, {0, 2, 1}));                         // (2,2,2)
    Var ce = cross_entropy_from_logits(ln, {0, 4, 2});                // (3)
    Var colsummed = col_sum(mul(sm, lsm));                            // (5)
    Var sponge = add(sum_all(sq), sum_all(bm));
    sponge = add(sponge, sum_all(picked));
    sponge = add(sponge, sum_all(ce));
    sponge = add(sponge, sum_all(colsummed));
    sponge = add(sponge, sum_all(pow_elem(add_scalar(mul(sm, sm), 0.5), 1.5)));
    sponge = add(sponge, mean_all(sub(sca, scale(sca, 0.25))));
    return scale(sponge, 0.01);
}

ParamVars leaves_of(Graph& g, const ParameterSet& p) { return make_leaves(g, p); }

ParameterSet kitchen_sink_params(uint64_t seed) {
    Rng rng(seed);
    ParameterSet p;
    p.add("w1", random_tensor({4, 5}, rng, 0.7));
    p.add("b1", random_tensor({5}, rng, 0.3));
    p.add("gamma", random_tensor({5}, rng, 0.2));
    p.add("beta", random_tensor({5}, rng, 0.2));
    p.add("cb", random_tensor({6, 5}, rng, 0.8));
    return p;
}

} // namespace

TEST_CASE("evaluate basics") {
    Graph g;
    // identity matmul leaves the operand unchanged
    Tensor eye({3, 3});
    for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
    Rng rng(7);
    Tensor x = random_tensor({3, 4}, rng);
    Var y = matmul(constant(g, eye), constant(g, x));
    CHECK(g.value(y).bitwise_equal(x));

    Var sm = softmax_last(constant(g, Tensor({2}, {0.0, 0.0})));
    CHECK(g.value(sm)[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(g.value(sm)[1] == doctest::Approx(0.5).epsilon(1e-12));

    Var r = relu(constant(g, Tensor({2}, {-1.0, 2.0})));
    CHECK(g.value(r)[0] == 0.0);
    CHECK(g.value(r)[1] == 2.0);
}

TEST_CASE("shape mismatch raises a structured error naming the node") {
    Graph g;
    Var a = constant(g, Tensor::zeros({2, 3}));
    Var b = constant(g, Tensor::zeros({4, 2}));
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("node"), GraphError);
    CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("shape mismatch"), GraphError);
}

TEST_CASE("stop_gradient forward identity and exact-zero backward") {
    Graph g;
    Tensor xv({2}, {1.5, -2.0});
    Var x = leaf(g, xv);
    Var sg = stop_gradient(x);
    CHECK(g.value(sg).bitwise_equal(xv));

    Var loss = sum_all(sg);
    Var gx = g.gradients(loss, {x})[0];
    for (int64_t i = 0; i < g.value(gx).size(); ++i) CHECK(g.value(gx)[i] == 0.0);
}

TEST_CASE("gradient of x*sg(x) is x, not 2x") {
    Graph g;
    Var x = leaf(g, Tensor({1}, {3.0}));
    Var loss = sum_all(mul(x, stop_gradient(x)));
    Var gx = g.gradients(loss, {x})[0];
    CHECK(g.value(gx)[0] == doctest::Approx(3.0).epsilon(1e-14));

    // FD oracle on the composite with the sg branch frozen at 3.0
    ParameterSet p;
    p.add("x", Tensor({1}, {3.0}));
    auto frozen = [](const ParameterSet& ps) {
        Graph gg;
        Var xx = leaf(gg, ps.value("x"));
        Var c = constant(gg, Tensor({1}, {3.0}));
        return gg.value(sum_all(mul(xx, c)))[0];
    };
    auto fd = finite_diff_gradient(frozen, p);
    CHECK(fd.at("x")[0] == doctest::Approx(3.0).epsilon(1e-6));
}

TEST_CASE("gradient basics: sum of squares and constant loss") {
    Graph g;
    Var x = leaf(g, Tensor({3}, {1.0, 2.0, 3.0}));
    Var loss = sum_all(mul(x, x));
    Var gx = g.gradients(loss, {x})[0];
    CHECK(g.value(gx)[0] == doctest::Approx(2.0));
    CHECK(g.value(gx)[1] == doctest::Approx(4.0));
    CHECK(g.value(gx)[2] == doctest::Approx(6.0));

    Var unrelated = leaf(g, Tensor({2}, {5.0, 5.0}));
    Var closs = constant(g, Tensor::scalar(42.0));
    Var gu = g.gradients(closs, {unrelated})[0];
    CHECK(g.value(gu)[0] == 0.0);
    CHECK(g.value(gu)[1] == 0.0);
}

TEST_CASE("non-scalar loss is rejected") {
    Graph g;
    Var x = leaf(g, Tensor::zeros({3}));
    CHECK_THROWS_AS((void)g.gradients(x, {x}), GraphError);
}

TEST_CASE("two-layer MLP gradient matches finite differences") {
    Rng rng(11);
    ParameterSet p;
    p.add("w1", random_tensor({2, 2}, rng));
    p.add("b1", random_tensor({2}, rng, 0.5));
    p.add("w2", random_tensor({2, 1}, rng));
    p.add("b2", random_tensor({1}, rng, 0.5));
    Tensor x = random_tensor({3, 2}, rng);

    auto build = [&x](Graph& g, const ParamVars& v) {
        Var h = relu(affine(constant(g, x), v.at("w1"), v.at("b1")));
        Var out = affine(h, v.at("w2"), v.at("b2"));
        return sum_all(mul(out, out));
    };

    Graph g;
    ParamVars v = leaves_of(g, p);
    auto ad = gradient(g, build(g, v), v);
    auto fd = finite_diff_gradient(
        [&](const ParameterSet& ps) {
            Graph gg;
            ParamVars vv = leaves_of(gg, ps);
            return gg.value(build(gg, vv))[0];
        },
        p);
    CHECK(worst_grad_mismatch(ad, fd, 1e-6, 1e-4) <= 1.0);
}

TEST_CASE("every primitive: FD agreement over 20 seeds") {
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        CAPTURE(seed);
        ParameterSet p = kitchen_sink_params(seed);
        Rng rng(seed + 1000);
        Tensor x = random_tensor({3, 4}, rng);

        Graph g;
        ParamVars v = leaves_of(g, p);
        auto ad = gradient(g, kitchen_sink_loss(g, v, x), v);
        auto fd = finite_diff_gradient(
            [&](const ParameterSet& ps) {
                Graph gg;
                ParamVars vv = leaves_of(gg, ps);
                return gg.value(kitchen_sink_loss(gg, vv, x))[0];
            },
            p);
        CHECK(worst_grad_mismatch(ad, fd, 1e-6, 1e-4) <= 1.0);
    }
}

TEST_CASE("determinism: identical seeds give bitwise-identical values and gradients") {
    auto run = [](uint64_t seed) {
        ParameterSet p = kitchen_sink_params(seed);
        Rng rng(seed + 1000);
        Tensor x = random_tensor({3, 4}, rng);
        Graph g;
        ParamVars v = make_leaves(g, p);
        Var loss = kitchen_sink_loss(g, v, x);
        auto grads = gradient(g, loss, v);
        return std::make_pair(g.value(loss), std::move(grads));
    };
    auto [l1, g1] = run(5);
    auto [l2, g2] = run(5);
    CHECK(l1.bitwise_equal(l2));
    for (const auto& [name, t] : g1) CHECK(t.bitwise_equal(g2.at(name)));
}

TEST_CASE("mixed straight-through: forward is hard bitwise, gradient through soft only") {
    Rng rng(3);
    Tensor table = random_tensor({4, 3}, rng);
    Tensor probs_v({2, 4}, {0.1, 0.2, 0.3, 0.4, 0.25, 0.25, 0.25, 0.25});

    Graph g;
    Var e = leaf(g, table);
    Var probs = leaf(g, probs_v);
    Var hard = gather_rows(e, {2, 0});
    Var soft = matmul(probs, e);
    Var mixed = mixed_straight_through(hard, soft);
    CHECK(g.value(mixed).bitwise_equal(g.value(hard)));

    Var loss = sum_all(mul(mixed, mixed));
    auto grads = g.gradients(loss, {probs, e});
    // soft path gradient w.r.t. probs: FD on the frozen composite
    ParameterSet p;
    p.add("probs", probs_v);
    Tensor frozen_diff(g.value(hard).shape());
    for (int64_t i = 0; i < frozen_diff.size(); ++i) frozen_diff[i] = g.value(hard)[i] - g.value(soft)[i];
    auto fd = finite_diff_gradient(
        [&](const ParameterSet& ps) {
            Graph gg;
            Var ee = constant(gg, table);
            Var pp = leaf(gg, ps.value("probs"));
            Var ss = matmul(pp, ee);
            Var mm = add(ss, constant(gg, frozen_diff));
            return gg.value(sum_all(mul(mm, mm)))[0];
        },
        p);
    std::map<std::string, Tensor> ad;
    ad.emplace("probs", g.value(grads[0]));
    CHECK(worst_grad_mismatch(ad, fd, 1e-6, 1e-4) <= 1.0);

    bool any_nonzero = false;
    for (int64_t i = 0; i < g.value(grads[0]).size(); ++i) any_nonzero |= g.value(grads[0])[i] != 0.0;
    CHECK(any_nonzero);
}

// ---------------------------------------------------------------------------
// unrolled meta-gradient
// ---------------------------------------------------------------------------

namespace {

ParameterSet scalar_set(const std::string& name, double v) {
    ParameterSet p;
    p.add(name, Tensor({1}, {v}));
    return p;
}

// (theta - phi)^2 as a graph
Var quad_loss(Graph& g, const ParamVars& theta, const ParamVars& phi) {
    Var d = sub(theta.at("t"), phi.at("p"));
    return sum_all(mul(d, d));
}

} // namespace

TEST_CASE("unrolled gradient: scalar bi-level toy") {
    ParameterSet theta = scalar_set("t", 1.0);
    ParameterSet phi = scalar_set("p", 0.0);
    const double eta = 0.1;

    auto grads = unrolled_gradient(quad_loss, quad_loss, theta, phi, eta);
    // theta' = theta - 0.2 (theta - phi) = 0.8 + 0.2 phi; outer = (0.8 - 0.8 phi)^2
    // d/dphi at phi=0: 2 * 0.8 * (-0.8) = -1.28
    CHECK(grads.at("p")[0] == doctest::Approx(-1.28).epsilon(1e-9));

    // finite differences of the composite objective agree
    auto composite = [&](double phi_v) {
        Graph g;
        ParamVars tv = {{"t", leaf(g, Tensor({1}, {1.0}))}};
        ParamVars pv = {{"p", leaf(g, Tensor({1}, {phi_v}))}};
        Var inner = quad_loss(g, tv, pv);
        Var gt = g.gradients(inner, {tv.at("t")})[0];
        Var tprime = sub(tv.at("t"), scale(gt, eta));
        ParamVars tpv = {{"t", tprime}};
        return g.value(quad_loss(g, tpv, pv))[0];
    };
    const double fd = (composite(1e-5) - composite(-1e-5)) / 2e-5;
    CHECK(grads.at("p")[0] == doctest::Approx(fd).epsilon(1e-3));

    // HVP mode matches the double-backward reference
    auto hvp = unrolled_gradient(quad_loss, quad_loss, theta, phi, eta, UnrollMode::kHvp);
    CHECK(std::fabs(hvp.at("p")[0] - grads.at("p")[0]) < 1e-6);
}

TEST_CASE("unrolled gradient: eta = 0 collapses to the direct gradient exactly") {
    ParameterSet theta = scalar_set("t", 1.7);
    ParameterSet phi = scalar_set("p", -0.4);
    auto unrolled = unrolled_gradient(quad_loss, quad_loss, theta, phi, 0.0);

    Graph g;
    ParamVars tv = make_leaves(g, theta);
    ParamVars pv = make_leaves(g, phi);
    auto direct = gradient(g, quad_loss(g, tv, pv), pv);
    CHECK(unrolled.at("p")[0] == direct.at("p")[0]);
}

TEST_CASE("unrolled gradient: inner independent of phi gives the partial at theta'") {
    // inner = theta^2 (no phi); outer = (theta - phi)^2
    auto inner = [](Graph& g, const ParamVars& theta, const ParamVars&) {
        return sum_all(mul(theta.at("t"), theta.at("t")));
    };
    ParameterSet theta = scalar_set("t", 2.0);
    ParameterSet phi = scalar_set("p", 0.5);
    const double eta = 0.05;
    auto grads = unrolled_gradient(quad_loss, inner, theta, phi, eta);

    // theta' = 2 - 0.05*4 = 1.8; d/dphi (theta' - phi)^2 = -2 (1.8 - 0.5) = -2.6
    CHECK(grads.at("p")[0] == doctest::Approx(-2.6).epsilon(1e-12));
}

TEST_CASE("unrolled gradient: 100-parameter toy matches composite FD within 1e-3 relative") {
    // inner: || W x - t(phi) ||^2, outer: || W x - s(phi) ||^2 with both losses
    // touching phi so the mixed Hessian is dense.
    Rng rng(21);
    Tensor x = random_tensor({10, 1}, rng);
    ParameterSet theta;
    theta.add("w", random_tensor({5, 10}, rng, 0.4)); // 50 params
    ParameterSet phi;
    phi.add("a", random_tensor({5, 10}, rng, 0.3));   // 50 params

    auto inner = [&x](Graph& g, const ParamVars& th, const ParamVars& ph) {
        Var pred = matmul(th.at("w"), constant(g, x));         // (5,1)
        Var target = matmul(ph.at("a"), constant(g, x));       // (5,1)
        Var d = sub(pred, target);
        return sum_all(mul(d, d));
    };
    auto outer = [&x](Graph& g, const ParamVars& th, const ParamVars& ph) {
        Var pred = matmul(th.at("w"), constant(g, x));
        Var target = matmul(ph.at("a"), scale(constant(g, x), 0.5));
        Var d = sub(pred, target);
        return add(sum_all(mul(d, d)), sum_all(mul(ph.at("a"), ph.at("a"))));
    };
    const double eta = 0.01;

    auto ad = unrolled_gradient(outer, inner, theta, phi, eta);
    auto fd = finite_diff_gradient(
        [&](const ParameterSet& ps) {
            Graph g;
            ParamVars tv = make_leaves(g, theta);
            ParamVars pv = make_leaves(g, ps);
            Var il = inner(g, tv, pv);
            std::vector<std::string> names;
            std::vector<Var> wrt;
            for (auto& [n, v] : tv) {
                names.push_back(n);
                wrt.push_back(v);
            }
            auto gv = g.gradients(il, wrt);
            ParamVars tp;
            for (size_t i = 0; i < names.size(); ++i) tp.emplace(names[i], sub(wrt[i], scale(gv[i], eta)));
            return g.value(outer(g, tp, pv))[0];
        },
        phi);
    CHECK(worst_grad_mismatch(ad, fd, 1e-9, 1e-3) <= 1.0);

    auto hvp = unrolled_gradient(outer, inner, theta, phi, eta, UnrollMode::kHvp);
    for (const auto& [name, t] : ad) {
        const Tensor& h = hvp.at(name);
        for (int64_t i = 0; i < t.size(); ++i) CHECK(std::fabs(t[i] - h[i]) < 1e-6);
    }
}

TEST_CASE("gradient accumulation contract: repeated backward adds into grad slots") {
    ParameterSet p;
    p.add("x", Tensor({2}, {1.0, 2.0}));
    Graph g;
    ParamVars v = make_leaves(g, p);
    Var loss = sum_all(mul(v.at("x"), v.at("x")));
    auto grads = gradient(g, loss, v);
    accumulate_grads(p, grads);
    accumulate_grads(p, grads);
    CHECK(p.grad("x")[0] == doctest::Approx(4.0));
    CHECK(p.grad("x")[1] == doctest::Approx(8.0));
    p.zero_grads();
    CHECK(p.grad("x")[0] == 0.0);
}
