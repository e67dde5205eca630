#include "genrec/params.hpp"

#include <cstring>

#include "genrec/errors.hpp"

namespace genrec {

void ParameterSet::add(const std::string& name, Tensor init) {
    if (has(name)) throw GraphError("parameter '" + name + "' already exists");
    Entry e;
    e.grad = Tensor::zeros(init.shape());
    e.value = std::move(init);
    entries_.emplace(name, std::move(e));
}

Tensor& ParameterSet::value(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw GraphError("unknown parameter '" + name + "'");
    return it->second.value;
}

const Tensor& ParameterSet::value(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw GraphError("unknown parameter '" + name + "'");
    return it->second.value;
}

Tensor& ParameterSet::grad(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw GraphError("unknown parameter '" + name + "'");
    return it->second.grad;
}

const Tensor& ParameterSet::grad(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw GraphError("unknown parameter '" + name + "'");
    return it->second.grad;
}

void ParameterSet::zero_grads() {
    for (auto& [name, e] : entries_) {
        std::memset(e.grad.data(), 0, static_cast<size_t>(e.grad.size()) * sizeof(double));
    }
}

int64_t ParameterSet::total_elements() const {
    int64_t n = 0;
    for (const auto& [name, e] : entries_) n += e.value.size();
    return n;
}

uint64_t ParameterSet::digest() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const void* data, size_t len) {
        const unsigned char* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < len; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& [name, e] : entries_) {
        mix(name.data(), name.size());
        mix(e.value.data(), static_cast<size_t>(e.value.size()) * sizeof(double));
    }
    return h;
}

ParamVars make_leaves(Graph& g, const ParameterSet& params) {
    ParamVars vars;
    for (const auto& [name, e] : params) vars.emplace(name, leaf(g, e.value));
    return vars;
}

std::map<std::string, Tensor> gradient(Graph& g, Var loss, const ParamVars& vars) {
    std::vector<std::string> names;
    std::vector<Var> wrt;
    names.reserve(vars.size());
    wrt.reserve(vars.size());
    for (const auto& [name, v] : vars) {
        names.push_back(name);
        wrt.push_back(v);
    }
    std::vector<Var> gvars = g.gradients(loss, wrt);
    std::map<std::string, Tensor> out;
    for (size_t i = 0; i < names.size(); ++i) out.emplace(names[i], g.value(gvars[i]));
    return out;
}

void accumulate_grads(ParameterSet& params, const std::map<std::string, Tensor>& grads) {
    for (const auto& [name, gt] : grads) {
        Tensor& acc = params.grad(name);
        if (!acc.same_shape(gt)) throw GraphError("gradient shape mismatch for parameter '" + name + "'");
        for (int64_t i = 0; i < acc.size(); ++i) acc[i] += gt[i];
    }
}

namespace {

// theta' vars = theta - eta * d_theta(inner), recorded so the step itself is
// differentiable w.r.t. phi.
ParamVars tentative_vars(Graph& g, Var inner_loss, const ParamVars& theta_vars, double eta) {
    std::vector<std::string> names;
    std::vector<Var> wrt;
    for (const auto& [name, v] : theta_vars) {
        names.push_back(name);
        wrt.push_back(v);
    }
    std::vector<Var> gvars = g.gradients(inner_loss, wrt);
    ParamVars updated;
    for (size_t i = 0; i < names.size(); ++i) {
        updated.emplace(names[i], sub(wrt[i], scale(gvars[i], eta)));
    }
    return updated;
}

} // namespace

std::map<std::string, Tensor> unrolled_gradient(const LossBuilder& outer, const LossBuilder& inner,
                                                const ParameterSet& theta, const ParameterSet& phi, double eta,
                                                UnrollMode mode) {
    if (mode == UnrollMode::kDoubleBackward) {
        Graph g;
        ParamVars theta_vars = make_leaves(g, theta);
        ParamVars phi_vars = make_leaves(g, phi);
        Var inner_loss = inner(g, theta_vars, phi_vars);
        ParamVars theta_prime = tentative_vars(g, inner_loss, theta_vars, eta);
        Var outer_loss = outer(g, theta_prime, phi_vars);
        return gradient(g, outer_loss, phi_vars);
    }

    // HVP route:  d_phi outer(phi, theta')  evaluated with theta' detached,
    // minus eta * d_phi [ d_theta inner . w ] with w = grad_{theta'} outer held constant.
    Graph g;
    ParamVars theta_vars = make_leaves(g, theta);
    ParamVars phi_vars = make_leaves(g, phi);
    Var inner_loss = inner(g, theta_vars, phi_vars);
    ParamVars theta_prime = tentative_vars(g, inner_loss, theta_vars, eta);

    // detach theta' so this outer build sees it as data
    ParamVars theta_prime_detached;
    for (const auto& [name, v] : theta_prime) theta_prime_detached.emplace(name, constant(g, g.value(v)));
    Var outer_detached = outer(g, theta_prime_detached, phi_vars);
    std::map<std::string, Tensor> direct = gradient(g, outer_detached, phi_vars);

    // w = grad of outer w.r.t. theta' (phi held at its leaves; any direct phi
    // path is irrelevant here because w is consumed as a constant below)
    Graph g2;
    ParamVars theta_vars2 = make_leaves(g2, theta);
    ParamVars phi_vars2 = make_leaves(g2, phi);
    Var inner_loss2 = inner(g2, theta_vars2, phi_vars2);
    ParamVars theta_prime2 = tentative_vars(g2, inner_loss2, theta_vars2, eta);
    Var outer_loss2 = outer(g2, theta_prime2, phi_vars2);
    std::map<std::string, Tensor> w = gradient(g2, outer_loss2, theta_prime2);

    // s = sum_j d_theta_j inner * w_j, then d_phi s is the mixed-Hessian product
    Graph g3;
    ParamVars theta_vars3 = make_leaves(g3, theta);
    ParamVars phi_vars3 = make_leaves(g3, phi);
    Var inner_loss3 = inner(g3, theta_vars3, phi_vars3);
    std::vector<std::string> names;
    std::vector<Var> wrt;
    for (const auto& [name, v] : theta_vars3) {
        names.push_back(name);
        wrt.push_back(v);
    }
    std::vector<Var> inner_grads = g3.gradients(inner_loss3, wrt);
    Var s{};
    for (size_t i = 0; i < names.size(); ++i) {
        Var term = sum_all(mul(inner_grads[i], constant(g3, w.at(names[i]))));
        s = s.valid() ? add(s, term) : term;
    }
    std::map<std::string, Tensor> hvp = gradient(g3, s, phi_vars3);

    std::map<std::string, Tensor> out;
    for (auto& [name, d] : direct) {
        const Tensor& h = hvp.at(name);
        Tensor combined(d.shape());
        for (int64_t i = 0; i < d.size(); ++i) combined[i] = d[i] - eta * h[i];
        out.emplace(name, std::move(combined));
    }
    return out;
}

} // namespace genrec
