#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>

#include "genrec/graph.hpp"
#include "genrec/tensor.hpp"

namespace genrec {

// Named tensors with gradient accumulators. Iteration is lexicographic by
// name, which fixes the order of every loop that touches parameters.
class ParameterSet {
public:
    struct Entry {
        Tensor value;
        Tensor grad;
    };

    void add(const std::string& name, Tensor init);
    bool has(const std::string& name) const { return entries_.count(name) > 0; }
    size_t size() const { return entries_.size(); }

    Tensor& value(const std::string& name);
    const Tensor& value(const std::string& name) const;
    Tensor& grad(const std::string& name);
    const Tensor& grad(const std::string& name) const;

    void zero_grads();
    int64_t total_elements() const;

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    // FNV-1a over raw value bytes in name order; bitwise change detector
    uint64_t digest() const;

private:
    std::map<std::string, Entry> entries_;
};

// Graph leaves for a parameter set, one per named tensor.
using ParamVars = std::map<std::string, Var>;

ParamVars make_leaves(Graph& g, const ParameterSet& params);

// d(loss)/d(param) for every leaf in `vars`; unreachable parameters come back
// as zero tensors.
std::map<std::string, Tensor> gradient(Graph& g, Var loss, const ParamVars& vars);

// Adds `grads` into the grad accumulators (backward contract is accumulate,
// the trainer zeroes explicitly between steps).
void accumulate_grads(ParameterSet& params, const std::map<std::string, Tensor>& grads);

// Builds a scalar loss from (theta vars, phi vars) inside the given graph.
using LossBuilder = std::function<Var(Graph&, const ParamVars& theta, const ParamVars& phi)>;

enum class UnrollMode {
    kDoubleBackward, // reference: record the inner backward pass and differentiate through it
    kHvp,            // analytic: d_phi outer - eta * (d2 inner / dphi dtheta)^T grad_theta' outer
};

// Total derivative d/dphi [ outer(phi, theta - eta * d_theta inner(phi, theta)) ].
std::map<std::string, Tensor> unrolled_gradient(const LossBuilder& outer, const LossBuilder& inner,
                                                const ParameterSet& theta, const ParameterSet& phi, double eta,
                                                UnrollMode mode = UnrollMode::kDoubleBackward);

} // namespace genrec
