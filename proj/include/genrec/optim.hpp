#pragma once

#include <map>
#include <string>

#include "genrec/params.hpp"
#include "genrec/tensor.hpp"

namespace genrec {

// AdamW: Adam moments plus decoupled weight decay applied directly to the
// parameter. State is keyed by parameter name and created lazily.
class AdamW {
public:
    struct Options {
        double lr = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 0.0;
    };

    explicit AdamW(Options opt) : opt_(opt) {}

    // applies params.grad to params.value; grads are left untouched
    void step(ParameterSet& params);

    void reset() {
        m_.clear();
        v_.clear();
        t_ = 0;
    }

    const Options& options() const { return opt_; }
    void set_lr(double lr) { opt_.lr = lr; }

private:
    Options opt_;
    int64_t t_ = 0;
    std::map<std::string, Tensor> m_;
    std::map<std::string, Tensor> v_;
};

// Plain gradient descent, used where the update itself must stay simple.
void sgd_step(ParameterSet& params, double lr);

} // namespace genrec
