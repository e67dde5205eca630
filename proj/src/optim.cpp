#include "genrec/optim.hpp"

#include <cmath>

namespace genrec {

void AdamW::step(ParameterSet& params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (auto& [name, entry] : params) {
        auto mit = m_.find(name);
        if (mit == m_.end()) {
            mit = m_.emplace(name, Tensor::zeros(entry.value.shape())).first;
            v_.emplace(name, Tensor::zeros(entry.value.shape()));
        }
        Tensor& m = mit->second;
        Tensor& v = v_.at(name);
        for (int64_t i = 0; i < entry.value.size(); ++i) {
            const double g = entry.grad[i];
            m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g;
            v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            entry.value[i] -= opt_.lr * (mhat / (std::sqrt(vhat) + opt_.eps) + opt_.weight_decay * entry.value[i]);
        }
    }
}

void sgd_step(ParameterSet& params, double lr) {
    for (auto& [name, entry] : params) {
        for (int64_t i = 0; i < entry.value.size(); ++i) {
            entry.value[i] -= lr * entry.grad[i];
        }
    }
}

} // namespace genrec
