#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "rmarn/num/var.hpp"

namespace rmarn::num {

// Adam with bias correction. Moment tensors are kept in the parameter order
// they were initialized with; shapes are validated on every step.
template <typename T>
struct AdamStateT {
    double lr = 0.008;
    double beta1 = 0.91;
    double beta2 = 0.9993;
    double epsilon = 1e-8;
    int64_t step_count = 0;
    std::vector<TensorT<T>> first_moment;
    std::vector<TensorT<T>> second_moment;

    void init(std::span<const VarT<T>> params) {
        require(lr > 0.0, ErrorKind::config, "adam: lr must be positive");
        require(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0, ErrorKind::config,
                "adam: betas must lie in (0, 1)");
        first_moment.clear();
        second_moment.clear();
        for (const auto& p : params) {
            first_moment.emplace_back(p.value().shape());
            second_moment.emplace_back(p.value().shape());
        }
        step_count = 0;
    }

    bool initialized() const { return !first_moment.empty(); }
};

template <typename T>
void adam_step(std::span<VarT<T>> params, AdamStateT<T>& state) {
    if (!state.initialized()) state.init({params.data(), params.size()});
    require(state.first_moment.size() == params.size(), ErrorKind::config,
            "adam: state/parameter count mismatch");
    state.step_count += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        VarT<T>& p = params[pi];
        TensorT<T>& m = state.first_moment[pi];
        TensorT<T>& v = state.second_moment[pi];
        require(m.same_shape(p.value()), ErrorKind::config,
                "adam: moment shape mismatch for parameter '" + p.name() + "'");
        if (p.grad().empty()) continue;  // parameter did not participate this step
        const TensorT<T>& g = p.grad();
        for (int64_t i = 0; i < g.numel(); ++i) {
            const double gi = static_cast<double>(g[i]);
            if (!std::isfinite(gi)) {
                fail(ErrorKind::numeric,
                     "non-finite gradient for parameter '" + p.name() + "' at index " +
                         std::to_string(i));
            }
            const double mi = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            const double vi = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            p.value_mut()[i] -= static_cast<T>(state.lr * mhat / (std::sqrt(vhat) + state.epsilon));
        }
    }
}

using AdamStateF = AdamStateT<float>;
using AdamStateD = AdamStateT<double>;

}  // namespace rmarn::num
