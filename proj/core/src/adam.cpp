#include "treemil/adam.hpp"

#include <cmath>

#include "treemil/errors.hpp"

namespace treemil {

void AdamState::validate() const {
    if (!(beta1 > 0.0 && beta1 < 1.0)) {
        throw ConfigError("adam: beta1 must be in (0, 1)");
    }
    if (!(beta2 > 0.0 && beta2 < 1.0)) {
        throw ConfigError("adam: beta2 must be in (0, 1)");
    }
    if (!(eps > 0.0)) {
        throw ConfigError("adam: eps must be positive");
    }
    if (!(lr > 0.0)) {
        throw ConfigError("adam: lr must be positive");
    }
}

void adam_step(ParamSet& params, AdamState& state) {
    state.validate();
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));

    for (NamedTensor& p : params) {
        if (!p.tensor.has_grad()) {
            throw NumericError("adam: parameter '" + p.name + "' has no gradient");
        }
        auto data = p.tensor.data_mut();
        auto grad = p.tensor.grad();
        auto& m = state.first_moment[p.name];
        auto& v = state.second_moment[p.name];
        if (m.empty()) m.assign(data.size(), 0.0);
        if (v.empty()) v.assign(data.size(), 0.0);
        if (m.size() != data.size() || v.size() != data.size()) {
            throw ShapeError("adam: moment buffers for '" + p.name +
                             "' do not match the parameter size");
        }
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double g = grad[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            data[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

} // namespace treemil
