#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "treemil/tensor.hpp"

namespace treemil {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

// Ordered parameter list; the order fixes initialisation draws, update order
// and checkpoint layout.
using ParamSet = std::vector<NamedTensor>;

struct AdamState {
    std::uint64_t step = 0;
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    // Moment buffers keyed by parameter name, shape-matching the parameter.
    std::map<std::string, std::vector<double>> first_moment;
    std::map<std::string, std::vector<double>> second_moment;

    void validate() const;
};

// One Adam update with bias correction over every parameter in the set.
// Moment buffers are created on first use. Throws NumericError when a
// parameter has no populated gradient, naming the parameter.
void adam_step(ParamSet& params, AdamState& state);

} // namespace treemil
