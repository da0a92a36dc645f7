#pragma once

#include <functional>
#include <string>

#include "mhaff/random.hpp"
#include "mhaff/tensor.hpp"

namespace mhaff {

// U(-sqrt(6 / (fan_in + fan_out)), +sqrt(6 / (fan_in + fan_out)))
Tensor glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng);
// U(-sqrt(6 / fan_in), +sqrt(6 / fan_in)); for conv kernels fan_in = C k k.
Tensor he_uniform(Shape shape, std::size_t fan_in, Rng& rng);
Tensor uniform_tensor(Shape shape, double limit, Rng& rng);

// Visits every named parameter of a parameter struct.
using ParamVisitor = std::function<void(const std::string& name, Tensor& param)>;

}  // namespace mhaff
