#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mhaff/tensor.hpp"

namespace mhaff {

struct GradCheckResult {
  // max over coordinates of |analytic - numeric| / max(1, |analytic|)
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  bool passed = false;
};

// Compares reverse-mode gradients of a scalar closure against central
// differences at the given points. The closure must read the point tensors by
// handle; their data is perturbed in place and restored. Throws UsageError if
// two forward passes at the same point disagree.
GradCheckResult grad_check(const std::function<Tensor()>& closure, std::vector<Tensor> points,
                           double step = 1e-5, double tolerance = 1e-5);

struct GradCheckCase {
  std::string name;
  GradCheckResult result;
};

// Every differentiable primitive plus the composed fusion path, on randomized
// shapes no larger than 8 x 8.
std::vector<GradCheckCase> run_gradcheck_suite(std::uint64_t seed, double step = 1e-5, double tolerance = 1e-5);

}  // namespace mhaff
