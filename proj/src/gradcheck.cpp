#include "mhaff/gradcheck.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>

#include "mhaff/tape.hpp"

namespace mhaff {

namespace {

double evaluate(const std::function<Tensor()>& closure) {
  NoGradGuard no_grad;
  const Tensor out = closure();
  if (out.numel() != 1) throw UsageError("grad_check closure must return a scalar, got " + shape_string(out.shape()));
  return out[0];
}

}  // namespace

GradCheckResult grad_check(const std::function<Tensor()>& closure, std::vector<Tensor> points, double step,
                           double tolerance) {
  if (!(step > 0.0)) throw UsageError("grad_check: step must be positive");

  const double first = evaluate(closure);
  const double second = evaluate(closure);
  if (std::bit_cast<std::uint64_t>(first) != std::bit_cast<std::uint64_t>(second)) {
    throw UsageError("grad_check: closure is non-deterministic (" + std::to_string(first) + " vs " +
                     std::to_string(second) + ")");
  }

  std::vector<bool> saved_flags;
  for (Tensor& p : points) {
    saved_flags.push_back(p.requires_grad());
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Tape tape;
    const Tensor loss = closure();
    tape.backward(loss);
  }

  GradCheckResult result;
  for (Tensor& p : points) {
    const Tensor analytic = p.grad_tensor();
    auto data = p.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double original = data[i];
      data[i] = original + step;
      const double plus = evaluate(closure);
      data[i] = original - step;
      const double minus = evaluate(closure);
      data[i] = original;
      const double numeric = (plus - minus) / (2.0 * step);
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
      result.max_relative_error = std::max(result.max_relative_error, err);
      ++result.coordinates;
    }
  }
  for (std::size_t i = 0; i < points.size(); ++i) {
    points[i].zero_grad();
    points[i].set_requires_grad(saved_flags[i]);
  }
  result.passed = result.max_relative_error < tolerance;
  return result;
}

}  // namespace mhaff
