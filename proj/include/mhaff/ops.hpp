#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mhaff/random.hpp"
#include "mhaff/tensor.hpp"

// Differentiable primitives. Every op records itself on the active Tape when
// any input requires a gradient.
namespace mhaff::ops {

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kLogClamp = 1e-12;

// [M x K] . [K x N] -> [M x N]
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// x[N x d] + bias[d], broadcast over rows.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);

Tensor relu(const Tensor& x);
// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
Tensor gelu(const Tensor& x);

Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

// Numerically stable softmax along one axis.
Tensor softmax(const Tensor& x, std::size_t axis);

// Per-row normalization of x[N x d].
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = kLayerNormEps);
// x[C x H x W] normalized over groups of C/groups channels, per-channel affine.
Tensor group_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, std::size_t groups,
                  double eps = kLayerNormEps);

// Cross-correlation of input[C x H x W] with kernels[F x C x k x k].
Tensor conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride = 1, std::size_t padding = 0);
Tensor max_pool2d(const Tensor& input, std::size_t kernel, std::size_t stride);
// Average-pools input[C x H x W] onto an out_h x out_w grid; bin i spans
// [floor(i H / out_h), ceil((i + 1) H / out_h)).
Tensor adaptive_avg_pool2d(const Tensor& input, std::size_t out_h, std::size_t out_w);
// input[C x H x W] -> [(H/p)(W/p) x C p p], patches in row-major grid order,
// each flattened channel-major.
Tensor extract_patches(const Tensor& input, std::size_t patch);

// Mean over one axis; the axis is removed (a rank-1 input yields shape [1]).
Tensor mean(const Tensor& x, std::size_t axis);
Tensor sum(const Tensor& x);

// Inverted dropout: kept activations are scaled by 1/(1 - rate) in training;
// identity when !train or rate == 0.
Tensor dropout(const Tensor& x, double rate, bool train, Rng& rng);

Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);

struct LossDiagnostics {
  // Number of target probabilities that were below the clamp and replaced.
  std::size_t clamped = 0;
};

// -(1/N) sum_i log p[i, target_i] over probs[N x C] whose rows sum to 1.
Tensor cross_entropy_loss(const Tensor& probs, std::span<const std::size_t> targets,
                          LossDiagnostics* diagnostics = nullptr);

}  // namespace mhaff::ops
