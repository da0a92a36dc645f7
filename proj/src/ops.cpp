#include "mhaff/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "mhaff/tape.hpp"

namespace mhaff::ops {

namespace {

using detail::grad_buffer;
using detail::wants_grad;

using Backward = std::function<void(const TapeNode&)>;

Tensor finish(const char* op, Tensor out, std::initializer_list<const Tensor*> inputs, Backward backward) {
  if (anomaly_detection_enabled() && !out.all_finite()) {
    throw NumericError(std::string("non-finite value produced by ") + op);
  }
  Tape* tape = Tape::active();
  if (tape == nullptr) return out;
  bool any = false;
  for (const Tensor* t : inputs) any = any || t->requires_grad();
  if (!any) return out;

  out.set_requires_grad(true);
  TapeNode node;
  node.op = op;
  for (const Tensor* t : inputs) node.inputs.push_back(t->impl_ptr());
  node.output = out.impl_ptr();
  node.backward = std::move(backward);
  tape->record(std::move(node));
  return out;
}

Tensor finish_many(const char* op, Tensor out, std::span<const Tensor> inputs, Backward backward) {
  if (anomaly_detection_enabled() && !out.all_finite()) {
    throw NumericError(std::string("non-finite value produced by ") + op);
  }
  Tape* tape = Tape::active();
  if (tape == nullptr) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return out;

  out.set_requires_grad(true);
  TapeNode node;
  node.op = op;
  for (const Tensor& t : inputs) node.inputs.push_back(t.impl_ptr());
  node.output = out.impl_ptr();
  node.backward = std::move(backward);
  tape->record(std::move(node));
  return out;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& x, std::size_t rank) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(x.shape()));
  }
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

void require_axis(const char* op, const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " +
                         shape_string(x.shape()));
  }
}

constexpr double kGeluCoeff = 0.044715;
const double kSqrt2OverPi = std::sqrt(2.0 / std::numbers::pi);

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = pc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = pa[i * k + p];
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return finish("matmul", out, {&a, &b}, [m, k, n](const TapeNode& node) {
    const double* dc = node.output->grad.data();
    TensorImpl& ia = *node.inputs[0];
    TensorImpl& ib = *node.inputs[1];
    if (wants_grad(ia)) {
      double* da = grad_buffer(ia).data();
      const double* pb = ib.data.data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += dc[i * n + j] * pb[p * n + j];
          da[i * k + p] += acc;
        }
      }
    }
    if (wants_grad(ib)) {
      double* db = grad_buffer(ib).data();
      const double* pa = ia.data.data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = pa[i * k + p];
          for (std::size_t j = 0; j < n; ++j) db[p * n + j] += aip * dc[i * n + j];
        }
      }
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] + b[i];
  return finish("add", out, {&a, &b}, [](const TapeNode& node) {
    const auto& g = node.output->grad;
    for (const auto& in : node.inputs) {
      if (!wants_grad(*in)) continue;
      auto& d = grad_buffer(*in);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] - b[i];
  return finish("sub", out, {&a, &b}, [](const TapeNode& node) {
    const auto& g = node.output->grad;
    if (wants_grad(*node.inputs[0])) {
      auto& d = grad_buffer(*node.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
    if (wants_grad(*node.inputs[1])) {
      auto& d = grad_buffer(*node.inputs[1]);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * b[i];
  return finish("mul", out, {&a, &b}, [](const TapeNode& node) {
    const auto& g = node.output->grad;
    TensorImpl& ia = *node.inputs[0];
    TensorImpl& ib = *node.inputs[1];
    if (wants_grad(ia)) {
      auto& d = grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * ib.data[i];
    }
    if (wants_grad(ib)) {
      auto& d = grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * ia.data[i];
    }
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank("add_bias", x, 2);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (bias.numel() != cols) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " does not match " +
                         shape_string(x.shape()));
  }
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x[r * cols + c] + bias[c];
  }
  return finish("add_bias", out, {&x, &bias}, [rows, cols](const TapeNode& node) {
    const auto& g = node.output->grad;
    if (wants_grad(*node.inputs[0])) {
      auto& d = grad_buffer(*node.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
    if (wants_grad(*node.inputs[1])) {
      auto& d = grad_buffer(*node.inputs[1]);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) d[c] += g[r * cols + c];
      }
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] * factor;
  return finish("scale", out, {&x}, [factor](const TapeNode& node) {
    const auto& g = node.output->grad;
    auto& d = grad_buffer(*node.inputs[0]);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * factor;
  });
}

Tensor add_scalar(const Tensor& x, double value) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] + value;
  return finish("add_scalar", out, {&x}, [](const TapeNode& node) {
    const auto& g = node.output->grad;
    auto& d = grad_buffer(*node.inputs[0]);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return finish("relu", out, {&x}, [](const TapeNode& node) {
    const auto& g = node.output->grad;
    const auto& xs = node.inputs[0]->data;
    auto& d = grad_buffer(*node.inputs[0]);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xs[i] > 0.0) d[i] += g[i];
    }
  });
}

Tensor gelu(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double v = x[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(kSqrt2OverPi * (v + kGeluCoeff * v * v * v)));
  }
  return finish("gelu", out, {&x}, [](const TapeNode& node) {
    const auto& g = node.output->grad;
    const auto& xs = node.inputs[0]->data;
    auto& d = grad_buffer(*node.inputs[0]);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xs[i];
      const double t = std::tanh(kSqrt2OverPi * (v + kGeluCoeff * v * v * v));
      const double dt = (1.0 - t * t) * kSqrt2OverPi * (1.0 + 3.0 * kGeluCoeff * v * v);
      d[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
    }
  });
}

Tensor transpose(const Tensor& x) {
  require_rank("transpose", x, 2);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  Tensor out({cols, rows});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = x[r * cols + c];
  }
  return finish("transpose", out, {&x}, [rows, cols](const TapeNode& node) {
    const auto& g = node.output->grad;
    auto& d = grad_buffer(*node.inputs[0]);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) d[r * cols + c] += g[c * rows + r];
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  }
  Tensor out(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
  return finish("reshape", out, {&x}, [](const TapeNode& node) {
    const auto& g = node.output->grad;
    auto& d = grad_buffer(*node.inputs[0]);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  require_axis("softmax", x, axis);
  const AxisSplit s = split_axis(x.shape(), axis);
  Tensor out(x.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      double mx = x[base];
      for (std::size_t j = 1; j < s.len; ++j) mx = std::max(mx, x[base + j * s.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < s.len; ++j) {
        const double e = std::exp(x[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < s.len; ++j) out[base + j * s.inner] /= total;
    }
  }
  return finish("softmax", out, {&x}, [s](const TapeNode& node) {
    const auto& g = node.output->grad;
    const auto& y = node.output->data;
    auto& d = grad_buffer(*node.inputs[0]);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.len * s.inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < s.len; ++j) dot += g[base + j * s.inner] * y[base + j * s.inner];
        for (std::size_t j = 0; j < s.len; ++j) {
          const std::size_t idx = base + j * s.inner;
          d[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_rank("layer_norm", x, 2);
  if (!(eps > 0.0)) throw UsageError("layer_norm: eps must be positive");
  const std::size_t rows = x.dim(0), d = x.dim(1);
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_string(gain.shape()) + "/" +
                         shape_string(bias.shape()) + " do not match " + shape_string(x.shape()));
  }
  Tensor out(x.shape());
  std::vector<double> xhat(x.numel());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (row[c] - mu) * rstd[r];
      xhat[r * d + c] = h;
      out[r * d + c] = h * gain[c] + bias[c];
    }
  }
  return finish("layer_norm", out, {&x, &gain, &bias},
                [rows, d, xhat = std::move(xhat), rstd = std::move(rstd)](const TapeNode& node) {
                  const auto& g = node.output->grad;
                  TensorImpl& ix = *node.inputs[0];
                  TensorImpl& igain = *node.inputs[1];
                  TensorImpl& ibias = *node.inputs[2];
                  if (wants_grad(igain)) {
                    auto& dg = grad_buffer(igain);
                    for (std::size_t i = 0; i < g.size(); ++i) dg[i % d] += g[i] * xhat[i];
                  }
                  if (wants_grad(ibias)) {
                    auto& db = grad_buffer(ibias);
                    for (std::size_t i = 0; i < g.size(); ++i) db[i % d] += g[i];
                  }
                  if (wants_grad(ix)) {
                    auto& dx = grad_buffer(ix);
                    const double n = static_cast<double>(d);
                    for (std::size_t r = 0; r < rows; ++r) {
                      double sum_dh = 0.0, sum_dh_h = 0.0;
                      for (std::size_t c = 0; c < d; ++c) {
                        const double dh = g[r * d + c] * igain.data[c];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat[r * d + c];
                      }
                      for (std::size_t c = 0; c < d; ++c) {
                        const double dh = g[r * d + c] * igain.data[c];
                        dx[r * d + c] += rstd[r] / n * (n * dh - sum_dh - xhat[r * d + c] * sum_dh_h);
                      }
                    }
                  }
                });
}

Tensor group_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, std::size_t groups, double eps) {
  require_rank("group_norm", x, 3);
  if (!(eps > 0.0)) throw UsageError("group_norm: eps must be positive");
  const std::size_t channels = x.dim(0);
  const std::size_t plane = x.dim(1) * x.dim(2);
  if (groups == 0 || channels % groups != 0) {
    throw DimensionError("group_norm: " + std::to_string(channels) + " channels not divisible into " +
                         std::to_string(groups) + " groups");
  }
  if (gain.numel() != channels || bias.numel() != channels) {
    throw DimensionError("group_norm: gain/bias do not match " + shape_string(x.shape()));
  }
  const std::size_t group_size = channels / groups * plane;
  Tensor out(x.shape());
  std::vector<double> xhat(x.numel());
  std::vector<double> rstd(groups);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const std::size_t base = gi * group_size;
    double mu = 0.0;
    for (std::size_t i = 0; i < group_size; ++i) mu += x[base + i];
    mu /= static_cast<double>(group_size);
    double var = 0.0;
    for (std::size_t i = 0; i < group_size; ++i) var += (x[base + i] - mu) * (x[base + i] - mu);
    var /= static_cast<double>(group_size);
    rstd[gi] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < group_size; ++i) {
      const std::size_t idx = base + i;
      const std::size_t c = idx / plane;
      xhat[idx] = (x[idx] - mu) * rstd[gi];
      out[idx] = xhat[idx] * gain[c] + bias[c];
    }
  }
  return finish("group_norm", out, {&x, &gain, &bias},
                [groups, group_size, plane, xhat = std::move(xhat), rstd = std::move(rstd)](const TapeNode& node) {
                  const auto& g = node.output->grad;
                  TensorImpl& ix = *node.inputs[0];
                  TensorImpl& igain = *node.inputs[1];
                  TensorImpl& ibias = *node.inputs[2];
                  if (wants_grad(igain)) {
                    auto& dg = grad_buffer(igain);
                    for (std::size_t i = 0; i < g.size(); ++i) dg[i / plane] += g[i] * xhat[i];
                  }
                  if (wants_grad(ibias)) {
                    auto& db = grad_buffer(ibias);
                    for (std::size_t i = 0; i < g.size(); ++i) db[i / plane] += g[i];
                  }
                  if (wants_grad(ix)) {
                    auto& dx = grad_buffer(ix);
                    const double n = static_cast<double>(group_size);
                    for (std::size_t gi = 0; gi < groups; ++gi) {
                      const std::size_t base = gi * group_size;
                      double sum_dh = 0.0, sum_dh_h = 0.0;
                      for (std::size_t i = 0; i < group_size; ++i) {
                        const double dh = g[base + i] * igain.data[(base + i) / plane];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat[base + i];
                      }
                      for (std::size_t i = 0; i < group_size; ++i) {
                        const std::size_t idx = base + i;
                        const double dh = g[idx] * igain.data[idx / plane];
                        dx[idx] += rstd[gi] / n * (n * dh - sum_dh - xhat[idx] * sum_dh_h);
                      }
                    }
                  }
                });
}

Tensor conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride, std::size_t padding) {
  require_rank("conv2d input", input, 3);
  require_rank("conv2d kernels", kernels, 4);
  const std::size_t c_in = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t f = kernels.dim(0), k = kernels.dim(2);
  if (kernels.dim(1) != c_in || kernels.dim(3) != k) {
    throw DimensionError("conv2d: kernels " + shape_string(kernels.shape()) + " incompatible with input " +
                         shape_string(input.shape()));
  }
  if (stride == 0) throw UsageError("conv2d: stride must be positive");
  if (k > h + 2 * padding || k > w + 2 * padding) {
    throw DimensionError("conv2d: kernel " + shape_string(kernels.shape()) + " larger than padded input " +
                         shape_string(input.shape()) + " with padding " + std::to_string(padding));
  }
  const std::size_t oh = (h + 2 * padding - k) / stride + 1;
  const std::size_t ow = (w + 2 * padding - k) / stride + 1;
  const std::size_t patch = c_in * k * k;
  const std::size_t positions = oh * ow;

  // im2col: row r = (c, ki, kj), column p = (oy, ox). Accumulation over r in
  // order reproduces the naive nested loop exactly.
  std::vector<double> cols(patch * positions, 0.0);
  const double* px = input.data().data();
  for (std::size_t c = 0; c < c_in; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        double* row = cols.data() + ((c * k + ki) * k + kj) * positions;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ki) - static_cast<std::ptrdiff_t>(padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kj) - static_cast<std::ptrdiff_t>(padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            row[oy * ow + ox] = px[(c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }

  Tensor out({f, oh, ow});
  const double* pw = kernels.data().data();
  double* po = out.data().data();
  for (std::size_t fi = 0; fi < f; ++fi) {
    double* orow = po + fi * positions;
    for (std::size_t r = 0; r < patch; ++r) {
      const double wv = pw[fi * patch + r];
      const double* crow = cols.data() + r * positions;
      for (std::size_t p = 0; p < positions; ++p) orow[p] += wv * crow[p];
    }
  }

  return finish("conv2d", out, {&input, &kernels},
                [=, cols = std::move(cols)](const TapeNode& node) {
                  const double* g = node.output->grad.data();
                  TensorImpl& iin = *node.inputs[0];
                  TensorImpl& iker = *node.inputs[1];
                  if (wants_grad(iker)) {
                    double* dw = grad_buffer(iker).data();
                    for (std::size_t fi = 0; fi < f; ++fi) {
                      for (std::size_t r = 0; r < patch; ++r) {
                        double acc = 0.0;
                        const double* crow = cols.data() + r * positions;
                        const double* grow = g + fi * positions;
                        for (std::size_t p = 0; p < positions; ++p) acc += grow[p] * crow[p];
                        dw[fi * patch + r] += acc;
                      }
                    }
                  }
                  if (wants_grad(iin)) {
                    std::vector<double> dcols(patch * positions, 0.0);
                    const double* pw = iker.data.data();
                    for (std::size_t fi = 0; fi < f; ++fi) {
                      const double* grow = g + fi * positions;
                      for (std::size_t r = 0; r < patch; ++r) {
                        const double wv = pw[fi * patch + r];
                        double* drow = dcols.data() + r * positions;
                        for (std::size_t p = 0; p < positions; ++p) drow[p] += wv * grow[p];
                      }
                    }
                    double* dx = grad_buffer(iin).data();
                    for (std::size_t c = 0; c < c_in; ++c) {
                      for (std::size_t ki = 0; ki < k; ++ki) {
                        for (std::size_t kj = 0; kj < k; ++kj) {
                          const double* drow = dcols.data() + ((c * k + ki) * k + kj) * positions;
                          for (std::size_t oy = 0; oy < oh; ++oy) {
                            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ki) -
                                                      static_cast<std::ptrdiff_t>(padding);
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                            for (std::size_t ox = 0; ox < ow; ++ox) {
                              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kj) -
                                                        static_cast<std::ptrdiff_t>(padding);
                              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                              dx[(c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] +=
                                  drow[oy * ow + ox];
                            }
                          }
                        }
                      }
                    }
                  }
                });
}

Tensor max_pool2d(const Tensor& input, std::size_t kernel, std::size_t stride) {
  require_rank("max_pool2d", input, 3);
  const std::size_t c_in = input.dim(0), h = input.dim(1), w = input.dim(2);
  if (kernel == 0 || stride == 0 || kernel > h || kernel > w) {
    throw DimensionError("max_pool2d: kernel " + std::to_string(kernel) + " invalid for " +
                         shape_string(input.shape()));
  }
  const std::size_t oh = (h - kernel) / stride + 1;
  const std::size_t ow = (w - kernel) / stride + 1;
  Tensor out({c_in, oh, ow});
  std::vector<std::size_t> argmax(out.numel());
  for (std::size_t c = 0; c < c_in; ++c) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (c * h + oy * stride) * w + ox * stride;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::size_t idx = (c * h + oy * stride + ky) * w + ox * stride + kx;
            if (input[idx] > input[best]) best = idx;
          }
        }
        const std::size_t o = (c * oh + oy) * ow + ox;
        out[o] = input[best];
        argmax[o] = best;
      }
    }
  }
  return finish("max_pool2d", out, {&input}, [argmax = std::move(argmax)](const TapeNode& node) {
    const auto& g = node.output->grad;
    auto& d = grad_buffer(*node.inputs[0]);
    for (std::size_t o = 0; o < g.size(); ++o) d[argmax[o]] += g[o];
  });
}

Tensor adaptive_avg_pool2d(const Tensor& input, std::size_t out_h, std::size_t out_w) {
  require_rank("adaptive_avg_pool2d", input, 3);
  if (out_h == 0 || out_w == 0) throw DimensionError("adaptive_avg_pool2d: output grid must be positive");
  const std::size_t c_in = input.dim(0), h = input.dim(1), w = input.dim(2);
  auto bin = [](std::size_t i, std::size_t in, std::size_t out) {
    const std::size_t lo = (i * in) / out;
    const std::size_t hi = ((i + 1) * in + out - 1) / out;
    return std::pair{lo, hi};
  };
  Tensor out({c_in, out_h, out_w});
  for (std::size_t c = 0; c < c_in; ++c) {
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto [y0, y1] = bin(oy, h, out_h);
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto [x0, x1] = bin(ox, w, out_w);
        double acc = 0.0;
        for (std::size_t y = y0; y < y1; ++y) {
          for (std::size_t x = x0; x < x1; ++x) acc += input[(c * h + y) * w + x];
        }
        out[(c * out_h + oy) * out_w + ox] = acc / static_cast<double>((y1 - y0) * (x1 - x0));
      }
    }
  }
  return finish("adaptive_avg_pool2d", out, {&input}, [=](const TapeNode& node) {
    const auto& g = node.output->grad;
    auto& d = grad_buffer(*node.inputs[0]);
    for (std::size_t c = 0; c < c_in; ++c) {
      for (std::size_t oy = 0; oy < out_h; ++oy) {
        const auto [y0, y1] = bin(oy, h, out_h);
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          const auto [x0, x1] = bin(ox, w, out_w);
          const double share =
              g[(c * out_h + oy) * out_w + ox] / static_cast<double>((y1 - y0) * (x1 - x0));
          for (std::size_t y = y0; y < y1; ++y) {
            for (std::size_t x = x0; x < x1; ++x) d[(c * h + y) * w + x] += share;
          }
        }
      }
    }
  });
}

Tensor extract_patches(const Tensor& input, std::size_t patch) {
  require_rank("extract_patches", input, 3);
  const std::size_t c_in = input.dim(0), h = input.dim(1), w = input.dim(2);
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw DimensionError("extract_patches: input " + shape_string(input.shape()) + " not divisible by patch " +
                         std::to_string(patch));
  }
  const std::size_t gh = h / patch, gw = w / patch;
  const std::size_t width = c_in * patch * patch;
  Tensor out({gh * gw, width});
  // Source index for each output element.
  std::vector<std::size_t> source(out.numel());
  for (std::size_t py = 0; py < gh; ++py) {
    for (std::size_t px = 0; px < gw; ++px) {
      const std::size_t n = py * gw + px;
      for (std::size_t c = 0; c < c_in; ++c) {
        for (std::size_t dy = 0; dy < patch; ++dy) {
          for (std::size_t dx = 0; dx < patch; ++dx) {
            const std::size_t o = n * width + (c * patch + dy) * patch + dx;
            source[o] = (c * h + py * patch + dy) * w + px * patch + dx;
            out[o] = input[source[o]];
          }
        }
      }
    }
  }
  return finish("extract_patches", out, {&input}, [source = std::move(source)](const TapeNode& node) {
    const auto& g = node.output->grad;
    auto& d = grad_buffer(*node.inputs[0]);
    for (std::size_t o = 0; o < g.size(); ++o) d[source[o]] += g[o];
  });
}

Tensor mean(const Tensor& x, std::size_t axis) {
  require_axis("mean", x, axis);
  const AxisSplit s = split_axis(x.shape(), axis);
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (shape.empty()) shape.push_back(1);
  Tensor out(shape);
  const double inv = 1.0 / static_cast<double>(s.len);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      double acc = 0.0;
      for (std::size_t j = 0; j < s.len; ++j) acc += x[(o * s.len + j) * s.inner + in];
      out[o * s.inner + in] = acc * inv;
    }
  }
  return finish("mean", out, {&x}, [s, inv](const TapeNode& node) {
    const auto& g = node.output->grad;
    auto& d = grad_buffer(*node.inputs[0]);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const double share = g[o * s.inner + in] * inv;
        for (std::size_t j = 0; j < s.len; ++j) d[(o * s.len + j) * s.inner + in] += share;
      }
    }
  });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor out = Tensor::scalar(acc);
  return finish("sum", out, {&x}, [](const TapeNode& node) {
    const double g = node.output->grad[0];
    auto& d = grad_buffer(*node.inputs[0]);
    for (double& v : d) v += g;
  });
}

Tensor dropout(const Tensor& x, double rate, bool train, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw UsageError("dropout: rate must lie in [0, 1)");
  if (!train || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.numel());
  Tensor out(x.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = rng.uniform() < rate ? 0.0 : keep_scale;
    out[i] = x[i] * mask[i];
  }
  return finish("dropout", out, {&x}, [mask = std::move(mask)](const TapeNode& node) {
    const auto& g = node.output->grad;
    auto& d = grad_buffer(*node.inputs[0]);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * mask[i];
  });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw UsageError("concat: no inputs");
  const Tensor& first = parts.front();
  require_axis("concat", first, axis);
  Shape shape = first.shape();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    bool ok = p.rank() == first.rank();
    for (std::size_t i = 0; ok && i < shape.size(); ++i) ok = i == axis || p.dim(i) == shape[i];
    if (!ok) {
      throw DimensionError("concat: shape " + shape_string(p.shape()) + " incompatible with " +
                           shape_string(first.shape()) + " along axis " + std::to_string(axis));
    }
    total += p.dim(axis);
  }
  shape[axis] = total;
  const AxisSplit s = split_axis(shape, axis);
  Tensor out(shape);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(offset);
    const std::size_t len = p.dim(axis);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t j = 0; j < len; ++j) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          out[(o * total + offset + j) * s.inner + in] = p[(o * len + j) * s.inner + in];
        }
      }
    }
    offset += len;
  }
  return finish_many("concat", out, parts, [s, total, offsets = std::move(offsets)](const TapeNode& node) {
    const auto& g = node.output->grad;
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      TensorImpl& in_impl = *node.inputs[k];
      if (!wants_grad(in_impl)) continue;
      auto& d = grad_buffer(in_impl);
      const std::size_t len = in_impl.data.size() / (s.outer * s.inner);
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t j = 0; j < len; ++j) {
          for (std::size_t in = 0; in < s.inner; ++in) {
            d[(o * len + j) * s.inner + in] += g[(o * total + offsets[k] + j) * s.inner + in];
          }
        }
      }
    }
  });
}

Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  require_axis("slice", x, axis);
  if (length == 0 || start + length > x.dim(axis)) {
    throw DimensionError("slice: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") out of range for axis " + std::to_string(axis) + " of " + shape_string(x.shape()));
  }
  const AxisSplit s = split_axis(x.shape(), axis);
  Shape shape = x.shape();
  shape[axis] = length;
  Tensor out(shape);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < length; ++j) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        out[(o * length + j) * s.inner + in] = x[(o * s.len + start + j) * s.inner + in];
      }
    }
  }
  return finish("slice", out, {&x}, [s, start, length](const TapeNode& node) {
    const auto& g = node.output->grad;
    auto& d = grad_buffer(*node.inputs[0]);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t j = 0; j < length; ++j) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          d[(o * s.len + start + j) * s.inner + in] += g[(o * length + j) * s.inner + in];
        }
      }
    }
  });
}

Tensor cross_entropy_loss(const Tensor& probs, std::span<const std::size_t> targets, LossDiagnostics* diagnostics) {
  require_rank("cross_entropy_loss", probs, 2);
  const std::size_t n = probs.dim(0), classes = probs.dim(1);
  if (targets.size() != n) {
    throw DimensionError("cross_entropy_loss: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(n) + " rows");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] >= classes) {
      throw UsageError("cross_entropy_loss: target " + std::to_string(targets[i]) + " outside [0, " +
                       std::to_string(classes) + ")");
    }
    double row = 0.0;
    for (std::size_t c = 0; c < classes; ++c) row += probs[i * classes + c];
    if (std::abs(row - 1.0) > 1e-6) {
      throw UsageError("cross_entropy_loss: row " + std::to_string(i) + " sums to " + std::to_string(row));
    }
  }
  std::vector<bool> clamped(n, false);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double p = probs[i * classes + targets[i]];
    if (p < kLogClamp) {
      p = kLogClamp;
      clamped[i] = true;
      if (diagnostics) ++diagnostics->clamped;
    }
    acc += std::log(p);
  }
  Tensor out = Tensor::scalar(-acc / static_cast<double>(n));
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  return finish("cross_entropy_loss", out, {&probs},
                [n, classes, tgt = std::move(tgt), clamped = std::move(clamped)](const TapeNode& node) {
                  const double g = node.output->grad[0];
                  TensorImpl& ip = *node.inputs[0];
                  auto& d = grad_buffer(ip);
                  for (std::size_t i = 0; i < n; ++i) {
                    if (clamped[i]) continue;
                    const std::size_t idx = i * classes + tgt[i];
                    d[idx] += -g / (static_cast<double>(n) * ip.data[idx]);
                  }
                });
}

}  // namespace mhaff::ops
