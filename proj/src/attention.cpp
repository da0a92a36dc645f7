#include "mhaff/attention.hpp"

#include <cmath>
#include <vector>

#include "mhaff/ops.hpp"

namespace mhaff {

Tensor attention_weights(const Tensor& query, const Tensor& key) {
  if (query.rank() != 2 || key.rank() != 2 || query.dim(1) != key.dim(1)) {
    throw DimensionError("attention: query " + shape_string(query.shape()) + " and key " +
                         shape_string(key.shape()) + " disagree");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(query.dim(1)));
  const Tensor scores = ops::scale(ops::matmul(query, ops::transpose(key)), scale);
  return ops::softmax(scores, 1);
}

Tensor attention(const Tensor& query, const Tensor& key, const Tensor& value) {
  if (value.rank() != 2 || key.rank() != 2 || key.dim(0) != value.dim(0)) {
    throw DimensionError("attention: key " + shape_string(key.shape()) + " and value " +
                         shape_string(value.shape()) + " have different token counts");
  }
  return ops::matmul(attention_weights(query, key), value);
}

Tensor multi_head_attention(const Tensor& query, const Tensor& key, const Tensor& value, std::size_t heads,
                            const Tensor& w_out) {
  if (query.rank() != 2) throw DimensionError("multi_head_attention: query must be 2-D");
  const std::size_t d_model = query.dim(1);
  if (heads == 0 || d_model % heads != 0 || d_model / heads == 0) {
    throw ConfigError("multi_head_attention: d_model " + std::to_string(d_model) + " not divisible into " +
                      std::to_string(heads) + " heads");
  }
  if (key.dim(1) != d_model || value.dim(1) != d_model) {
    throw DimensionError("multi_head_attention: Q/K/V widths differ");
  }
  const std::size_t d_k = d_model / heads;
  if (heads == 1) return ops::matmul(attention(query, key, value), w_out);

  std::vector<Tensor> outputs;
  outputs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    outputs.push_back(attention(ops::slice(query, 1, h * d_k, d_k), ops::slice(key, 1, h * d_k, d_k),
                                ops::slice(value, 1, h * d_k, d_k)));
  }
  return ops::matmul(ops::concat(outputs, 1), w_out);
}

}  // namespace mhaff
