#pragma once

#include <cstddef>

#include "mhaff/tensor.hpp"

namespace mhaff {

// softmax(Q K^T / sqrt(d_k)) with the softmax taken per query row.
Tensor attention_weights(const Tensor& query, const Tensor& key);

// Scaled dot-product attention: attention_weights(Q, K) . V.
Tensor attention(const Tensor& query, const Tensor& key, const Tensor& value);

// Splits Q, K, V column-wise into `heads` slices of width d_model / heads,
// attends per head, concatenates along features and projects by w_out.
Tensor multi_head_attention(const Tensor& query, const Tensor& key, const Tensor& value, std::size_t heads,
                            const Tensor& w_out);

}  // namespace mhaff
