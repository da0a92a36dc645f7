#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>

#include "mhaff/branches.hpp"
#include "mhaff/init.hpp"
#include "mhaff/tensor.hpp"

namespace mhaff {

inline constexpr std::size_t kFusedDim = 64;

// X: ViT-branch tokens, Y: tokenized CNN-branch features.
enum class FeatureSource { X, Y };

// Which source feeds the query, key and value projections.
struct QkvWiring {
  FeatureSource query = FeatureSource::X;
  FeatureSource key = FeatureSource::Y;
  FeatureSource value = FeatureSource::X;

  // Parses a 3-letter string over {X, Y}, e.g. "XYX".
  static QkvWiring parse(std::string_view text);
  std::string name() const;
  // False for XXX and YYY (plain self-attention).
  bool mixed() const { return !(query == key && key == value); }

  // The six mixed wirings in ablation-table order: XYY, YXY, YYX, YXX, XXY, XYX.
  static const std::array<QkvWiring, 6>& ablation_rows();

  friend bool operator==(const QkvWiring&, const QkvWiring&) = default;
};

// Affine d -> 64 map applied after mean-pooling tokens.
struct ProjectionParams {
  Tensor weight;  // [d x 64]
  Tensor bias;    // [64]

  static ProjectionParams init(std::size_t in_dim, std::size_t out_dim, Rng& rng);
  void visit(const std::string& prefix, const ParamVisitor& visitor);
};

struct MhaFusionParams {
  Tensor w_query, w_key, w_value;  // [d_model x d_model]
  Tensor w_out;                    // [d_model x d_model]
  std::size_t heads = 4;
  ProjectionParams f;
  // Adds the query-source tokens back onto the attention output.
  bool residual = false;

  static MhaFusionParams init(std::size_t d_model, std::size_t heads, std::size_t fused_dim, Rng& rng);
  void visit(const std::string& prefix, const ParamVisitor& visitor);
  std::size_t d_model() const { return w_query.dim(0); }
};

struct ClassifierParams {
  Tensor weight;  // A: [C x 64]
  Tensor bias;    // b: [C]

  static ClassifierParams init(std::size_t classes, std::size_t fused_dim, Rng& rng);
  void visit(const std::string& prefix, const ParamVisitor& visitor);
  std::size_t classes() const { return weight.dim(0); }
};

struct Qkv {
  Tensor query;
  Tensor key;
  Tensor value;
};

Qkv make_qkv(const TokenMatrix& x, const TokenMatrix& y, const QkvWiring& wiring, const MhaFusionParams& params);

// Cross-wired multi-head attention over X and Y; N x d_model.
Tensor multi_head_attention(const TokenMatrix& x, const TokenMatrix& y, const QkvWiring& wiring,
                            const MhaFusionParams& params);

// gelu(mean_rows(tokens) . weight + bias), returned as a flat vector.
Tensor pool_project(const Tensor& tokens, const ProjectionParams& f);

// Z = f(MHA(X, Y)); |Z| = 64 for the default projection.
Tensor fuse_mhaff(const TokenMatrix& x, const TokenMatrix& y, const QkvWiring& wiring, const MhaFusionParams& params);

TokenMatrix fuse_addition(const TokenMatrix& x, const TokenMatrix& y);
TokenMatrix fuse_concatenation(const TokenMatrix& x, const TokenMatrix& y);

// Z' = A Z + b
Tensor classifier_logits(const Tensor& z, const ClassifierParams& params);
// softmax(A Z + b)
Tensor classify(const Tensor& z, const ClassifierParams& params);

}  // namespace mhaff
