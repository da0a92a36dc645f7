#include "mhaff/fusion.hpp"

#include "mhaff/attention.hpp"
#include "mhaff/ops.hpp"

namespace mhaff {

namespace {

const TokenMatrix& pick(FeatureSource s, const TokenMatrix& x, const TokenMatrix& y) {
  return s == FeatureSource::X ? x : y;
}

void require_pairable(const TokenMatrix& x, const TokenMatrix& y) {
  if (x.tokens.rank() != 2 || y.tokens.rank() != 2 || x.count() != y.count() || x.width() != y.width()) {
    throw WiringError("X " + shape_string(x.tokens.shape()) + " and Y " + shape_string(y.tokens.shape()) +
                      " must have equal token counts and widths");
  }
}

}  // namespace

QkvWiring QkvWiring::parse(std::string_view text) {
  if (text.size() != 3) throw ConfigError("wiring must be three letters over {X, Y}, got '" + std::string(text) + "'");
  auto letter = [&](char c) {
    if (c == 'X' || c == 'x') return FeatureSource::X;
    if (c == 'Y' || c == 'y') return FeatureSource::Y;
    throw ConfigError("wiring must be three letters over {X, Y}, got '" + std::string(text) + "'");
  };
  return {letter(text[0]), letter(text[1]), letter(text[2])};
}

std::string QkvWiring::name() const {
  auto c = [](FeatureSource s) { return s == FeatureSource::X ? 'X' : 'Y'; };
  return {c(query), c(key), c(value)};
}

const std::array<QkvWiring, 6>& QkvWiring::ablation_rows() {
  using S = FeatureSource;
  static const std::array<QkvWiring, 6> rows{{
      {S::X, S::Y, S::Y},
      {S::Y, S::X, S::Y},
      {S::Y, S::Y, S::X},
      {S::Y, S::X, S::X},
      {S::X, S::X, S::Y},
      {S::X, S::Y, S::X},
  }};
  return rows;
}

ProjectionParams ProjectionParams::init(std::size_t in_dim, std::size_t out_dim, Rng& rng) {
  return {glorot_uniform({in_dim, out_dim}, in_dim, out_dim, rng), Tensor::zeros({out_dim})};
}

void ProjectionParams::visit(const std::string& prefix, const ParamVisitor& visitor) {
  visitor(prefix + "weight", weight);
  visitor(prefix + "bias", bias);
}

MhaFusionParams MhaFusionParams::init(std::size_t d_model, std::size_t heads, std::size_t fused_dim, Rng& rng) {
  if (heads == 0 || d_model % heads != 0) {
    throw ConfigError("fusion d_model " + std::to_string(d_model) + " not divisible by " + std::to_string(heads) +
                      " heads");
  }
  MhaFusionParams p;
  p.heads = heads;
  p.w_query = glorot_uniform({d_model, d_model}, d_model, d_model, rng);
  p.w_key = glorot_uniform({d_model, d_model}, d_model, d_model, rng);
  p.w_value = glorot_uniform({d_model, d_model}, d_model, d_model, rng);
  p.w_out = glorot_uniform({d_model, d_model}, d_model, d_model, rng);
  p.f = ProjectionParams::init(d_model, fused_dim, rng);
  return p;
}

void MhaFusionParams::visit(const std::string& prefix, const ParamVisitor& visitor) {
  visitor(prefix + "w_query", w_query);
  visitor(prefix + "w_key", w_key);
  visitor(prefix + "w_value", w_value);
  visitor(prefix + "w_out", w_out);
  f.visit(prefix + "f.", visitor);
}

ClassifierParams ClassifierParams::init(std::size_t classes, std::size_t fused_dim, Rng& rng) {
  if (classes < 2) throw ConfigError("classifier needs at least two classes");
  return {glorot_uniform({classes, fused_dim}, fused_dim, classes, rng), Tensor::zeros({classes})};
}

void ClassifierParams::visit(const std::string& prefix, const ParamVisitor& visitor) {
  visitor(prefix + "weight", weight);
  visitor(prefix + "bias", bias);
}

Qkv make_qkv(const TokenMatrix& x, const TokenMatrix& y, const QkvWiring& wiring, const MhaFusionParams& params) {
  require_pairable(x, y);
  return {ops::matmul(pick(wiring.query, x, y).tokens, params.w_query),
          ops::matmul(pick(wiring.key, x, y).tokens, params.w_key),
          ops::matmul(pick(wiring.value, x, y).tokens, params.w_value)};
}

Tensor multi_head_attention(const TokenMatrix& x, const TokenMatrix& y, const QkvWiring& wiring,
                            const MhaFusionParams& params) {
  const Qkv qkv = make_qkv(x, y, wiring, params);
  Tensor out = multi_head_attention(qkv.query, qkv.key, qkv.value, params.heads, params.w_out);
  if (params.residual) out = ops::add(out, pick(wiring.query, x, y).tokens);
  return out;
}

Tensor pool_project(const Tensor& tokens, const ProjectionParams& f) {
  if (tokens.rank() != 2) throw DimensionError("pool_project: expected N x d tokens, got " + shape_string(tokens.shape()));
  const Tensor pooled = ops::reshape(ops::mean(tokens, 0), {1, tokens.dim(1)});
  const Tensor z = ops::gelu(ops::add_bias(ops::matmul(pooled, f.weight), f.bias));
  return ops::reshape(z, {z.dim(1)});
}

Tensor fuse_mhaff(const TokenMatrix& x, const TokenMatrix& y, const QkvWiring& wiring, const MhaFusionParams& params) {
  return pool_project(multi_head_attention(x, y, wiring, params), params.f);
}

TokenMatrix fuse_addition(const TokenMatrix& x, const TokenMatrix& y) {
  if (x.tokens.shape() != y.tokens.shape()) {
    throw FusionError("addition fusion needs identical shapes, got " + shape_string(x.tokens.shape()) + " and " +
                      shape_string(y.tokens.shape()));
  }
  return {ops::add(x.tokens, y.tokens), TokenSource::fused};
}

TokenMatrix fuse_concatenation(const TokenMatrix& x, const TokenMatrix& y) {
  if (x.tokens.rank() != 2 || y.tokens.rank() != 2 || x.count() != y.count()) {
    throw FusionError("concatenation fusion needs equal token counts, got " + shape_string(x.tokens.shape()) +
                      " and " + shape_string(y.tokens.shape()));
  }
  return {ops::concat({x.tokens, y.tokens}, 1), TokenSource::fused};
}

Tensor classifier_logits(const Tensor& z, const ClassifierParams& params) {
  const std::size_t dim = params.weight.dim(1);
  if (z.numel() != dim) {
    throw DimensionError("classify: Z has " + std::to_string(z.numel()) + " entries, classifier expects " +
                         std::to_string(dim));
  }
  const Tensor row = ops::reshape(z, {1, dim});
  const Tensor logits = ops::add_bias(ops::matmul(row, ops::transpose(params.weight)), params.bias);
  return ops::reshape(logits, {params.classes()});
}

Tensor classify(const Tensor& z, const ClassifierParams& params) {
  return ops::softmax(classifier_logits(z, params), 0);
}

}  // namespace mhaff
