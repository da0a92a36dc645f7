#include "mhaff/branches.hpp"

#include <string>

#include "mhaff/attention.hpp"
#include "mhaff/ops.hpp"

namespace mhaff {

const char* to_string(TokenSource source) {
  switch (source) {
    case TokenSource::cnn: return "cnn";
    case TokenSource::vit: return "vit";
    case TokenSource::fused: return "fused";
  }
  return "unknown";
}

namespace {

std::size_t conv_out(std::size_t size, std::size_t kernel, std::size_t stride, std::size_t padding) {
  return (size + 2 * padding - kernel) / stride + 1;
}

void visit_if(const std::string& name, Tensor& t, const ParamVisitor& visitor) {
  if (t.defined()) visitor(name, t);
}

}  // namespace

void CnnBranchConfig::validate() const {
  if (block_channels.empty()) throw ConfigError("cnn branch needs at least one residual block");
  if (in_channels == 0 || stem_channels == 0 || input_size == 0 || stem_stride == 0) {
    throw ConfigError("cnn branch sizes must be positive");
  }
  if (kernel_size == 0 || kernel_size % 2 == 0) throw ConfigError("cnn kernel size must be odd");
  if (norm_groups == 0 || stem_channels % norm_groups != 0) {
    throw ConfigError("cnn stem channels must divide into norm groups");
  }
  for (std::size_t c : block_channels) {
    if (c == 0 || c % norm_groups != 0) {
      throw ConfigError("cnn block channels must be positive and divisible by norm_groups");
    }
  }
  if (kernel_size > input_size + 2 * (kernel_size / 2)) throw ConfigError("cnn kernel larger than input");
}

std::size_t CnnBranchConfig::output_channels() const { return block_channels.back(); }

std::size_t CnnBranchConfig::output_size() const {
  const std::size_t pad = kernel_size / 2;
  std::size_t size = conv_out(input_size, kernel_size, stem_stride, pad);
  std::size_t channels = stem_channels;
  for (std::size_t c : block_channels) {
    const std::size_t stride = c != channels ? 2 : 1;
    size = conv_out(size, kernel_size, stride, pad);
    channels = c;
  }
  return size;
}

void VitBranchConfig::validate() const {
  if (patch_size == 0 || input_size == 0 || input_size % patch_size != 0) {
    throw ConfigError("vit input size " + std::to_string(input_size) + " not divisible by patch size " +
                      std::to_string(patch_size));
  }
  if (num_heads == 0 || d_model == 0 || d_model % num_heads != 0) {
    throw ConfigError("vit d_model " + std::to_string(d_model) + " not divisible by " +
                      std::to_string(num_heads) + " heads");
  }
  if (in_channels == 0 || mlp_ratio == 0) throw ConfigError("vit sizes must be positive");
}

ResidualBlockParams ResidualBlockParams::init(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                                              std::size_t norm_groups, Rng& rng) {
  ResidualBlockParams p;
  p.stride = in_channels != out_channels ? 2 : 1;
  p.norm_groups = norm_groups;
  p.conv1 = he_uniform({out_channels, in_channels, kernel, kernel}, in_channels * kernel * kernel, rng);
  p.norm1_gain = Tensor::ones({out_channels});
  p.norm1_bias = Tensor::zeros({out_channels});
  p.conv2 = he_uniform({out_channels, out_channels, kernel, kernel}, out_channels * kernel * kernel, rng);
  p.norm2_gain = Tensor::ones({out_channels});
  p.norm2_bias = Tensor::zeros({out_channels});
  if (p.stride != 1 || in_channels != out_channels) {
    p.shortcut = he_uniform({out_channels, in_channels, 1, 1}, in_channels, rng);
  }
  return p;
}

void ResidualBlockParams::visit(const std::string& prefix, const ParamVisitor& visitor) {
  visitor(prefix + "conv1", conv1);
  visitor(prefix + "norm1.gain", norm1_gain);
  visitor(prefix + "norm1.bias", norm1_bias);
  visitor(prefix + "conv2", conv2);
  visitor(prefix + "norm2.gain", norm2_gain);
  visitor(prefix + "norm2.bias", norm2_bias);
  visit_if(prefix + "shortcut", shortcut, visitor);
}

CnnBranchParams CnnBranchParams::init(const CnnBranchConfig& cfg, Rng& rng) {
  cfg.validate();
  CnnBranchParams p;
  const std::size_t k = cfg.kernel_size;
  p.stem_stride = cfg.stem_stride;
  p.norm_groups = cfg.norm_groups;
  p.stem = he_uniform({cfg.stem_channels, cfg.in_channels, k, k}, cfg.in_channels * k * k, rng);
  p.stem_gain = Tensor::ones({cfg.stem_channels});
  p.stem_bias = Tensor::zeros({cfg.stem_channels});
  std::size_t channels = cfg.stem_channels;
  for (std::size_t c : cfg.block_channels) {
    p.blocks.push_back(ResidualBlockParams::init(channels, c, k, cfg.norm_groups, rng));
    channels = c;
  }
  return p;
}

void CnnBranchParams::visit(const std::string& prefix, const ParamVisitor& visitor) {
  visitor(prefix + "stem", stem);
  visitor(prefix + "stem_norm.gain", stem_gain);
  visitor(prefix + "stem_norm.bias", stem_bias);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].visit(prefix + "block" + std::to_string(i) + ".", visitor);
  }
}

EncoderBlockParams EncoderBlockParams::init(std::size_t d_model, std::size_t heads, std::size_t hidden, Rng& rng) {
  EncoderBlockParams p;
  p.heads = heads;
  p.ln1_gain = Tensor::ones({d_model});
  p.ln1_bias = Tensor::zeros({d_model});
  p.w_query = glorot_uniform({d_model, d_model}, d_model, d_model, rng);
  p.w_key = glorot_uniform({d_model, d_model}, d_model, d_model, rng);
  p.w_value = glorot_uniform({d_model, d_model}, d_model, d_model, rng);
  p.b_query = Tensor::zeros({d_model});
  p.b_key = Tensor::zeros({d_model});
  p.b_value = Tensor::zeros({d_model});
  p.w_out = glorot_uniform({d_model, d_model}, d_model, d_model, rng);
  p.b_out = Tensor::zeros({d_model});
  p.ln2_gain = Tensor::ones({d_model});
  p.ln2_bias = Tensor::zeros({d_model});
  p.w_mlp1 = glorot_uniform({d_model, hidden}, d_model, hidden, rng);
  p.b_mlp1 = Tensor::zeros({hidden});
  p.w_mlp2 = glorot_uniform({hidden, d_model}, hidden, d_model, rng);
  p.b_mlp2 = Tensor::zeros({d_model});
  return p;
}

void EncoderBlockParams::visit(const std::string& prefix, const ParamVisitor& visitor) {
  visitor(prefix + "ln1.gain", ln1_gain);
  visitor(prefix + "ln1.bias", ln1_bias);
  visitor(prefix + "attn.w_query", w_query);
  visitor(prefix + "attn.w_key", w_key);
  visitor(prefix + "attn.w_value", w_value);
  visitor(prefix + "attn.b_query", b_query);
  visitor(prefix + "attn.b_key", b_key);
  visitor(prefix + "attn.b_value", b_value);
  visitor(prefix + "attn.w_out", w_out);
  visitor(prefix + "attn.b_out", b_out);
  visitor(prefix + "ln2.gain", ln2_gain);
  visitor(prefix + "ln2.bias", ln2_bias);
  visitor(prefix + "mlp.w1", w_mlp1);
  visitor(prefix + "mlp.b1", b_mlp1);
  visitor(prefix + "mlp.w2", w_mlp2);
  visitor(prefix + "mlp.b2", b_mlp2);
}

VitBranchParams VitBranchParams::init(const VitBranchConfig& cfg, Rng& rng) {
  cfg.validate();
  VitBranchParams p;
  const std::size_t patch_dim = cfg.in_channels * cfg.patch_size * cfg.patch_size;
  p.embedding = glorot_uniform({patch_dim, cfg.d_model}, patch_dim, cfg.d_model, rng);
  p.positional = uniform_tensor({cfg.tokens(), cfg.d_model}, 0.02, rng);
  for (std::size_t i = 0; i < cfg.num_encoders; ++i) {
    p.encoders.push_back(EncoderBlockParams::init(cfg.d_model, cfg.num_heads, cfg.d_model * cfg.mlp_ratio, rng));
  }
  return p;
}

void VitBranchParams::visit(const std::string& prefix, const ParamVisitor& visitor) {
  visitor(prefix + "embedding", embedding);
  visitor(prefix + "positional", positional);
  for (std::size_t i = 0; i < encoders.size(); ++i) {
    encoders[i].visit(prefix + "encoder" + std::to_string(i) + ".", visitor);
  }
}

TokenMatrix patch_embed(const Tensor& image, const VitBranchConfig& cfg, const Tensor& embedding,
                        const Tensor& positional) {
  if (image.rank() != 3) throw DimensionError("patch_embed: image must be C x H x W, got " + shape_string(image.shape()));
  const std::size_t p = cfg.patch_size;
  if (p == 0 || image.dim(1) % p != 0 || image.dim(2) % p != 0) {
    throw ConfigError("patch_embed: image " + shape_string(image.shape()) + " not divisible by patch size " +
                      std::to_string(p));
  }
  const Tensor patches = ops::extract_patches(image, p);
  if (positional.rank() != 2 || positional.dim(0) != patches.dim(0)) {
    throw DimensionError("patch_embed: positional table " + shape_string(positional.shape()) + " does not cover " +
                         std::to_string(patches.dim(0)) + " patches");
  }
  return {ops::add(ops::matmul(patches, embedding), positional), TokenSource::vit};
}

TokenMatrix encoder_block(const TokenMatrix& tokens, const EncoderBlockParams& params) {
  const Tensor& x = tokens.tokens;
  if (x.rank() != 2 || x.dim(1) != params.w_query.dim(0)) {
    throw DimensionError("encoder_block: tokens " + shape_string(x.shape()) + " do not match block width " +
                         std::to_string(params.w_query.dim(0)));
  }
  const Tensor normed = ops::layer_norm(x, params.ln1_gain, params.ln1_bias);
  const Tensor q = ops::add_bias(ops::matmul(normed, params.w_query), params.b_query);
  const Tensor k = ops::add_bias(ops::matmul(normed, params.w_key), params.b_key);
  const Tensor v = ops::add_bias(ops::matmul(normed, params.w_value), params.b_value);
  const Tensor attended = ops::add_bias(multi_head_attention(q, k, v, params.heads, params.w_out), params.b_out);
  const Tensor mid = ops::add(x, attended);

  const Tensor normed2 = ops::layer_norm(mid, params.ln2_gain, params.ln2_bias);
  const Tensor hidden = ops::gelu(ops::add_bias(ops::matmul(normed2, params.w_mlp1), params.b_mlp1));
  const Tensor mlp = ops::add_bias(ops::matmul(hidden, params.w_mlp2), params.b_mlp2);
  return {ops::add(mid, mlp), tokens.source};
}

TokenMatrix vit_branch_forward(const Tensor& image, const VitBranchConfig& cfg, const VitBranchParams& params) {
  if (image.rank() != 3 || image.dim(0) != cfg.in_channels || image.dim(1) != cfg.input_size ||
      image.dim(2) != cfg.input_size) {
    throw DimensionError("vit branch expects " + std::to_string(cfg.in_channels) + "x" +
                         std::to_string(cfg.input_size) + "x" + std::to_string(cfg.input_size) + " input, got " +
                         shape_string(image.shape()));
  }
  TokenMatrix tokens = patch_embed(image, cfg, params.embedding, params.positional);
  for (const EncoderBlockParams& block : params.encoders) tokens = encoder_block(tokens, block);
  return tokens;
}

Tensor residual_block_forward(const Tensor& x, const ResidualBlockParams& params) {
  const std::size_t pad = params.conv1.dim(2) / 2;
  Tensor h = ops::conv2d(x, params.conv1, params.stride, pad);
  h = ops::relu(ops::group_norm(h, params.norm1_gain, params.norm1_bias, params.norm_groups));
  h = ops::conv2d(h, params.conv2, 1, pad);
  h = ops::group_norm(h, params.norm2_gain, params.norm2_bias, params.norm_groups);
  const Tensor skip = params.shortcut.defined() ? ops::conv2d(x, params.shortcut, params.stride, 0) : x;
  return ops::relu(ops::add(h, skip));
}

Tensor cnn_branch_forward(const Tensor& image, const CnnBranchConfig& cfg, const CnnBranchParams& params) {
  if (image.rank() != 3 || image.dim(0) != cfg.in_channels || image.dim(1) != cfg.input_size ||
      image.dim(2) != cfg.input_size) {
    throw DimensionError("cnn branch expects " + std::to_string(cfg.in_channels) + "x" +
                         std::to_string(cfg.input_size) + "x" + std::to_string(cfg.input_size) + " input, got " +
                         shape_string(image.shape()));
  }
  const std::size_t pad = params.stem.dim(2) / 2;
  Tensor h = ops::conv2d(image, params.stem, params.stem_stride, pad);
  h = ops::relu(ops::group_norm(h, params.stem_gain, params.stem_bias, params.norm_groups));
  for (const ResidualBlockParams& block : params.blocks) h = residual_block_forward(h, block);
  return h;
}

TokenMatrix tokenize_feature_map(const Tensor& fmap, std::size_t grid, const Tensor& projection) {
  if (fmap.rank() != 3) throw DimensionError("tokenize_feature_map: expected C x H x W, got " + shape_string(fmap.shape()));
  const std::size_t channels = fmap.dim(0);
  if (projection.rank() != 2 || projection.dim(0) != channels) {
    throw DimensionError("tokenize_feature_map: projection " + shape_string(projection.shape()) +
                         " does not accept " + std::to_string(channels) + " channels");
  }
  const Tensor pooled = ops::adaptive_avg_pool2d(fmap, grid, grid);
  const Tensor cells = ops::transpose(ops::reshape(pooled, {channels, grid * grid}));
  return {ops::matmul(cells, projection), TokenSource::cnn};
}

void check_branch_alignment(const CnnBranchConfig& cnn, const VitBranchConfig& vit, std::size_t grid) {
  cnn.validate();
  vit.validate();
  if (grid * grid != vit.tokens()) {
    throw WiringError("tokenizer grid " + std::to_string(grid) + "x" + std::to_string(grid) + " gives " +
                      std::to_string(grid * grid) + " tokens but the vit branch produces " +
                      std::to_string(vit.tokens()));
  }
}

}  // namespace mhaff
