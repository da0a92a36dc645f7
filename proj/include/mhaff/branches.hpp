#pragma once

#include <cstddef>
#include <vector>

#include "mhaff/init.hpp"
#include "mhaff/random.hpp"
#include "mhaff/tensor.hpp"

namespace mhaff {

enum class TokenSource { cnn, vit, fused };

const char* to_string(TokenSource source);

// N x d sequence of features, one row per patch or pooled spatial cell.
struct TokenMatrix {
  Tensor tokens;
  TokenSource source = TokenSource::vit;

  std::size_t count() const { return tokens.dim(0); }
  std::size_t width() const { return tokens.dim(1); }
};

// Residual CNN branch: stem conv, then one residual block per entry of
// block_channels. A block whose channel count differs from its input
// downsamples by 2 and uses a 1x1 projected shortcut.
struct CnnBranchConfig {
  std::size_t input_size = 32;
  std::size_t in_channels = 3;
  std::size_t stem_channels = 16;
  std::size_t stem_stride = 2;
  std::vector<std::size_t> block_channels{16, 32};
  std::size_t kernel_size = 3;
  std::size_t norm_groups = 4;

  void validate() const;
  std::size_t output_channels() const;
  // Spatial side of the final feature map.
  std::size_t output_size() const;
};

// Patch-embedding transformer branch with no class token and no terminal
// layer norm.
struct VitBranchConfig {
  std::size_t input_size = 32;
  std::size_t in_channels = 3;
  std::size_t patch_size = 8;
  std::size_t d_model = 32;
  std::size_t num_encoders = 2;
  std::size_t num_heads = 4;
  std::size_t mlp_ratio = 4;

  void validate() const;
  std::size_t grid() const { return input_size / patch_size; }
  std::size_t tokens() const { return grid() * grid(); }
};

struct ResidualBlockParams {
  Tensor conv1;
  Tensor norm1_gain, norm1_bias;
  Tensor conv2;
  Tensor norm2_gain, norm2_bias;
  // 1x1 projection [out x in x 1 x 1]; undefined for an identity shortcut.
  Tensor shortcut;
  std::size_t stride = 1;
  std::size_t norm_groups = 4;

  static ResidualBlockParams init(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                                  std::size_t norm_groups, Rng& rng);
  void visit(const std::string& prefix, const ParamVisitor& visitor);
};

struct CnnBranchParams {
  Tensor stem;
  Tensor stem_gain, stem_bias;
  std::vector<ResidualBlockParams> blocks;
  std::size_t stem_stride = 2;
  std::size_t norm_groups = 4;

  static CnnBranchParams init(const CnnBranchConfig& cfg, Rng& rng);
  void visit(const std::string& prefix, const ParamVisitor& visitor);
};

struct EncoderBlockParams {
  Tensor ln1_gain, ln1_bias;
  Tensor w_query, w_key, w_value;
  Tensor b_query, b_key, b_value;
  Tensor w_out, b_out;
  Tensor ln2_gain, ln2_bias;
  Tensor w_mlp1, b_mlp1;
  Tensor w_mlp2, b_mlp2;
  std::size_t heads = 1;

  static EncoderBlockParams init(std::size_t d_model, std::size_t heads, std::size_t hidden, Rng& rng);
  void visit(const std::string& prefix, const ParamVisitor& visitor);
};

struct VitBranchParams {
  // [C p p x d_model]
  Tensor embedding;
  // [N x d_model]
  Tensor positional;
  std::vector<EncoderBlockParams> encoders;

  static VitBranchParams init(const VitBranchConfig& cfg, Rng& rng);
  void visit(const std::string& prefix, const ParamVisitor& visitor);
};

TokenMatrix patch_embed(const Tensor& image, const VitBranchConfig& cfg, const Tensor& embedding,
                        const Tensor& positional);

// Pre-norm block: t + MHSA(LN(t)), then + MLP(LN(.)) with a GELU hidden layer.
TokenMatrix encoder_block(const TokenMatrix& tokens, const EncoderBlockParams& params);

TokenMatrix vit_branch_forward(const Tensor& image, const VitBranchConfig& cfg, const VitBranchParams& params);

// relu(norm2(conv2(relu(norm1(conv1(x))))) + shortcut(x))
Tensor residual_block_forward(const Tensor& x, const ResidualBlockParams& params);

Tensor cnn_branch_forward(const Tensor& image, const CnnBranchConfig& cfg, const CnnBranchParams& params);

// Average-pools fmap[C x H x W] to grid x grid, flattens cells row-major into
// tokens of C channels and projects them by projection[C x d_model].
TokenMatrix tokenize_feature_map(const Tensor& fmap, std::size_t grid, const Tensor& projection);

// Throws WiringError unless the tokenized CNN map can pair with the ViT tokens.
void check_branch_alignment(const CnnBranchConfig& cnn, const VitBranchConfig& vit, std::size_t grid);

}  // namespace mhaff
