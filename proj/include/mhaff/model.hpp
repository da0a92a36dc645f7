#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mhaff/branches.hpp"
#include "mhaff/fusion.hpp"
#include "mhaff/random.hpp"
#include "mhaff/tensor.hpp"

namespace mhaff {

enum class FusionMethod { mhaff, addition, concatenation, cnn_only, vit_only };

// Accepts mhaff, add|addition, concat|concatenation, cnn-only, vit-only.
FusionMethod parse_fusion_method(std::string_view text);
const char* to_string(FusionMethod method);
const std::vector<FusionMethod>& all_fusion_methods();

struct ModelConfig {
  CnnBranchConfig cnn;
  VitBranchConfig vit;
  // Side of the pooled CNN grid; grid * grid must equal the ViT token count.
  std::size_t token_grid = 4;
  FusionMethod fusion = FusionMethod::mhaff;
  QkvWiring wiring;
  std::size_t fusion_heads = 4;
  bool fusion_residual = false;
  std::size_t fused_dim = kFusedDim;
  std::size_t classes = 8;
  double dropout = 0.3;

  void validate() const;
  bool uses_cnn() const { return fusion != FusionMethod::vit_only; }
  bool uses_vit() const { return fusion != FusionMethod::cnn_only; }
};

// Activations of one forward pass, kept for saliency.
struct ForwardTrace {
  Tensor cnn_features;  // C x H x W, undefined when the CNN branch is unused
  TokenMatrix cnn_tokens;
  TokenMatrix vit_tokens;
  Tensor fused_tokens;  // N x d tokens entering pool+project
  Tensor z;
  Tensor logits;
};

class Model {
 public:
  Model() = default;
  // Components are initialised from independent seed streams, so arms that
  // share a component start from identical weights.
  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  // Visits every trainable tensor under a stable dotted name.
  void visit(const ParamVisitor& visitor);
  std::vector<std::pair<std::string, Tensor>> named_parameters();
  std::size_t parameter_count();
  void zero_grad();

  // cnn_view / vit_view: preprocessed 3 x S x S inputs for each branch.
  Tensor logits(const Tensor& cnn_view, const Tensor& vit_view, bool train, Rng& dropout_rng) const;
  ForwardTrace trace(const Tensor& cnn_view, const Tensor& vit_view, bool train, Rng& dropout_rng) const;

 private:
  ModelConfig config_;
  CnnBranchParams cnn_;
  VitBranchParams vit_;
  Tensor tokenizer_;  // [C_cnn x d_model]
  MhaFusionParams fusion_;
  ProjectionParams head_;  // pool+project for the non-attention methods
  ClassifierParams classifier_;
};

// Row-wise argmax with ties broken toward the lowest index.
std::size_t argmax(std::span<const double> values);
// correct / total; throws EvaluationError when empty.
double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> labels);

}  // namespace mhaff
