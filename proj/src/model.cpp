#include "mhaff/model.hpp"

#include "mhaff/ops.hpp"

namespace mhaff {

namespace {

enum Stream : std::uint64_t { kCnn = 1, kVit, kTokenizer, kFusion, kHead, kClassifier };

}  // namespace

FusionMethod parse_fusion_method(std::string_view text) {
  if (text == "mhaff") return FusionMethod::mhaff;
  if (text == "add" || text == "addition") return FusionMethod::addition;
  if (text == "concat" || text == "concatenation") return FusionMethod::concatenation;
  if (text == "cnn-only" || text == "cnn_only") return FusionMethod::cnn_only;
  if (text == "vit-only" || text == "vit_only") return FusionMethod::vit_only;
  throw ConfigError("unknown fusion method '" + std::string(text) + "' (mhaff, add, concat, cnn-only, vit-only)");
}

const char* to_string(FusionMethod method) {
  switch (method) {
    case FusionMethod::mhaff: return "mhaff";
    case FusionMethod::addition: return "add";
    case FusionMethod::concatenation: return "concat";
    case FusionMethod::cnn_only: return "cnn-only";
    case FusionMethod::vit_only: return "vit-only";
  }
  return "unknown";
}

const std::vector<FusionMethod>& all_fusion_methods() {
  static const std::vector<FusionMethod> methods{FusionMethod::cnn_only, FusionMethod::vit_only,
                                                 FusionMethod::addition, FusionMethod::concatenation,
                                                 FusionMethod::mhaff};
  return methods;
}

void ModelConfig::validate() const {
  cnn.validate();
  vit.validate();
  if (uses_cnn() && uses_vit()) check_branch_alignment(cnn, vit, token_grid);
  if (token_grid == 0) throw ConfigError("token grid must be positive");
  if (classes < 2) throw ConfigError("need at least two classes");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (fused_dim == 0) throw ConfigError("fused dimension must be positive");
  if (fusion == FusionMethod::mhaff) {
    if (!wiring.mixed()) throw ConfigError("wiring " + wiring.name() + " is plain self-attention, not a fusion");
    if (fusion_heads == 0 || vit.d_model % fusion_heads != 0) {
      throw ConfigError("fusion heads must divide d_model " + std::to_string(vit.d_model));
    }
  }
}

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const std::size_t d = config_.vit.d_model;
  if (config_.uses_cnn()) {
    Rng rng(derive_seed(seed, {kCnn}));
    cnn_ = CnnBranchParams::init(config_.cnn, rng);
    Rng tok(derive_seed(seed, {kTokenizer}));
    const std::size_t c = config_.cnn.output_channels();
    tokenizer_ = glorot_uniform({c, d}, c, d, tok);
  }
  if (config_.uses_vit()) {
    Rng rng(derive_seed(seed, {kVit}));
    vit_ = VitBranchParams::init(config_.vit, rng);
  }
  Rng head_rng(derive_seed(seed, {kHead}));
  switch (config_.fusion) {
    case FusionMethod::mhaff: {
      Rng rng(derive_seed(seed, {kFusion}));
      fusion_ = MhaFusionParams::init(d, config_.fusion_heads, config_.fused_dim, rng);
      fusion_.residual = config_.fusion_residual;
      break;
    }
    case FusionMethod::concatenation: head_ = ProjectionParams::init(2 * d, config_.fused_dim, head_rng); break;
    default: head_ = ProjectionParams::init(d, config_.fused_dim, head_rng); break;
  }
  Rng cls(derive_seed(seed, {kClassifier}));
  classifier_ = ClassifierParams::init(config_.classes, config_.fused_dim, cls);
  visit([](const std::string&, Tensor& t) { t.set_requires_grad(true); });
}

void Model::visit(const ParamVisitor& visitor) {
  if (config_.uses_cnn()) {
    cnn_.visit("cnn.", visitor);
    visitor("tokenizer.projection", tokenizer_);
  }
  if (config_.uses_vit()) vit_.visit("vit.", visitor);
  if (config_.fusion == FusionMethod::mhaff) {
    fusion_.visit("fusion.", visitor);
  } else {
    head_.visit("head.", visitor);
  }
  classifier_.visit("classifier.", visitor);
}

std::vector<std::pair<std::string, Tensor>> Model::named_parameters() {
  std::vector<std::pair<std::string, Tensor>> out;
  visit([&](const std::string& name, Tensor& t) { out.emplace_back(name, t); });
  return out;
}

std::size_t Model::parameter_count() {
  std::size_t n = 0;
  visit([&](const std::string&, Tensor& t) { n += t.numel(); });
  return n;
}

void Model::zero_grad() {
  visit([](const std::string&, Tensor& t) { t.zero_grad(); });
}

ForwardTrace Model::trace(const Tensor& cnn_view, const Tensor& vit_view, bool train, Rng& dropout_rng) const {
  ForwardTrace tr;
  if (config_.uses_cnn()) {
    tr.cnn_features = cnn_branch_forward(cnn_view, config_.cnn, cnn_);
    tr.cnn_tokens = tokenize_feature_map(tr.cnn_features, config_.token_grid, tokenizer_);
  }
  if (config_.uses_vit()) tr.vit_tokens = vit_branch_forward(vit_view, config_.vit, vit_);

  const TokenMatrix& x = tr.vit_tokens;
  const TokenMatrix& y = tr.cnn_tokens;
  switch (config_.fusion) {
    case FusionMethod::mhaff:
      tr.fused_tokens = multi_head_attention(x, y, config_.wiring, fusion_);
      tr.z = pool_project(tr.fused_tokens, fusion_.f);
      break;
    case FusionMethod::addition:
      tr.fused_tokens = fuse_addition(x, y).tokens;
      tr.z = pool_project(tr.fused_tokens, head_);
      break;
    case FusionMethod::concatenation:
      tr.fused_tokens = fuse_concatenation(x, y).tokens;
      tr.z = pool_project(tr.fused_tokens, head_);
      break;
    case FusionMethod::cnn_only:
      tr.fused_tokens = y.tokens;
      tr.z = pool_project(tr.fused_tokens, head_);
      break;
    case FusionMethod::vit_only:
      tr.fused_tokens = x.tokens;
      tr.z = pool_project(tr.fused_tokens, head_);
      break;
  }
  const Tensor z = ops::dropout(tr.z, config_.dropout, train, dropout_rng);
  tr.logits = classifier_logits(z, classifier_);
  return tr;
}

Tensor Model::logits(const Tensor& cnn_view, const Tensor& vit_view, bool train, Rng& dropout_rng) const {
  return trace(cnn_view, vit_view, train, dropout_rng).logits;
}

std::size_t argmax(std::span<const double> values) {
  if (values.empty()) throw UsageError("argmax of an empty row");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> labels) {
  if (predicted.size() != labels.size()) throw UsageError("accuracy: prediction and label counts differ");
  if (labels.empty()) throw EvaluationError("accuracy of an empty split");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predicted[i] == labels[i];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

}  // namespace mhaff
