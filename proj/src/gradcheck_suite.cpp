#include <array>

#include "mhaff/attention.hpp"
#include "mhaff/branches.hpp"
#include "mhaff/fusion.hpp"
#include "mhaff/gradcheck.hpp"
#include "mhaff/ops.hpp"

namespace mhaff {

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double limit = 1.0) { return uniform_tensor(std::move(shape), limit, rng); }

std::size_t random_dim(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.uniform_index(hi - lo + 1); }

// sum(out * weights) for a fixed random weighting, so every output coordinate
// contributes a distinct gradient.
Tensor weighted_sum(const Tensor& out, const Tensor& weights) { return ops::sum(ops::mul(out, weights)); }

template <typename Fn>
GradCheckCase check_unary(const std::string& name, Tensor x, Fn fn, Rng& rng, double step, double tol) {
  const Tensor probe = fn(x);
  const Tensor weights = random_tensor(probe.shape(), rng);
  return {name, grad_check([&] { return weighted_sum(fn(x), weights); }, {x}, step, tol)};
}

// Values bounded away from zero so that relu and max-pool kinks are not
// within a finite-difference step.
Tensor away_from_zero(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) {
    const double mag = rng.uniform(0.1, 1.0);
    v = rng.bernoulli(0.5) ? mag : -mag;
  }
  return t;
}

}  // namespace

std::vector<GradCheckCase> run_gradcheck_suite(std::uint64_t seed, double step, double tol) {
  Rng rng(seed);
  std::vector<GradCheckCase> cases;

  {
    const std::size_t m = random_dim(rng, 1, 8), k = random_dim(rng, 1, 8), n = random_dim(rng, 1, 8);
    Tensor a = random_tensor({m, k}, rng);
    Tensor b = random_tensor({k, n}, rng);
    const Tensor w = random_tensor({m, n}, rng);
    cases.push_back({"matmul", grad_check([&] { return weighted_sum(ops::matmul(a, b), w); }, {a, b}, step, tol)});
  }
  {
    const Shape s{random_dim(rng, 1, 8), random_dim(rng, 1, 8)};
    Tensor a = random_tensor(s, rng);
    Tensor b = random_tensor(s, rng);
    const Tensor w = random_tensor(s, rng);
    cases.push_back({"add", grad_check([&] { return weighted_sum(ops::add(a, b), w); }, {a, b}, step, tol)});
    cases.push_back({"sub", grad_check([&] { return weighted_sum(ops::sub(a, b), w); }, {a, b}, step, tol)});
    cases.push_back({"mul", grad_check([&] { return weighted_sum(ops::mul(a, b), w); }, {a, b}, step, tol)});
  }
  {
    const std::size_t rows = random_dim(rng, 1, 8), cols = random_dim(rng, 1, 8);
    Tensor x = random_tensor({rows, cols}, rng);
    Tensor bias = random_tensor({cols}, rng);
    const Tensor w = random_tensor({rows, cols}, rng);
    cases.push_back(
        {"add_bias", grad_check([&] { return weighted_sum(ops::add_bias(x, bias), w); }, {x, bias}, step, tol)});
  }
  const Shape s2{random_dim(rng, 1, 8), random_dim(rng, 1, 8)};
  cases.push_back(check_unary("scale", random_tensor(s2, rng), [](const Tensor& x) { return ops::scale(x, -1.7); }, rng, step, tol));
  cases.push_back(check_unary("add_scalar", random_tensor(s2, rng), [](const Tensor& x) { return ops::add_scalar(x, 0.3); }, rng, step, tol));
  cases.push_back(check_unary("relu", away_from_zero(s2, rng), [](const Tensor& x) { return ops::relu(x); }, rng, step, tol));
  cases.push_back(check_unary("gelu", random_tensor(s2, rng, 3.0), [](const Tensor& x) { return ops::gelu(x); }, rng, step, tol));
  cases.push_back(check_unary("transpose", random_tensor(s2, rng), [](const Tensor& x) { return ops::transpose(x); }, rng, step, tol));
  cases.push_back(check_unary("reshape", random_tensor({4, 6}, rng), [](const Tensor& x) { return ops::reshape(x, {3, 8}); }, rng, step, tol));
  cases.push_back(check_unary("softmax_axis0", random_tensor(s2, rng, 2.0), [](const Tensor& x) { return ops::softmax(x, 0); }, rng, step, tol));
  cases.push_back(check_unary("softmax_axis1", random_tensor(s2, rng, 2.0), [](const Tensor& x) { return ops::softmax(x, 1); }, rng, step, tol));
  {
    const std::size_t rows = random_dim(rng, 1, 8), d = random_dim(rng, 2, 8);
    Tensor x = random_tensor({rows, d}, rng);
    Tensor gain = random_tensor({d}, rng);
    Tensor bias = random_tensor({d}, rng);
    const Tensor w = random_tensor({rows, d}, rng);
    cases.push_back({"layer_norm", grad_check([&] { return weighted_sum(ops::layer_norm(x, gain, bias), w); },
                                              {x, gain, bias}, step, tol)});
  }
  {
    Tensor x = random_tensor({4, 3, 3}, rng);
    Tensor gain = random_tensor({4}, rng);
    Tensor bias = random_tensor({4}, rng);
    const Tensor w = random_tensor({4, 3, 3}, rng);
    cases.push_back({"group_norm", grad_check([&] { return weighted_sum(ops::group_norm(x, gain, bias, 2), w); },
                                              {x, gain, bias}, step, tol)});
  }
  {
    const std::size_t c = random_dim(rng, 1, 2), f = random_dim(rng, 1, 2), k = random_dim(rng, 1, 3);
    const std::size_t stride = random_dim(rng, 1, 2), pad = random_dim(rng, 0, 1);
    Tensor x = random_tensor({c, 6, 7}, rng);
    Tensor ker = random_tensor({f, c, k, k}, rng);
    const Tensor probe = ops::conv2d(x, ker, stride, pad);
    const Tensor w = random_tensor(probe.shape(), rng);
    cases.push_back({"conv2d", grad_check([&] { return weighted_sum(ops::conv2d(x, ker, stride, pad), w); }, {x, ker},
                                          step, tol)});
  }
  cases.push_back(check_unary("max_pool2d", random_tensor({2, 6, 6}, rng), [](const Tensor& x) { return ops::max_pool2d(x, 2, 2); }, rng, step, tol));
  cases.push_back(check_unary("adaptive_avg_pool2d", random_tensor({2, 7, 5}, rng), [](const Tensor& x) { return ops::adaptive_avg_pool2d(x, 3, 2); }, rng, step, tol));
  cases.push_back(check_unary("extract_patches", random_tensor({2, 4, 8}, rng), [](const Tensor& x) { return ops::extract_patches(x, 2); }, rng, step, tol));
  cases.push_back(check_unary("mean_axis0", random_tensor(s2, rng), [](const Tensor& x) { return ops::mean(x, 0); }, rng, step, tol));
  cases.push_back(check_unary("mean_axis1", random_tensor(s2, rng), [](const Tensor& x) { return ops::mean(x, 1); }, rng, step, tol));
  {
    Tensor x = random_tensor(s2, rng);
    cases.push_back({"sum", grad_check([&] { return ops::sum(ops::mul(x, x)); }, {x}, step, tol)});
  }
  {
    const std::uint64_t dseed = rng.next();
    cases.push_back(check_unary("dropout_train_fixed_mask", random_tensor(s2, rng),
                                [dseed](const Tensor& x) {
                                  Rng local(dseed);
                                  return ops::dropout(x, 0.3, true, local);
                                },
                                rng, step, tol));
    cases.push_back(check_unary("dropout_eval", random_tensor(s2, rng),
                                [](const Tensor& x) {
                                  Rng local(0);
                                  return ops::dropout(x, 0.3, false, local);
                                },
                                rng, step, tol));
  }
  {
    const std::size_t rows = random_dim(rng, 1, 8);
    Tensor a = random_tensor({rows, random_dim(rng, 1, 4)}, rng);
    Tensor b = random_tensor({rows, random_dim(rng, 1, 4)}, rng);
    const Tensor w = random_tensor({rows, a.dim(1) + b.dim(1)}, rng);
    cases.push_back(
        {"concat_axis1", grad_check([&] { return weighted_sum(ops::concat({a, b}, 1), w); }, {a, b}, step, tol)});
    Tensor c = random_tensor({random_dim(rng, 1, 4), 3}, rng);
    Tensor d = random_tensor({random_dim(rng, 1, 4), 3}, rng);
    const Tensor w2 = random_tensor({c.dim(0) + d.dim(0), 3}, rng);
    cases.push_back(
        {"concat_axis0", grad_check([&] { return weighted_sum(ops::concat({c, d}, 0), w2); }, {c, d}, step, tol)});
  }
  cases.push_back(check_unary("slice", random_tensor({5, 8}, rng), [](const Tensor& x) { return ops::slice(x, 1, 2, 4); }, rng, step, tol));
  {
    const std::size_t n = random_dim(rng, 1, 8), classes = random_dim(rng, 2, 8);
    Tensor logits = random_tensor({n, classes}, rng, 2.0);
    std::vector<std::size_t> targets(n);
    for (auto& t : targets) t = rng.uniform_index(classes);
    cases.push_back({"cross_entropy_loss",
                     grad_check([&] { return ops::cross_entropy_loss(ops::softmax(logits, 1), targets); }, {logits},
                                step, tol)});
  }
  {
    const std::size_t n = random_dim(rng, 1, 8), m = random_dim(rng, 1, 8), d = random_dim(rng, 1, 8);
    Tensor q = random_tensor({n, d}, rng);
    Tensor k = random_tensor({m, d}, rng);
    Tensor v = random_tensor({m, d}, rng);
    const Tensor w = random_tensor({n, d}, rng);
    cases.push_back({"attention", grad_check([&] { return weighted_sum(attention(q, k, v), w); }, {q, k, v}, step, tol)});
  }
  {
    const std::size_t n = random_dim(rng, 1, 8);
    Tensor q = random_tensor({n, 8}, rng);
    Tensor k = random_tensor({n, 8}, rng);
    Tensor v = random_tensor({n, 8}, rng);
    Tensor wo = random_tensor({8, 8}, rng);
    const Tensor w = random_tensor({n, 8}, rng);
    cases.push_back({"multi_head_attention",
                     grad_check([&] { return weighted_sum(multi_head_attention(q, k, v, 2, wo), w); }, {q, k, v, wo},
                                step, tol)});
  }
  {
    EncoderBlockParams block = EncoderBlockParams::init(8, 2, 16, rng);
    for (Tensor* t : {&block.b_query, &block.b_key, &block.b_value, &block.b_out, &block.b_mlp1, &block.b_mlp2}) {
      *t = random_tensor(t->shape(), rng, 0.2);
    }
    Tensor x = random_tensor({4, 8}, rng);
    const Tensor w = random_tensor({4, 8}, rng);
    std::vector<Tensor> points{x};
    block.visit("", [&](const std::string&, Tensor& p) { points.push_back(p); });
    cases.push_back({"encoder_block",
                     grad_check([&] { return weighted_sum(encoder_block({x, TokenSource::vit}, block).tokens, w); },
                                points, step, tol)});
  }
  {
    ResidualBlockParams block = ResidualBlockParams::init(2, 4, 3, 2, rng);
    Tensor x = random_tensor({2, 6, 6}, rng);
    const Tensor probe = residual_block_forward(x, block);
    const Tensor w = random_tensor(probe.shape(), rng);
    std::vector<Tensor> points{x};
    block.visit("", [&](const std::string&, Tensor& p) { points.push_back(p); });
    cases.push_back({"residual_block", grad_check([&] { return weighted_sum(residual_block_forward(x, block), w); },
                                                  points, step, tol)});
  }
  {
    Tensor fmap = random_tensor({3, 6, 6}, rng);
    Tensor proj = random_tensor({3, 5}, rng);
    const Tensor w = random_tensor({4, 5}, rng);
    cases.push_back({"tokenize_feature_map",
                     grad_check([&] { return weighted_sum(tokenize_feature_map(fmap, 2, proj).tokens, w); },
                                {fmap, proj}, step, tol)});
  }

  // Composed path: both branches -> make_qkv(XYX) -> MHA -> f -> classifier ->
  // cross-entropy, with gradients checked for every parameter.
  {
    CnnBranchConfig cnn_cfg;
    cnn_cfg.input_size = 8;
    cnn_cfg.in_channels = 2;
    cnn_cfg.stem_channels = 2;
    cnn_cfg.stem_stride = 1;
    cnn_cfg.block_channels = {2, 4};
    cnn_cfg.norm_groups = 2;
    VitBranchConfig vit_cfg;
    vit_cfg.input_size = 8;
    vit_cfg.in_channels = 2;
    vit_cfg.patch_size = 4;
    vit_cfg.d_model = 8;
    vit_cfg.num_encoders = 1;
    vit_cfg.num_heads = 2;
    vit_cfg.mlp_ratio = 2;
    const std::size_t classes = 3;

    CnnBranchParams cnn = CnnBranchParams::init(cnn_cfg, rng);
    VitBranchParams vit = VitBranchParams::init(vit_cfg, rng);
    Tensor tokenizer = glorot_uniform({cnn_cfg.output_channels(), vit_cfg.d_model}, cnn_cfg.output_channels(),
                                      vit_cfg.d_model, rng);
    MhaFusionParams fusion = MhaFusionParams::init(vit_cfg.d_model, 2, kFusedDim, rng);
    fusion.f.bias = random_tensor({kFusedDim}, rng, 0.2);
    ClassifierParams head = ClassifierParams::init(classes, kFusedDim, rng);
    head.bias = random_tensor({classes}, rng, 0.2);

    const Tensor cnn_view = random_tensor({2, 8, 8}, rng);
    const Tensor vit_view = random_tensor({2, 8, 8}, rng);
    const std::vector<std::size_t> target{rng.uniform_index(classes)};
    const QkvWiring wiring = QkvWiring::parse("XYX");

    std::vector<Tensor> points;
    auto collect = [&](const std::string&, Tensor& p) { points.push_back(p); };
    cnn.visit("", collect);
    vit.visit("", collect);
    points.push_back(tokenizer);
    fusion.visit("", collect);
    head.visit("", collect);

    auto closure = [&] {
      const Tensor fmap = cnn_branch_forward(cnn_view, cnn_cfg, cnn);
      const TokenMatrix y = tokenize_feature_map(fmap, vit_cfg.grid(), tokenizer);
      const TokenMatrix x = vit_branch_forward(vit_view, vit_cfg, vit);
      const Tensor z = fuse_mhaff(x, y, wiring, fusion);
      const Tensor probs = ops::reshape(classify(z, head), {1, classes});
      return ops::cross_entropy_loss(probs, target);
    };
    cases.push_back({"composed_mhaff_path", grad_check(closure, points, step, tol)});
  }
  return cases;
}

}  // namespace mhaff
