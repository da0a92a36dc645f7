#include "mhaff/saliency.hpp"

#include <algorithm>
#include <cmath>

#include "mhaff/error.hpp"
#include "mhaff/ops.hpp"
#include "mhaff/tape.hpp"

namespace mhaff {

LayerTag parse_layer_tag(std::string_view text) {
  if (text == "cnn-branch") return LayerTag::cnn_branch;
  if (text == "vit-branch") return LayerTag::vit_branch;
  if (text == "fusion") return LayerTag::fusion;
  throw UsageError("layer '" + std::string(text) + "' is not spatial; use cnn-branch, vit-branch or fusion");
}

const char* to_string(LayerTag tag) {
  switch (tag) {
    case LayerTag::cnn_branch: return "cnn-branch";
    case LayerTag::vit_branch: return "vit-branch";
    case LayerTag::fusion: return "fusion";
  }
  return "unknown";
}

std::vector<double> grad_cam_grid(std::span<const double> activations, std::span<const double> gradients,
                                  std::size_t channels, std::size_t h, std::size_t w) {
  const std::size_t plane = h * w;
  if (plane == 0 || activations.size() != channels * plane || gradients.size() != activations.size()) {
    throw DimensionError("grad-cam: activations and gradients must both be channels x h x w");
  }
  std::vector<double> map(plane, 0.0);
  for (std::size_t c = 0; c < channels; ++c) {
    double weight = 0.0;
    for (std::size_t i = 0; i < plane; ++i) weight += gradients[c * plane + i];
    weight /= static_cast<double>(plane);
    for (std::size_t i = 0; i < plane; ++i) map[i] += weight * activations[c * plane + i];
  }
  for (double& v : map) v = std::max(v, 0.0);
  const auto [lo, hi] = std::minmax_element(map.begin(), map.end());
  const double min = *lo, range = *hi - *lo;
  if (!(range > 0.0)) return std::vector<double>(plane, 0.0);
  for (double& v : map) v = (v - min) / range;
  return map;
}

std::vector<double> tokens_to_grid(std::span<const double> tokens, std::size_t count, std::size_t width) {
  const auto g = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(count))));
  if (g * g != count) throw DimensionError("grad-cam: " + std::to_string(count) + " tokens do not form a square grid");
  if (tokens.size() != count * width) throw DimensionError("grad-cam: token buffer does not match N x d");
  std::vector<double> grid(tokens.size());
  for (std::size_t t = 0; t < count; ++t)
    for (std::size_t c = 0; c < width; ++c) grid[c * count + t] = tokens[t * width + c];
  return grid;
}

std::vector<double> upsample_map(const std::vector<double>& map, std::size_t h, std::size_t w, std::size_t out_h,
                                 std::size_t out_w) {
  std::vector<double> out = resize_bilinear(map, 1, h, w, out_h, out_w);
  const double peak = *std::max_element(out.begin(), out.end());
  if (!(peak > 0.0)) return std::vector<double>(out.size(), 0.0);
  for (double& v : out) v = std::clamp(v / peak, 0.0, 1.0);
  return out;
}

Heatmap grad_cam(Model& model, const Tensor& cnn_view, const Tensor& vit_view, std::optional<std::size_t> target,
                 LayerTag layer) {
  const ModelConfig& cfg = model.config();
  if (layer == LayerTag::cnn_branch && !cfg.uses_cnn()) throw UsageError("model has no CNN branch");
  if (layer == LayerTag::vit_branch && !cfg.uses_vit()) throw UsageError("model has no ViT branch");

  Heatmap heat;
  heat.layer = layer;
  Rng unused(0);
  {
    Tape tape;
    const ForwardTrace tr = model.trace(cnn_view, vit_view, false, unused);
    const std::size_t classes = tr.logits.numel();
    heat.target_class = target ? *target : argmax(tr.logits.data());
    if (heat.target_class >= classes) {
      throw UsageError("class " + std::to_string(heat.target_class) + " out of range for " + std::to_string(classes) +
                       " classes");
    }
    const Tensor score = ops::slice(ops::reshape(tr.logits, {1, classes}), 1, heat.target_class, 1);
    tape.backward(score);

    const Tensor& act = layer == LayerTag::cnn_branch  ? tr.cnn_features
                        : layer == LayerTag::vit_branch ? tr.vit_tokens.tokens
                                                         : tr.fused_tokens;
    const std::vector<double> grad = act.has_grad() ? std::vector<double>(act.grad().begin(), act.grad().end())
                                                    : std::vector<double>(act.numel(), 0.0);
    if (layer == LayerTag::cnn_branch) {
      heat.height = act.dim(1);
      heat.width = act.dim(2);
      heat.values = grad_cam_grid(act.data(), grad, act.dim(0), heat.height, heat.width);
    } else {
      const std::size_t n = act.dim(0), d = act.dim(1);
      const std::vector<double> a_grid = tokens_to_grid(act.data(), n, d);
      const std::vector<double> g_grid = tokens_to_grid(grad, n, d);
      heat.height = heat.width = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(n))));
      heat.values = grad_cam_grid(a_grid, g_grid, d, heat.height, heat.width);
    }
  }
  model.zero_grad();
  return heat;
}

Heatmap grad_cam_image(Model& model, const PreprocessConfig& preprocess, const ImageBuffer& image,
                       std::optional<std::size_t> target, LayerTag layer) {
  Heatmap heat = grad_cam(model, preprocess_cnn(image, preprocess), preprocess_vit(image, preprocess), target, layer);
  heat.values = upsample_map(heat.values, heat.height, heat.width, image.height, image.width);
  heat.height = image.height;
  heat.width = image.width;
  return heat;
}

std::uint8_t quantize_unit(double v) {
  return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(v, 0.0, 1.0)));
}

std::array<double, 3> heat_color(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return {std::min(1.0, 2 * v), std::max(0.0, 2 * v - 1), 0.0};
}

void export_heatmap(const Heatmap& map, const ImageBuffer& image, const std::filesystem::path& dir,
                    const std::string& stem) {
  if (map.values.size() != map.height * map.width) throw DimensionError("heatmap buffer does not match its size");
  if (image.height != map.height || image.width != map.width) {
    throw DimensionError("overlay image is " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                         ", heatmap is " + std::to_string(map.height) + "x" + std::to_string(map.width));
  }
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  ImageBuffer gray(1, map.height, map.width);
  ImageBuffer overlay(3, map.height, map.width);
  for (std::size_t y = 0; y < map.height; ++y) {
    for (std::size_t x = 0; x < map.width; ++x) {
      const double v = map.at(y, x);
      gray.at(0, y, x) = quantize_unit(v);
      const auto color = heat_color(v);
      for (std::size_t c = 0; c < 3; ++c) {
        const double base = image.at(image.channels == 1 ? 0 : c, y, x);
        overlay.at(c, y, x) = static_cast<std::uint8_t>(std::lround(0.5 * base + 0.5 * 255.0 * color[c]));
      }
    }
  }
  write_pnm(dir / (stem + ".pgm"), gray);
  write_pnm(dir / (stem + "_overlay.ppm"), overlay);
}

}  // namespace mhaff
