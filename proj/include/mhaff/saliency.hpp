#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mhaff/data.hpp"
#include "mhaff/image.hpp"
#include "mhaff/model.hpp"

namespace mhaff {

enum class LayerTag { cnn_branch, vit_branch, fusion };

// cnn-branch | vit-branch | fusion; anything else is a UsageError.
LayerTag parse_layer_tag(std::string_view text);
const char* to_string(LayerTag tag);

struct Heatmap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;  // row-major, each in [0, 1]
  std::size_t target_class = 0;
  LayerTag layer = LayerTag::cnn_branch;

  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

// Core map on a channels x h x w grid of activations and their gradients:
// relu(sum_c mean(grad_c) * act_c), min-max normalised; zeros when flat.
std::vector<double> grad_cam_grid(std::span<const double> activations, std::span<const double> gradients,
                                  std::size_t channels, std::size_t h, std::size_t w);

// Token-major N x d activations as a d x g x g grid, with token t at (t / g, t % g).
std::vector<double> tokens_to_grid(std::span<const double> tokens, std::size_t count, std::size_t width);

// Bilinear upsampling of a normalised map, rescaled so its maximum is 1 again.
std::vector<double> upsample_map(const std::vector<double>& map, std::size_t h, std::size_t w, std::size_t out_h,
                                 std::size_t out_w);

// Grad-CAM of the pre-softmax logit of `target` (the prediction when empty)
// at `layer`, before upsampling. Parameter gradients are cleared afterwards.
Heatmap grad_cam(Model& model, const Tensor& cnn_view, const Tensor& vit_view, std::optional<std::size_t> target,
                 LayerTag layer);

// Preprocesses `image`, runs grad_cam and upsamples to the image's size.
Heatmap grad_cam_image(Model& model, const PreprocessConfig& preprocess, const ImageBuffer& image,
                       std::optional<std::size_t> target, LayerTag layer);

std::uint8_t quantize_unit(double v);
// Black -> red -> yellow: r = min(1, 2v), g = max(0, 2v - 1), b = 0.
std::array<double, 3> heat_color(double v);

// Writes <dir>/<stem>.pgm (the quantised map) and <dir>/<stem>_overlay.ppm,
// each pixel round(0.5 image + 0.5 * 255 * colormap). The image must match
// the map's size.
void export_heatmap(const Heatmap& map, const ImageBuffer& image, const std::filesystem::path& dir,
                    const std::string& stem);

}  // namespace mhaff
