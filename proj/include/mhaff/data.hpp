#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mhaff/image.hpp"
#include "mhaff/random.hpp"
#include "mhaff/tensor.hpp"

namespace mhaff {

enum class Split { train, val, test };
const char* to_string(Split split);

struct Record {
  // File path, or a synthetic id of the form synth://...#<class>:<instance>.
  std::string source;
  std::size_t label = 0;
  Split split = Split::train;
};

struct DatasetIndex {
  std::vector<Record> records;
  std::vector<std::string> class_names;
  // Non-fatal notes raised while splitting (e.g. single-image classes).
  std::vector<std::string> warnings;

  std::size_t classes() const { return class_names.size(); }
  std::size_t count(Split split) const;
  std::vector<std::size_t> indices(Split split) const;
};

// root/<class_name>/<image files>; classes and files are enumerated in sorted
// order and labels follow the sorted class names.
DatasetIndex index_dataset(const std::filesystem::path& root);

struct SplitRatios {
  double train = 0.7;
  double val = 0.2;
  double test = 0.1;
};

// Per-class stratified split. Each class is shuffled by a generator seeded
// from (seed, label); round(train * n) items go to train, round(val * n) to
// val, the rest to test. Every class keeps at least one training item.
DatasetIndex split_dataset(DatasetIndex index, const SplitRatios& ratios, std::uint64_t seed);

struct PreprocessConfig {
  // CNN view: resize the shorter side, then centre-crop a square.
  std::size_t cnn_resize = 36;
  std::size_t cnn_crop = 32;
  // Patch view: direct resize to a square.
  std::size_t vit_size = 32;
  std::array<double, 3> mean{0.485, 0.456, 0.406};
  std::array<double, 3> stddev{0.229, 0.224, 0.225};

  // 256 -> 224 crop and 224 direct resize.
  static PreprocessConfig full_size();
  void validate() const;
};

// Offsets (top, left) of the centre crop of `crop` from an h x w image.
std::array<std::size_t, 2> center_crop_offset(std::size_t h, std::size_t w, std::size_t crop);

Tensor preprocess_cnn(const ImageBuffer& image, const PreprocessConfig& cfg);
Tensor preprocess_vit(const ImageBuffer& image, const PreprocessConfig& cfg);

struct AugmentSpec {
  double hflip_probability = 0.5;
  double brightness_probability = 0.5;
  double brightness_min = 0.2;
  double brightness_max = 0.5;
  double rotation_degrees = 15.0;
  std::vector<std::size_t> blur_kernels{1, 3, 5};

  void validate() const;
};

ImageBuffer hflip(const ImageBuffer& image);
ImageBuffer scale_brightness(const ImageBuffer& image, double factor);
// Rotation about the image centre, bilinear, exposed borders edge-replicated.
ImageBuffer rotate(const ImageBuffer& image, double degrees);
// Separable Gaussian, sigma = 0.3 ((k - 1) 0.5 - 1) + 0.8, edge-replicated.
ImageBuffer gaussian_blur(const ImageBuffer& image, std::size_t kernel);
double blur_sigma(std::size_t kernel);

// hflip, brightness, rotation, blur, each drawn independently from `seed`.
ImageBuffer augment(const ImageBuffer& image, const AugmentSpec& spec, std::uint64_t seed);

struct SynthSpec {
  std::size_t classes = 8;
  std::size_t per_class = 40;
  std::size_t size = 32;
  std::uint64_t seed = 0;

  // synth://C=<int>,n=<int>,size=<int>,seed=<int>; seed is optional.
  static SynthSpec parse(std::string_view text);
  static bool is_synth(std::string_view text);
  std::string to_string() const;
  std::string image_id(std::size_t label, std::size_t instance) const;
  void validate() const;
};

// Class c pairs ridge texture t = c mod T with contrast layout l = c div T,
// where T = ceil(sqrt(C)). Textures differ in ridge period (orientation is
// random); layouts differ in the radius at which the ridges are most
// contrasted. Both cues survive flips and rotations. Orientation, phase,
// centre and noise are jittered per (seed, class, instance).
ImageBuffer synth_image(const SynthSpec& spec, std::size_t label, std::size_t instance);

struct SynthDataset {
  DatasetIndex index;
  std::vector<ImageBuffer> images;
};

SynthDataset synth_generate(const SynthSpec& spec);

// Loads a record source: a file path or a synthetic id.
ImageBuffer load_image(const std::string& source);

// A resolved dataset: index with split tags plus a cache of decoded images.
struct Dataset {
  DatasetIndex index;
  std::vector<ImageBuffer> images;

  // `spec` is a directory root or a synth:// string.
  static Dataset open(const std::string& spec, const SplitRatios& ratios, std::uint64_t seed);
};

}  // namespace mhaff
