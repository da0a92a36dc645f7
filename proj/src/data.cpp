#include "mhaff/data.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <numbers>

#include "mhaff/error.hpp"

namespace mhaff {

const char* to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "unknown";
}

std::size_t DatasetIndex::count(Split split) const {
  return static_cast<std::size_t>(
      std::count_if(records.begin(), records.end(), [&](const Record& r) { return r.split == split; }));
}

std::vector<std::size_t> DatasetIndex::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].split == split) out.push_back(i);
  return out;
}

namespace {

bool has_image_extension(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".pgm" || ext == ".ppm" || ext == ".pnm";
}

std::uint8_t to_u8(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

// Planar float copy with grayscale replicated to three channels.
std::vector<double> to_rgb_float(const ImageBuffer& image) {
  if (!image.valid()) throw UsageError("invalid image buffer");
  const std::size_t plane = image.height * image.width;
  std::vector<double> out(3 * plane);
  for (std::size_t c = 0; c < 3; ++c) {
    const std::size_t src = image.channels == 1 ? 0 : c;
    for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] = image.pixels[src * plane + i];
  }
  return out;
}

Tensor standardize(const std::vector<double>& rgb, std::size_t h, std::size_t w, const PreprocessConfig& cfg) {
  Tensor t({3, h, w});
  const std::size_t plane = h * w;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < plane; ++i)
      t[c * plane + i] = (rgb[c * plane + i] / 255.0 - cfg.mean[c]) / cfg.stddev[c];
  return t;
}

double sample_clamped(const ImageBuffer& img, std::size_t c, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(img.height - 1));
  x = std::clamp(x, 0.0, static_cast<double>(img.width - 1));
  const auto y0 = static_cast<std::size_t>(std::floor(y));
  const auto x0 = static_cast<std::size_t>(std::floor(x));
  const std::size_t y1 = std::min(y0 + 1, img.height - 1), x1 = std::min(x0 + 1, img.width - 1);
  const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
  const double top = img.at(c, y0, x0) * (1 - fx) + img.at(c, y0, x1) * fx;
  const double bot = img.at(c, y1, x0) * (1 - fx) + img.at(c, y1, x1) * fx;
  return top * (1 - fy) + bot * fy;
}

std::size_t parse_size(std::string_view key, std::string_view value, std::string_view whole) {
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw ConfigError("synthetic spec '" + std::string(whole) + "': bad value for " + std::string(key));
  }
  return v;
}

constexpr std::string_view kSynthPrefix = "synth://";

}  // namespace

DatasetIndex index_dataset(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(root, ec)) throw IndexingError("dataset root " + root.string() + " is not a directory");
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory() && entry.path().filename().string().front() != '.') class_dirs.push_back(entry.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });
  if (class_dirs.empty()) throw IndexingError("dataset root " + root.string() + " has no class directories");

  DatasetIndex index;
  for (const fs::path& dir : class_dirs) {
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file() && has_image_extension(entry.path())) files.push_back(entry.path().string());
    }
    const std::string name = dir.filename().string();
    if (files.empty()) throw IndexingError("class '" + name + "' has no image files");
    std::sort(files.begin(), files.end());
    const std::size_t label = index.class_names.size();
    index.class_names.push_back(name);
    for (auto& f : files) index.records.push_back({std::move(f), label, Split::train});
  }
  return index;
}

DatasetIndex split_dataset(DatasetIndex index, const SplitRatios& ratios, std::uint64_t seed) {
  if (ratios.train < 0 || ratios.val < 0 || ratios.test < 0 ||
      std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9) {
    throw ConfigError("split ratios must be non-negative and sum to 1");
  }
  for (std::size_t label = 0; label < index.classes(); ++label) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < index.records.size(); ++i)
      if (index.records[i].label == label) members.push_back(i);
    if (members.empty()) continue;
    Rng rng(derive_seed(seed, {0x73706c6974ULL, label}));
    for (std::size_t i = members.size(); i > 1; --i) std::swap(members[i - 1], members[rng.uniform_index(i)]);

    const std::size_t n = members.size();
    if (n == 1) {
      index.warnings.push_back("class '" + index.class_names[label] + "' has a single image; assigned to train");
    }
    std::size_t n_train = static_cast<std::size_t>(std::lround(ratios.train * static_cast<double>(n)));
    std::size_t n_val = static_cast<std::size_t>(std::lround(ratios.val * static_cast<double>(n)));
    n_train = std::clamp<std::size_t>(n_train, 1, n);
    n_val = std::min(n_val, n - n_train);
    for (std::size_t k = 0; k < n; ++k) {
      index.records[members[k]].split = k < n_train ? Split::train : (k < n_train + n_val ? Split::val : Split::test);
    }
  }
  return index;
}

PreprocessConfig PreprocessConfig::full_size() {
  PreprocessConfig cfg;
  cfg.cnn_resize = 256;
  cfg.cnn_crop = 224;
  cfg.vit_size = 224;
  return cfg;
}

void PreprocessConfig::validate() const {
  if (cnn_crop == 0 || vit_size == 0 || cnn_resize < cnn_crop) {
    throw ConfigError("preprocess: need 0 < cnn_crop <= cnn_resize and vit_size > 0");
  }
  for (double s : stddev)
    if (!(s > 0.0)) throw ConfigError("preprocess: stddev must be positive");
}

std::array<std::size_t, 2> center_crop_offset(std::size_t h, std::size_t w, std::size_t crop) {
  if (crop > h || crop > w) throw DimensionError("crop larger than image");
  return {(h - crop) / 2, (w - crop) / 2};
}

Tensor preprocess_cnn(const ImageBuffer& image, const PreprocessConfig& cfg) {
  cfg.validate();
  const std::vector<double> rgb = to_rgb_float(image);
  const std::size_t h = image.height, w = image.width;
  std::size_t nh, nw;
  if (h <= w) {
    nh = cfg.cnn_resize;
    nw = std::max<std::size_t>(cfg.cnn_resize, std::lround(static_cast<double>(w) * cfg.cnn_resize / h));
  } else {
    nw = cfg.cnn_resize;
    nh = std::max<std::size_t>(cfg.cnn_resize, std::lround(static_cast<double>(h) * cfg.cnn_resize / w));
  }
  const std::vector<double> resized = resize_bilinear(rgb, 3, h, w, nh, nw);
  const auto [top, left] = center_crop_offset(nh, nw, cfg.cnn_crop);
  const std::size_t s = cfg.cnn_crop;
  std::vector<double> cropped(3 * s * s);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) cropped[(c * s + y) * s + x] = resized[(c * nh + top + y) * nw + left + x];
  return standardize(cropped, s, s, cfg);
}

Tensor preprocess_vit(const ImageBuffer& image, const PreprocessConfig& cfg) {
  cfg.validate();
  const std::vector<double> resized =
      resize_bilinear(to_rgb_float(image), 3, image.height, image.width, cfg.vit_size, cfg.vit_size);
  return standardize(resized, cfg.vit_size, cfg.vit_size, cfg);
}

void AugmentSpec::validate() const {
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!prob(hflip_probability) || !prob(brightness_probability)) throw ConfigError("augment: probabilities in [0, 1]");
  if (!(brightness_min > 0.0 && brightness_min <= brightness_max)) throw ConfigError("augment: bad brightness range");
  if (rotation_degrees < 0.0) throw ConfigError("augment: rotation range must be non-negative");
  if (blur_kernels.empty()) throw ConfigError("augment: no blur kernel sizes");
  for (std::size_t k : blur_kernels)
    if (k == 0 || k % 2 == 0) throw ConfigError("augment: blur kernel sizes must be odd and >= 1");
}

ImageBuffer hflip(const ImageBuffer& image) {
  ImageBuffer out = image;
  for (std::size_t c = 0; c < image.channels; ++c)
    for (std::size_t y = 0; y < image.height; ++y)
      for (std::size_t x = 0; x < image.width; ++x) out.at(c, y, x) = image.at(c, y, image.width - 1 - x);
  return out;
}

ImageBuffer scale_brightness(const ImageBuffer& image, double factor) {
  ImageBuffer out = image;
  for (auto& p : out.pixels) p = to_u8(p * factor);
  return out;
}

ImageBuffer rotate(const ImageBuffer& image, double degrees) {
  if (degrees == 0.0) return image;
  const double rad = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cy = (static_cast<double>(image.height) - 1) / 2, cx = (static_cast<double>(image.width) - 1) / 2;
  ImageBuffer out = image;
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      const double sx = cs * dx + sn * dy + cx;
      const double sy = -sn * dx + cs * dy + cy;
      for (std::size_t c = 0; c < image.channels; ++c) out.at(c, y, x) = to_u8(sample_clamped(image, c, sy, sx));
    }
  }
  return out;
}

double blur_sigma(std::size_t kernel) { return 0.3 * ((static_cast<double>(kernel) - 1) * 0.5 - 1) + 0.8; }

ImageBuffer gaussian_blur(const ImageBuffer& image, std::size_t kernel) {
  if (kernel == 0 || kernel % 2 == 0) throw UsageError("gaussian_blur: kernel size must be odd and >= 1");
  if (kernel == 1) return image;
  const double sigma = blur_sigma(kernel);
  const auto r = static_cast<std::ptrdiff_t>(kernel / 2);
  std::vector<double> weights;
  double total = 0.0;
  for (std::ptrdiff_t i = -r; i <= r; ++i) {
    weights.push_back(std::exp(-static_cast<double>(i * i) / (2 * sigma * sigma)));
    total += weights.back();
  }
  for (double& wt : weights) wt /= total;

  const auto h = static_cast<std::ptrdiff_t>(image.height), w = static_cast<std::ptrdiff_t>(image.width);
  auto clampi = [](std::ptrdiff_t v, std::ptrdiff_t hi) { return std::clamp<std::ptrdiff_t>(v, 0, hi - 1); };
  ImageBuffer out = image;
  std::vector<double> tmp(image.height * image.width);
  for (std::size_t c = 0; c < image.channels; ++c) {
    for (std::ptrdiff_t y = 0; y < h; ++y)
      for (std::ptrdiff_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (std::ptrdiff_t i = -r; i <= r; ++i) acc += weights[i + r] * image.at(c, y, clampi(x + i, w));
        tmp[y * w + x] = acc;
      }
    for (std::ptrdiff_t y = 0; y < h; ++y)
      for (std::ptrdiff_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (std::ptrdiff_t i = -r; i <= r; ++i) acc += weights[i + r] * tmp[clampi(y + i, h) * w + x];
        out.at(c, y, x) = to_u8(acc);
      }
  }
  return out;
}

ImageBuffer augment(const ImageBuffer& image, const AugmentSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  // All draws happen unconditionally so each choice has a fixed stream position.
  const bool flip = rng.bernoulli(spec.hflip_probability);
  const bool dim = rng.bernoulli(spec.brightness_probability);
  const double factor = rng.uniform(spec.brightness_min, spec.brightness_max);
  const double angle = rng.uniform(-spec.rotation_degrees, spec.rotation_degrees);
  const std::size_t kernel = spec.blur_kernels[rng.uniform_index(spec.blur_kernels.size())];

  ImageBuffer out = flip ? hflip(image) : image;
  if (dim) out = scale_brightness(out, factor);
  out = rotate(out, angle);
  return gaussian_blur(out, kernel);
}

SynthSpec SynthSpec::parse(std::string_view text) {
  if (!is_synth(text)) throw ConfigError("not a synthetic dataset spec: '" + std::string(text) + "'");
  std::string_view body = text.substr(kSynthPrefix.size());
  if (const auto hash = body.find('#'); hash != std::string_view::npos) body = body.substr(0, hash);
  SynthSpec spec;
  bool has_c = false, has_n = false, has_size = false;
  while (!body.empty()) {
    const std::size_t comma = body.find(',');
    const std::string_view item = body.substr(0, comma);
    body = comma == std::string_view::npos ? std::string_view{} : body.substr(comma + 1);
    const std::size_t eq = item.find('=');
    if (eq == std::string_view::npos) throw ConfigError("synthetic spec '" + std::string(text) + "': expected key=value");
    const std::string_view key = item.substr(0, eq), value = item.substr(eq + 1);
    if (key == "C") {
      spec.classes = parse_size(key, value, text);
      has_c = true;
    } else if (key == "n") {
      spec.per_class = parse_size(key, value, text);
      has_n = true;
    } else if (key == "size") {
      spec.size = parse_size(key, value, text);
      has_size = true;
    } else if (key == "seed") {
      spec.seed = parse_size(key, value, text);
    } else {
      throw ConfigError("synthetic spec '" + std::string(text) + "': unknown key " + std::string(key));
    }
  }
  if (!has_c || !has_n || !has_size) throw ConfigError("synthetic spec '" + std::string(text) + "' needs C, n and size");
  spec.validate();
  return spec;
}

bool SynthSpec::is_synth(std::string_view text) { return text.substr(0, kSynthPrefix.size()) == kSynthPrefix; }

std::string SynthSpec::to_string() const {
  return std::string(kSynthPrefix) + "C=" + std::to_string(classes) + ",n=" + std::to_string(per_class) +
         ",size=" + std::to_string(size) + ",seed=" + std::to_string(seed);
}

std::string SynthSpec::image_id(std::size_t label, std::size_t instance) const {
  return to_string() + "#" + std::to_string(label) + ":" + std::to_string(instance);
}

void SynthSpec::validate() const {
  if (classes < 2) throw ConfigError("synthetic dataset needs C >= 2");
  if (per_class < 1) throw ConfigError("synthetic dataset needs n >= 1");
  if (size < 16) throw ConfigError("synthetic dataset needs size >= 16");
}

ImageBuffer synth_image(const SynthSpec& spec, std::size_t label, std::size_t instance) {
  spec.validate();
  if (label >= spec.classes) throw UsageError("synthetic label out of range");
  const auto textures = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(spec.classes))));
  const std::size_t layouts = (spec.classes + textures - 1) / textures;
  const std::size_t t = label % textures, l = label / textures;
  Rng rng(derive_seed(spec.seed, {label, instance}));

  const double s = static_cast<double>(spec.size);
  const double pi = std::numbers::pi;
  const double unit = s / 32.0;
  const double period = (4.0 + 5.0 * static_cast<double>(t) / static_cast<double>(textures - 1)) * unit *
                        rng.uniform(0.95, 1.05);
  const double theta = rng.uniform(0.0, pi);
  const double phase = rng.uniform(0.0, 2 * pi);
  const double ring = layouts > 1 ? 0.75 * static_cast<double>(l) / static_cast<double>(layouts - 1) : 0.0;
  const double cy = (s - 1) / 2 + rng.uniform(-s / 16, s / 16);
  const double cx = (s - 1) / 2 + rng.uniform(-s / 16, s / 16);

  ImageBuffer img(3, spec.size, spec.size);
  for (std::size_t y = 0; y < spec.size; ++y) {
    for (std::size_t x = 0; x < spec.size; ++x) {
      const double fy = static_cast<double>(y), fx = static_cast<double>(x);
      const double r = std::hypot(fy - cy, fx - cx) / (s / 2);
      const double contrast = 0.1 + 0.4 * std::exp(-(r - ring) * (r - ring) / (2 * 0.15 * 0.15));
      const double ridge = std::sin(2 * pi * (fx * std::cos(theta) + fy * std::sin(theta)) / period + phase);
      for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = to_u8(255.0 * (0.5 + contrast * ridge + 0.04 * rng.normal()));
    }
  }
  return img;
}

SynthDataset synth_generate(const SynthSpec& spec) {
  spec.validate();
  SynthDataset out;
  for (std::size_t c = 0; c < spec.classes; ++c) out.index.class_names.push_back("synth_" + std::to_string(c));
  for (std::size_t c = 0; c < spec.classes; ++c) {
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      out.index.records.push_back({spec.image_id(c, i), c, Split::train});
      out.images.push_back(synth_image(spec, c, i));
    }
  }
  return out;
}

ImageBuffer load_image(const std::string& source) {
  if (!SynthSpec::is_synth(source)) return read_image(source);
  const std::size_t hash = source.find('#');
  const std::size_t colon = source.find(':', hash == std::string::npos ? source.size() : hash);
  if (hash == std::string::npos || colon == std::string::npos) {
    throw ConfigError("synthetic image id '" + source + "' must end in #<class>:<instance>");
  }
  const SynthSpec spec = SynthSpec::parse(source.substr(0, hash));
  const std::size_t label = parse_size("class", std::string_view(source).substr(hash + 1, colon - hash - 1), source);
  const std::size_t instance = parse_size("instance", std::string_view(source).substr(colon + 1), source);
  if (label >= spec.classes) throw ConfigError("synthetic image id '" + source + "': class out of range");
  return synth_image(spec, label, instance);
}

Dataset Dataset::open(const std::string& spec, const SplitRatios& ratios, std::uint64_t seed) {
  Dataset ds;
  if (SynthSpec::is_synth(spec)) {
    SynthDataset synth = synth_generate(SynthSpec::parse(spec));
    ds.index = split_dataset(std::move(synth.index), ratios, seed);
    ds.images = std::move(synth.images);
    return ds;
  }
  ds.index = split_dataset(index_dataset(spec), ratios, seed);
  for (const Record& r : ds.index.records) ds.images.push_back(read_image(r.source));
  return ds;
}

}  // namespace mhaff
