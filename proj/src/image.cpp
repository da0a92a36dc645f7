#include "mhaff/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "mhaff/error.hpp"

namespace mhaff {

ImageBuffer::ImageBuffer(std::size_t c, std::size_t h, std::size_t w, std::uint8_t fill)
    : channels(c), height(h), width(w), pixels(c * h * w, fill) {}

bool ImageBuffer::valid() const {
  return (channels == 1 || channels == 3) && height > 0 && width > 0 && pixels.size() == channels * height * width;
}

namespace {

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class PnmReader {
 public:
  PnmReader(const std::vector<std::uint8_t>& bytes, const std::string& name) : bytes_(bytes), name_(name) {}

  std::size_t next_number() {
    skip_space_and_comments();
    if (pos_ >= bytes_.size() || !std::isdigit(bytes_[pos_])) fail("expected a number");
    std::size_t v = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      v = v * 10 + (bytes_[pos_++] - '0');
      if (v > (1u << 24)) fail("number out of range");
    }
    return v;
  }

  // Exactly one whitespace byte separates the header from binary data.
  void skip_single_space() {
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) fail("missing separator before pixel data");
    ++pos_;
  }

  std::size_t read_raw(std::size_t bytes_per_sample) {
    if (pos_ + bytes_per_sample > bytes_.size()) fail("truncated pixel data");
    std::size_t v = bytes_[pos_++];
    if (bytes_per_sample == 2) v = (v << 8) | bytes_[pos_++];
    return v;
  }

  std::size_t pos() const { return pos_; }
  void advance(std::size_t n) { pos_ += n; }
  [[noreturn]] void fail(const std::string& why) const { throw IoError(name_ + ": malformed PNM: " + why); }

 private:
  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  const std::vector<std::uint8_t>& bytes_;
  const std::string& name_;
  std::size_t pos_ = 0;
};

std::uint8_t rescale(std::size_t v, std::size_t maxval) {
  if (maxval == 255) return static_cast<std::uint8_t>(v);
  return static_cast<std::uint8_t>(std::lround(static_cast<double>(std::min(v, maxval)) * 255.0 / maxval));
}

}  // namespace

ImageBuffer decode_pnm(const std::vector<std::uint8_t>& bytes, const std::string& name) {
  PnmReader r(bytes, name);
  if (bytes.size() < 2 || bytes[0] != 'P') r.fail("bad magic");
  const char kind = static_cast<char>(bytes[1]);
  if (kind != '2' && kind != '3' && kind != '5' && kind != '6') r.fail(std::string("unsupported variant P") + kind);
  r.advance(2);
  const std::size_t width = r.next_number();
  const std::size_t height = r.next_number();
  const std::size_t maxval = r.next_number();
  if (width == 0 || height == 0) r.fail("zero dimension");
  if (maxval == 0 || maxval > 65535) r.fail("maxval out of range");
  const std::size_t channels = (kind == '3' || kind == '6') ? 3 : 1;
  const bool binary = kind == '5' || kind == '6';
  if (binary) r.skip_single_space();

  ImageBuffer img(channels, height, width);
  const std::size_t sample_bytes = maxval > 255 ? 2 : 1;
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < channels; ++c) {
        const std::size_t v = binary ? r.read_raw(sample_bytes) : r.next_number();
        if (v > maxval) r.fail("sample exceeds maxval");
        img.at(c, y, x) = rescale(v, maxval);
      }
    }
  }
  return img;
}

ImageBuffer decode_png(const std::vector<std::uint8_t>& bytes, const std::string& name) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size())) {
    throw IoError(name + ": malformed PNG: " + png.message);
  }
  const bool gray = (png.format & PNG_FORMAT_FLAG_COLOR) == 0;
  png.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<std::uint8_t> interleaved(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, interleaved.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw IoError(name + ": malformed PNG: " + msg);
  }
  const std::size_t channels = gray ? 1 : 3;
  ImageBuffer img(channels, png.height, png.width);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < channels; ++c) img.at(c, y, x) = interleaved[(y * img.width + x) * channels + c];
  return img;
}

ImageBuffer read_image(const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = read_bytes(path);
  static const std::uint8_t png_sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (bytes.size() >= 8 && std::equal(png_sig, png_sig + 8, bytes.begin())) return decode_png(bytes, path.string());
  if (bytes.size() >= 2 && bytes[0] == 'P') return decode_pnm(bytes, path.string());
  throw IoError(path.string() + ": unsupported image format (expected PNG, PGM or PPM)");
}

void write_pnm(const std::filesystem::path& path, const ImageBuffer& image) {
  if (!image.valid()) throw UsageError("write_pnm: invalid image buffer");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << (image.channels == 1 ? "P5" : "P6") << '\n' << image.width << ' ' << image.height << "\n255\n";
  std::vector<char> row(image.width * image.channels);
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x)
      for (std::size_t c = 0; c < image.channels; ++c)
        row[x * image.channels + c] = static_cast<char>(image.at(c, y, x));
    out.write(row.data(), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<double> resize_bilinear(const std::vector<double>& src, std::size_t channels, std::size_t in_h,
                                    std::size_t in_w, std::size_t out_h, std::size_t out_w) {
  if (in_h == 0 || in_w == 0 || out_h == 0 || out_w == 0 || src.size() != channels * in_h * in_w) {
    throw DimensionError("resize_bilinear: invalid sizes");
  }
  if (in_h == out_h && in_w == out_w) return src;
  auto coords = [](std::size_t out, std::size_t in) {
    std::vector<std::pair<std::size_t, double>> c(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t i = 0; i < out; ++i) {
      double s = (static_cast<double>(i) + 0.5) * scale - 0.5;
      s = std::clamp(s, 0.0, static_cast<double>(in - 1));
      const auto lo = static_cast<std::size_t>(std::floor(s));
      c[i] = {lo, s - static_cast<double>(lo)};
    }
    return c;
  };
  const auto ys = coords(out_h, in_h);
  const auto xs = coords(out_w, in_w);
  std::vector<double> dst(channels * out_h * out_w);
  for (std::size_t c = 0; c < channels; ++c) {
    const double* plane = src.data() + c * in_h * in_w;
    for (std::size_t y = 0; y < out_h; ++y) {
      const auto [y0, fy] = ys[y];
      const std::size_t y1 = std::min(y0 + 1, in_h - 1);
      for (std::size_t x = 0; x < out_w; ++x) {
        const auto [x0, fx] = xs[x];
        const std::size_t x1 = std::min(x0 + 1, in_w - 1);
        const double top = plane[y0 * in_w + x0] * (1 - fx) + plane[y0 * in_w + x1] * fx;
        const double bot = plane[y1 * in_w + x0] * (1 - fx) + plane[y1 * in_w + x1] * fx;
        dst[(c * out_h + y) * out_w + x] = top * (1 - fy) + bot * fy;
      }
    }
  }
  return dst;
}

}  // namespace mhaff
