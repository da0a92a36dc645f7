#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace mhaff {

// 8-bit image stored planar, channel-major (C x H x W).
struct ImageBuffer {
  std::size_t channels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;

  ImageBuffer() = default;
  ImageBuffer(std::size_t c, std::size_t h, std::size_t w, std::uint8_t fill = 0);

  std::uint8_t& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
  std::uint8_t at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }
  bool valid() const;

  friend bool operator==(const ImageBuffer&, const ImageBuffer&) = default;
};

// Decodes PGM/PPM (P2, P3, P5, P6) or PNG, chosen by file signature.
ImageBuffer read_image(const std::filesystem::path& path);
ImageBuffer decode_pnm(const std::vector<std::uint8_t>& bytes, const std::string& name);
ImageBuffer decode_png(const std::vector<std::uint8_t>& bytes, const std::string& name);

// Binary P5 for one channel, P6 for three.
void write_pnm(const std::filesystem::path& path, const ImageBuffer& image);

// Half-pixel-centred bilinear resampling of a planar float image. Equal sizes
// reproduce the input exactly.
std::vector<double> resize_bilinear(const std::vector<double>& src, std::size_t channels, std::size_t in_h,
                                    std::size_t in_w, std::size_t out_h, std::size_t out_w);

}  // namespace mhaff
