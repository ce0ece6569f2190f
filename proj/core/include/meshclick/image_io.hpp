#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "meshclick/rasterizer.hpp"

namespace meshclick {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Binary per-pixel mask, row = y * width + x, values 0 or 1.
struct MaskImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;

  MaskImage() = default;
  MaskImage(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h, 0) {}
  std::size_t area() const;
  bool operator==(const MaskImage&) const = default;
};

// Feature images: 16-byte header "MFFI", u32 width, u32 height, u32 channels
// (little-endian), then width*height*channels little-endian f32 values in
// row-major pixel order with channels innermost.
void write_mffi(const std::filesystem::path& path, const AttributeImage<float>& image);
AttributeImage<float> read_mffi(const std::filesystem::path& path);

// Masks as binary PGM (P5, maxval 255); any nonzero pixel reads back as 1.
void write_mask_pgm(const std::filesystem::path& path, const MaskImage& mask);
MaskImage read_mask_pgm(const std::filesystem::path& path);

// Three-channel image with values in [0, 1] as binary PPM (P6).
void write_color_ppm(const std::filesystem::path& path, const AttributeImage<double>& image);
AttributeImage<double> read_color_ppm(const std::filesystem::path& path);

}  // namespace meshclick
