#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace normfill {

/// Interleaved row-major image, channels is 1 (gray) or 3 (rgb).
template <typename T>
struct Image {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<T> pixels;

  T& at(int row, int col, int c = 0) { return pixels[(size_t(row) * width + col) * channels + c]; }
  const T& at(int row, int col, int c = 0) const {
    return pixels[(size_t(row) * width + col) * channels + c];
  }
};

using ImageU8 = Image<uint8_t>;
using ImageU16 = Image<uint16_t>;

ImageU8 read_png_u8(const std::filesystem::path& path);
ImageU16 read_png_u16(const std::filesystem::path& path);

void write_png(const std::filesystem::path& path, const ImageU8& img);
void write_png(const std::filesystem::path& path, const ImageU16& img);

/// Bit depth (8 or 16) and channel count without decoding the full image.
struct PngInfo {
  int width, height, channels, bit_depth;
};
PngInfo png_info(const std::filesystem::path& path);

}  // namespace normfill
