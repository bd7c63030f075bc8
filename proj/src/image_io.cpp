#include "normfill/image_io.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>
#include <memory>
#include <stdexcept>

namespace normfill {
namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

struct PngReader {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReader() {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
  }
};

struct PngWriter {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWriter() {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
  }
};

void open_reader(PngReader& r, FILE* f, const std::filesystem::path& path) {
  png_byte header[8];
  if (fread(header, 1, 8, f) != 8 || png_sig_cmp(header, 0, 8) != 0)
    throw std::runtime_error("not a png file: " + path.string());
  r.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!r.png) throw std::runtime_error("png_create_read_struct failed");
  r.info = png_create_info_struct(r.png);
  if (!r.info) throw std::runtime_error("png_create_info_struct failed");
  if (setjmp(png_jmpbuf(r.png))) throw std::runtime_error("png read error: " + path.string());
  png_init_io(r.png, f);
  png_set_sig_bytes(r.png, 8);
  png_read_info(r.png, r.info);
}

template <typename T>
Image<T> read_png_impl(const std::filesystem::path& path, int want_depth) {
  FilePtr f(fopen(path.string().c_str(), "rb"));
  if (!f) throw std::runtime_error("cannot open: " + path.string());
  PngReader r;
  open_reader(r, f.get(), path);
  if (setjmp(png_jmpbuf(r.png))) throw std::runtime_error("png read error: " + path.string());

  const int bit_depth = png_get_bit_depth(r.png, r.info);
  const int color_type = png_get_color_type(r.png, r.info);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(r.png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(r.png);
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(r.png);
  if (want_depth == 8 && bit_depth == 16) png_set_strip_16(r.png);
  if (want_depth == 16 && bit_depth < 16)
    throw std::runtime_error("expected 16-bit png: " + path.string());
  if (want_depth == 16) png_set_swap(r.png);
  png_read_update_info(r.png, r.info);

  Image<T> img;
  img.width = int(png_get_image_width(r.png, r.info));
  img.height = int(png_get_image_height(r.png, r.info));
  img.channels = int(png_get_channels(r.png, r.info));
  if (img.channels != 1 && img.channels != 3)
    throw std::runtime_error("unsupported channel count in " + path.string());
  img.pixels.resize(size_t(img.width) * img.height * img.channels);

  const size_t stride = size_t(img.width) * img.channels * sizeof(T);
  if (png_get_rowbytes(r.png, r.info) != stride)
    throw std::runtime_error("unexpected row size in " + path.string());
  std::vector<png_bytep> rows(img.height);
  for (int y = 0; y < img.height; ++y)
    rows[y] = reinterpret_cast<png_bytep>(img.pixels.data()) + y * stride;
  png_read_image(r.png, rows.data());
  png_read_end(r.png, nullptr);
  return img;
}

template <typename T>
void write_png_impl(const std::filesystem::path& path, const Image<T>& img, int bit_depth) {
  if (img.width <= 0 || img.height <= 0) throw std::runtime_error("empty image");
  if (img.channels != 1 && img.channels != 3) throw std::runtime_error("unsupported channel count");
  if (img.pixels.size() != size_t(img.width) * img.height * img.channels)
    throw std::runtime_error("pixel buffer size mismatch");

  FilePtr f(fopen(path.string().c_str(), "wb"));
  if (!f) throw std::runtime_error("cannot open for writing: " + path.string());
  PngWriter w;
  w.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!w.png) throw std::runtime_error("png_create_write_struct failed");
  w.info = png_create_info_struct(w.png);
  if (!w.info) throw std::runtime_error("png_create_info_struct failed");
  if (setjmp(png_jmpbuf(w.png))) throw std::runtime_error("png write error: " + path.string());

  png_init_io(w.png, f.get());
  const int color = img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
  png_set_IHDR(w.png, w.info, img.width, img.height, bit_depth, color, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(w.png, w.info);
  if (bit_depth == 16) png_set_swap(w.png);

  const size_t stride = size_t(img.width) * img.channels * sizeof(T);
  std::vector<png_bytep> rows(img.height);
  for (int y = 0; y < img.height; ++y)
    rows[y] = const_cast<png_bytep>(reinterpret_cast<const png_byte*>(img.pixels.data()) + y * stride);
  png_write_image(w.png, rows.data());
  png_write_end(w.png, nullptr);
}

}  // namespace

ImageU8 read_png_u8(const std::filesystem::path& path) { return read_png_impl<uint8_t>(path, 8); }
ImageU16 read_png_u16(const std::filesystem::path& path) {
  return read_png_impl<uint16_t>(path, 16);
}

void write_png(const std::filesystem::path& path, const ImageU8& img) {
  write_png_impl(path, img, 8);
}
void write_png(const std::filesystem::path& path, const ImageU16& img) {
  write_png_impl(path, img, 16);
}

PngInfo png_info(const std::filesystem::path& path) {
  FilePtr f(fopen(path.string().c_str(), "rb"));
  if (!f) throw std::runtime_error("cannot open: " + path.string());
  PngReader r;
  open_reader(r, f.get(), path);
  PngInfo out;
  out.width = int(png_get_image_width(r.png, r.info));
  out.height = int(png_get_image_height(r.png, r.info));
  out.channels = int(png_get_channels(r.png, r.info));
  out.bit_depth = int(png_get_bit_depth(r.png, r.info));
  return out;
}

}  // namespace normfill
