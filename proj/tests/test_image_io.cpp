#include <doctest.h>

#include <filesystem>

#include "normfill/image_io.hpp"
#include "normfill/util.hpp"

using namespace normfill;

namespace {

std::filesystem::path test_dir() {
  const auto dir = std::filesystem::temp_directory_path() / "nf_png_test";
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("8-bit rgb png round trip") {
  ImageU8 img;
  img.width = 5;
  img.height = 3;
  img.channels = 3;
  img.pixels.resize(45);
  for (size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = uint8_t((i * 37 + 11) % 256);

  const auto path = test_dir() / "rgb8.png";
  write_png(path, img);
  const ImageU8 back = read_png_u8(path);
  CHECK(back.width == 5);
  CHECK(back.height == 3);
  CHECK(back.channels == 3);
  CHECK(back.pixels == img.pixels);
}

TEST_CASE("16-bit gray png round trip preserves every value") {
  ImageU16 img;
  img.width = 64;
  img.height = 4;
  img.channels = 1;
  img.pixels.resize(256);
  for (size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = uint16_t(i * 257 + 3);

  const auto path = test_dir() / "gray16.png";
  write_png(path, img);
  const ImageU16 back = read_png_u16(path);
  CHECK(back.channels == 1);
  CHECK(back.pixels == img.pixels);
}

TEST_CASE("png info reports dimensions without decoding") {
  ImageU16 img;
  img.width = 7;
  img.height = 2;
  img.channels = 1;
  img.pixels.assign(14, 1234);
  const auto path = test_dir() / "info.png";
  write_png(path, img);
  const PngInfo info = png_info(path);
  CHECK(info.width == 7);
  CHECK(info.height == 2);
  CHECK(info.channels == 1);
  CHECK(info.bit_depth == 16);
}

TEST_CASE("reading an 8-bit file as 16-bit is an error") {
  ImageU8 img;
  img.width = 2;
  img.height = 2;
  img.channels = 1;
  img.pixels.assign(4, 9);
  const auto path = test_dir() / "depth8.png";
  write_png(path, img);
  CHECK_THROWS_AS(read_png_u16(path), std::runtime_error);
}

TEST_CASE("missing file raises") {
  CHECK_THROWS_AS(read_png_u8(test_dir() / "nope.png"), std::runtime_error);
}
