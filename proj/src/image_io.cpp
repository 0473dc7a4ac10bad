#include "protolab/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

#include <png.h>

namespace protolab {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

ImageSample read_png(const std::filesystem::path& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw DataError("cannot open image '" + path.string() + "'");
  png_byte header[8];
  if (std::fread(header, 1, 8, file.get()) != 8 || png_sig_cmp(header, 0, 8))
    throw DataError("not a PNG file: '" + path.string() + "'");

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("libpng initialisation failed for '" + path.string() + "'");
  }
  std::vector<png_bytep> rows;
  std::vector<png_byte> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("corrupt PNG '" + path.string() + "'");
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  png_set_strip_16(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  const int width = static_cast<int>(png_get_image_width(png, info));
  const int height = static_cast<int>(png_get_image_height(png, info));
  const std::size_t stride = png_get_rowbytes(png, info);
  buffer.resize(stride * static_cast<std::size_t>(height));
  rows.resize(static_cast<std::size_t>(height));
  for (int r = 0; r < height; ++r) rows[static_cast<std::size_t>(r)] = buffer.data() + stride * static_cast<std::size_t>(r);
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);

  ImageSample img = ImageSample::zeros(3, height, width);
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c)
      for (int ch = 0; ch < 3; ++ch)
        img.at(ch, r, c) = static_cast<float>(rows[static_cast<std::size_t>(r)][c * 3 + ch]) / 255.0f;
  img.id = path.filename().string();
  return img;
}

void write_png(const std::filesystem::path& path, const ImageSample& img) {
  if (img.channels != 3 && img.channels != 1) throw DataError("write_png: only 1 or 3 channels supported");
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw DataError("cannot write image '" + path.string() + "'");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw DataError("libpng initialisation failed");
  }
  std::vector<png_byte> buffer(static_cast<std::size_t>(img.width) * img.height * 3);
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c)
      for (int ch = 0; ch < 3; ++ch) {
        const float v = img.at(img.channels == 1 ? 0 : ch, r, c);
        buffer[(static_cast<std::size_t>(r) * img.width + c) * 3 + ch] =
            static_cast<png_byte>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
      }
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
  for (int r = 0; r < img.height; ++r) rows[static_cast<std::size_t>(r)] = buffer.data() + static_cast<std::size_t>(r) * img.width * 3;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("failed writing PNG '" + path.string() + "'");
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

ImageSample resize(const ImageSample& img, int size) {
  if (img.height == size && img.width == size) return img;
  ImageSample out = ImageSample::zeros(img.channels, size, size, img.label);
  out.id = img.id;
  const float sy = static_cast<float>(img.height) / size;
  const float sx = static_cast<float>(img.width) / size;
  for (int r = 0; r < size; ++r) {
    const float fy = std::clamp((r + 0.5f) * sy - 0.5f, 0.0f, static_cast<float>(img.height - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const float wy = fy - y0;
    for (int c = 0; c < size; ++c) {
      const float fx = std::clamp((c + 0.5f) * sx - 0.5f, 0.0f, static_cast<float>(img.width - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, img.width - 1);
      const float wx = fx - x0;
      for (int ch = 0; ch < img.channels; ++ch) {
        const float top = img.at(ch, y0, x0) * (1 - wx) + img.at(ch, y0, x1) * wx;
        const float bot = img.at(ch, y1, x0) * (1 - wx) + img.at(ch, y1, x1) * wx;
        out.at(ch, r, c) = top * (1 - wy) + bot * wy;
      }
    }
  }
  return out;
}

}  // namespace protolab
