#include "pdiff/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

namespace pdiff {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

unsigned char to_byte(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<unsigned char>(std::lround(c * 255.0));
}

void write_png(const std::filesystem::path& path, int width, int height, int channels,
               const std::vector<unsigned char>& bytes) {
  FilePtr fp(std::fopen(path.string().c_str(), "wb"));
  if (!fp) throw IoError("cannot open for writing: " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, width, height, 8, channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(bytes.data() + static_cast<std::size_t>(y) * width * channels));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

std::vector<unsigned char> read_png(const std::filesystem::path& path, int& width, int& height, bool rgb) {
  FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) throw IoError("cannot open for reading: " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("failed reading " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  width = static_cast<int>(png_get_image_width(png, info));
  height = static_cast<int>(png_get_image_height(png, info));
  const int color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (rgb && (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)) png_set_gray_to_rgb(png);
  if (!rgb && (color & PNG_COLOR_MASK_COLOR)) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  png_read_update_info(png, info);
  const int channels = rgb ? 3 : 1;
  std::vector<unsigned char> bytes(static_cast<std::size_t>(width) * height * channels);
  for (int y = 0; y < height; ++y) {
    png_read_row(png, bytes.data() + static_cast<std::size_t>(y) * width * channels, nullptr);
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return bytes;
}

}  // namespace

void write_png_rgb(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ValidationError("write_png_rgb expects [3,H,W]");
  const int h = image.dim(1), w = image.dim(2);
  std::vector<unsigned char> bytes(static_cast<std::size_t>(w) * h * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) bytes[(static_cast<std::size_t>(y) * w + x) * 3 + c] = to_byte(image.at(c, y, x));
    }
  }
  write_png(path, w, h, 3, bytes);
}

void write_png_gray(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 2) throw ValidationError("write_png_gray expects [H,W]");
  std::vector<unsigned char> bytes(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) bytes[i] = to_byte(image[i]);
  write_png(path, image.dim(1), image.dim(0), 1, bytes);
}

Tensor read_png_rgb(const std::filesystem::path& path) {
  int w = 0, h = 0;
  const auto bytes = read_png(path, w, h, true);
  Tensor t({3, h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) t.at(c, y, x) = bytes[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0;
    }
  }
  return t;
}

Tensor read_png_gray(const std::filesystem::path& path) {
  int w = 0, h = 0;
  const auto bytes = read_png(path, w, h, false);
  Tensor t({h, w});
  for (std::size_t i = 0; i < bytes.size(); ++i) t[i] = bytes[i] / 255.0;
  return t;
}

Tensor quantize8(Tensor t) {
  for (double& v : t.values()) v = to_byte(v) / 255.0;
  return t;
}

Tensor heatmap_rgb(const Tensor& map, int upscale) {
  if (map.rank() != 2) throw ValidationError("heatmap expects [H,W]");
  const int h = map.dim(0), w = map.dim(1);
  double mx = 0.0;
  for (double v : map.values()) mx = std::max(mx, v);
  const double inv = mx > 0.0 ? 1.0 / mx : 0.0;
  Tensor out({3, h * upscale, w * upscale});
  for (int y = 0; y < h * upscale; ++y) {
    for (int x = 0; x < w * upscale; ++x) {
      const double v = std::clamp(map[static_cast<std::size_t>(y / upscale) * w + x / upscale] * inv, 0.0, 1.0);
      out.at(0, y, x) = v;
      out.at(1, y, x) = 1.0 - std::abs(2.0 * v - 1.0);
      out.at(2, y, x) = 1.0 - v;
    }
  }
  return out;
}

void ensure_directory(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

}  // namespace pdiff
