#pragma once

#include <filesystem>

#include "pdiff/tensor.hpp"

namespace pdiff {

// 8-bit PNG I/O. Images are [3,H,W] (RGB) or [H,W] (gray) tensors in [0,1];
// values are clamped and rounded to the nearest 1/255 on write.
void write_png_rgb(const std::filesystem::path& path, const Tensor& image);
void write_png_gray(const std::filesystem::path& path, const Tensor& image);
Tensor read_png_rgb(const std::filesystem::path& path);
Tensor read_png_gray(const std::filesystem::path& path);

// create_directories that reports failure as IoError.
void ensure_directory(const std::filesystem::path& dir);

// Rounds every value to the 8-bit grid so that a PNG round trip is exact.
Tensor quantize8(Tensor t);

// Blue-to-red false-colour rendering of a [H,W] map scaled by its maximum.
Tensor heatmap_rgb(const Tensor& map, int upscale);

}  // namespace pdiff
