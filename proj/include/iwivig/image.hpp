#pragma once

#include "iwivig/autograd.hpp"

#include <array>
#include <string>

namespace iwivig {

// Pixels stored as a (height*width) x channels matrix, rows in (y, x) order.
struct Image {
  int height = 0;
  int width = 0;
  Matrix data;

  Image() = default;
  Image(int h, int w, int channels, double fill = 0.0) : height(h), width(w), data(Matrix::Constant(h * w, channels, fill)) {}

  int channels() const { return static_cast<int>(data.cols()); }
  double& at(int y, int x, int c) { return data(static_cast<Eigen::Index>(y) * width + x, c); }
  double at(int y, int x, int c) const { return data(static_cast<Eigen::Index>(y) * width + x, c); }
  friend bool operator==(const Image& a, const Image& b) {
    return a.height == b.height && a.width == b.width && a.data == b.data;
  }
};

// 8-bit RGB PNG. Values are clamped to [0, 1] and rounded.
void write_png(const std::string& path, const Image& image);
// Decodes any PNG to 3-channel RGB in [0, 1].
Image read_png(const std::string& path);

// Box filter for integer downscale factors, bilinear otherwise.
Image resize(const Image& image, int height, int width);

// (x - min) / (max - min) over all pixels and channels; all zeros when max == min.
Image minmax_normalize(const Image& image);

using Rgb = std::array<double, 3>;

// Alpha-blends a one-pixel line between two points (Bresenham).
void draw_line(Image& image, int y0, int x0, int y1, int x1, const Rgb& color, double alpha);
void fill_rect(Image& image, int y0, int x0, int y1, int x1, const Rgb& color, double alpha = 1.0);

}  // namespace iwivig
