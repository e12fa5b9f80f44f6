#ifndef FMTS_IMAGE_HPP
#define FMTS_IMAGE_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "fmts/tensor.hpp"

namespace fmts {

/// 8-bit RGB image, rows top to bottom, 3 bytes per pixel.
struct Image {
  int h = 0, w = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int height, int width)
      : h(height), w(width), rgb(static_cast<std::size_t>(height) * width * 3, 0) {}

  std::uint8_t& at(int y, int x, int c) {
    return rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c];
  }
  std::uint8_t at(int y, int x, int c) const {
    return rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c];
  }
};

void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);

/// [3,H,W] tensor with channel values in [0,1].
Tensor image_to_tensor(const Image& img);

}  // namespace fmts

#endif
