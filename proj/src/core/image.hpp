#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace countlab {

// 8-bit RGB raster, row-major, no padding.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> pixels;  // height * width * 3

  Image() = default;
  Image(int h, int w, uint8_t r, uint8_t g, uint8_t b) : height(h), width(w), pixels(size_t(h) * w * 3) {
    for (size_t i = 0; i < pixels.size(); i += 3) {
      pixels[i] = r;
      pixels[i + 1] = g;
      pixels[i + 2] = b;
    }
  }

  uint8_t* at(int row, int col) { return &pixels[(size_t(row) * width + col) * 3]; }
  const uint8_t* at(int row, int col) const { return &pixels[(size_t(row) * width + col) * 3]; }

  void set(int row, int col, uint8_t r, uint8_t g, uint8_t b) {
    uint8_t* p = at(row, col);
    p[0] = r;
    p[1] = g;
    p[2] = b;
  }
};

void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);

}  // namespace countlab
