#pragma once

#include <cstdint>
#include <vector>

#include "ctgrader/common.hpp"

namespace ctg {

// Single-channel 8-bit image, row-major.
struct ImageU8 {
  int h = 0, w = 0;
  std::vector<uint8_t> px;

  ImageU8() = default;
  ImageU8(int h_, int w_, uint8_t fill = 0) : h(h_), w(w_), px(size_t(h_) * w_, fill) {}

  uint8_t& at(int y, int x) { return px[size_t(y) * w + x]; }
  uint8_t at(int y, int x) const { return px[size_t(y) * w + x]; }
};

struct ImageF32 {
  int h = 0, w = 0;
  std::vector<float> px;

  ImageF32() = default;
  ImageF32(int h_, int w_) : h(h_), w(w_), px(size_t(h_) * w_, 0.0f) {}

  float& at(int y, int x) { return px[size_t(y) * w + x]; }
  float at(int y, int x) const { return px[size_t(y) * w + x]; }
};

// Decodes to grayscale; throws LoadError on missing/corrupt files.
ImageU8 decode_image_gray(const fs::path& path);
void write_jpeg_gray(const fs::path& path, const ImageU8& img, int quality);
void write_png_gray(const fs::path& path, const ImageU8& img);

ImageF32 to_float(const ImageU8& img);  // intensities stay in [0, 255]

// Separable triangle-filter resample: plain bilinear when upscaling, with the
// filter support widened by the scale factor when downscaling (anti-aliased).
ImageF32 resize_bilinear_aa(const ImageF32& src, int out_h, int out_w);

}  // namespace ctg
