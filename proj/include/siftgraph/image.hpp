#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "siftgraph/error.hpp"
#include "siftgraph/tensor.hpp"

namespace siftgraph {

// H x W x C intensities in [0,1], channel-interleaved, row-major.
struct ImageTensor {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<float> values;

  ImageTensor() = default;
  ImageTensor(std::size_t h, std::size_t w, std::size_t c, float fill = 0.0f)
      : height(h), width(w), channels(c), values(h * w * c, fill) {
    if (c != 1 && c != 3) throw validation_error("image channels must be 1 or 3, got " + std::to_string(c));
  }
  ImageTensor(std::size_t h, std::size_t w, std::size_t c, std::vector<float> v)
      : height(h), width(w), channels(c), values(std::move(v)) {
    if (c != 1 && c != 3) throw validation_error("image channels must be 1 or 3, got " + std::to_string(c));
    if (values.size() != h * w * c) throw validation_error("image buffer size does not match dimensions");
  }

  float& at(std::size_t y, std::size_t x, std::size_t c = 0) { return values[(y * width + x) * channels + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c = 0) const { return values[(y * width + x) * channels + c]; }

  bool empty() const { return values.empty(); }
  bool same_shape(const ImageTensor& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }

  void clamp01() {
    for (auto& v : values) v = std::clamp(v, 0.0f, 1.0f);
  }

  void check_range() const {
    for (float v : values)
      if (!(v >= 0.0f && v <= 1.0f)) throw validation_error("image values must lie in [0,1]");
  }

  friend bool operator==(const ImageTensor&, const ImageTensor&) = default;
};

// Channel-planar [C, H, W] tensor view of an image for the convolutional branches.
inline Tensor to_chw_tensor(const ImageTensor& img, bool requires_grad = false) {
  std::vector<float> v(img.values.size());
  const std::size_t plane = img.height * img.width;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) v[c * plane + y * img.width + x] = img.at(y, x, c);
  return Tensor({img.channels, img.height, img.width}, std::move(v), requires_grad);
}

// Inverse of to_chw_tensor on a flat [C, H, W] buffer.
inline void chw_to_image(std::span<const float> chw, ImageTensor& img) {
  const std::size_t plane = img.height * img.width;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) img.at(y, x, c) = chw[c * plane + y * img.width + x];
}

// Bilinear resampling with pixel-center alignment: output pixel i samples the
// source at (i + 0.5) * in / out - 0.5, clamped to the image. No prefiltering.
inline ImageTensor resize_bilinear(const ImageTensor& src, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw validation_error("resize target must be non-empty");
  if (src.height == out_h && src.width == out_w) return src;
  ImageTensor dst(out_h, out_w, src.channels);
  const double sy = static_cast<double>(src.height) / static_cast<double>(out_h);
  const double sx = static_cast<double>(src.width) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < src.channels; ++c) {
        const double top = (1 - wx) * src.at(y0, x0, c) + wx * src.at(y0, x1, c);
        const double bot = (1 - wx) * src.at(y1, x0, c) + wx * src.at(y1, x1, c);
        dst.at(y, x, c) = static_cast<float>((1 - wy) * top + wy * bot);
      }
    }
  }
  return dst;
}

}  // namespace siftgraph
